//! Independent reference implementations shared by the integration tests
//! and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softneg_core::autodiff::{Graph, Var};
use softneg_core::contrastive::{
    bml_terms, embed_rationale, generated_embedding, BmlMode, Margins,
};
use softneg_core::model::{decode_nll, encode, Bound, ModelConfig, ModelParams, VisionFeatures};
use softneg_core::{finite_diff_check, GradCheck, Result, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `x · wᵀ` with `w` stored `[out, in]`.
pub fn mul_t(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| {
                    let mut s = 0.0;
                    for k in 0..row.len() {
                        s += row[k] * wr[k];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Single-head scaled dot-product attention written as plain loops.
pub fn naive_attention(queries: &Mat, keys: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let q = mul_t(queries, wq);
    let k = mul_t(keys, wk);
    let v = mul_t(keys, wv);
    let d = queries[0].len() as f64;
    let mut out = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for (j, vj) in v.iter().enumerate() {
            for c in 0..row.len() {
                row[c] += e[j] / z * vj[c];
            }
        }
        out.push(row);
    }
    out
}

/// `(1 − σ)·text + σ·attended`, `σ = sigmoid(text·w_lᵀ + attended·w_vᵀ)`.
pub fn naive_gated_fusion(text: &Mat, attended: &Mat, wl: &Mat, wv: &Mat) -> Mat {
    let a = mul_t(text, wl);
    let b = mul_t(attended, wv);
    let mut out = text.clone();
    for i in 0..text.len() {
        for j in 0..text[0].len() {
            let s = 1.0 / (1.0 + (-(a[i][j] + b[i][j])).exp());
            out[i][j] = (1.0 - s) * text[i][j] + s * attended[i][j];
        }
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// LCS length by enumerating every subsequence of the shorter side.
pub fn lcs_bruteforce<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "brute force is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<&T> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &short[i])
            .collect();
        let mut it = long.iter();
        if sub.iter().all(|x| it.any(|y| y == *x)) {
            best = n;
        }
    }
    best
}

pub fn rouge_oracle(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_bruteforce(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Piecewise form of the per-negative margin term.
pub fn margin_oracle(delta: f64, alpha: f64, beta: f64) -> f64 {
    if delta > -alpha {
        delta + alpha
    } else if delta < -beta {
        -delta - beta
    } else {
        0.0
    }
}

pub const VOCAB: usize = 12;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        d_model: 4,
        d_vision: 3,
        d_ff: 6,
        max_len: 16,
        positional: true,
    }
}

pub struct GradCase {
    pub params: ModelParams,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<Vec<usize>>>,
    pub vision: Vec<VisionFeatures>,
}

fn ids(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| rng.random_range(3..VOCAB)).collect()
}

pub fn grad_case(seed: u64, examples: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(tiny_config(), &mut rng).unwrap();
    let mut c = GradCase {
        params,
        inputs: vec![],
        targets: vec![],
        negatives: vec![],
        vision: vec![],
    };
    for _ in 0..examples {
        c.inputs.push(ids(&mut rng, 1, 5));
        c.targets.push(ids(&mut rng, 2, 5));
        let k = rng.random_range(1..=3);
        c.negatives
            .push((0..k).map(|_| ids(&mut rng, 1, 5)).collect());
        let m = rng.random_range(1..=3);
        c.vision
            .push(VisionFeatures::try_from(rand_mat(&mut rng, m, 3)).unwrap());
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Nll,
    SoftBml,
    Rg,
}

/// Builds the chosen scalar over the model params bound to `vars`.
pub fn objective(g: &mut Graph, vars: &[Var], case: &GradCase, which: Objective) -> Result<Var> {
    let p = Bound::from_vars(g, &case.params, vars)?;
    let margins = Margins::new(0.1, 0.3)?;
    let n = case.inputs.len();
    let mut total = None;
    for i in 0..n {
        let h_enc = encode(g, &p, &case.inputs[i], Some(&case.vision[i]))?;
        let target = &case.targets[i];
        let nll = decode_nll(g, &p, h_enc, target)?;
        let term = match which {
            Objective::Nll => nll.loss,
            Objective::SoftBml | Objective::Rg => {
                let body = g.slice_rows(nll.logits, 0, target.len() - 1)?;
                let h = generated_embedding(g, &p, body, BmlMode::Soft)?;
                let pos = embed_rationale(g, &p, &target[..target.len() - 1])?;
                let mut negs = Vec::new();
                for neg in &case.negatives[i] {
                    negs.push(embed_rationale(g, &p, neg)?);
                }
                let b = bml_terms(g, h, pos, &negs, margins)?.loss;
                if which == Objective::Rg {
                    let w = g.scale(b, 0.1);
                    g.add(nll.loss, w)?
                } else {
                    b
                }
            }
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(g.scale(total.expect("one example"), 1.0 / n as f64))
}

pub fn model_grad_check(seed: u64, which: Objective) -> GradCheck {
    let examples = if which == Objective::Rg { 2 } else { 1 };
    let case = grad_case(seed, examples);
    finite_diff_check(
        |g, vars| objective(g, vars, &case, which),
        case.params.tensors(),
        1e-5,
    )
    .unwrap()
}
