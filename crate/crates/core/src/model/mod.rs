//! The stage model shared by rationale generation and answer inference.
//!
//! Text goes through a one-block pre-norm transformer encoder. Vision
//! patches are projected to the model width, attended to from the text
//! with a single head, and blended back into the text states through a
//! sigmoid gate. A one-block decoder with causal self-attention and
//! cross-attention over the fused states predicts the next token.

mod checkpoint;
mod params;

use log::warn;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{ModelConfig, ModelParams, ParamId};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

const MASKED: f64 = -1e30;

/// Per-record image patch features, `m × d_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct VisionFeatures {
    patches: Tensor,
}

impl VisionFeatures {
    pub fn new(patches: Tensor) -> Result<Self> {
        if patches.rank() != 2 || patches.rows() == 0 {
            return Err(Error::shape(
                "vision_features",
                format!("need m×d_v with m ≥ 1, got {:?}", patches.shape()),
            ));
        }
        if !patches.is_finite() {
            return Err(Error::Numerical("vision features must be finite".into()));
        }
        Ok(Self { patches })
    }

    pub fn zeros(m: usize, d_vision: usize) -> Self {
        Self {
            patches: Tensor::zeros(&[m, d_vision]),
        }
    }

    pub fn patches(&self) -> &Tensor {
        &self.patches
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }
}

impl TryFrom<Vec<Vec<f64>>> for VisionFeatures {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Tensor::from_rows(&rows)?)
    }
}

impl From<VisionFeatures> for Vec<Vec<f64>> {
    fn from(v: VisionFeatures) -> Self {
        (0..v.patches.rows())
            .map(|i| v.patches.row(i).to_vec())
            .collect()
    }
}

/// Model parameters placed into a [`Graph`].
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    /// Binds every tensor as a trainable leaf.
    pub fn trainable(g: &mut Graph, params: &'p ModelParams) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.param(t.clone()))
            .collect();
        Self { params, vars }
    }

    /// Binds every tensor as a constant.
    pub fn frozen(g: &mut Graph, params: &'p ModelParams) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        Self { params, vars }
    }

    /// Uses existing graph vars, one per tensor in [`ParamId::ALL`] order.
    pub fn from_vars(g: &Graph, params: &'p ModelParams, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.tensors().len() {
            return Err(Error::Contract(format!(
                "expected {} vars, got {}",
                params.tensors().len(),
                vars.len()
            )));
        }
        for (&v, t) in vars.iter().zip(params.tensors()) {
            if g.value(v).shape() != t.shape() {
                return Err(Error::shape(
                    "bound",
                    format!(
                        "var shape {:?} vs param {:?}",
                        g.value(v).shape(),
                        t.shape()
                    ),
                ));
            }
        }
        Ok(Self {
            params,
            vars: vars.to_vec(),
        })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// Collects gradients after backward, in [`ParamId::ALL`] order.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }
}

/// Sinusoidal position table, `n × d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("n*d values")
}

fn embed(g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
    let x = g.embedding_lookup(p.var(ParamId::TokenEmbedding), ids)?;
    if p.config().positional {
        let pe = g.constant(positional_encoding(ids.len(), p.config().d_model));
        g.add(x, pe)
    } else {
        Ok(x)
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::new(vec![n, n], data).expect("n*n values")
}

/// Single-head scaled dot-product attention; returns `(output, weights)`.
fn attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: [Var; 3],
    causal: bool,
) -> Result<(Var, Var)> {
    let d = g.value(queries).cols();
    let q = g.matmul_t(queries, w[0])?;
    let k = g.matmul_t(keys_values, w[1])?;
    let v = g.matmul_t(keys_values, w[2])?;
    let scores = g.matmul_t(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if causal {
        let n = g.value(scores).rows();
        let mask = g.constant(causal_mask(n));
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax_rows(scores)?;
    Ok((g.matmul(weights, v)?, weights))
}

fn feed_forward(g: &mut Graph, p: &Bound, x: Var, ids: [ParamId; 4]) -> Result<Var> {
    let h = g.matmul_t(x, p.var(ids[0]))?;
    let h = g.add_row(h, p.var(ids[1]))?;
    let h = g.relu(h);
    let o = g.matmul_t(h, p.var(ids[2]))?;
    g.add_row(o, p.var(ids[3]))
}

/// Text encoder: token ids to `H_l` (`n × d`).
pub fn encode_text(g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
    use ParamId::*;
    if tokens.is_empty() {
        return Err(Error::Contract(
            "encode_text needs at least one token".into(),
        ));
    }
    let max_len = p.config().max_len;
    let tokens = if tokens.len() > max_len {
        warn!("input of {} tokens truncated to {max_len}", tokens.len());
        &tokens[..max_len]
    } else {
        tokens
    };
    let x = embed(g, p, tokens)?;
    let h = g.layer_norm_rows(x)?;
    let (a, _) = attention(
        g,
        h,
        h,
        [p.var(EncQuery), p.var(EncKey), p.var(EncValue)],
        false,
    )?;
    let a = g.matmul_t(a, p.var(EncOut))?;
    let x = g.add(x, a)?;
    let h = g.layer_norm_rows(x)?;
    let f = feed_forward(g, p, h, [EncFf1, EncFf1Bias, EncFf2, EncFf2Bias])?;
    let x = g.add(x, f)?;
    g.layer_norm_rows(x)
}

/// `H_v = patches · W_hᵀ` (`m × d`).
pub fn project_vision(g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
    g.matmul_t(patches, p.var(ParamId::VisionProj))
}

/// Text-to-image single-head cross-attention; returns `(Ĥ_v, weights)`.
pub fn cross_attention_with_weights(
    g: &mut Graph,
    p: &Bound,
    h_text: Var,
    h_vision: Var,
) -> Result<(Var, Var)> {
    use ParamId::*;
    attention(
        g,
        h_text,
        h_vision,
        [p.var(FuseQuery), p.var(FuseKey), p.var(FuseValue)],
        false,
    )
}

/// `Ĥ_v = softmax((H_l W_Qᵀ)(H_v W_Kᵀ)ᵀ / √d) (H_v W_Vᵀ)`.
pub fn cross_attention(g: &mut Graph, p: &Bound, h_text: Var, h_vision: Var) -> Result<Var> {
    Ok(cross_attention_with_weights(g, p, h_text, h_vision)?.0)
}

/// `σ = sigmoid(H_l W_lᵀ + Ĥ_v W_vᵀ)`, `H_Enc = (1 − σ)·H_l + σ·Ĥ_v`.
pub fn gated_fusion(g: &mut Graph, p: &Bound, h_text: Var, h_attended: Var) -> Result<Var> {
    let a = g.matmul_t(h_text, p.var(ParamId::GateText))?;
    let b = g.matmul_t(h_attended, p.var(ParamId::GateVision))?;
    let z = g.add(a, b)?;
    let gate = g.sigmoid(z);
    let diff = g.sub(h_attended, h_text)?;
    let moved = g.mul(gate, diff)?;
    g.add(h_text, moved)
}

/// Full encoder. With `vision = None` the fusion path is skipped and
/// `H_Enc = H_l`.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    tokens: &[usize],
    vision: Option<&VisionFeatures>,
) -> Result<Var> {
    let h_text = encode_text(g, p, tokens)?;
    let Some(vision) = vision else {
        return Ok(h_text);
    };
    let patches = g.constant(vision.patches().clone());
    let h_vision = project_vision(g, p, patches)?;
    let attended = cross_attention(g, p, h_text, h_vision)?;
    gated_fusion(g, p, h_text, attended)
}

/// Final decoder states (after the closing layer norm), `N × d`.
pub fn decoder_hidden(g: &mut Graph, p: &Bound, h_enc: Var, inputs: &[usize]) -> Result<Var> {
    use ParamId::*;
    let y = embed(g, p, inputs)?;
    let h = g.layer_norm_rows(y)?;
    let (sa, _) = attention(
        g,
        h,
        h,
        [p.var(DecSelfQuery), p.var(DecSelfKey), p.var(DecSelfValue)],
        true,
    )?;
    let sa = g.matmul_t(sa, p.var(DecSelfOut))?;
    let y = g.add(y, sa)?;
    let h = g.layer_norm_rows(y)?;
    let (ca, _) = attention(
        g,
        h,
        h_enc,
        [
            p.var(DecCrossQuery),
            p.var(DecCrossKey),
            p.var(DecCrossValue),
        ],
        false,
    )?;
    let ca = g.matmul_t(ca, p.var(DecCrossOut))?;
    let y = g.add(y, ca)?;
    let h = g.layer_norm_rows(y)?;
    let f = feed_forward(g, p, h, [DecFf1, DecFf1Bias, DecFf2, DecFf2Bias])?;
    let y = g.add(y, f)?;
    g.layer_norm_rows(y)
}

/// Next-token logits for each decoder input position, `N × V`.
pub fn decoder_logits(g: &mut Graph, p: &Bound, h_enc: Var, inputs: &[usize]) -> Result<Var> {
    let h = decoder_hidden(g, p, h_enc, inputs)?;
    g.matmul(h, p.var(ParamId::OutputProj))
}

/// Teacher-forced negative log-likelihood of `target`.
#[derive(Clone, Copy, Debug)]
pub struct Nll {
    /// scalar `-Σ log p(target_i | target_<i, input)`
    pub loss: Var,
    /// `N × V` logits, row `i` predicting `target[i]`
    pub logits: Var,
}

pub fn decode_nll(g: &mut Graph, p: &Bound, h_enc: Var, target: &[usize]) -> Result<Nll> {
    if target.is_empty() {
        return Err(Error::Contract(
            "decode_nll needs a non-empty target".into(),
        ));
    }
    let v = p.config().vocab_size;
    if let Some(&bad) = target.iter().find(|&&t| t >= v) {
        return Err(Error::Vocab {
            id: bad,
            vocab_size: v,
        });
    }
    let inputs: Vec<usize> = std::iter::once(BOS)
        .chain(target[..target.len() - 1].iter().copied())
        .collect();
    let logits = decoder_logits(g, p, h_enc, &inputs)?;
    let log_probs = g.log_softmax_rows(logits)?;
    let picked = g.gather(log_probs, target)?;
    let total = g.sum(picked);
    Ok(Nll {
        loss: g.scale(total, -1.0),
        logits,
    })
}

/// Greedy decoding until EOS or `max_len` tokens. Ties pick the lowest id.
pub fn generate(
    params: &ModelParams,
    tokens: &[usize],
    vision: Option<&VisionFeatures>,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Contract("generate needs max_len ≥ 1".into()));
    }
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let h_enc = encode(&mut g, &p, tokens, vision)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let inputs: Vec<usize> = std::iter::once(BOS).chain(out.iter().copied()).collect();
        let logits = decoder_logits(&mut g, &p, h_enc, &inputs)?;
        let t = g.value(logits);
        let next = argmax(t.row(t.rows() - 1));
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_vision: 4,
            d_ff: 12,
            max_len: 32,
            positional: true,
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_token_gives_one_row() {
        let params = small_params(0);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &params);
        let h = encode_text(&mut g, &p, &[5]).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 8]);
    }

    #[test]
    fn unknown_token_is_a_vocab_error() {
        let params = small_params(0);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &params);
        assert!(matches!(
            encode_text(&mut g, &p, &[3, 16]),
            Err(Error::Vocab { id: 16, .. })
        ));
    }

    #[test]
    fn overlong_input_is_truncated() {
        let params = small_params(0);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &params);
        let h = encode_text(&mut g, &p, &[4; 40]).unwrap();
        assert_eq!(g.value(h).rows(), 32);
    }

    #[test]
    fn permuting_tokens_changes_encoding() {
        let params = small_params(2);
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let p = Bound::frozen(&mut g, &params);
            let h = encode_text(&mut g, &p, ids).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(&[3, 4, 5]), run(&[3, 4, 5]));
        let a = run(&[3, 4, 5]);
        let b = run(&[5, 4, 3]);
        // row for token 4 sits at the same position in both, but attends
        // over a permuted context with different positions
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn project_vision_rejects_wrong_width() {
        let params = small_params(0);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &params);
        let v = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            project_vision(&mut g, &p, v),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn generate_respects_max_len_and_is_deterministic() {
        let params = small_params(4);
        let a = generate(&params, &[3, 4, 5], None, 1).unwrap();
        assert!(a.len() <= 1);
        let b = generate(&params, &[3, 4, 5], None, 6).unwrap();
        assert_eq!(b, generate(&params, &[3, 4, 5], None, 6).unwrap());
        assert!(generate(&params, &[3], None, 0).is_err());
    }

    #[test]
    fn vision_features_validate() {
        assert!(VisionFeatures::try_from(Vec::<Vec<f64>>::new()).is_err());
        assert!(VisionFeatures::try_from(vec![vec![f64::NAN]]).is_err());
        let v = VisionFeatures::try_from(vec![vec![1.0, 2.0]]).unwrap();
        assert_eq!((v.num_patches(), v.dim()), (1, 2));
    }
}
