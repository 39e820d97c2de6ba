//! Contrastive head over rationale embeddings.
//!
//! A rationale is pooled into one vector by embedding its tokens, applying
//! a shared affine head and averaging over positions. Generated, gold and
//! soft-negative rationales all go through the same head. The margin loss
//! keeps the similarity gap `Δ = cos(h, neg) − cos(h, pos)` inside
//! `[−β, −α]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{argmax, Bound, ParamId};
use crate::text::Vocab;

/// Placeholder rationale used when the real one is empty.
pub const EMPTY_RATIONALE: &str = "Not";

/// How the generated-sample embedding is obtained from decoder logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BmlMode {
    /// Expected embedding under the per-position softmax; differentiable.
    #[default]
    Soft,
    /// Embedding of the argmax tokens.
    Greedy,
}

impl FromStr for BmlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::Config(format!("unknown bml mode {other:?}"))),
        }
    }
}

impl fmt::Display for BmlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Greedy => "greedy",
        })
    }
}

/// Margins of the target interval `[−beta, −alpha]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    pub alpha: f64,
    pub beta: f64,
}

impl Margins {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || alpha > beta {
            return Err(Error::Config(format!(
                "margins need 0 ≤ alpha ≤ beta, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// `ReLU(Δ+α) + ReLU(−Δ−β)`.
    pub fn term(&self, delta: f64) -> f64 {
        (delta + self.alpha).max(0.0) + (-delta - self.beta).max(0.0)
    }
}

/// Token ids for a rationale, substituting the placeholder for empty text.
pub fn rationale_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        vocab.encode(EMPTY_RATIONALE)
    } else {
        ids
    }
}

/// `mean(E · W_Rᵀ + b_R)` over the rows of `rows` (`n × d`).
pub fn pool_rows(g: &mut Graph, p: &Bound, rows: Var) -> Result<Var> {
    let z = g.matmul_t(rows, p.var(ParamId::RationaleProj))?;
    let z = g.add_row(z, p.var(ParamId::RationaleBias))?;
    g.mean_rows(z)
}

/// Embeds a rationale token sequence into one `d`-vector.
pub fn embed_rationale(g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract(
            "embed_rationale needs tokens; map empty text through rationale_ids".into(),
        ));
    }
    let rows = g.embedding_lookup(p.var(ParamId::TokenEmbedding), tokens)?;
    pool_rows(g, p, rows)
}

/// Embedding of the generated sample from its `n × V` logits.
pub fn generated_embedding(g: &mut Graph, p: &Bound, logits: Var, mode: BmlMode) -> Result<Var> {
    let table = p.var(ParamId::TokenEmbedding);
    let rows = match mode {
        BmlMode::Soft => {
            let probs = g.softmax_rows(logits)?;
            g.matmul(probs, table)?
        }
        BmlMode::Greedy => {
            let t = g.value(logits);
            if t.rank() != 2 || t.rows() == 0 {
                return Err(Error::shape(
                    "generated_embedding",
                    format!("logits must be n×V with n ≥ 1, got {:?}", t.shape()),
                ));
            }
            let ids: Vec<usize> = (0..t.rows()).map(|r| argmax(t.row(r))).collect();
            g.embedding_lookup(table, &ids)?
        }
    };
    pool_rows(g, p, rows)
}

/// `Δ = cos(h, neg) − cos(h, pos)` on plain vectors.
pub fn similarity_delta(h: &[f64], pos: &[f64], neg: &[f64]) -> Result<f64> {
    Ok(cosine(h, neg)? - cosine(h, pos)?)
}

/// Per-example embeddings for the margin loss.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub generated: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub soft_negatives: Vec<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Margin loss of a batch on plain vectors: per-example mean over the
/// negatives, then mean over the batch.
pub fn bml_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let margins = Margins::new(batch.alpha, batch.beta)?;
    let n = batch.generated.len();
    if n == 0 || batch.positive.len() != n || batch.soft_negatives.len() != n {
        return Err(Error::Contract(format!(
            "batch needs matching nonempty lists, got {}/{}/{}",
            n,
            batch.positive.len(),
            batch.soft_negatives.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        let negs = &batch.soft_negatives[i];
        if negs.is_empty() {
            return Err(Error::Contract(format!(
                "example {i} has no soft negatives"
            )));
        }
        let mut s = 0.0;
        for neg in negs {
            s += margins.term(similarity_delta(
                &batch.generated[i],
                &batch.positive[i],
                neg,
            )?);
        }
        total += s / negs.len() as f64;
    }
    Ok(total / n as f64)
}

/// Graph form of the per-example margin loss.
#[derive(Clone, Debug)]
pub struct BmlTerms {
    /// scalar `(1/k) Σ_j [ReLU(Δ_j+α) + ReLU(−Δ_j−β)]`
    pub loss: Var,
    pub deltas: Vec<f64>,
    /// negatives with `Δ > −α`
    pub lower_active: usize,
    /// negatives with `Δ < −β`
    pub upper_active: usize,
}

pub fn bml_terms(
    g: &mut Graph,
    h: Var,
    pos: Var,
    negs: &[Var],
    margins: Margins,
) -> Result<BmlTerms> {
    if negs.is_empty() {
        return Err(Error::Contract(
            "margin loss needs at least one negative".into(),
        ));
    }
    let cos_pos = g.cosine_similarity(h, pos)?;
    let mut parts = Vec::with_capacity(negs.len());
    let mut deltas = Vec::with_capacity(negs.len());
    let (mut lower_active, mut upper_active) = (0, 0);
    for &neg in negs {
        let cos_neg = g.cosine_similarity(h, neg)?;
        let delta = g.sub(cos_neg, cos_pos)?;
        let d = g.scalar_value(delta)?;
        deltas.push(d);
        if d + margins.alpha > 0.0 {
            lower_active += 1;
        }
        if -d - margins.beta > 0.0 {
            upper_active += 1;
        }
        let lo = g.add_scalar(delta, margins.alpha);
        let lo = g.relu(lo);
        let hi = g.scale(delta, -1.0);
        let hi = g.add_scalar(hi, -margins.beta);
        let hi = g.relu(hi);
        parts.push(g.add(lo, hi)?);
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(BmlTerms {
        loss: g.scale(acc, 1.0 / negs.len() as f64),
        deltas,
        lower_active,
        upper_active,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    Ok(())
}

/// Rationale-stage objective `nll + λ·bml`.
pub fn rg_objective(nll: f64, bml: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(nll + lambda * bml)
}

/// Graph form of [`rg_objective`].
pub fn rg_objective_var(g: &mut Graph, nll: Var, bml: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = g.scale(bml, lambda);
    g.add(nll, weighted)
}

/// Answer-stage objective: the NLL itself.
pub fn ai_objective(nll: f64) -> f64 {
    nll
}
