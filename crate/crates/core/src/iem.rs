//! Importance extraction: each session item gets a scalar weight derived from
//! its average sigmoid affinity to the other items.
//!
//! The chain is: project the item embeddings into query/key space through a
//! sigmoid, form the pairwise affinity matrix `sigmoid(Q K^T) / sqrt(d)`,
//! average each row over the valid off-diagonal entries, and softmax the
//! resulting scores. An item that is similar to most of the session ends up
//! with a large weight; an accidental click ends up with a small one.

use crate::error::Result;
use crate::ndmath::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Trainable query/key projections, both `d x l`.
#[derive(Debug, Clone, PartialEq)]
pub struct IemParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

impl IemParams {
    pub fn init(d: usize, l: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        IemParams {
            w_q: Tensor::uniform(d, l, -bound, bound, rng),
            w_k: Tensor::uniform(d, l, -bound, bound, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn l(&self) -> usize {
        self.w_q.cols()
    }
}

/// Which dimension scales the affinity matrix. The embedding width is the
/// default; the attention width is available for experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScaleBy {
    SqrtD,
    SqrtL,
}

/// Affinity matrix, raw per-item scores and normalized weights for one session.
#[derive(Debug, Clone)]
pub struct ImportanceResult {
    /// t x t matrix of pairwise affinities, entries in (0, 1/sqrt(d)].
    pub affinity: Tensor,
    /// 1 x t average off-diagonal affinity per item; 0 on padded positions.
    pub raw_scores: Tensor,
    /// 1 x t softmax weights; exactly 0 on padded positions, summing to 1.
    pub weights: Tensor,
}

/// Tape handles for the intermediate stages, for composing into the model
/// graph and reading values back out.
#[derive(Debug, Clone, Copy)]
pub struct ImportanceGraph {
    pub query: TensorId,
    pub key: TensorId,
    pub affinity: TensorId,
    pub raw_scores: TensorId,
    pub weights: TensorId,
}

/// Query and key projections: `sigmoid(E W_q)` and `sigmoid(E W_k)`.
pub fn project_qk(
    tape: &mut Tape,
    embeddings: TensorId,
    w_q: TensorId,
    w_k: TensorId,
) -> Result<(TensorId, TensorId)> {
    let q_lin = tape.matmul(embeddings, w_q)?;
    let q = tape.sigmoid(q_lin)?;
    let k_lin = tape.matmul(embeddings, w_k)?;
    let k = tape.sigmoid(k_lin)?;
    Ok((q, k))
}

/// Pairwise affinity `sigmoid(Q K^T) / sqrt(scale_dim)`. The sigmoid is
/// applied before the scaling, so every entry lands in (0, 1/sqrt(scale_dim)].
pub fn affinity(tape: &mut Tape, q: TensorId, k: TensorId, scale_dim: usize) -> Result<TensorId> {
    let k_t = tape.transpose(k)?;
    let qk = tape.matmul(q, k_t)?;
    let sig = tape.sigmoid(qk)?;
    tape.scale(sig, 1.0 / (scale_dim as f64).sqrt())
}

/// Raw importance score per item: the mean affinity to the other valid items,
/// with the diagonal and padded positions excluded. Padded rows score 0.
pub fn importance_scores(tape: &mut Tape, affinity: TensorId, mask: &[bool]) -> Result<TensorId> {
    tape.masked_mean_offdiag(affinity, mask)
}

/// Softmax over the valid positions; padded positions get exactly 0.
pub fn normalize_importance(tape: &mut Tape, raw: TensorId, mask: &[bool]) -> Result<TensorId> {
    tape.softmax_row(raw, Some(mask))
}

/// The full importance chain for one session.
pub fn importance_graph(
    tape: &mut Tape,
    embeddings: TensorId,
    w_q: TensorId,
    w_k: TensorId,
    scale_by: ScaleBy,
    mask: &[bool],
) -> Result<ImportanceGraph> {
    let (q, k) = project_qk(tape, embeddings, w_q, w_k)?;
    let scale_dim = match scale_by {
        ScaleBy::SqrtD => tape.value(embeddings).cols(),
        ScaleBy::SqrtL => tape.value(q).cols(),
    };
    let aff = affinity(tape, q, k, scale_dim)?;
    let raw = importance_scores(tape, aff, mask)?;
    let weights = normalize_importance(tape, raw, mask)?;
    Ok(ImportanceGraph {
        query: q,
        key: k,
        affinity: aff,
        raw_scores: raw,
        weights,
    })
}

impl ImportanceGraph {
    /// Copy the tape values out into a standalone result.
    pub fn extract(&self, tape: &Tape) -> ImportanceResult {
        ImportanceResult {
            affinity: tape.value(self.affinity).clone(),
            raw_scores: tape.value(self.raw_scores).clone(),
            weights: tape.value(self.weights).clone(),
        }
    }
}
