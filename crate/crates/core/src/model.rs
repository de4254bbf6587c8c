//! The full recommender: item embeddings, one of three attention mechanisms
//! for the long-term preference, fusion with the last item's embedding, and
//! softmax scoring over the whole candidate set.
//!
//! The candidate scorer reuses the input embedding table (weight tying); the
//! padding row 0 is frozen at zero, excluded from scoring, and never receives
//! gradient.

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::iem::{self, IemParams, ImportanceGraph, ImportanceResult, ScaleBy};
use crate::ndmath::{Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

// ── Configuration ───────────────────────────────────────────────────────

/// Which attention mechanism produces the long-term preference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pairwise-affinity importance weighting (the full model).
    Iem,
    /// Scaled dot-product self-attention with average pooling.
    Sat,
    /// Additive attention against a mixture-plus-last-item query.
    Stamp,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iem" => Ok(Variant::Iem),
            "sat" => Ok(Variant::Sat),
            "stamp" => Ok(Variant::Stamp),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected iem, sat or stamp)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Iem => "iem",
            Variant::Sat => "sat",
            Variant::Stamp => "stamp",
        })
    }
}

/// Training objective over the softmax probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Binary cross-entropy summed over every candidate (the default).
    BceSum,
    /// Conventional categorical cross-entropy `-ln p[target]`.
    CategoricalCe,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce-sum" => Ok(LossMode::BceSum),
            "categorical-ce" => Ok(LossMode::CategoricalCe),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected bce-sum or categorical-ce)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::BceSum => "bce-sum",
            LossMode::CategoricalCe => "categorical-ce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention width.
    pub l: usize,
    pub variant: Variant,
    pub loss_mode: LossMode,
    pub scale_by: ScaleBy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 200,
            l: 100,
            variant: Variant::Iem,
            loss_mode: LossMode::BceSum,
            scale_by: ScaleBy::SqrtD,
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Extra matrices for the ablation variants; the full model needs none.
#[derive(Debug, Clone, PartialEq)]
pub enum VariantParams {
    Iem,
    Sat {
        w_q: Tensor, // d x l
        w_k: Tensor, // d x l
        w_v: Tensor, // d x l
        w_o: Tensor, // l x d
    },
    Stamp {
        w_item: Tensor,  // d x l
        w_mean: Tensor,  // d x l
        w_last: Tensor,  // d x l
        w_score: Tensor, // l x 1
        bias: Tensor,    // 1 x l
    },
}

/// All trainable state plus the metadata needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub n_items: usize,
    pub vocab_hash: u64,
    /// (n_items + 1) x d; row 0 is the padding row and stays exactly zero.
    pub embeddings: Tensor,
    pub iem: IemParams,
    /// 2d x d fusion map applied to the concatenated [long-term ; current].
    pub w_fuse: Tensor,
    pub variant: VariantParams,
}

impl ModelParams {
    pub fn init(config: ModelConfig, n_items: usize, vocab_hash: u64, seed: u64) -> Self {
        let (d, l) = (config.d, config.l);
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = crate::rng::rng_from_seed_stream(seed, 0x70_61_72_61);
        let mut embeddings = Tensor::uniform(n_items + 1, d, -bound, bound, &mut rng);
        embeddings.data_mut()[..d].fill(0.0); // padding row
        let iem = IemParams::init(d, l, &mut rng);
        let w_fuse = Tensor::uniform(2 * d, d, -bound, bound, &mut rng);
        let variant = match config.variant {
            Variant::Iem => VariantParams::Iem,
            Variant::Sat => VariantParams::Sat {
                w_q: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_k: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_v: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_o: Tensor::uniform(l, d, -bound, bound, &mut rng),
            },
            Variant::Stamp => VariantParams::Stamp {
                w_item: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_mean: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_last: Tensor::uniform(d, l, -bound, bound, &mut rng),
                w_score: Tensor::uniform(l, 1, -bound, bound, &mut rng),
                bias: Tensor::zeros(1, l),
            },
        };
        ModelParams {
            config,
            n_items,
            vocab_hash,
            embeddings,
            iem,
            w_fuse,
            variant,
        }
    }

    /// Visit every trainable tensor with a stable name.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("embeddings", &self.embeddings);
        f("w_q", &self.iem.w_q);
        f("w_k", &self.iem.w_k);
        f("w_fuse", &self.w_fuse);
        match &self.variant {
            VariantParams::Iem => {}
            VariantParams::Sat { w_q, w_k, w_v, w_o } => {
                f("sat.w_q", w_q);
                f("sat.w_k", w_k);
                f("sat.w_v", w_v);
                f("sat.w_o", w_o);
            }
            VariantParams::Stamp {
                w_item,
                w_mean,
                w_last,
                w_score,
                bias,
            } => {
                f("stamp.w_item", w_item);
                f("stamp.w_mean", w_mean);
                f("stamp.w_last", w_last);
                f("stamp.w_score", w_score);
                f("stamp.bias", bias);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embeddings", &mut self.embeddings);
        f("w_q", &mut self.iem.w_q);
        f("w_k", &mut self.iem.w_k);
        f("w_fuse", &mut self.w_fuse);
        match &mut self.variant {
            VariantParams::Iem => {}
            VariantParams::Sat { w_q, w_k, w_v, w_o } => {
                f("sat.w_q", w_q);
                f("sat.w_k", w_k);
                f("sat.w_v", w_v);
                f("sat.w_o", w_o);
            }
            VariantParams::Stamp {
                w_item,
                w_mean,
                w_last,
                w_score,
                bias,
            } => {
                f("stamp.w_item", w_item);
                f("stamp.w_mean", w_mean);
                f("stamp.w_last", w_last);
                f("stamp.w_score", w_score);
                f("stamp.bias", bias);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, t| t.zero_grad());
    }
}

// ── Forward graph ───────────────────────────────────────────────────────

/// Tape leaves for the shared parameters, registered once per tape.
#[derive(Debug, Clone)]
pub struct ParamLeaves {
    pub embeddings: TensorId,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_fuse: TensorId,
    pub variant: VariantLeaves,
}

#[derive(Debug, Clone, Copy)]
pub enum VariantLeaves {
    Iem,
    Sat {
        w_q: TensorId,
        w_k: TensorId,
        w_v: TensorId,
        w_o: TensorId,
    },
    Stamp {
        w_item: TensorId,
        w_mean: TensorId,
        w_last: TensorId,
        w_score: TensorId,
        bias: TensorId,
    },
}

impl ParamLeaves {
    /// Copy the parameters onto a tape. With `trainable`, every leaf gets a
    /// gradient slot and `backward` will fill it.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamLeaves {
        let mark = |t: &Tensor| {
            let mut t = t.clone();
            if trainable {
                t = t.with_grad();
            }
            t
        };
        let embeddings = tape.leaf(mark(&params.embeddings));
        let w_q = tape.leaf(mark(&params.iem.w_q));
        let w_k = tape.leaf(mark(&params.iem.w_k));
        let w_fuse = tape.leaf(mark(&params.w_fuse));
        let variant = match &params.variant {
            VariantParams::Iem => VariantLeaves::Iem,
            VariantParams::Sat { w_q, w_k, w_v, w_o } => VariantLeaves::Sat {
                w_q: tape.leaf(mark(w_q)),
                w_k: tape.leaf(mark(w_k)),
                w_v: tape.leaf(mark(w_v)),
                w_o: tape.leaf(mark(w_o)),
            },
            VariantParams::Stamp {
                w_item,
                w_mean,
                w_last,
                w_score,
                bias,
            } => VariantLeaves::Stamp {
                w_item: tape.leaf(mark(w_item)),
                w_mean: tape.leaf(mark(w_mean)),
                w_last: tape.leaf(mark(w_last)),
                w_score: tape.leaf(mark(w_score)),
                bias: tape.leaf(mark(bias)),
            },
        };
        ParamLeaves {
            embeddings,
            w_q,
            w_k,
            w_fuse,
            variant,
        }
    }

    /// After `backward`, add the tape gradients into the parameter grad slots.
    pub fn grads_into(&self, tape: &Tape, params: &mut ModelParams) {
        let take = |id: TensorId, t: &mut Tensor| {
            if let Some(g) = tape.grad(id) {
                t.accumulate_grad(g);
            }
        };
        take(self.embeddings, &mut params.embeddings);
        take(self.w_q, &mut params.iem.w_q);
        take(self.w_k, &mut params.iem.w_k);
        take(self.w_fuse, &mut params.w_fuse);
        match (&self.variant, &mut params.variant) {
            (VariantLeaves::Iem, VariantParams::Iem) => {}
            (
                VariantLeaves::Sat { w_q, w_k, w_v, w_o },
                VariantParams::Sat {
                    w_q: pq,
                    w_k: pk,
                    w_v: pv,
                    w_o: po,
                },
            ) => {
                take(*w_q, pq);
                take(*w_k, pk);
                take(*w_v, pv);
                take(*w_o, po);
            }
            (
                VariantLeaves::Stamp {
                    w_item,
                    w_mean,
                    w_last,
                    w_score,
                    bias,
                },
                VariantParams::Stamp {
                    w_item: pi,
                    w_mean: pm,
                    w_last: pl,
                    w_score: ps,
                    bias: pb,
                },
            ) => {
                take(*w_item, pi);
                take(*w_mean, pm);
                take(*w_last, pl);
                take(*w_score, ps);
                take(*bias, pb);
            }
            _ => unreachable!("variant leaves always match variant params"),
        }
    }
}

/// Tape handles for one session's forward pass.
#[derive(Debug, Clone)]
pub struct SessionGraph {
    pub z_long: TensorId,
    pub z_current: TensorId,
    pub z_fused: TensorId,
    pub scores: TensorId,
    pub probs: TensorId,
    pub loss: Option<TensorId>,
    /// Full importance artifacts (affinity, raw scores, weights); full model only.
    pub importance: Option<ImportanceGraph>,
    /// Per-item weights: softmax importance for the full model and the
    /// additive-attention variant, attention received per item for the
    /// self-attention variant.
    pub item_weights: Option<TensorId>,
}

/// Long-term preference: the weight-vector (1 x t) combination of the session
/// embeddings (t x d).
pub fn long_term_preference(
    tape: &mut Tape,
    weights: TensorId,
    session_embeddings: TensorId,
) -> Result<TensorId> {
    tape.matmul(weights, session_embeddings)
}

/// Fuse long-term preference and current interest: `[z_long ; z_current] W`.
pub fn fuse_preferences(
    tape: &mut Tape,
    z_long: TensorId,
    z_current: TensorId,
    w_fuse: TensorId,
) -> Result<TensorId> {
    let cat = tape.concat_cols(z_long, z_current)?;
    tape.matmul(cat, w_fuse)
}

/// Scores and probabilities over the whole candidate set (padding excluded).
pub fn score_candidates(
    tape: &mut Tape,
    z_fused: TensorId,
    embeddings: TensorId,
) -> Result<(TensorId, TensorId)> {
    let scores = tape.candidate_scores(z_fused, embeddings)?;
    let probs = tape.softmax_row(scores, None)?;
    Ok((scores, probs))
}

/// Per-example loss over the probability row; `target` is a 1-based item index.
pub fn loss_for_target(
    tape: &mut Tape,
    probs: TensorId,
    target: usize,
    mode: LossMode,
) -> Result<TensorId> {
    let n = tape.value(probs).cols();
    if target == 0 || target > n {
        return Err(Error::contract(format!(
            "target item {target} outside the candidate range 1..={n}"
        )));
    }
    match mode {
        LossMode::BceSum => tape.bce_loss(probs, target - 1),
        LossMode::CategoricalCe => tape.nll_loss(probs, target - 1),
    }
}

/// Self-attention variant: softmax(Q K^T / sqrt(l)) V with the diagonal
/// masked, projected back to width d and average-pooled over valid rows.
/// Returns (z_long, attention matrix).
fn sat_attention(
    tape: &mut Tape,
    session_emb: TensorId,
    mask: &[bool],
    w_q: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    w_o: TensorId,
) -> Result<(TensorId, TensorId)> {
    let q = tape.matmul(session_emb, w_q)?;
    let k = tape.matmul(session_emb, w_k)?;
    let v = tape.matmul(session_emb, w_v)?;
    let l = tape.value(q).cols();
    let k_t = tape.transpose(k)?;
    let logits = tape.matmul(q, k_t)?;
    let scaled = tape.scale(logits, 1.0 / (l as f64).sqrt())?;
    let attn = tape.softmax_row_no_diag(scaled, Some(mask))?;
    let attended = tape.matmul(attn, v)?;
    let projected = tape.matmul(attended, w_o)?;
    let pool = tape.leaf(mean_row(mask));
    let z_long = tape.matmul(pool, projected)?;
    Ok((z_long, attn))
}

/// Additive-attention variant: w . sigmoid(W1 e_i + W2 mean + W3 last + b),
/// softmaxed over valid positions. Returns (z_long, weights).
#[allow(clippy::too_many_arguments)]
fn stamp_attention(
    tape: &mut Tape,
    session_emb: TensorId,
    mask: &[bool],
    last_row: usize,
    w_item: TensorId,
    w_mean: TensorId,
    w_last: TensorId,
    w_score: TensorId,
    bias: TensorId,
) -> Result<(TensorId, TensorId)> {
    let pool = tape.leaf(mean_row(mask));
    let q_mean = tape.matmul(pool, session_emb)?;
    let pick_last = tape.leaf(one_hot_row(mask.len(), last_row));
    let e_last = tape.matmul(pick_last, session_emb)?;

    let items_proj = tape.matmul(session_emb, w_item)?;
    let mean_proj = tape.matmul(q_mean, w_mean)?;
    let last_proj = tape.matmul(e_last, w_last)?;
    let q1 = tape.add(mean_proj, last_proj)?;
    let q2 = tape.add(q1, bias)?;
    let pre = tape.add_row_broadcast(items_proj, q2)?;
    let act = tape.sigmoid(pre)?;
    let scores_col = tape.matmul(act, w_score)?; // t x 1
    let scores_row = tape.transpose(scores_col)?; // 1 x t
    let weights = tape.softmax_row(scores_row, Some(mask))?;
    let z_long = long_term_preference(tape, weights, session_emb)?;
    Ok((z_long, weights))
}

/// 1 x t row with 1/t_valid on valid positions, 0 on pads.
fn mean_row(mask: &[bool]) -> Tensor {
    let t_valid = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let data = mask
        .iter()
        .map(|&m| if m { 1.0 / t_valid } else { 0.0 })
        .collect();
    Tensor::from_vec(1, mask.len(), data).expect("mean row is finite")
}

fn one_hot_row(len: usize, hot: usize) -> Tensor {
    let mut data = vec![0.0; len];
    data[hot] = 1.0;
    Tensor::from_vec(1, len, data).expect("one-hot row is finite")
}

/// The variant attention subgraph: from session embeddings (t x d) to the
/// long-term preference (1 x d). Returns the importance artifacts where the
/// variant produces them. The benchmark times exactly this path.
pub fn attention_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    session_emb: TensorId,
    mask: &[bool],
    w_q: TensorId,
    w_k: TensorId,
    variant: &VariantLeaves,
) -> Result<(TensorId, Option<ImportanceGraph>, Option<TensorId>)> {
    let last_valid = mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::contract("attention needs at least one valid position"))?;
    match (variant, config.variant) {
        (VariantLeaves::Iem, Variant::Iem) => {
            let graph = iem::importance_graph(tape, session_emb, w_q, w_k, config.scale_by, mask)?;
            let z_long = long_term_preference(tape, graph.weights, session_emb)?;
            Ok((z_long, Some(graph), Some(graph.weights)))
        }
        (VariantLeaves::Sat { w_q, w_k, w_v, w_o }, Variant::Sat) => {
            let (z_long, attn) = sat_attention(tape, session_emb, mask, *w_q, *w_k, *w_v, *w_o)?;
            // attention received per item: the valid-row mean of a
            // row-stochastic matrix, itself summing to one
            let pool = tape.leaf(mean_row(mask));
            let received = tape.matmul(pool, attn)?;
            Ok((z_long, None, Some(received)))
        }
        (
            VariantLeaves::Stamp {
                w_item,
                w_mean,
                w_last,
                w_score,
                bias,
            },
            Variant::Stamp,
        ) => {
            let (z_long, weights) = stamp_attention(
                tape,
                session_emb,
                mask,
                last_valid,
                *w_item,
                *w_mean,
                *w_last,
                *w_score,
                *bias,
            )?;
            Ok((z_long, None, Some(weights)))
        }
        _ => Err(Error::contract(
            "variant leaves do not match the configured variant",
        )),
    }
}

/// Build the forward graph for one session. `items` are the valid item
/// indices (1-based, chronological); `target`, when given, adds the loss node.
pub fn session_graph(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    items: &[usize],
    target: Option<usize>,
) -> Result<SessionGraph> {
    if items.is_empty() {
        return Err(Error::contract("cannot run the model on an empty session"));
    }
    if items.contains(&0) {
        return Err(Error::contract(
            "session items must be valid indices, not padding",
        ));
    }
    let t = items.len();
    let mask = vec![true; t];
    let session_emb = tape.gather_rows(leaves.embeddings, items)?;
    let (z_long, importance, item_weights) = attention_forward(
        tape,
        config,
        session_emb,
        &mask,
        leaves.w_q,
        leaves.w_k,
        &leaves.variant,
    )?;

    // current interest: the last item's embedding, straight from the table
    let z_current = tape.gather_rows(leaves.embeddings, &items[t - 1..])?;
    let z_fused = fuse_preferences(tape, z_long, z_current, leaves.w_fuse)?;
    let (scores, probs) = score_candidates(tape, z_fused, leaves.embeddings)?;
    let loss = match target {
        Some(tgt) => Some(loss_for_target(tape, probs, tgt, config.loss_mode)?),
        None => None,
    };
    Ok(SessionGraph {
        z_long,
        z_current,
        z_fused,
        scores,
        probs,
        loss,
        importance,
        item_weights,
    })
}

/// Forward pass over a padded batch: one shared set of parameter leaves, one
/// per-row graph each, and the batch loss as the mean of the row losses.
pub fn forward_batch(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<(Vec<SessionGraph>, TensorId)> {
    if batch.is_empty() {
        return Err(Error::contract("cannot run the model on an empty batch"));
    }
    let mut rows = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for r in 0..batch.len() {
        let graph = session_graph(
            tape,
            leaves,
            config,
            batch.valid_items(r),
            Some(batch.targets[r]),
        )?;
        losses.push(graph.loss.expect("target given"));
        rows.push(graph);
    }
    let mean_loss = tape.mean_scalars(&losses)?;
    Ok((rows, mean_loss))
}

// ── Inference conveniences ──────────────────────────────────────────────

/// Values copied out of a finished forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub z_long: Vec<f64>,
    pub z_current: Vec<f64>,
    pub z_fused: Vec<f64>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub importance: Option<ImportanceResult>,
    pub item_weights: Option<Vec<f64>>,
    pub loss: Option<f64>,
}

impl SessionGraph {
    pub fn extract(&self, tape: &Tape) -> ForwardResult {
        ForwardResult {
            z_long: tape.value(self.z_long).data().to_vec(),
            z_current: tape.value(self.z_current).data().to_vec(),
            z_fused: tape.value(self.z_fused).data().to_vec(),
            scores: tape.value(self.scores).data().to_vec(),
            probs: tape.value(self.probs).data().to_vec(),
            importance: self.importance.as_ref().map(|g| g.extract(tape)),
            item_weights: self.item_weights.map(|id| tape.value(id).data().to_vec()),
            loss: self.loss.map(|id| tape.value(id).data()[0]),
        }
    }
}

/// One-session inference without gradients.
pub fn forward_session(params: &ModelParams, items: &[usize]) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let leaves = ParamLeaves::register(&mut tape, params, false);
    let graph = session_graph(&mut tape, &leaves, &params.config, items, None)?;
    Ok(graph.extract(&tape))
}

/// Candidate scores only; the common path for evaluation.
pub fn score_session(params: &ModelParams, items: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves = ParamLeaves::register(&mut tape, params, false);
    let graph = session_graph(&mut tape, &leaves, &params.config, items, None)?;
    Ok(tape.value(graph.scores).data().to_vec())
}
