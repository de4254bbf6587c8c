//! Shared setup for the criterion benchmarks in `benches/`.

use sriem_core::model::{ModelConfig, ModelParams, Variant};
use sriem_core::ndmath::{Tape, Tensor};
use sriem_core::rng::rng_from_seed;

pub struct BenchSetup {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub embeddings: Tensor,
    pub mask: Vec<bool>,
}

/// A model plus a random t x d session-embedding block, ready for repeated
/// attention forwards.
pub fn setup(variant: Variant, t: usize, d: usize, l: usize) -> BenchSetup {
    let config = ModelConfig {
        d,
        l,
        variant,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(config, 1, 0, 7);
    let mut rng = rng_from_seed(11);
    BenchSetup {
        config,
        params,
        embeddings: Tensor::uniform(t, d, -1.0, 1.0, &mut rng),
        mask: vec![true; t],
    }
}

/// One attention forward on a fresh tape; returns the tape length so the
/// optimizer cannot discard the work.
pub fn attention_once(setup: &BenchSetup) -> usize {
    let mut tape = Tape::new();
    let leaves = sriem_core::model::ParamLeaves::register(&mut tape, &setup.params, false);
    let emb = tape.leaf(setup.embeddings.clone());
    sriem_core::model::attention_forward(
        &mut tape,
        &setup.config,
        emb,
        &setup.mask,
        leaves.w_q,
        leaves.w_k,
        &leaves.variant,
    )
    .expect("attention forward");
    tape.len()
}
