//! Shared fixtures for the integration suites: the synthetic first-order
//! transition corpus and an independent finite-difference oracle.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sriem_core::dataset::{Session, SessionCorpus};

/// Generator for corpora that follow a fixed first-order transition table:
/// from item i the next click is `follow(i)` with probability `follow_prob`,
/// otherwise the fixed alternative `detour(i)`. Optionally a share of pure
/// noise clicks is spliced in.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub follow_prob: f64,
    /// Fraction of all clicks that are uniform noise insertions.
    pub noise_share: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 50,
            train_sessions: 2000,
            test_sessions: 200,
            min_len: 3,
            max_len: 10,
            follow_prob: 0.9,
            noise_share: 0.0,
            seed: 1,
        }
    }
}

/// Primary transition: a fixed permutation-ish map over 1..=n.
pub fn follow(item: usize, n: usize) -> usize {
    ((item - 1) * 7 + 3) % n + 1
}

/// The 10% alternative, guaranteed different from `follow`.
pub fn detour(item: usize, n: usize) -> usize {
    let cand = ((item - 1) * 11 + 5) % n + 1;
    if cand == follow(item, n) {
        cand % n + 1
    } else {
        cand
    }
}

fn generate_session(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Session {
    let n = spec.n_items;
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut items = Vec::with_capacity(len * 2);
    let mut cur = rng.random_range(1..=n);
    items.push(cur);
    while items.len() < len {
        cur = if rng.random_range(0.0..1.0) < spec.follow_prob {
            follow(cur, n)
        } else {
            detour(cur, n)
        };
        items.push(cur);
    }
    if spec.noise_share > 0.0 {
        // insert uniform noise after clicks so that roughly `noise_share` of
        // the final stream is noise
        let p_insert = spec.noise_share / (1.0 - spec.noise_share);
        let mut noisy = Vec::with_capacity(items.len() * 2);
        for item in items {
            noisy.push(item);
            if rng.random_range(0.0..1.0) < p_insert {
                noisy.push(rng.random_range(1..=n));
            }
        }
        items = noisy;
    }
    Session { items }
}

pub fn synthetic_corpus(spec: &SyntheticSpec) -> SessionCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab: Vec<String> = (1..=spec.n_items).map(|i| format!("item{i}")).collect();
    let train: Vec<Session> = (0..spec.train_sessions)
        .map(|_| generate_session(spec, &mut rng))
        .collect();
    let test: Vec<Session> = (0..spec.test_sessions)
        .map(|_| generate_session(spec, &mut rng))
        .collect();
    SessionCorpus::from_parts(vocab, train, test)
}

/// Central finite differences, written independently of the library's own
/// test helpers: grad_i ~ (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Greatest relative error over coordinates with analytic magnitude above the
/// floor; returns (worst_rel_err, checked_count).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() > floor {
            checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs());
            worst = worst.max(rel);
        }
    }
    (worst, checked)
}
