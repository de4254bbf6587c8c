//! Empirical forward-cost scaling for the attention variants.
//!
//! Each measurement times the attention subgraph (session embeddings in,
//! long-term preference out) on a single pinned thread, then a least-squares
//! line is fitted to log time against log session length (or log embedding
//! width). With the pairwise affinity matrix dominating at t >= d, the
//! t-slope sits near 2.

use crate::error::{Error, Result};
use crate::model::{attention_forward, ModelConfig, ModelParams, ParamLeaves, Variant};
use crate::ndmath::{Tape, Tensor};
use crate::rng::rng_from_seed;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub t: usize,
    pub d: usize,
    pub l: usize,
    pub reps: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingFit {
    pub records: Vec<BenchRecord>,
    /// Least-squares slope of ln(median time) against ln(swept dimension).
    pub slope: f64,
}

/// Minimum repetitions for a reportable point.
pub const MIN_REPS: usize = 30;

/// Time the attention forward at one (t, d, l) point. Parameters and the
/// random session embeddings are prepared outside the timed region.
pub fn bench_point(
    variant: Variant,
    t: usize,
    d: usize,
    l: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if reps < MIN_REPS {
        return Err(Error::contract(format!(
            "reps {reps} below the reporting floor {MIN_REPS}"
        )));
    }
    let config = ModelConfig {
        d,
        l,
        variant,
        ..ModelConfig::default()
    };
    // one real item is enough: the bench feeds embeddings directly
    let params = ModelParams::init(config, 1, 0, seed);
    let mut rng = rng_from_seed(seed ^ 0xb0_0b5);
    let emb = Tensor::uniform(t, d, -1.0, 1.0, &mut rng);
    let mask = vec![true; t];

    let mut tape = Tape::new();
    let leaves = ParamLeaves::register(&mut tape, &params, false);
    let emb_id = tape.leaf(emb);

    // warmup, then measure
    for _ in 0..3 {
        attention_forward(
            &mut tape,
            &config,
            emb_id,
            &mask,
            leaves.w_q,
            leaves.w_k,
            &leaves.variant,
        )?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        attention_forward(
            &mut tape,
            &config,
            emb_id,
            &mask,
            leaves.w_q,
            leaves.w_k,
            &leaves.variant,
        )?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        variant,
        t,
        d,
        l,
        reps,
        median_ns: percentile(&samples, 0.5),
        iqr_ns: percentile(&samples, 0.75) - percentile(&samples, 0.25),
    })
}

/// Sweep the session length at fixed dimensions.
pub fn bench_t_scaling(
    variant: Variant,
    d: usize,
    l: usize,
    t_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ScalingFit> {
    let mut records = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        records.push(bench_point(variant, t, d, l, reps, seed)?);
    }
    let slope = fit_log_slope(
        &records.iter().map(|r| r.t as f64).collect::<Vec<_>>(),
        &records.iter().map(|r| r.median_ns).collect::<Vec<_>>(),
    );
    Ok(ScalingFit { records, slope })
}

/// Sweep the embedding width at fixed session length; the attention width
/// follows as l = d / 2, mirroring the default configuration ratio.
pub fn bench_d_scaling(
    variant: Variant,
    t: usize,
    d_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ScalingFit> {
    let mut records = Vec::with_capacity(d_grid.len());
    for &d in d_grid {
        let l = (d / 2).max(1);
        records.push(bench_point(variant, t, d, l, reps, seed)?);
    }
    let slope = fit_log_slope(
        &records.iter().map(|r| r.d as f64).collect::<Vec<_>>(),
        &records.iter().map(|r| r.median_ns).collect::<Vec<_>>(),
    );
    Ok(ScalingFit { records, slope })
}

/// Least-squares slope of ln(y) on ln(x); 0 when x never varies.
pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|&x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.max(1.0).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx < 1e-12 {
        return 0.0;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// `variant,t,d,l,reps,median_ns,iqr_ns` rows.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("variant,t,d,l,reps,median_ns,iqr_ns\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.0},{:.0}\n",
            r.variant, r.t, r.d, r.l, r.reps, r.median_ns, r.iqr_ns
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reps_floor_is_enforced() {
        assert!(bench_point(Variant::Iem, 8, 8, 4, 10, 0).is_err());
    }

    #[test]
    fn quadratic_data_fits_slope_two() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let slope = fit_log_slope(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-9, "slope {slope}");
    }

    #[test]
    fn constant_grid_has_zero_slope() {
        let fit = bench_t_scaling(Variant::Iem, 8, 4, &[12, 12, 12], MIN_REPS, 1).unwrap();
        assert_eq!(fit.slope, 0.0);
    }

    #[test]
    fn doubling_reps_keeps_medians_stable() {
        let a = bench_point(Variant::Iem, 32, 16, 8, 60, 2).unwrap();
        let b = bench_point(Variant::Iem, 32, 16, 8, 120, 2).unwrap();
        let spread = (a.iqr_ns + b.iqr_ns).max(0.5 * a.median_ns);
        assert!(
            (a.median_ns - b.median_ns).abs() <= spread,
            "medians {} vs {} spread {}",
            a.median_ns,
            b.median_ns,
            spread
        );
    }

    #[test]
    fn all_variants_produce_records() {
        for variant in [Variant::Iem, Variant::Sat, Variant::Stamp] {
            let rec = bench_point(variant, 16, 8, 4, MIN_REPS, 3).unwrap();
            assert!(rec.median_ns > 0.0);
            assert_eq!(rec.t, 16);
        }
        let csv = records_to_csv(&[bench_point(Variant::Sat, 8, 8, 4, MIN_REPS, 4).unwrap()]);
        assert!(csv.starts_with("variant,t,d,l,reps,median_ns,iqr_ns\n"));
        assert!(csv.contains("sat,8,8,4,"));
    }
}
