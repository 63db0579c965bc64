//! Gradient-variance measurements for the distillation objective.
//!
//! A "variance" of a gradient vector is the trace of its empirical covariance
//! divided by the dimension. Conditioning on a source of randomness means
//! replaying its RNG stream while the other streams advance.

use std::collections::BTreeSet;

use diffgraph::flatten_grads;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distill::{Auxiliary, DistillConfig, DistillState, LossKind};
use crate::embed::EmbeddingEnsemble;
use crate::error::{CoreError, Result};
use crate::rng::{keyed_rng, Draw, Stream};

/// Draw indices used by the variance tools start here, away from training draws.
const FREE_BASE: u64 = 1 << 40;
const FROZEN_BASE: u64 = 1 << 41;

pub const BATCH_SIZES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample {
    pub values: Vec<f64>,
    /// Streams replayed identically across the draws this sample belongs to.
    pub frozen: BTreeSet<Stream>,
}

#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn check_vectors(samples: &[&[f64]]) -> Result<usize> {
    if samples.len() < 2 {
        return Err(CoreError::invalid("total_variance", format!("need >= 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(CoreError::invalid("total_variance", "samples must share a nonzero dimension"));
    }
    Ok(d)
}

fn means(samples: &[&[f64]], d: usize) -> Vec<f64> {
    let mut acc = vec![Kahan::default(); d];
    for s in samples {
        for (a, &v) in acc.iter_mut().zip(s.iter()) {
            a.add(v);
        }
    }
    let n = samples.len() as f64;
    acc.iter().map(|a| a.sum / n).collect()
}

/// Mean over coordinates of the unbiased per-coordinate sample variance.
pub fn vector_variance(samples: &[&[f64]]) -> Result<f64> {
    vector_covariance(samples, samples)
}

/// `sum_r <a_r − mean a, b_r − mean b> / ((n − 1) d)`.
pub fn vector_covariance(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    let d = check_vectors(a)?;
    if check_vectors(b)? != d || a.len() != b.len() {
        return Err(CoreError::invalid("covariance", "streams differ in length or dimension"));
    }
    let (ma, mb) = (means(a, d), means(b, d));
    let mut acc = Kahan::default();
    for (sa, sb) in a.iter().zip(b) {
        for i in 0..d {
            acc.add((sa[i] - ma[i]) * (sb[i] - mb[i]));
        }
    }
    Ok(acc.sum / ((a.len() - 1) as f64 * d as f64))
}

pub fn total_variance(samples: &[GradientSample]) -> Result<f64> {
    let v: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
    vector_variance(&v)
}

/// Streams from their names; unknown names are rejected.
pub fn parse_streams<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<Stream>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Draw `r` of a conditioned sweep: frozen streams stay at `frozen_index`,
/// free streams take a fresh index per repeat.
fn conditioned_draw(seed: u64, frozen: &BTreeSet<Stream>, frozen_index: u64, r: u64) -> Draw {
    Stream::ALL.iter().fold(Draw::new(seed, FREE_BASE + r), |d, &s| {
        if frozen.contains(&s) {
            d.with(s, FROZEN_BASE + frozen_index)
        } else {
            d
        }
    })
}

fn with_batch(cfg: &DistillConfig, b: usize) -> DistillConfig {
    DistillConfig { batch: b, ..cfg.clone() }
}

/// `repeats` gradient draws at the state's current parameters.
pub fn sample_gradients(
    state: &DistillState,
    cfg: &DistillConfig,
    kind: LossKind,
    b: usize,
    repeats: usize,
    frozen: &BTreeSet<Stream>,
) -> Result<Vec<GradientSample>> {
    sample_gradients_at(state, cfg, kind, b, repeats, frozen, 0)
}

fn sample_gradients_at(
    state: &DistillState,
    cfg: &DistillConfig,
    kind: LossKind,
    b: usize,
    repeats: usize,
    frozen: &BTreeSet<Stream>,
    frozen_index: u64,
) -> Result<Vec<GradientSample>> {
    if repeats < 2 {
        return Err(CoreError::invalid("sample_gradients", "repeats must be >= 2"));
    }
    let cfg = with_batch(cfg, b);
    (0..repeats as u64)
        .map(|r| {
            let draw = conditioned_draw(cfg.seed, frozen, frozen_index, r);
            let comps = state.component_gradients(&cfg, &draw)?;
            Ok(GradientSample {
                values: flatten_grads(&comps.select(kind, &cfg)),
                frozen: frozen.clone(),
            })
        })
        .collect()
}

/// Expected variance left when only `stream` varies, averaged over `outer`
/// settings of the other streams.
pub fn conditional_variance(
    state: &DistillState,
    cfg: &DistillConfig,
    kind: LossKind,
    stream: Stream,
    b: usize,
    repeats: usize,
    outer: usize,
) -> Result<f64> {
    let frozen: BTreeSet<Stream> = Stream::ALL.iter().copied().filter(|&s| s != stream).collect();
    let mut acc = 0.0;
    for o in 0..outer.max(1) {
        acc += total_variance(&sample_gradients_at(state, cfg, kind, b, repeats, &frozen, o as u64)?)?;
    }
    Ok(acc / outer.max(1) as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(CoreError::invalid("log_log_slope", "need >= 2 positive pairs"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CoreError::invalid("log_log_slope", "x values are all equal"));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub batch: usize,
    pub var_total: f64,
    pub var_noise: f64,
    pub var_time: f64,
    /// Variance from the data stream (latents and real minibatch) at `batch`.
    pub var_batch: f64,
    /// `var_total` minus the three measured components, floored at zero.
    pub var_diffusion_residual: f64,
    /// The same residual before flooring; negative when the sources interact.
    pub residual_raw: f64,
    /// Batch term measured at each size in `batch_sizes`.
    pub var_batch_by_size: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub var_batch_slope: f64,
}

/// DM-gradient variance split by source of randomness, plus the batch-size
/// scaling of the data term.
pub fn decompose_variance(
    state: &DistillState,
    cfg: &DistillConfig,
    b: usize,
    repeats: usize,
    outer: usize,
    batch_sizes: &[usize],
) -> Result<VarianceReport> {
    let kind = LossKind::Dm;
    let var_total = total_variance(&sample_gradients(state, cfg, kind, b, repeats, &BTreeSet::new())?)?;
    let var_noise = conditional_variance(state, cfg, kind, Stream::Noise, b, repeats, outer)?;
    let var_time = conditional_variance(state, cfg, kind, Stream::Time, b, repeats, outer)?;
    let var_batch = conditional_variance(state, cfg, kind, Stream::Data, b, repeats, outer)?;
    let var_batch_by_size = batch_sizes
        .iter()
        .map(|&bs| {
            if bs == b {
                Ok(var_batch)
            } else {
                conditional_variance(state, cfg, kind, Stream::Data, bs, repeats, outer)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = batch_sizes.iter().map(|&v| v as f64).collect();
    let var_batch_slope = log_log_slope(&xs, &var_batch_by_size)?;
    let residual_raw = var_total - var_noise - var_time - var_batch;
    Ok(VarianceReport {
        batch: b,
        var_total,
        var_noise,
        var_time,
        var_batch,
        var_diffusion_residual: residual_raw.max(0.0),
        residual_raw,
        var_batch_by_size,
        batch_sizes: batch_sizes.to_vec(),
        var_batch_slope,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEstimate {
    pub sigma_dm: f64,
    pub sigma_embed: f64,
    pub rho: f64,
    pub samples: usize,
    /// One of the sigmas was zero; `rho` is reported as 0.
    pub degenerate: bool,
}

/// Correlation of two gradient streams drawn in lockstep.
pub fn correlation(a: &[&[f64]], b: &[&[f64]]) -> Result<CorrelationEstimate> {
    let va = vector_variance(a)?;
    let vb = vector_variance(b)?;
    let cov = vector_covariance(a, b)?;
    let (sa, sb) = (va.sqrt(), vb.sqrt());
    let degenerate = sa == 0.0 || sb == 0.0;
    let rho = if degenerate { 0.0 } else { (cov / (sa * sb)).clamp(-1.0, 1.0) };
    Ok(CorrelationEstimate {
        sigma_dm: sa,
        sigma_embed: sb,
        rho,
        samples: a.len(),
        degenerate,
    })
}

/// Paired DM and auxiliary gradients under the same draws.
pub fn paired_gradients(
    state: &DistillState,
    cfg: &DistillConfig,
    b: usize,
    repeats: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = with_batch(cfg, b);
    let mut dm = Vec::with_capacity(repeats);
    let mut aux = Vec::with_capacity(repeats);
    for r in 0..repeats as u64 {
        let comps = state.component_gradients(&cfg, &conditioned_draw(cfg.seed, &BTreeSet::new(), 0, r))?;
        dm.push(flatten_grads(&comps.dm));
        aux.push(flatten_grads(&comps.select(LossKind::Embed, &cfg)));
    }
    Ok((dm, aux))
}

pub fn estimate_correlation(
    state: &DistillState,
    cfg: &DistillConfig,
    b: usize,
    repeats: usize,
) -> Result<CorrelationEstimate> {
    if repeats < 10 {
        return Err(CoreError::invalid("estimate_correlation", "repeats must be >= 10"));
    }
    let (dm, aux) = paired_gradients(state, cfg, b, repeats)?;
    correlation(&as_slices(&dm), &as_slices(&aux))
}

pub fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleVariance {
    pub ensemble: f64,
    pub per_network: Vec<f64>,
    /// `ensemble / mean(per_network)`
    pub ratio: f64,
}

/// Embedding-loss gradient variance of the whole ensemble against each of its
/// members used alone, under identical draws. With `cfg.resample_ensemble`
/// the networks are redrawn on every draw, so their randomness is part of the
/// measured variance.
pub fn ensemble_variance(state: &DistillState, cfg: &DistillConfig, b: usize, repeats: usize) -> Result<EnsembleVariance> {
    let cfg = DistillConfig {
        auxiliary: Auxiliary::Embedding,
        ..cfg.clone()
    };
    let none = BTreeSet::new();
    let ensemble = total_variance(&sample_gradients(state, &cfg, LossKind::Embed, b, repeats, &none)?)?;
    let mut per_network = Vec::new();
    if cfg.resample_ensemble {
        for i in 0..cfg.ensemble.members.len() {
            let mut spec = cfg.ensemble.clone();
            spec.members = vec![spec.members[i]];
            spec.nets_per_type = 1;
            let single = DistillConfig {
                ensemble: spec,
                ..cfg.clone()
            };
            per_network.push(total_variance(&sample_gradients(state, &single, LossKind::Embed, b, repeats, &none)?)?);
        }
    } else {
        let ens = state.ensemble.clone().ok_or(CoreError::Empty("embedding ensemble"))?;
        for net in ens.networks() {
            let mut single = state.clone();
            single.ensemble = Some(EmbeddingEnsemble::new(vec![net.clone()], 1));
            per_network.push(total_variance(&sample_gradients(&single, &cfg, LossKind::Embed, b, repeats, &none)?)?);
        }
    }
    if per_network.is_empty() {
        return Err(CoreError::Empty("embedding ensemble"));
    }
    let mean = per_network.iter().sum::<f64>() / per_network.len() as f64;
    Ok(EnsembleVariance {
        ensemble,
        ratio: ensemble / mean,
        per_network,
    })
}

fn denominator(s1: f64, s2: f64, rho: f64) -> Result<f64> {
    if !(s1 >= 0.0 && s2 >= 0.0) || !(-1.0..=1.0).contains(&rho) {
        return Err(CoreError::invalid(
            "lambda_star",
            format!("need sigmas >= 0 and rho in [-1, 1], got ({s1}, {s2}, {rho})"),
        ));
    }
    let den = s1 * s1 + s2 * s2 - 2.0 * rho * s1 * s2;
    if !(den > f64::EPSILON * (s1 * s1 + s2 * s2)) {
        return Err(CoreError::Degenerate(format!(
            "sigma_dm={s1} sigma_embed={s2} rho={rho} gives a zero denominator"
        )));
    }
    Ok(den)
}

/// Minimizer of `V(lambda)`; not clamped to `[0, 1]`.
pub fn lambda_star(sigma_dm: f64, sigma_embed: f64, rho: f64) -> Result<f64> {
    let den = denominator(sigma_dm, sigma_embed, rho)?;
    Ok((sigma_dm * sigma_dm - rho * sigma_dm * sigma_embed) / den)
}

pub fn min_variance(sigma_dm: f64, sigma_embed: f64, rho: f64) -> Result<f64> {
    let den = denominator(sigma_dm, sigma_embed, rho)?;
    Ok(sigma_dm * sigma_dm * sigma_embed * sigma_embed * (1.0 - rho * rho) / den)
}

/// `V(lambda) = (1−λ)²σ₁² + λ²σ₂² + 2λ(1−λ)ρσ₁σ₂`
pub fn mixed_variance(s1: f64, s2: f64, rho: f64, lambda: f64) -> f64 {
    let l = lambda;
    (1.0 - l).powi(2) * s1 * s1 + l * l * s2 * s2 + 2.0 * l * (1.0 - l) * rho * s1 * s2
}

/// Empirical variance of `(1−λ) a + λ b` at each `λ` in `grid`.
pub fn lambda_grid(a: &[&[f64]], b: &[&[f64]], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&l| {
            let mixed: Vec<Vec<f64>> = a
                .iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (1.0 - l) * u + l * v).collect())
                .collect();
            Ok((l, vector_variance(&as_slices(&mixed))?))
        })
        .collect()
}

/// `{0, 0.1, ..., 1}`
pub fn unit_grid(cells: usize) -> Vec<f64> {
    (0..=cells).map(|i| i as f64 / cells as f64).collect()
}

/// `n` pairs of `dim`-vectors with per-coordinate standard deviations
/// `(s1, s2)` and correlation `rho`.
pub fn correlated_streams(s1: f64, s2: f64, rho: f64, n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = keyed_rng(seed, "correlated-streams");
    let c = (1.0 - rho * rho).max(0.0).sqrt();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut x, mut y) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        for _ in 0..dim {
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            x.push(s1 * u);
            y.push(s2 * (rho * u + c * v));
        }
        a.push(x);
        b.push(y);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_variance() {
        let s = [GradientSample { values: vec![0.0], frozen: BTreeSet::new() }, GradientSample {
            values: vec![2.0],
            frozen: BTreeSet::new(),
        }];
        assert_eq!(total_variance(&s).unwrap(), 2.0);
        assert!(total_variance(&s[..1]).is_err());
    }

    #[test]
    fn lambda_star_plug_ins() {
        assert_eq!(lambda_star(1.0, 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(lambda_star(2.0, 1.0, 0.5).unwrap(), 1.0);
        assert_eq!(lambda_star(3.0, 3.0, 0.3).unwrap(), 0.5);
        assert_eq!(min_variance(1.0, 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(min_variance(2.0, 1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(lambda_star(1.0, 1.0, 1.0), Err(CoreError::Degenerate(_))));
    }

    #[test]
    fn self_correlation_is_one() {
        let (a, _) = correlated_streams(1.0, 1.0, 0.0, 50, 4, 1);
        let c = correlation(&as_slices(&a), &as_slices(&a)).unwrap();
        assert!((c.rho - 1.0).abs() < 1e-10);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 / v).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_stream_rejected() {
        assert!(parse_streams(&["noise", "time"]).is_ok());
        assert!(parse_streams(&["nois"]).is_err());
    }
}
