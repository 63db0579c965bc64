//! Sample-quality metrics: sliced Wasserstein distance, mode coverage and an
//! embedding-space MMD against a fixed held-out set.

use diffgraph::Tensor;
use rand::Rng;

use crate::diffusion::{GaussianMixture, TargetDistribution};
use crate::embed::{EmbeddingEnsemble, EnsembleSpec};
use crate::error::{CoreError, Result};
use crate::kernel::{median_heuristic, BandwidthSet};
use crate::rng::{keyed_rng, normal_tensor, normal_vec};

/// 2-Wasserstein distance between two 1-D empirical measures with equal
/// weights per sample (quantile coupling). Inputs must be sorted.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    // walk the merged quantile breakpoints i/n and j/m
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Mean over `n_projections` seeded unit directions of the 1-D W₂ distance
/// between the projected samples.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.row_len() != b.row_len() {
        return Err(CoreError::invalid(
            "sliced_wasserstein",
            format!("dimensions differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(CoreError::Empty("sliced_wasserstein"));
    }
    if n_projections == 0 {
        return Err(CoreError::invalid("sliced_wasserstein", "need at least one projection"));
    }
    let d = a.row_len();
    let mut rng = keyed_rng(seed, "sliced-wasserstein");
    let project = |x: &Tensor, u: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = (0..x.rows())
            .map(|i| x.row(i).iter().zip(u).map(|(a, b)| a * b).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut u = normal_vec(&mut rng, d);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            u = vec![0.0; d];
            u[0] = 1.0;
        } else {
            u.iter_mut().for_each(|v| *v /= norm);
        }
        total += wasserstein_1d_sorted(&project(a, &u), &project(b, &u));
    }
    Ok(total / n_projections as f64)
}

/// Fraction of mixture components with at least one sample within
/// `radius_multiplier` component standard deviations of their mean.
pub fn mode_coverage(samples: &Tensor, mixture: &GaussianMixture, radius_multiplier: f64) -> f64 {
    let r2 = (radius_multiplier * mixture.std()).powi(2);
    let hit = mixture
        .means()
        .iter()
        .filter(|mu| {
            (0..samples.rows()).any(|i| {
                let x = samples.row(i);
                (x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2) <= r2
            })
        })
        .count();
    hit as f64 / mixture.len() as f64
}

/// Bandwidth-averaged kernel mean `mean_ij k(x_i, y_j)` from squared distances.
/// Uses `k_{s/2} = k_s^4` along exact factor-2 grids to avoid repeated `exp`.
fn kernel_mean(d2: &Tensor, bw: &BandwidthSet) -> f64 {
    let s = bw.sigmas();
    let ratio2 = s.windows(2).all(|w| w[1] == 2.0 * w[0]);
    let mut total = 0.0;
    if ratio2 {
        let c = -0.5 / (s[s.len() - 1] * s[s.len() - 1]);
        for &d in d2.data() {
            let mut k = (c * d).exp();
            total += k;
            for _ in 1..s.len() {
                k = (k * k) * (k * k);
                total += k;
            }
        }
    } else {
        for &sig in s {
            let c = -0.5 / (sig * sig);
            total += d2.data().iter().map(|&d| (c * d).exp()).sum::<f64>();
        }
    }
    total / (d2.numel() as f64 * s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub eval_mmd: f64,
    pub sliced_wasserstein: f64,
    /// `NaN` for targets without mixture structure.
    pub mode_coverage: f64,
}

/// One line of a training history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eval_mmd: f64,
    pub sliced_wasserstein: f64,
    pub mode_coverage: f64,
    /// Cumulative training time; 0 unless timing is recorded.
    pub wall_ms: f64,
}

/// Fixed evaluation protocol: a held-out real set, an embedding ensemble with
/// its own seeds, and bandwidths calibrated once on the held-out embeddings.
#[derive(Clone, Debug)]
pub struct Evaluator {
    ensemble: EmbeddingEnsemble,
    bandwidths: Vec<BandwidthSet>,
    heldout: Tensor,
    heldout_self: Vec<f64>,
    heldout_emb: Vec<Tensor>,
    latents: Tensor,
    mixture: Option<GaussianMixture>,
    n_projections: usize,
    seed: u64,
}

pub const EVAL_SAMPLES: usize = 1000;
pub const COVERAGE_RADIUS: f64 = 3.0;

impl Evaluator {
    pub fn new(target: &TargetDistribution, seed: u64, n: usize) -> Result<Self> {
        let ensemble = EnsembleSpec::paired(1, crate::rng::derive_seed(seed, &[0xE7A1])).build()?;
        let mut rng = keyed_rng(seed, "eval-heldout");
        let heldout = target.sample(&mut rng, n);
        let calib = target.sample(&mut rng, n.min(500));
        let mut bandwidths = Vec::new();
        let mut heldout_emb = Vec::new();
        let mut heldout_self = Vec::new();
        for net in ensemble.networks() {
            let e = net.embed(&calib)?;
            let bw = BandwidthSet::geometric(median_heuristic(&e, &e.gather_rows(&[]))?, -2, 2)?;
            let h = net.embed(&heldout)?;
            heldout_self.push(kernel_mean(&diffgraph::pairwise_sq_dists(&h, &h)?, &bw));
            heldout_emb.push(h);
            bandwidths.push(bw);
        }
        let latents = normal_tensor(&mut keyed_rng(seed, "eval-latents"), &[n, target.dim()]);
        Ok(Self {
            ensemble,
            bandwidths,
            heldout,
            heldout_self,
            heldout_emb,
            latents,
            mixture: target.as_mixture().cloned(),
            n_projections: 64,
            seed,
        })
    }

    /// Fixed generator inputs used for every evaluation.
    pub fn latents(&self) -> &Tensor {
        &self.latents
    }

    pub fn heldout(&self) -> &Tensor {
        &self.heldout
    }

    pub fn ensemble(&self) -> &EmbeddingEnsemble {
        &self.ensemble
    }

    /// Mean over evaluation networks of the biased MMD² to the held-out set.
    pub fn eval_mmd(&self, samples: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for (k, net) in self.ensemble.networks().iter().enumerate() {
            let e = net.embed(samples)?;
            let h = &self.heldout_emb[k];
            let bw = &self.bandwidths[k];
            let xy = kernel_mean(&diffgraph::pairwise_sq_dists(h, &e)?, bw);
            let yy = kernel_mean(&diffgraph::pairwise_sq_dists(&e, &e)?, bw);
            total += (self.heldout_self[k] - 2.0 * xy + yy).max(0.0);
        }
        Ok(total / self.ensemble.len() as f64)
    }

    pub fn evaluate(&self, samples: &Tensor) -> Result<EvalMetrics> {
        Ok(EvalMetrics {
            eval_mmd: self.eval_mmd(samples)?,
            sliced_wasserstein: sliced_wasserstein(samples, &self.heldout, self.n_projections, self.seed)?,
            mode_coverage: self
                .mixture
                .as_ref()
                .map_or(f64::NAN, |m| mode_coverage(samples, m, COVERAGE_RADIUS)),
        })
    }
}

/// Uniform random subset of rows, for quick metric estimates.
pub fn subsample<R: Rng>(x: &Tensor, n: usize, rng: &mut R) -> Tensor {
    let idx: Vec<usize> = rand::seq::index::sample(rng, x.rows(), n.min(x.rows())).into_vec();
    x.gather_rows(&idx)
}
