//! Variance-exploding diffusion on small analytic targets.
//!
//! `x_t = alpha(t) x_0 + sigma(t) eps` with `alpha = 1`, `sigma = t`. Score
//! networks are MLPs on `[c_in(t) x, sin(k ln t), cos(k ln t)]` whose raw
//! output `F` is read as `score = F / sigma(t)`.

use std::f64::consts::PI;

use diffgraph::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};

use crate::error::{CoreError, Result};
use crate::nn::{Mlp, Optimizer};
use crate::rng::{keyed_rng, normal_tensor, normal_vec};

/// Per-sample loss weight `w(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// `w = sigma²`: noise-prediction weighting.
    Variance,
    /// `w = 1 / sigma²`.
    InverseVariance,
    Unit,
}

impl std::str::FromStr for Weighting {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" | "sigma2" => Ok(Weighting::Variance),
            "inverse_variance" | "inv_sigma2" => Ok(Weighting::InverseVariance),
            "unit" => Ok(Weighting::Unit),
            _ => Err(CoreError::invalid("weighting", format!("unknown weighting `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: Weighting,
    /// Per-coordinate standard deviation of the data; scales the sampler prior
    /// and the network input.
    pub data_std: f64,
    /// Per-coordinate data mean the sampler prior is centred on; empty means zero.
    pub data_mean: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 3.0,
            weighting: Weighting::Variance,
            data_std: 1.0,
            data_mean: Vec::new(),
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64, t_max: f64, weighting: Weighting, data_std: f64) -> Result<Self> {
        if !(t_min >= 0.0 && t_max > t_min && t_max.is_finite()) {
            return Err(CoreError::invalid("schedule", format!("need 0 <= t_min < t_max, got [{t_min}, {t_max}]")));
        }
        if !(data_std > 0.0) {
            return Err(CoreError::invalid("schedule", "data_std must be positive"));
        }
        Ok(Self {
            t_min,
            t_max,
            weighting,
            data_std,
            data_mean: Vec::new(),
        })
    }

    /// Default range and weighting with the data scale and mean taken from the target.
    pub fn for_target(dist: &TargetDistribution) -> Self {
        Self {
            data_std: dist.data_std(),
            data_mean: dist.data_mean(),
            ..Self::default()
        }
    }

    pub fn alpha(&self, _t: f64) -> f64 {
        1.0
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn weight(&self, t: f64) -> f64 {
        let s2 = self.sigma(t).powi(2);
        match self.weighting {
            Weighting::Variance => s2,
            Weighting::InverseVariance => 1.0 / s2,
            Weighting::Unit => 1.0,
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(CoreError::invalid(
                "schedule",
                format!("time {t} outside [{}, {}]", self.t_min, self.t_max),
            ))
        }
    }

    /// Log-uniform times on `[t_min, t_max]`.
    pub fn sample_times<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let lo = self.t_min.max(1e-12).ln();
        let hi = self.t_max.ln();
        (0..n).map(|_| (lo + rng.gen::<f64>() * (hi - lo)).exp()).collect()
    }

    /// Standard deviation of the marginal at `t_max`; the sampler prior.
    pub fn prior_std(&self) -> f64 {
        let a = self.alpha(self.t_max) * self.data_std;
        (a * a + self.sigma(self.t_max).powi(2)).sqrt()
    }

    fn c_in(&self, t: f64) -> f64 {
        let a = self.alpha(t) * self.data_std;
        1.0 / (a * a + self.sigma(t).powi(2)).sqrt()
    }
}

/// Isotropic 2-D Gaussian mixture with a shared component standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    means: Vec<[f64; 2]>,
    std: f64,
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<[f64; 2]>, std: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(CoreError::invalid("mixture", "need one weight per component"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::invalid("mixture", format!("weights must be >= 0 and sum to 1 (sum {total})")));
        }
        if !(std >= 0.0) {
            return Err(CoreError::invalid("mixture", "component std must be >= 0"));
        }
        Ok(Self { means, std, weights })
    }

    /// `k` equally weighted components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, std, vec![1.0 / k as f64; k])
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Tensor {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let k = pick.sample(rng);
            let e = normal_vec(rng, 2);
            data.push(self.means[k][0] + self.std * e[0]);
            data.push(self.means[k][1] + self.std * e[1]);
        }
        Tensor::new(&[n, 2], data).unwrap()
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            m[0] += w * mu[0];
            m[1] += w * mu[1];
        }
        m
    }

    /// Root mean per-coordinate second moment about the mixture mean.
    pub fn data_std(&self) -> f64 {
        let m = self.mean();
        let spread: f64 = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| w * ((mu[0] - m[0]).powi(2) + (mu[1] - m[1]).powi(2)))
            .sum();
        (spread / 2.0 + self.std * self.std).sqrt()
    }

    fn noisy_var(&self, sched: &NoiseSchedule, t: f64) -> f64 {
        let a = sched.alpha(t);
        a * a * self.std * self.std + sched.sigma(t).powi(2)
    }

    /// `log p_t(x)` of the noised mixture.
    pub fn log_density(&self, x: [f64; 2], t: f64, sched: &NoiseSchedule) -> f64 {
        let v = self.noisy_var(sched, t);
        let a = sched.alpha(t);
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let d2 = (x[0] - a * mu[0]).powi(2) + (x[1] - a * mu[1]).powi(2);
                w.ln() - d2 / (2.0 * v) - (2.0 * PI * v).ln()
            })
            .collect();
        log_sum_exp(&logs)
    }

    fn score_at(&self, x: [f64; 2], t: f64, sched: &NoiseSchedule) -> [f64; 2] {
        let v = self.noisy_var(sched, t);
        let a = sched.alpha(t);
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let d2 = (x[0] - a * mu[0]).powi(2) + (x[1] - a * mu[1]).powi(2);
                w.ln() - d2 / (2.0 * v)
            })
            .collect();
        let lse = log_sum_exp(&logs);
        let mut s = [0.0; 2];
        for (mu, l) in self.means.iter().zip(&logs) {
            let r = (l - lse).exp();
            s[0] -= r * (x[0] - a * mu[0]) / v;
            s[1] -= r * (x[1] - a * mu[1]) / v;
        }
        s
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Seeded family of `side x side` images: stripes, checkerboards and blobs
/// with random frequency, phase and amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralImages {
    pub side: usize,
}

impl ProceduralImages {
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Tensor {
        let s = self.side;
        let mut data = Vec::with_capacity(n * s * s);
        for _ in 0..n {
            let kind = rng.gen_range(0..4);
            let freq = rng.gen_range(1.0..3.0) * 2.0 * PI / s as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.5..1.0);
            let (cy, cx) = (rng.gen_range(1.0..s as f64 - 1.0), rng.gen_range(1.0..s as f64 - 1.0));
            for i in 0..s {
                for j in 0..s {
                    let (y, x) = (i as f64, j as f64);
                    let v = match kind {
                        0 => (freq * y + phase).sin(),
                        1 => (freq * x + phase).sin(),
                        2 => (freq * x + phase).sin() * (freq * y + phase).sin(),
                        _ => {
                            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                            2.0 * (-r2 / (s as f64 / 2.0)).exp() - 0.5
                        }
                    };
                    data.push(amp * v);
                }
            }
        }
        Tensor::new(&[n, s * s], data).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetDistribution {
    GaussianMixture2D(GaussianMixture),
    ProceduralImages8x8(ProceduralImages),
}

impl TargetDistribution {
    /// Eight components on a radius-4 circle, component std 0.3.
    pub fn default_gmm() -> Self {
        TargetDistribution::GaussianMixture2D(GaussianMixture::ring(8, 4.0, 0.3).unwrap())
    }

    pub fn images8() -> Self {
        TargetDistribution::ProceduralImages8x8(ProceduralImages { side: 8 })
    }

    /// Flattened sample dimension.
    pub fn dim(&self) -> usize {
        match self {
            TargetDistribution::GaussianMixture2D(_) => 2,
            TargetDistribution::ProceduralImages8x8(p) => p.side * p.side,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Tensor {
        match self {
            TargetDistribution::GaussianMixture2D(m) => m.sample(rng, n),
            TargetDistribution::ProceduralImages8x8(p) => p.sample(rng, n),
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            TargetDistribution::GaussianMixture2D(m) => Some(m),
            _ => None,
        }
    }

    /// Per-coordinate mean; the image family is treated as centred.
    pub fn data_mean(&self) -> Vec<f64> {
        match self {
            TargetDistribution::GaussianMixture2D(m) => m.mean().to_vec(),
            TargetDistribution::ProceduralImages8x8(_) => vec![0.0; self.dim()],
        }
    }

    pub fn data_std(&self) -> f64 {
        match self {
            TargetDistribution::GaussianMixture2D(m) => m.data_std(),
            TargetDistribution::ProceduralImages8x8(_) => {
                let x = self.sample(&mut keyed_rng(0, "data-std"), 4096);
                (x.sq_norm() / x.numel() as f64).sqrt()
            }
        }
    }
}

fn check_times(op: &'static str, x: &Tensor, t: &[f64]) -> Result<()> {
    if x.rank() != 2 || x.rows() != t.len() {
        return Err(CoreError::invalid(op, format!("{} times for batch {:?}", t.len(), x.shape())));
    }
    Ok(())
}

/// `alpha(t) x0 + sigma(t) eps`, row by row.
pub fn forward_diffuse(x0: &Tensor, t: &[f64], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_times("forward_diffuse", x0, t)?;
    if x0.shape() != eps.shape() {
        return Err(CoreError::invalid(
            "forward_diffuse",
            format!("x0 {:?} and eps {:?} differ", x0.shape(), eps.shape()),
        ));
    }
    for &ti in t {
        sched.check_time(ti)?;
    }
    let d = x0.row_len();
    let mut out = x0.clone();
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let (a, s) = (sched.alpha(t[i]), sched.sigma(t[i]));
        for (o, e) in row.iter_mut().zip(eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Exact score of the noised mixture, `∇ log p_t(x_t)`.
pub fn analytic_score(
    dist: &TargetDistribution,
    x: &Tensor,
    t: &[f64],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let m = dist
        .as_mixture()
        .ok_or_else(|| CoreError::invalid("analytic_score", "target is not a Gaussian mixture"))?;
    check_times("analytic_score", x, t)?;
    if x.row_len() != 2 {
        return Err(CoreError::invalid("analytic_score", format!("expected N x 2, got {:?}", x.shape())));
    }
    let mut out = Vec::with_capacity(x.numel());
    for (i, &ti) in t.iter().enumerate() {
        let r = x.row(i);
        out.extend_from_slice(&m.score_at([r[0], r[1]], ti, sched));
    }
    Ok(Tensor::new(x.shape(), out)?)
}

const N_FREQ: usize = 8;

/// MLP score model `s(x, t)`.
#[derive(Clone, Debug)]
pub struct ScoreNetwork {
    params: ParameterSet,
    mlp: Mlp,
    dim: usize,
}

impl ScoreNetwork {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![dim + 2 * N_FREQ];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let mut params = ParameterSet::new();
        let mlp = Mlp::build(&mut params, "score", &dims, &mut keyed_rng(seed, "score-init"), true)?;
        Ok(Self { params, mlp, dim })
    }

    pub fn from_params(params: ParameterSet) -> Result<Self> {
        let mlp = Mlp::attach(&params, "score")?;
        let dim = mlp.out_dim();
        if mlp.in_dim() != dim + 2 * N_FREQ {
            return Err(CoreError::invalid("score network", "input width does not match output"));
        }
        Ok(Self { params, mlp, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(trainable);
    }

    /// Score on the graph. `vars` is the binding of [`Self::params`].
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        t: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != t.len() {
            return Err(CoreError::invalid(
                "score network",
                format!("input {shape:?} with {} times, expected N x {}", t.len(), self.dim),
            ));
        }
        let n = t.len();
        let h = time_features(g, x, t, sched)?;
        let f = self.mlp.forward(g, vars, h)?;
        let inv = g.constant(Tensor::new(&[n], t.iter().map(|&ti| 1.0 / sched.sigma(ti)).collect())?);
        Ok(g.scale_rows(f, inv)?)
    }

    pub fn eval(&self, x: &Tensor, t: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let xv = g.constant(x.clone());
        let s = self.forward(&mut g, b.vars(), xv, t, sched)?;
        Ok(g.value(s).clone())
    }
}

/// `[c_in(t) x, sin(k ln t), cos(k ln t)]` for `k = 1..=8`; width `dim + 16`.
pub fn time_features(g: &mut Graph, x: Var, t: &[f64], sched: &NoiseSchedule) -> Result<Var> {
    let n = t.len();
    let cin = g.constant(Tensor::new(&[n], t.iter().map(|&ti| sched.c_in(ti)).collect())?);
    let xs = g.scale_rows(x, cin)?;
    let mut emb = Vec::with_capacity(n * 2 * N_FREQ);
    for &ti in t {
        let l = ti.ln();
        emb.extend((1..=N_FREQ).map(|k| (k as f64 * l).sin()));
        emb.extend((1..=N_FREQ).map(|k| (k as f64 * l).cos()));
    }
    let emb = g.constant(Tensor::new(&[n, 2 * N_FREQ], emb)?);
    Ok(g.concat(&[xs, emb], 1)?)
}

/// Width of the time embedding appended by [`time_features`].
pub const TIME_FEATURES: usize = 2 * N_FREQ;

/// Anything that can report a score for a batch at per-sample times.
pub trait ScoreFn {
    fn score(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// Exact mixture score under a schedule.
pub struct AnalyticScore<'a> {
    pub dist: &'a TargetDistribution,
    pub sched: &'a NoiseSchedule,
}

impl ScoreFn for AnalyticScore<'_> {
    fn score(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        analytic_score(self.dist, x, t, self.sched)
    }
}

/// A network paired with the schedule it was trained under.
pub struct NetScore<'a> {
    pub net: &'a ScoreNetwork,
    pub sched: &'a NoiseSchedule,
}

impl ScoreFn for NetScore<'_> {
    fn score(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.eval(x, t, self.sched)
    }
}

/// `mean_i w(t_i) ‖s(x_t,i) + eps_i / sigma(t_i)‖²` with `x_t = alpha x0 + sigma eps`.
pub fn dsm_loss_graph(
    g: &mut Graph,
    net: &ScoreNetwork,
    vars: &[Var],
    x0: &Tensor,
    t: &[f64],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    if x0.rows() == 0 {
        return Err(CoreError::Empty("dsm_loss"));
    }
    if let Some(&ti) = t.iter().find(|&&ti| !(sched.sigma(ti) > 0.0)) {
        return Err(CoreError::invalid("dsm_loss", format!("sigma({ti}) = 0; t_min must keep sigma positive")));
    }
    let xt = forward_diffuse(x0, t, eps, sched)?;
    let d = x0.row_len();
    let mut target = eps.clone();
    for (i, row) in target.data_mut().chunks_mut(d).enumerate() {
        let s = sched.sigma(t[i]);
        for v in row {
            *v = -*v / s;
        }
    }
    let xv = g.constant(xt);
    let s = net.forward(g, vars, xv, t, sched)?;
    let tv = g.constant(target);
    let diff = g.sub(s, tv)?;
    let sq = g.square(diff);
    let per = g.sum_axis(sq, 1)?;
    let w = g.constant(Tensor::new(&[t.len()], t.iter().map(|&ti| sched.weight(ti)).collect())?);
    let weighted = g.mul(per, w)?;
    Ok(g.mean(weighted))
}

/// Monte Carlo DSM loss value with `(t, eps)` drawn from `rng`.
pub fn dsm_loss<R: Rng>(net: &ScoreNetwork, x0: &Tensor, sched: &NoiseSchedule, rng: &mut R) -> Result<f64> {
    let t = sched.sample_times(rng, x0.rows());
    let eps = normal_tensor(rng, x0.shape());
    let mut g = Graph::new();
    let b = g.bind_frozen(net.params());
    let l = dsm_loss_graph(&mut g, net, b.vars(), x0, &t, &eps, sched)?;
    Ok(g.value(l).item()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Certification threshold on the mean squared score error.
    pub cert_tol: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 128,
            lr: 2e-3,
            hidden: vec![128, 128, 128],
            seed: 0,
            cert_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub net: ScoreNetwork,
    /// Mean squared score error against the closed form, when the target has one.
    pub cert_error: Option<f64>,
    pub certified: bool,
    pub final_loss: f64,
}

/// Times at which certification compares against the exact score.
pub const CERT_TIMES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
const CERT_SAMPLES: usize = 2000;

/// Mean over [`CERT_TIMES`] of `E ‖s(x_t) − s*(x_t)‖²`, with `x_t` held-out draws from `p_t`.
pub fn certify(net: &ScoreNetwork, dist: &TargetDistribution, sched: &NoiseSchedule) -> Result<f64> {
    let mut rng = keyed_rng(0xCE27, "certification");
    let mut total = 0.0;
    for &tv in &CERT_TIMES {
        let x0 = dist.sample(&mut rng, CERT_SAMPLES);
        let eps = normal_tensor(&mut rng, x0.shape());
        let t = vec![tv; CERT_SAMPLES];
        let xt = forward_diffuse(&x0, &t, &eps, sched)?;
        let exact = analytic_score(dist, &xt, &t, sched)?;
        let approx = net.eval(&xt, &t, sched)?;
        total += approx.zip_map(&exact, |a, b| (a - b) * (a - b))?.sum() / CERT_SAMPLES as f64;
    }
    Ok(total / CERT_TIMES.len() as f64)
}

/// Train a score network by DSM with Adam and a cosine learning-rate decay.
pub fn train_teacher(dist: &TargetDistribution, sched: &NoiseSchedule, cfg: &TeacherConfig) -> Result<Teacher> {
    let mut net = ScoreNetwork::new(dist.dim(), &cfg.hidden, cfg.seed)?;
    let mut opt = Optimizer::adam(cfg.lr, 0.9, 0.999);
    let mut rng = keyed_rng(cfg.seed, "teacher-train");
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        opt.lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / cfg.steps as f64).cos());
        let x0 = dist.sample(&mut rng, cfg.batch);
        let t = sched.sample_times(&mut rng, cfg.batch);
        let eps = normal_tensor(&mut rng, x0.shape());
        let mut g = Graph::new();
        let b = g.bind(net.params());
        let l = dsm_loss_graph(&mut g, &net, b.vars(), &x0, &t, &eps, sched)?;
        final_loss = g.value(l).item()?;
        if !final_loss.is_finite() {
            return Err(CoreError::NonFinite {
                step,
                detail: format!("teacher dsm loss {final_loss}"),
            });
        }
        let grads = g.backward(l)?.param_grads(&b, net.params());
        opt.step(net.params_mut(), &grads)?;
    }
    let cert_error = match dist.as_mixture() {
        Some(_) => Some(certify(&net, dist, sched)?),
        None => None,
    };
    let certified = cert_error.is_some_and(|e| e <= cfg.cert_tol);
    net.set_trainable(false);
    Ok(Teacher {
        net,
        cert_error,
        certified,
        final_loss,
    })
}

/// `t_i` from `t_max` down to `t_min` with the `rho = 7` spacing.
pub fn time_grid(sched: &NoiseSchedule, n_steps: usize) -> Vec<f64> {
    let rho = 7.0;
    let (a, b) = (sched.t_max.powf(1.0 / rho), sched.t_min.powf(1.0 / rho));
    (0..=n_steps)
        .map(|i| (a + i as f64 / n_steps as f64 * (b - a)).powf(rho))
        .collect()
}

/// Probability-flow ODE `dx/dt = −sigma'(t) sigma(t) s(x, t)` integrated with
/// Heun's method from `t_max` to `t_min`, starting at `x = data_mean + prior_std * z`.
pub fn sample_ode(score: &dyn ScoreFn, sched: &NoiseSchedule, n_steps: usize, z: &Tensor) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(CoreError::invalid("sample_ode", "n_steps must be >= 1"));
    }
    let n = z.rows();
    let d = z.row_len();
    if !sched.data_mean.is_empty() && sched.data_mean.len() != d {
        return Err(CoreError::invalid(
            "sample_ode",
            format!("data mean has {} coordinates, samples have {d}", sched.data_mean.len()),
        ));
    }
    let ts = time_grid(sched, n_steps);
    let prior = sched.prior_std();
    let mut x = z.clone();
    for row in x.data_mut().chunks_mut(d.max(1)) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sched.data_mean.get(j).copied().unwrap_or(0.0) + prior * *v;
        }
    }
    // for sigma = t the drift is -t * s(x, t)
    let drift = |x: &Tensor, t: f64| -> Result<Tensor> {
        let s = score.score(x, &vec![t; n])?;
        Ok(s.map(|v| -t * v))
    };
    for w in ts.windows(2) {
        let (t, tn) = (w[0], w[1]);
        let h = tn - t;
        let d = drift(&x, t)?;
        let xe = x.zip_map(&d, |a, b| a + h * b)?;
        let dn = drift(&xe, tn)?;
        let mut next = x.clone();
        for ((o, a), b) in next.data_mut().iter_mut().zip(d.data()).zip(dn.data()) {
            *o += 0.5 * h * (a + b);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: [f64; 2], std: f64) -> TargetDistribution {
        TargetDistribution::GaussianMixture2D(GaussianMixture::new(vec![mean], std, vec![1.0]).unwrap())
    }

    #[test]
    fn forward_diffuse_degenerate_cases() {
        let sched = NoiseSchedule::new(0.0, 3.0, Weighting::Variance, 1.0).unwrap();
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let eps = Tensor::from_rows(&[vec![0.3, 0.3], vec![-1.0, 2.0]]).unwrap();
        assert!(forward_diffuse(&x0, &[0.0, 0.0], &eps, &sched).unwrap().bit_eq(&x0));
        let z = Tensor::zeros(&[2, 2]);
        let out = forward_diffuse(&z, &[0.5, 2.0], &eps, &sched).unwrap();
        assert_eq!(out.data(), &[0.15, 0.15, -2.0, 4.0]);
        assert!(forward_diffuse(&x0, &[0.5, 3.5], &eps, &sched).is_err());
    }

    #[test]
    fn score_closed_forms() {
        let sched = NoiseSchedule::default();
        let d = single([1.0, -1.0], 0.0);
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(analytic_score(&d, &x, &[0.7], &sched).unwrap().data(), &[0.0, 0.0]);
        let d = single([0.0, 0.0], 1.0);
        let x = Tensor::from_rows(&[vec![0.8, -1.5]]).unwrap();
        let s = analytic_score(&d, &x, &[0.5], &sched).unwrap();
        assert!((s.data()[0] + 0.8 / 1.25).abs() < 1e-15);
        assert!((s.data()[1] - 1.5 / 1.25).abs() < 1e-15);
        assert!(analytic_score(&TargetDistribution::images8(), &x, &[0.5], &sched).is_err());
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![[0.0, 0.0]; 2], 0.1, vec![0.3, 0.3]).is_err());
        assert!(GaussianMixture::new(vec![[0.0, 0.0]], -1.0, vec![1.0]).is_err());
        let m = GaussianMixture::ring(8, 4.0, 0.3).unwrap();
        assert!((m.data_std() - 8.09f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_output_dsm_is_plug_in() {
        let sched = NoiseSchedule::new(0.02, 3.0, Weighting::InverseVariance, 1.0).unwrap();
        let mut net = ScoreNetwork::new(2, &[4], 0).unwrap();
        for (_, p) in net.params_mut().iter_mut() {
            p.tensor.scale_assign(0.0);
        }
        let x0 = Tensor::from_rows(&[vec![0.2, 0.1]]).unwrap();
        let eps = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let t = 0.5;
        let mut g = Graph::new();
        let b = g.bind(net.params());
        let l = dsm_loss_graph(&mut g, &net, b.vars(), &x0, &[t], &eps, &sched).unwrap();
        let expect = (1.0 / (t * t)) * (1.0 + 4.0) / (t * t);
        assert!((g.value(l).item().unwrap() - expect).abs() < 1e-12);
        let sched0 = NoiseSchedule::new(0.0, 3.0, Weighting::Unit, 1.0).unwrap();
        assert!(dsm_loss_graph(&mut g, &net, b.vars(), &x0, &[0.0], &eps, &sched0).is_err());
    }

    #[test]
    fn time_grid_endpoints() {
        let sched = NoiseSchedule::default();
        let ts = time_grid(&sched, 10);
        assert_eq!(ts.len(), 11);
        assert!((ts[0] - 3.0).abs() < 1e-12 && (ts[10] - 0.02).abs() < 1e-12);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn one_step_sampler_shape() {
        let d = TargetDistribution::default_gmm();
        let sched = NoiseSchedule::for_target(&d);
        let z = normal_tensor(&mut keyed_rng(1, "z"), &[5, 2]);
        let out = sample_ode(&AnalyticScore { dist: &d, sched: &sched }, &sched, 1, &z).unwrap();
        assert_eq!(out.shape(), &[5, 2]);
        assert!(sample_ode(&AnalyticScore { dist: &d, sched: &sched }, &sched, 0, &z).is_err());
    }

    #[test]
    fn untrained_teacher_fails_certification() {
        let d = TargetDistribution::default_gmm();
        let sched = NoiseSchedule::for_target(&d);
        let cfg = TeacherConfig {
            steps: 0,
            hidden: vec![16],
            ..TeacherConfig::default()
        };
        let t = train_teacher(&d, &sched, &cfg).unwrap();
        assert!(!t.certified);
        assert!(t.cert_error.unwrap() > 1.0);
    }

    #[test]
    fn procedural_images_shape() {
        let d = TargetDistribution::images8();
        let x = d.sample(&mut keyed_rng(0, "img"), 3);
        assert_eq!(x.shape(), &[3, 64]);
        assert!(x.all_finite());
        assert!(d.data_std() > 0.1);
    }
}
