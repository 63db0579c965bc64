//! One-step generator distillation.
//!
//! Each step refreshes the fake score on current generator samples, forms the
//! distribution-matching direction `w(t) alpha(t) (s_fake − s_teacher)` at the
//! diffused samples, optionally adds an auxiliary objective, and updates the
//! generator. Every loss term is reduced to an upstream gradient on the
//! generated batch and pulled back through the generator separately, so the
//! applied gradient is literally the weighted sum of the component gradients.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use diffgraph::{flatten_grads, Graph, ParamGrads, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::diffusion::{
    forward_diffuse, dsm_loss_graph, sample_ode, time_features, NetScore, NoiseSchedule, ScoreNetwork,
    TargetDistribution, TIME_FEATURES,
};
use crate::embed::{embedding_loss_grad, Bandwidths, EmbeddingEnsemble, EnsembleSpec, DEFAULT_LAMBDA};
use crate::error::{CoreError, Result};
use crate::metrics::{EvalMetrics, Evaluator, MetricsRow, EVAL_SAMPLES};
use crate::nn::{Mlp, Optimizer};
use crate::rng::{keyed_rng, normal_tensor, Draw, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingMode {
    /// `L_DM + lambda L_aux`
    Additive,
    /// `(1 − lambda) L_DM + lambda L_aux`
    Convex,
}

impl FromStr for MixingMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(MixingMode::Additive),
            "convex" => Ok(MixingMode::Convex),
            _ => Err(CoreError::invalid("mixing_mode", format!("unknown mixing mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Auxiliary {
    None,
    Embedding,
    Regression,
    Adversarial,
}

impl Auxiliary {
    pub const ALL: [Auxiliary; 4] = [
        Auxiliary::None,
        Auxiliary::Embedding,
        Auxiliary::Regression,
        Auxiliary::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Auxiliary::None => "none",
            Auxiliary::Embedding => "el",
            Auxiliary::Regression => "regression",
            Auxiliary::Adversarial => "adversarial",
        }
    }
}

impl FromStr for Auxiliary {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "dm" => Ok(Auxiliary::None),
            "el" | "embedding" => Ok(Auxiliary::Embedding),
            "regression" | "reg" => Ok(Auxiliary::Regression),
            "adversarial" | "adv" | "gan" => Ok(Auxiliary::Adversarial),
            _ => Err(CoreError::invalid("auxiliary", format!("unknown auxiliary loss `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    /// Weight of the auxiliary term for [`Auxiliary::Embedding`].
    pub lambda_embed: f64,
    pub lambda_reg: f64,
    pub lambda_adv: f64,
    pub mixing: MixingMode,
    pub auxiliary: Auxiliary,
    pub optimizer: OptimizerChoice,
    pub adam_betas: (f64, f64),
    pub lr_gen: f64,
    pub lr_fake: f64,
    pub lr_disc: f64,
    /// Fake-score updates per generator update.
    pub fake_ratio: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub ensemble: EnsembleSpec,
    pub bandwidths: Bandwidths,
    /// Draw fresh embedding networks every step instead of reusing one set.
    pub resample_ensemble: bool,
    pub regression_pairs: usize,
    pub regression_ode_steps: usize,
    /// Where the regression pairs are written; a temporary file when unset.
    pub regression_path: Option<PathBuf>,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Record wall-clock time in the history (makes it run-dependent).
    pub record_time: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            lambda_embed: DEFAULT_LAMBDA,
            lambda_reg: 1.0,
            lambda_adv: 0.1,
            mixing: MixingMode::Additive,
            auxiliary: Auxiliary::None,
            optimizer: OptimizerChoice::Adam,
            adam_betas: (0.0, 0.999),
            lr_gen: 2e-4,
            lr_fake: 1e-3,
            lr_disc: 1e-3,
            fake_ratio: 1,
            gen_hidden: vec![128, 128, 128],
            disc_hidden: vec![128, 128, 128],
            ensemble: EnsembleSpec::paired(1, 0),
            bandwidths: Bandwidths::default(),
            resample_ensemble: false,
            regression_pairs: 4096,
            regression_ode_steps: 32,
            regression_path: None,
            eval_interval: 250,
            eval_samples: EVAL_SAMPLES,
            eval_seed: 4242,
            record_time: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(CoreError::invalid("distill config", "batch must be >= 1"));
        }
        for (name, v) in [
            ("lambda_embed", self.lambda_embed),
            ("lambda_reg", self.lambda_reg),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoreError::invalid("distill config", format!("{name} = {v} must be >= 0")));
            }
        }
        if self.mixing == MixingMode::Convex && self.aux_lambda() > 1.0 {
            return Err(CoreError::invalid(
                "distill config",
                format!("convex mixing needs lambda in [0, 1], got {}", self.aux_lambda()),
            ));
        }
        if self.eval_interval == 0 {
            return Err(CoreError::invalid("distill config", "eval_interval must be >= 1"));
        }
        if self.auxiliary == Auxiliary::Embedding && self.ensemble.members.is_empty() {
            return Err(CoreError::Empty("embedding ensemble"));
        }
        Ok(())
    }

    /// Weight of the configured auxiliary loss.
    pub fn aux_lambda(&self) -> f64 {
        match self.auxiliary {
            Auxiliary::None => 0.0,
            Auxiliary::Embedding => self.lambda_embed,
            Auxiliary::Regression => self.lambda_reg,
            Auxiliary::Adversarial => self.lambda_adv,
        }
    }

    /// `(c_dm, c_aux)` multiplying the component gradients.
    pub fn weights(&self) -> (f64, f64) {
        let l = self.aux_lambda();
        match (self.auxiliary, self.mixing) {
            (Auxiliary::None, _) => (1.0, 0.0),
            (_, MixingMode::Additive) => (1.0, l),
            (_, MixingMode::Convex) => (1.0 - l, l),
        }
    }

    fn optimizer(&self, lr: f64) -> Optimizer {
        match self.optimizer {
            OptimizerChoice::Sgd => Optimizer::sgd(lr),
            OptimizerChoice::Adam => Optimizer::adam(lr, self.adam_betas.0, self.adam_betas.1),
        }
    }
}

/// One-step map `z -> x`.
#[derive(Clone, Debug)]
pub struct Generator {
    params: ParameterSet,
    mlp: Mlp,
}

impl Generator {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let mut params = ParameterSet::new();
        let mlp = Mlp::build(&mut params, "gen", &dims, &mut keyed_rng(seed, "generator-init"), true)?;
        Ok(Self { params, mlp })
    }

    pub fn from_params(params: ParameterSet) -> Result<Self> {
        let mlp = Mlp::attach(&params, "gen")?;
        Ok(Self { params, mlp })
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        self.mlp.forward(g, vars, z)
    }

    pub fn sample(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let zv = g.constant(z.clone());
        let x = self.forward(&mut g, b.vars(), zv)?;
        Ok(g.value(x).clone())
    }

    /// Generated batch and `J^T u` for each upstream gradient `u` on it,
    /// sharing one forward pass.
    pub fn pullback(&self, z: &Tensor, upstreams: &[&Tensor]) -> Result<(Tensor, Vec<ParamGrads>)> {
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let zv = g.constant(z.clone());
        let x = self.forward(&mut g, b.vars(), zv)?;
        let mut out = Vec::with_capacity(upstreams.len());
        for u in upstreams {
            let uv = g.constant((*u).clone());
            let prod = g.mul(x, uv)?;
            let root = g.sum(prod);
            out.push(g.backward(root)?.param_grads(&b, &self.params));
        }
        Ok((g.value(x).clone(), out))
    }
}

/// Logit classifier on diffused samples, conditioned on `t` like a score network.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParameterSet,
    mlp: Mlp,
}

impl Discriminator {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![dim + TIME_FEATURES];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut params = ParameterSet::new();
        let mlp = Mlp::build(&mut params, "disc", &dims, &mut keyed_rng(seed, "disc-init"), true)?;
        Ok(Self { params, mlp })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// `N` logits for `N` samples.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, t: &[f64], sched: &NoiseSchedule) -> Result<Var> {
        let h = time_features(g, x, t, sched)?;
        let l = self.mlp.forward(g, vars, h)?;
        Ok(g.reshape(l, &[t.len()])?)
    }
}

fn scale_rows_by(x: &Tensor, c: &[f64]) -> Tensor {
    let d = x.row_len();
    let mut out = x.clone();
    for (row, ci) in out.data_mut().chunks_mut(d).zip(c) {
        row.iter_mut().for_each(|v| *v *= ci);
    }
    out
}

/// Upstream gradient on the generated batch for the distribution-matching
/// term: row `i` is `w(t_i) alpha(t_i) (s_fake − s_teacher)(x_t,i) / B`. The
/// score difference is a constant; no gradient reaches either score network.
pub fn dm_upstream(
    x: &Tensor,
    teacher: &ScoreNetwork,
    fake: &ScoreNetwork,
    t: &[f64],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let xt = forward_diffuse(x, t, eps, sched)?;
    let sf = fake.eval(&xt, t, sched)?;
    let st = teacher.eval(&xt, t, sched)?;
    let delta = sf.zip_map(&st, |a, b| a - b)?;
    let b = x.rows() as f64;
    let c: Vec<f64> = t.iter().map(|&ti| sched.weight(ti) * sched.alpha(ti) / b).collect();
    Ok(scale_rows_by(&delta, &c))
}

#[derive(Clone, Debug)]
pub struct DmGradient {
    pub grads: ParamGrads,
    pub upstream: Tensor,
    pub x: Tensor,
}

/// Distribution-matching generator gradient with `(t, eps)` drawn from `draw`.
pub fn dm_generator_gradient(
    gen: &Generator,
    teacher: &ScoreNetwork,
    fake: &ScoreNetwork,
    z: &Tensor,
    sched: &NoiseSchedule,
    draw: &Draw,
) -> Result<DmGradient> {
    let t = sched.sample_times(&mut draw.rng(Stream::Time, "dm"), z.rows());
    let eps = normal_tensor(&mut draw.rng(Stream::Noise, "dm"), z.shape());
    let x = gen.sample(z)?;
    let upstream = dm_upstream(&x, teacher, fake, &t, &eps, sched)?;
    let (x, mut g) = gen.pullback(z, &[&upstream])?;
    Ok(DmGradient {
        grads: g.pop().unwrap(),
        upstream,
        x,
    })
}

/// `ratio` DSM steps of the fake score on `x0` (generator held fixed).
/// Returns the mean loss, or 0 when `ratio` is 0.
pub fn update_fake_score(
    fake: &mut ScoreNetwork,
    opt: &mut Optimizer,
    x0: &Tensor,
    sched: &NoiseSchedule,
    ratio: usize,
    draw: &Draw,
) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..ratio {
        let purpose = format!("fake{r}");
        let t = sched.sample_times(&mut draw.rng(Stream::Time, &purpose), x0.rows());
        let eps = normal_tensor(&mut draw.rng(Stream::Noise, &purpose), x0.shape());
        let mut g = Graph::new();
        let b = g.bind(fake.params());
        let l = dsm_loss_graph(&mut g, fake, b.vars(), x0, &t, &eps, sched)?;
        total += g.value(l).item()?;
        let grads = g.backward(l)?.param_grads(&b, fake.params());
        opt.step(fake.params_mut(), &grads)?;
    }
    Ok(if ratio == 0 { 0.0 } else { total / ratio as f64 })
}

/// Pre-generated `(z, y)` pairs from the teacher's ODE sampler.
#[derive(Clone, Debug)]
pub struct RegressionData {
    pub z: Tensor,
    pub y: Tensor,
    pub path: PathBuf,
    pub setup_ms: f64,
}

impl RegressionData {
    /// Integrate the teacher ODE from `n` seeded latents and write the pairs to `path`.
    pub fn generate(
        teacher: &ScoreNetwork,
        sched: &NoiseSchedule,
        n: usize,
        ode_steps: usize,
        seed: u64,
        path: &Path,
    ) -> Result<Self> {
        let start = Instant::now();
        let z = normal_tensor(&mut keyed_rng(seed, "regression-latents"), &[n, teacher.dim()]);
        let y = sample_ode(&NetScore { net: teacher, sched }, sched, ode_steps, &z)?;
        let mut set = ParameterSet::new();
        set.insert("z", z, false)?;
        set.insert("y", y, false)?;
        set.save(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        // read back so training uses exactly what is on disk
        let mut data = Self::load(path)?;
        data.setup_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set = ParameterSet::load(path, false).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let z = set.tensor("z")?.clone();
        let y = set.tensor("y")?.clone();
        if z.rows() == 0 || z.shape() != y.shape() {
            return Err(CoreError::invalid("regression data", "empty or mismatched pairs"));
        }
        Ok(Self {
            z,
            y,
            path: path.to_path_buf(),
            setup_ms: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn batch<R: Rng>(&self, rng: &mut R, b: usize) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.len())).collect();
        (self.z.gather_rows(&idx), self.y.gather_rows(&idx))
    }
}

/// `mean_i ‖G(z_i) − y_i‖²` and its generator gradient.
pub fn regression_loss(gen: &Generator, z: &Tensor, y: &Tensor) -> Result<(f64, ParamGrads)> {
    if z.rows() == 0 {
        return Err(CoreError::Empty("regression_loss"));
    }
    let mut g = Graph::new();
    let b = g.bind(gen.params());
    let zv = g.constant(z.clone());
    let x = gen.forward(&mut g, b.vars(), zv)?;
    let yv = g.constant(y.clone());
    let d = g.sub(x, yv)?;
    let sq = g.square(d);
    let per = g.sum_axis(sq, 1)?;
    let l = g.mean(per);
    let value = g.value(l).item()?;
    Ok((value, g.backward(l)?.param_grads(&b, gen.params())))
}

#[derive(Clone, Debug)]
pub struct AdversarialOutput {
    /// `mean −log D(fake)`
    pub gen_loss: f64,
    /// `mean −log D(real) − log(1 − D(fake))`
    pub disc_loss: f64,
    /// Gradient of `gen_loss` on the generated batch.
    pub gen_upstream: Tensor,
    pub disc_grads: ParamGrads,
}

/// Non-saturating GAN losses on diffused real and generated samples.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss(
    disc: &Discriminator,
    x: &Tensor,
    real: &Tensor,
    t: &[f64],
    eps_fake: &Tensor,
    eps_real: &Tensor,
    sched: &NoiseSchedule,
) -> Result<AdversarialOutput> {
    let n = x.rows();
    let alpha: Vec<f64> = t.iter().map(|&ti| sched.alpha(ti)).collect();
    let noise_f = scale_rows_by(eps_fake, &t.iter().map(|&ti| sched.sigma(ti)).collect::<Vec<_>>());

    // generator side: gradient on x through the frozen discriminator
    let mut g = Graph::new();
    let b = g.bind_frozen(disc.params());
    let xv = g.input(x.clone());
    let av = g.constant(Tensor::new(&[n], alpha)?);
    let xs = g.scale_rows(xv, av)?;
    let nf = g.constant(noise_f);
    let xt = g.add(xs, nf)?;
    let lf = disc.forward(&mut g, b.vars(), xt, t, sched)?;
    let neg = g.neg(lf);
    let sp = g.softplus(neg);
    let gl = g.mean(sp);
    let gen_loss = g.value(gl).item()?;
    let gen_upstream = g.backward(gl)?.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let fake_t = g.value(xt).clone();

    // discriminator side: generated samples are constants
    let real_t = forward_diffuse(real, t, eps_real, sched)?;
    let mut g = Graph::new();
    let b = g.bind(disc.params());
    let rv = g.constant(real_t);
    let fv = g.constant(fake_t);
    let lr = disc.forward(&mut g, b.vars(), rv, t, sched)?;
    let lf = disc.forward(&mut g, b.vars(), fv, t, sched)?;
    let nr = g.neg(lr);
    let a = g.softplus(nr);
    let c = g.softplus(lf);
    let am = g.mean(a);
    let cm = g.mean(c);
    let dl = g.add(am, cm)?;
    let disc_loss = g.value(dl).item()?;
    let disc_grads = g.backward(dl)?.param_grads(&b, disc.params());
    Ok(AdversarialOutput {
        gen_loss,
        disc_loss,
        gen_upstream,
        disc_grads,
    })
}

/// Which generator gradients to form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dm,
    Embed,
    Total,
}

/// Everything a distillation run mutates, plus the frozen pieces it reads.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub gen: Generator,
    pub fake: ScoreNetwork,
    pub teacher: ScoreNetwork,
    pub ensemble: Option<EmbeddingEnsemble>,
    pub disc: Option<Discriminator>,
    pub regression: Option<RegressionData>,
    pub target: TargetDistribution,
    pub sched: NoiseSchedule,
    pub step: usize,
    opt_gen: Optimizer,
    opt_fake: Optimizer,
    opt_disc: Optimizer,
}

impl DistillState {
    /// Fresh generator, fake score initialized from the teacher, and whatever
    /// the configured auxiliary needs (ensemble, discriminator or regression pairs).
    pub fn new(cfg: &DistillConfig, teacher: &ScoreNetwork, target: &TargetDistribution, sched: &NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        let dim = target.dim();
        if teacher.dim() != dim {
            return Err(CoreError::invalid("distill", format!("teacher dim {} vs target dim {dim}", teacher.dim())));
        }
        let gen = Generator::new(dim, &cfg.gen_hidden, cfg.seed)?;
        let mut teacher = teacher.clone();
        teacher.set_trainable(false);
        let mut fake = teacher.clone();
        fake.set_trainable(true);
        // the ensemble is always built so EL can be measured even when it is not trained on
        let ensemble = if cfg.ensemble.members.is_empty() {
            None
        } else {
            Some(cfg.ensemble.build()?)
        };
        let disc = match cfg.auxiliary {
            Auxiliary::Adversarial => Some(Discriminator::new(dim, &cfg.disc_hidden, cfg.seed)?),
            _ => None,
        };
        let regression = match cfg.auxiliary {
            Auxiliary::Regression => {
                let path = cfg.regression_path.clone().unwrap_or_else(|| {
                    std::env::temp_dir().join(format!("el-regression-{}-{}.elp", cfg.seed, std::process::id()))
                });
                Some(RegressionData::generate(
                    &teacher,
                    sched,
                    cfg.regression_pairs,
                    cfg.regression_ode_steps,
                    cfg.seed,
                    &path,
                )?)
            }
            _ => None,
        };
        Ok(Self {
            gen,
            fake,
            teacher,
            ensemble,
            disc,
            regression,
            target: target.clone(),
            sched: sched.clone(),
            step: 0,
            opt_gen: cfg.optimizer(cfg.lr_gen),
            opt_fake: cfg.optimizer(cfg.lr_fake),
            opt_disc: cfg.optimizer(cfg.lr_disc),
        })
    }

    /// Latent batch of draw `draw`.
    pub fn latents(&self, draw: &Draw, b: usize) -> Tensor {
        normal_tensor(&mut draw.rng(Stream::Data, "latent"), &[b, self.target.dim()])
    }

    /// Real minibatch of draw `draw`.
    pub fn real_batch(&self, draw: &Draw, b: usize) -> Tensor {
        self.target.sample(&mut draw.rng(Stream::Data, "real"), b)
    }

    fn ensemble_for(&self, cfg: &DistillConfig, step: u64) -> Result<Option<EmbeddingEnsemble>> {
        if cfg.resample_ensemble {
            Ok(Some(cfg.ensemble.reseeded(step).build()?))
        } else {
            Ok(self.ensemble.clone())
        }
    }

    /// Component gradients at the current parameters for one draw, without
    /// mutating anything.
    pub fn component_gradients(&self, cfg: &DistillConfig, draw: &Draw) -> Result<Components> {
        let b = cfg.batch;
        let z = self.latents(draw, b);
        let x = self.gen.sample(&z)?;
        let t = self.sched.sample_times(&mut draw.rng(Stream::Time, "dm"), b);
        let eps = normal_tensor(&mut draw.rng(Stream::Noise, "dm"), z.shape());
        let dm_up = dm_upstream(&x, &self.teacher, &self.fake, &t, &eps, &self.sched)?;

        let mut upstreams = vec![dm_up];
        let mut embed_loss = 0.0;
        let mut aux_loss = 0.0;
        let mut disc = None;
        let mut reg_grads = None;
        match cfg.auxiliary {
            Auxiliary::None => {}
            Auxiliary::Embedding => {
                let ens = self
                    .ensemble_for(cfg, draw.index(Stream::Data))?
                    .ok_or(CoreError::Empty("embedding ensemble"))?;
                let real = self.real_batch(draw, b);
                let (v, up) = embedding_loss_grad(&real, &x, &ens, &cfg.bandwidths, 1.0)?;
                embed_loss = v;
                aux_loss = v;
                upstreams.push(up);
            }
            Auxiliary::Adversarial => {
                let d = self.disc.as_ref().expect("discriminator built for adversarial runs");
                let real = self.real_batch(draw, b);
                let ta = self.sched.sample_times(&mut draw.rng(Stream::Time, "adv"), b);
                let ef = normal_tensor(&mut draw.rng(Stream::Noise, "adv-fake"), z.shape());
                let er = normal_tensor(&mut draw.rng(Stream::Noise, "adv-real"), z.shape());
                let out = adversarial_loss(d, &x, &real, &ta, &ef, &er, &self.sched)?;
                aux_loss = out.gen_loss;
                upstreams.push(out.gen_upstream.clone());
                disc = Some(out);
            }
            Auxiliary::Regression => {
                let data = self.regression.as_ref().expect("pairs generated for regression runs");
                let (zr, yr) = data.batch(&mut draw.rng(Stream::Data, "pairs"), b);
                let (v, g) = regression_loss(&self.gen, &zr, &yr)?;
                aux_loss = v;
                reg_grads = Some(g);
            }
        }
        let refs: Vec<&Tensor> = upstreams.iter().collect();
        let (_, mut grads) = self.gen.pullback(&z, &refs)?;
        let aux = if grads.len() > 1 { grads.pop() } else { reg_grads };
        let dm = grads.pop().unwrap();
        Ok(Components {
            dm,
            aux,
            embed_loss,
            aux_loss,
            disc,
        })
    }
}

/// Per-loss generator gradients for one draw.
#[derive(Clone, Debug)]
pub struct Components {
    pub dm: ParamGrads,
    pub aux: Option<ParamGrads>,
    pub embed_loss: f64,
    pub aux_loss: f64,
    pub disc: Option<AdversarialOutput>,
}

impl Components {
    /// `c_dm * dm + c_aux * aux`, skipping any term whose weight is exactly zero.
    pub fn combine(&self, c_dm: f64, c_aux: f64) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (name, gd) in &self.dm {
            let mut acc = if c_dm == 0.0 {
                Tensor::zeros(gd.shape())
            } else if c_dm == 1.0 {
                gd.clone()
            } else {
                gd.map(|v| c_dm * v)
            };
            if let (Some(aux), true) = (&self.aux, c_aux != 0.0) {
                let ga = &aux[name];
                for (o, a) in acc.data_mut().iter_mut().zip(ga.data()) {
                    *o += c_aux * a;
                }
            }
            out.insert(name.clone(), acc);
        }
        out
    }

    pub fn select(&self, kind: LossKind, cfg: &DistillConfig) -> ParamGrads {
        match kind {
            LossKind::Dm => self.dm.clone(),
            LossKind::Embed => self.aux.clone().unwrap_or_else(|| self.combine(0.0, 0.0)),
            LossKind::Total => {
                let (a, b) = cfg.weights();
                self.combine(a, b)
            }
        }
    }
}

fn norm(g: &ParamGrads) -> f64 {
    flatten_grads(g).iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub dm_grad_norm: f64,
    pub embed_loss: f64,
    pub aux_loss: f64,
    pub fake_loss: f64,
    pub total_grad_norm: f64,
    pub eval: Option<EvalMetrics>,
}

/// One iteration: fake-score refresh, component gradients, generator update
/// (and discriminator update for adversarial runs).
pub fn distill_step(state: &mut DistillState, cfg: &DistillConfig) -> Result<LossReport> {
    let step = state.step;
    let draw = Draw::new(cfg.seed, step as u64);
    let z = state.latents(&draw, cfg.batch);
    let x0 = state.gen.sample(&z)?;
    let fake_loss = update_fake_score(&mut state.fake, &mut state.opt_fake, &x0, &state.sched, cfg.fake_ratio, &draw)?;
    let comps = state.component_gradients(cfg, &draw)?;
    let (c_dm, c_aux) = cfg.weights();
    let total = comps.combine(c_dm, c_aux);
    let report = LossReport {
        step,
        dm_grad_norm: norm(&comps.dm),
        embed_loss: comps.embed_loss,
        aux_loss: comps.aux_loss,
        fake_loss,
        total_grad_norm: norm(&total),
        eval: None,
    };
    let finite = [report.dm_grad_norm, report.embed_loss, report.aux_loss, report.fake_loss, report.total_grad_norm]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(CoreError::NonFinite {
            step,
            detail: format!(
                "dm_grad_norm={} embed_loss={} aux_loss={} fake_loss={} total_grad_norm={}",
                report.dm_grad_norm, report.embed_loss, report.aux_loss, report.fake_loss, report.total_grad_norm
            ),
        });
    }
    state.opt_gen.step(state.gen.params_mut(), &total)?;
    if let (Some(d), Some(out)) = (state.disc.as_mut(), comps.disc.as_ref()) {
        state.opt_disc.step(d.params_mut(), &out.disc_grads)?;
    }
    state.step += 1;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub gen: Generator,
    pub history: Vec<MetricsRow>,
    pub reports: Vec<LossReport>,
    /// Time spent before the first step (regression pair generation).
    pub setup_ms: f64,
    /// Mean training wall time per step, excluding evaluation.
    pub step_ms: f64,
}

/// Run `cfg.steps` distillation steps, evaluating at step 0, every
/// `eval_interval` steps and at the end.
pub fn train_distill(
    cfg: &DistillConfig,
    teacher: &ScoreNetwork,
    target: &TargetDistribution,
    sched: &NoiseSchedule,
) -> Result<DistillOutcome> {
    train_distill_with(cfg, teacher, target, sched, |_| Ok(()))
}

/// [`train_distill`] with a callback invoked on every metrics row as it is produced.
pub fn train_distill_with(
    cfg: &DistillConfig,
    teacher: &ScoreNetwork,
    target: &TargetDistribution,
    sched: &NoiseSchedule,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<DistillOutcome> {
    let setup = Instant::now();
    let mut state = DistillState::new(cfg, teacher, target, sched)?;
    let setup_ms = setup.elapsed().as_secs_f64() * 1e3;
    let evaluator = Evaluator::new(target, cfg.eval_seed, cfg.eval_samples)?;
    let mut history = Vec::new();
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut train_secs = 0.0;

    let mut evaluate = |state: &DistillState, train_secs: f64, history: &mut Vec<MetricsRow>| -> Result<EvalMetrics> {
        let x = state.gen.sample(evaluator.latents())?;
        let m = evaluator.evaluate(&x)?;
        let row = MetricsRow {
            step: state.step,
            eval_mmd: m.eval_mmd,
            sliced_wasserstein: m.sliced_wasserstein,
            mode_coverage: m.mode_coverage,
            wall_ms: if cfg.record_time { train_secs * 1e3 } else { 0.0 },
        };
        on_row(&row)?;
        history.push(row);
        Ok(m)
    };

    evaluate(&state, 0.0, &mut history)?;
    for _ in 0..cfg.steps {
        let start = Instant::now();
        let mut report = distill_step(&mut state, cfg)?;
        train_secs += start.elapsed().as_secs_f64();
        if state.step % cfg.eval_interval == 0 || state.step == cfg.steps {
            report.eval = Some(evaluate(&state, train_secs, &mut history)?);
        }
        reports.push(report);
    }
    Ok(DistillOutcome {
        gen: state.gen,
        history,
        reports,
        setup_ms,
        step_ms: if cfg.steps == 0 { 0.0 } else { train_secs * 1e3 / cfg.steps as f64 },
    })
}
