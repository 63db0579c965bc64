//! Flat `key = value` experiment configs.
//!
//! Keys carry their section as a prefix (`teacher.lr`, `distill.batch`).
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use el_core::diffusion::{GaussianMixture, NoiseSchedule, TargetDistribution, TeacherConfig, Weighting};
use el_core::distill::{Auxiliary, DistillConfig, MixingMode, OptimizerChoice};
use el_core::embed::{Bandwidths, EmbedArch, EnsembleSpec};
use el_core::kernel::BandwidthSet;
use el_core::nn::InitScheme;

use crate::error::{BenchError, Result};

const KEYS: &[&str] = &[
    "name",
    "seed",
    "out_dir",
    "svg",
    "target",
    "target.modes",
    "target.radius",
    "target.std",
    "schedule.t_min",
    "schedule.t_max",
    "schedule.weighting",
    "schedule.data_std",
    "teacher.steps",
    "teacher.batch",
    "teacher.lr",
    "teacher.hidden",
    "teacher.seed",
    "teacher.cert_tol",
    "teacher.checkpoint",
    "distill.steps",
    "distill.batch",
    "distill.lambda_embed",
    "distill.lambda_reg",
    "distill.lambda_adv",
    "distill.mixing_mode",
    "distill.auxiliary",
    "distill.optimizer",
    "distill.adam_beta1",
    "distill.adam_beta2",
    "distill.lr_gen",
    "distill.lr_fake",
    "distill.lr_disc",
    "distill.fake_ratio",
    "distill.gen_hidden",
    "distill.disc_hidden",
    "distill.eval_interval",
    "distill.regression_pairs",
    "distill.regression_ode_steps",
    "distill.regression_path",
    "distill.record_time",
    "eval.samples",
    "eval.seed",
    "ensemble.layout",
    "ensemble.nets_per_type",
    "ensemble.arch",
    "ensemble.init",
    "ensemble.members",
    "ensemble.seed",
    "ensemble.out_dim",
    "ensemble.width",
    "ensemble.bandwidth",
    "ensemble.bw_lo",
    "ensemble.bw_hi",
    "ensemble.sigmas",
    "ensemble.resample",
    "variance.batch",
    "variance.repeats",
    "variance.outer",
    "variance.warmup_steps",
    "variance.batch_sizes",
    "variance.lambda_cells",
];

/// Parsed `key = value` lines with their line numbers.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: HashMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BenchError::config(n, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(BenchError::config(n, format!("unknown key `{k}`")));
            }
            if let Some((prev, _)) = entries.insert(k.to_string(), (n, v.to_string())) {
                return Err(BenchError::config(n, format!("`{k}` already set on line {prev}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| BenchError::config(*line, format!("`{key}`: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| BenchError::config(*line, format!("`{key}`: {e}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceConfig {
    pub batch: usize,
    pub repeats: usize,
    pub outer: usize,
    /// Distillation steps taken before measuring, so the fake score differs
    /// from the teacher.
    pub warmup_steps: usize,
    pub batch_sizes: Vec<usize>,
    pub lambda_cells: usize,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            repeats: 50,
            outer: 4,
            warmup_steps: 200,
            batch_sizes: el_core::variance::BATCH_SIZES.to_vec(),
            lambda_cells: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub svg: bool,
    pub target: TargetDistribution,
    pub schedule: NoiseSchedule,
    pub teacher: TeacherConfig,
    pub teacher_checkpoint: Option<PathBuf>,
    pub distill: DistillConfig,
    pub variance: VarianceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

fn parse_member(s: &str) -> std::result::Result<(EmbedArch, InitScheme, u64), String> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("member `{s}` is not arch:init:seed"));
    }
    Ok((
        parts[0].parse().map_err(|e: el_core::CoreError| e.to_string())?,
        parts[1].parse().map_err(|e: el_core::CoreError| e.to_string())?,
        parts[2].parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
    ))
}

impl ExperimentConfig {
    pub fn read(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let mut raw = RawConfig::read(path)?;
        if let Some(s) = seed_override {
            raw.set("seed", s.to_string());
        }
        Self::from_raw(&raw)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let seed: u64 = raw.or("seed", 0)?;
        let name: String = raw.or("name", "run".to_string())?;

        let target = match raw.or("target", "gmm".to_string())?.as_str() {
            "gmm" => {
                let m = GaussianMixture::ring(
                    raw.or("target.modes", 8)?,
                    raw.or("target.radius", 4.0)?,
                    raw.or("target.std", 0.3)?,
                )
                .map_err(|e| BenchError::config(raw.line("target.modes"), e.to_string()))?;
                TargetDistribution::GaussianMixture2D(m)
            }
            "images8" => TargetDistribution::images8(),
            other => return Err(BenchError::config(raw.line("target"), format!("unknown target `{other}`"))),
        };

        let base = NoiseSchedule::for_target(&target);
        let weighting: Weighting = raw
            .get::<String>("schedule.weighting")?
            .map(|w| w.parse().map_err(|e: el_core::CoreError| BenchError::config(raw.line("schedule.weighting"), e.to_string())))
            .transpose()?
            .unwrap_or(base.weighting);
        let mut schedule = NoiseSchedule::new(
            raw.or("schedule.t_min", base.t_min)?,
            raw.or("schedule.t_max", base.t_max)?,
            weighting,
            raw.or("schedule.data_std", base.data_std)?,
        )
        .map_err(|e| BenchError::config(raw.line("schedule.t_min"), e.to_string()))?;
        schedule.data_mean = base.data_mean;

        let td = TeacherConfig::default();
        let teacher = TeacherConfig {
            steps: raw.or("teacher.steps", td.steps)?,
            batch: raw.or("teacher.batch", td.batch)?,
            lr: raw.or("teacher.lr", td.lr)?,
            hidden: raw.list("teacher.hidden")?.unwrap_or(td.hidden),
            seed: raw.or("teacher.seed", seed)?,
            cert_tol: raw.or("teacher.cert_tol", td.cert_tol)?,
        };

        let ensemble = Self::ensemble(raw, seed)?;
        let bandwidths = match raw.or("ensemble.bandwidth", "median".to_string())?.as_str() {
            "median" => Bandwidths::Median {
                lo: raw.or("ensemble.bw_lo", -2)?,
                hi: raw.or("ensemble.bw_hi", 2)?,
            },
            "fixed" => {
                let line = raw.line("ensemble.sigmas");
                let sigmas = raw
                    .list::<f64>("ensemble.sigmas")?
                    .ok_or_else(|| BenchError::config(raw.line("ensemble.bandwidth"), "fixed bandwidths need `ensemble.sigmas`"))?;
                Bandwidths::Fixed(BandwidthSet::new(sigmas).map_err(|e| BenchError::config(line, e.to_string()))?)
            }
            other => {
                return Err(BenchError::config(
                    raw.line("ensemble.bandwidth"),
                    format!("unknown bandwidth mode `{other}`"),
                ))
            }
        };

        let dd = DistillConfig::default();
        let optimizer = match raw.or("distill.optimizer", "adam".to_string())?.as_str() {
            "adam" => OptimizerChoice::Adam,
            "sgd" => OptimizerChoice::Sgd,
            other => return Err(BenchError::config(raw.line("distill.optimizer"), format!("unknown optimizer `{other}`"))),
        };
        let enum_key = |key: &str, default: &str| -> Result<String> { raw.or(key, default.to_string()) };
        let mixing: MixingMode = enum_key("distill.mixing_mode", "additive")?
            .parse()
            .map_err(|e: el_core::CoreError| BenchError::config(raw.line("distill.mixing_mode"), e.to_string()))?;
        let auxiliary: Auxiliary = enum_key("distill.auxiliary", "none")?
            .parse()
            .map_err(|e: el_core::CoreError| BenchError::config(raw.line("distill.auxiliary"), e.to_string()))?;
        let distill = DistillConfig {
            steps: raw.or("distill.steps", dd.steps)?,
            batch: raw.or("distill.batch", dd.batch)?,
            lambda_embed: raw.or("distill.lambda_embed", dd.lambda_embed)?,
            lambda_reg: raw.or("distill.lambda_reg", dd.lambda_reg)?,
            lambda_adv: raw.or("distill.lambda_adv", dd.lambda_adv)?,
            mixing,
            auxiliary,
            optimizer,
            adam_betas: (
                raw.or("distill.adam_beta1", dd.adam_betas.0)?,
                raw.or("distill.adam_beta2", dd.adam_betas.1)?,
            ),
            lr_gen: raw.or("distill.lr_gen", dd.lr_gen)?,
            lr_fake: raw.or("distill.lr_fake", dd.lr_fake)?,
            lr_disc: raw.or("distill.lr_disc", dd.lr_disc)?,
            fake_ratio: raw.or("distill.fake_ratio", dd.fake_ratio)?,
            gen_hidden: raw.list("distill.gen_hidden")?.unwrap_or(dd.gen_hidden),
            disc_hidden: raw.list("distill.disc_hidden")?.unwrap_or(dd.disc_hidden),
            ensemble,
            bandwidths,
            resample_ensemble: raw.or("ensemble.resample", false)?,
            regression_pairs: raw.or("distill.regression_pairs", dd.regression_pairs)?,
            regression_ode_steps: raw.or("distill.regression_ode_steps", dd.regression_ode_steps)?,
            regression_path: raw.get::<PathBuf>("distill.regression_path")?,
            eval_interval: raw.or("distill.eval_interval", dd.eval_interval)?,
            eval_samples: raw.or("eval.samples", dd.eval_samples)?,
            eval_seed: raw.or("eval.seed", dd.eval_seed)?,
            record_time: raw.or("distill.record_time", false)?,
            seed,
        };
        distill
            .validate()
            .map_err(|e| BenchError::config(raw.line("distill.lambda_embed"), e.to_string()))?;

        let vd = VarianceConfig::default();
        let variance = VarianceConfig {
            batch: raw.or("variance.batch", vd.batch)?,
            repeats: raw.or("variance.repeats", vd.repeats)?,
            outer: raw.or("variance.outer", vd.outer)?,
            warmup_steps: raw.or("variance.warmup_steps", vd.warmup_steps)?,
            batch_sizes: raw.list("variance.batch_sizes")?.unwrap_or(vd.batch_sizes),
            lambda_cells: raw.or("variance.lambda_cells", vd.lambda_cells)?,
        };
        if variance.repeats < 10 {
            return Err(BenchError::config(raw.line("variance.repeats"), "variance.repeats must be >= 10"));
        }

        Ok(Self {
            name,
            seed,
            out_dir: raw.get("out_dir")?,
            svg: raw.or("svg", true)?,
            target,
            schedule,
            teacher,
            teacher_checkpoint: raw.get("teacher.checkpoint")?,
            distill,
            variance,
        })
    }

    fn ensemble(raw: &RawConfig, seed: u64) -> Result<EnsembleSpec> {
        let eseed: u64 = raw.or("ensemble.seed", seed)?;
        let per_type: usize = raw.or("ensemble.nets_per_type", 1)?;
        let init = |default: InitScheme| -> Result<InitScheme> {
            raw.get::<String>("ensemble.init")?
                .map(|s| s.parse().map_err(|e: el_core::CoreError| BenchError::config(raw.line("ensemble.init"), e.to_string())))
                .transpose()
                .map(|o| o.unwrap_or(default))
        };
        let mut spec = if let Some((line, v)) = raw.entries.get("ensemble.members") {
            let members = v
                .split(',')
                .map(|m| parse_member(m).map_err(|e| BenchError::config(*line, e)))
                .collect::<Result<Vec<_>>>()?;
            EnsembleSpec {
                members,
                ..EnsembleSpec::paired(1, eseed)
            }
        } else {
            match raw.or("ensemble.layout", "paired".to_string())?.as_str() {
                "paired" => EnsembleSpec::paired(per_type, eseed),
                "full_grid" => EnsembleSpec::full_grid(eseed),
                "one_init" => EnsembleSpec::archs_one_init(init(InitScheme::Xavier)?, eseed),
                "single" => {
                    let arch: EmbedArch = raw
                        .or("ensemble.arch", "simple_cnn".to_string())?
                        .parse()
                        .map_err(|e: el_core::CoreError| BenchError::config(raw.line("ensemble.arch"), e.to_string()))?;
                    EnsembleSpec::single(arch, init(InitScheme::Xavier)?, eseed)
                }
                other => {
                    return Err(BenchError::config(raw.line("ensemble.layout"), format!("unknown layout `{other}`")))
                }
            }
        };
        if let Some(d) = raw.get("ensemble.out_dim")? {
            spec = spec.with_out_dim(d);
        }
        if let Some(w) = raw.get("ensemble.width")? {
            spec = spec.with_width(w);
        }
        Ok(spec)
    }
}
