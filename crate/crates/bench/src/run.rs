//! Pipelines behind the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use diffgraph::ParameterSet;
use el_core::diffusion::{train_teacher, ScoreNetwork};
use el_core::distill::{distill_step, train_distill_with, Auxiliary, DistillConfig, DistillState, Generator};
use el_core::metrics::{EvalMetrics, Evaluator};
use el_core::rng::keyed_rng;
use el_core::variance::{
    as_slices, correlation, decompose_variance, lambda_grid, lambda_star, min_variance, mixed_variance,
    paired_gradients, unit_grid, CorrelationEstimate, VarianceReport,
};

use crate::artifacts::{emit_artifacts, Artifacts, MetricsWriter};
use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};

/// `--out`, then the config's `out_dir`, then `$EL_OUT_DIR/<name>`, then `runs/<name>`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    let root = std::env::var_os("EL_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.name)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| BenchError::io(p, e))
}

fn write_file(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| BenchError::io(p, e))
}

#[derive(Clone, Debug)]
pub struct TeacherInfo {
    pub path: PathBuf,
    pub trained: bool,
    pub cert_error: Option<f64>,
    pub certified: Option<bool>,
}

/// Teacher from `teacher.checkpoint` when that file exists; otherwise trained
/// and saved there (or to `out/teacher.elp`).
pub fn obtain_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<(ScoreNetwork, TeacherInfo)> {
    let path = cfg.teacher_checkpoint.clone().unwrap_or_else(|| out.join("teacher.elp"));
    if cfg.teacher_checkpoint.is_some() && path.exists() {
        let net = ScoreNetwork::from_params(ParameterSet::load(&path, false)?)?;
        if net.dim() != cfg.target.dim() {
            return Err(BenchError::Usage(format!(
                "{}: teacher dim {} does not match target dim {}",
                path.display(),
                net.dim(),
                cfg.target.dim()
            )));
        }
        return Ok((
            net,
            TeacherInfo {
                path,
                trained: false,
                cert_error: None,
                certified: None,
            },
        ));
    }
    let t = train_teacher(&cfg.target, &cfg.schedule, &cfg.teacher)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    t.net.params().save(&path)?;
    Ok((
        t.net,
        TeacherInfo {
            path,
            trained: true,
            cert_error: t.cert_error,
            certified: Some(t.certified),
        },
    ))
}

pub fn run_train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<TeacherInfo> {
    create_dir(out)?;
    let cfg = ExperimentConfig {
        teacher_checkpoint: cfg.teacher_checkpoint.clone().or_else(|| Some(out.join("teacher.elp"))),
        ..cfg.clone()
    };
    // always retrain on this subcommand
    if let Some(p) = &cfg.teacher_checkpoint {
        if p.exists() {
            fs::remove_file(p).map_err(|e| BenchError::io(p, e))?;
        }
    }
    let (_, info) = obtain_teacher(&cfg, out)?;
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
    write_file(
        &out.join("teacher.csv"),
        &format!(
            "steps,batch,lr,cert_error,certified\n{},{},{},{},{}\n",
            cfg.teacher.steps,
            cfg.teacher.batch,
            cfg.teacher.lr,
            fmt(info.cert_error),
            info.certified.unwrap_or(false)
        ),
    )?;
    Ok(info)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub final_metrics: Option<EvalMetrics>,
    pub setup_ms: f64,
    pub step_ms: f64,
}

/// Teacher, distillation, artifacts.
pub fn run_distill(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    let (teacher, _) = obtain_teacher(cfg, out)?;
    run_distill_with_teacher(cfg, &cfg.distill, &teacher, out)
}

pub fn run_distill_with_teacher(
    cfg: &ExperimentConfig,
    distill: &DistillConfig,
    teacher: &ScoreNetwork,
    out: &Path,
) -> Result<RunSummary> {
    create_dir(out)?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let mut distill = distill.clone();
    if distill.regression_path.is_none() {
        distill.regression_path = Some(out.join("regression_pairs.elp"));
    }
    let mut write_err = None;
    let outcome = train_distill_with(&distill, teacher, &cfg.target, &cfg.schedule, |row| {
        if let Err(e) = writer.push(row) {
            write_err = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let eval = Evaluator::new(&cfg.target, distill.eval_seed, distill.eval_samples)?;
    let samples = outcome.gen.sample(eval.latents())?;
    let final_metrics = outcome.reports.last().and_then(|r| r.eval.clone());
    let real = cfg.target.sample(&mut keyed_rng(cfg.seed, "scatter-real"), samples.rows());
    let files = emit_artifacts(
        &Artifacts {
            history: &outcome.history,
            samples: &samples,
            real: &real,
            generator: outcome.gen.params(),
            svg: cfg.svg,
        },
        out,
    )?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        files,
        final_metrics,
        setup_ms: outcome.setup_ms,
        step_ms: outcome.step_ms,
    })
}

/// Parse a config file, apply CLI overrides and run a distillation.
pub fn run_experiment(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunSummary> {
    let cfg = ExperimentConfig::read(path, seed)?;
    let out = resolve_out_dir(out, &cfg);
    run_distill(&cfg, &out)
}

/// Distillation state advanced `warmup_steps` so the fake score has moved
/// away from the teacher.
pub fn warmed_state(cfg: &ExperimentConfig, distill: &DistillConfig, teacher: &ScoreNetwork) -> Result<DistillState> {
    let mut state = DistillState::new(distill, teacher, &cfg.target, &cfg.schedule)?;
    for _ in 0..cfg.variance.warmup_steps {
        distill_step(&mut state, distill)?;
    }
    Ok(state)
}

pub fn run_variance_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<VarianceReport> {
    create_dir(out)?;
    let (teacher, _) = obtain_teacher(cfg, out)?;
    let state = warmed_state(cfg, &cfg.distill, &teacher)?;
    let v = &cfg.variance;
    let r = decompose_variance(&state, &cfg.distill, v.batch, v.repeats, v.outer, &v.batch_sizes)?;
    let mut s = String::from("quantity,batch,value\n");
    for (q, val) in [
        ("var_total", r.var_total),
        ("var_noise", r.var_noise),
        ("var_time", r.var_time),
        ("var_batch", r.var_batch),
        ("var_diffusion_residual", r.var_diffusion_residual),
        ("residual_raw", r.residual_raw),
    ] {
        s.push_str(&format!("{q},{},{val}\n", r.batch));
    }
    for (b, val) in r.batch_sizes.iter().zip(&r.var_batch_by_size) {
        s.push_str(&format!("var_batch,{b},{val}\n"));
    }
    s.push_str(&format!("var_batch_slope,,{}\n", r.var_batch_slope));
    write_file(&out.join("variance.csv"), &s)?;
    Ok(r)
}

#[derive(Clone, Debug)]
pub struct LambdaSweep {
    pub correlation: CorrelationEstimate,
    pub lambda_star: Option<f64>,
    pub min_variance: Option<f64>,
    /// `(lambda, empirical variance, closed-form variance)`
    pub grid: Vec<(f64, f64, f64)>,
}

pub fn run_lambda_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<LambdaSweep> {
    create_dir(out)?;
    let (teacher, _) = obtain_teacher(cfg, out)?;
    let distill = DistillConfig {
        auxiliary: Auxiliary::Embedding,
        ..cfg.distill.clone()
    };
    let state = warmed_state(cfg, &distill, &teacher)?;
    let v = &cfg.variance;
    let (dm, el) = paired_gradients(&state, &distill, v.batch, v.repeats)?;
    // the EL gradient is measured with weight 1 so lambda mixes comparable units
    let c = correlation(&as_slices(&dm), &as_slices(&el))?;
    let ls = lambda_star(c.sigma_dm, c.sigma_embed, c.rho).ok();
    let mv = min_variance(c.sigma_dm, c.sigma_embed, c.rho).ok();
    let grid: Vec<(f64, f64, f64)> = lambda_grid(&as_slices(&dm), &as_slices(&el), &unit_grid(v.lambda_cells))?
        .into_iter()
        .map(|(l, e)| (l, e, mixed_variance(c.sigma_dm, c.sigma_embed, c.rho, l)))
        .collect();
    let mut s = String::from("lambda,empirical_variance,model_variance\n");
    for (l, e, m) in &grid {
        s.push_str(&format!("{l},{e},{m}\n"));
    }
    write_file(&out.join("lambda.csv"), &s)?;
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
    write_file(
        &out.join("correlation.csv"),
        &format!(
            "sigma_dm,sigma_embed,rho,samples,degenerate,lambda_star,min_variance\n{},{},{},{},{},{},{}\n",
            c.sigma_dm,
            c.sigma_embed,
            c.rho,
            c.samples,
            c.degenerate,
            opt(ls),
            opt(mv)
        ),
    )?;
    Ok(LambdaSweep {
        correlation: c,
        lambda_star: ls,
        min_variance: mv,
        grid,
    })
}

pub fn run_eval(cfg: &ExperimentConfig, generator: &Path, out: &Path) -> Result<EvalMetrics> {
    create_dir(out)?;
    let gen = Generator::from_params(ParameterSet::load(generator, false)?)?;
    if gen.dim() != cfg.target.dim() {
        return Err(BenchError::Usage(format!(
            "{}: generator dim {} does not match target dim {}",
            generator.display(),
            gen.dim(),
            cfg.target.dim()
        )));
    }
    let eval = Evaluator::new(&cfg.target, cfg.distill.eval_seed, cfg.distill.eval_samples)?;
    let m = eval.evaluate(&gen.sample(eval.latents())?)?;
    write_file(
        &out.join("eval.csv"),
        &format!(
            "eval_mmd,sliced_wasserstein,mode_coverage\n{},{},{}\n",
            m.eval_mmd, m.sliced_wasserstein, m.mode_coverage
        ),
    )?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub auxiliary: Auxiliary,
    pub precompute: bool,
    pub dataset: Option<PathBuf>,
    pub setup_ms: f64,
    pub step_ms: f64,
    pub relative_step_cost: f64,
    pub final_eval_mmd: f64,
    pub final_mode_coverage: f64,
}

/// The same distillation with each auxiliary loss; one teacher for all.
pub fn run_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CompareRow>> {
    create_dir(out)?;
    let (teacher, _) = obtain_teacher(cfg, out)?;
    let mut rows: Vec<CompareRow> = Vec::new();
    for aux in Auxiliary::ALL {
        let d = DistillConfig {
            auxiliary: aux,
            record_time: true,
            ..cfg.distill.clone()
        };
        let dir = out.join(aux.name());
        let r = run_distill_with_teacher(cfg, &d, &teacher, &dir)?;
        let dataset = (aux == Auxiliary::Regression).then(|| dir.join("regression_pairs.elp"));
        let m = r.final_metrics.clone();
        rows.push(CompareRow {
            auxiliary: aux,
            precompute: dataset.as_ref().is_some_and(|p| p.exists()),
            dataset,
            setup_ms: r.setup_ms,
            step_ms: r.step_ms,
            relative_step_cost: f64::NAN,
            final_eval_mmd: m.as_ref().map_or(f64::NAN, |m| m.eval_mmd),
            final_mode_coverage: m.as_ref().map_or(f64::NAN, |m| m.mode_coverage),
        });
    }
    let base = rows[0].step_ms;
    for r in &mut rows {
        r.relative_step_cost = r.step_ms / base;
    }
    let path = out.join("compare.csv");
    let mut f = fs::File::create(&path).map_err(|e| BenchError::io(&path, e))?;
    let mut s = String::from(
        "auxiliary,precompute,setup_ms,step_ms,relative_step_cost,final_eval_mmd,final_mode_coverage\n",
    );
    for r in &rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.auxiliary.name(),
            r.precompute,
            r.setup_ms,
            r.step_ms,
            r.relative_step_cost,
            r.final_eval_mmd,
            r.final_mode_coverage
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| BenchError::io(&path, e))?;
    Ok(rows)
}
