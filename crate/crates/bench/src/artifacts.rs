//! CSV, SVG and checkpoint outputs of a run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use diffgraph::{ParameterSet, Tensor};
use el_core::metrics::MetricsRow;

use crate::error::{BenchError, Result};

pub const METRICS_HEADER: &str = "step,eval_mmd,sliced_wasserstein,mode_coverage,wall_ms";

/// Appends metrics rows to a CSV, flushing after every row so a failed run
/// keeps what it had.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| BenchError::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| BenchError::io(&self.path, e))
    }

    pub fn push(&mut self, r: &MetricsRow) -> Result<()> {
        // `{}` on f64 prints the shortest string that parses back to the same value
        let line = format!(
            "{},{},{},{},{}",
            r.step, r.eval_mmd, r.sliced_wasserstein, r.mode_coverage, r.wall_ms
        );
        self.line(&line)
    }
}

pub fn write_metrics_csv(history: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    history.iter().try_for_each(|r| w.push(r))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(BenchError::Usage(format!("{}: not a metrics CSV", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || BenchError::Usage(format!("{}:{}: malformed row `{l}`", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                eval_mmd: num(f[1])?,
                sliced_wasserstein: num(f[2])?,
                mode_coverage: num(f[3])?,
                wall_ms: num(f[4])?,
            })
        })
        .collect()
}

/// One sample per row; columns `x,y` for 2-D data, `x0..` otherwise.
pub fn write_samples_csv(samples: &Tensor, path: &Path) -> Result<()> {
    let d = samples.row_len();
    let header = if d == 2 {
        "x,y".to_string()
    } else {
        (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
    };
    let mut s = header;
    s.push('\n');
    for row in samples.data().chunks(d) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| BenchError::io(path, e))
}

/// Scatter plot of real (grey) and generated (orange) 2-D points.
pub fn scatter_svg(real: &Tensor, generated: &Tensor) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 20.0;
    let pts = || real.data().chunks(2).chain(generated.data().chunks(2));
    let m = pts()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .filter(|v| v.is_finite())
        .fold(1e-9_f64, f64::max);
    let map = |v: f64| PAD + (v / m + 1.0) * 0.5 * (SIZE - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (class, color, t) in [("real", "#8c8c8c", real), ("generated", "#e66100", generated)] {
        s.push_str(&format!("<g class=\"{class}\" fill=\"{color}\" fill-opacity=\"0.6\">\n"));
        for p in t.data().chunks(2) {
            if p.len() == 2 && p[0].is_finite() && p[1].is_finite() {
                s.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\"/>\n",
                    map(p[0]),
                    SIZE - map(p[1])
                ));
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Everything a finished distillation run leaves on disk.
pub struct Artifacts<'a> {
    pub history: &'a [MetricsRow],
    pub samples: &'a Tensor,
    /// Reference points for the scatter plot.
    pub real: &'a Tensor,
    pub generator: &'a ParameterSet,
    pub svg: bool,
}

/// Writes metrics.csv, samples.csv, generator.elp and (for 2-D data)
/// scatter.svg into `out`; returns the paths written.
pub fn emit_artifacts(a: &Artifacts, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    let mut written = Vec::new();
    let p = out.join("metrics.csv");
    write_metrics_csv(a.history, &p)?;
    written.push(p);
    let p = out.join("samples.csv");
    write_samples_csv(a.samples, &p)?;
    written.push(p);
    if a.svg && a.samples.row_len() == 2 {
        let p = out.join("scatter.svg");
        std::fs::write(&p, scatter_svg(a.real, a.samples)).map_err(|e| BenchError::io(&p, e))?;
        written.push(p);
    }
    let p = out.join("generator.elp");
    a.generator.save(&p)?;
    written.push(p);
    Ok(written)
}
