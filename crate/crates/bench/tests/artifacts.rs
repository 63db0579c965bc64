use diffgraph::{ParameterSet, Tensor};
use el_bench::artifacts::{emit_artifacts, read_metrics_csv, scatter_svg, write_metrics_csv, Artifacts, METRICS_HEADER};
use el_core::diffusion::{GaussianMixture, TargetDistribution};
use el_core::distill::Generator;
use el_core::metrics::{mode_coverage, sliced_wasserstein, wasserstein_1d_sorted, MetricsRow};
use el_core::rng::{keyed_rng, normal_tensor};
use proptest::prelude::*;
use rand::Rng;

fn shift(t: &Tensor, d: [f64; 2]) -> Tensor {
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += d[i % 2];
    }
    out
}

fn row(step: usize, rng: &mut impl Rng) -> MetricsRow {
    MetricsRow {
        step,
        eval_mmd: rng.gen::<f64>() * 1e-3,
        sliced_wasserstein: rng.gen::<f64>() / 3.0,
        mode_coverage: rng.gen_range(0..=8) as f64 / 8.0,
        wall_ms: rng.gen::<f64>() * 1e4,
    }
}

#[test]
fn empty_history_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.csv");
    write_metrics_csv(&[], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{METRICS_HEADER}\n"));
    assert!(read_metrics_csv(&p).unwrap().is_empty());
}

#[test]
fn metrics_csv_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.csv");
    let mut rng = keyed_rng(0, "rows");
    let mut rows: Vec<MetricsRow> = (0..50).map(|i| row(i * 10, &mut rng)).collect();
    rows.push(MetricsRow {
        step: 9999,
        eval_mmd: 1.0 / 3.0,
        sliced_wasserstein: 5e-324,
        mode_coverage: 1.0,
        wall_ms: 1e300,
    });
    write_metrics_csv(&rows, &p).unwrap();
    // bitwise equality, not just 17 significant digits
    let back = read_metrics_csv(&p).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.step, b.step);
        for (x, y) in [
            (a.eval_mmd, b.eval_mmd),
            (a.sliced_wasserstein, b.sliced_wasserstein),
            (a.mode_coverage, b.mode_coverage),
            (a.wall_ms, b.wall_ms),
        ] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn malformed_metrics_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.csv");
    std::fs::write(&p, "a,b\n1,2\n").unwrap();
    assert!(read_metrics_csv(&p).is_err());
    std::fs::write(&p, format!("{METRICS_HEADER}\n1,0.1,0.2\n")).unwrap();
    let err = read_metrics_csv(&p).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
}

#[test]
fn scatter_svg_is_well_formed() {
    let mut rng = keyed_rng(1, "svg");
    let real = normal_tensor(&mut rng, &[40, 2]);
    let mut gen = normal_tensor(&mut rng, &[30, 2]);
    gen.data_mut()[0] = f64::NAN;
    let svg = scatter_svg(&real, &gen);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let groups: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("g")).collect();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].attribute("class"), Some("real"));
    assert_eq!(groups[1].attribute("class"), Some("generated"));
    assert_ne!(groups[0].attribute("fill"), groups[1].attribute("fill"));
    let count = |g: &roxmltree::Node| g.children().filter(|c| c.has_tag_name("circle")).count();
    assert_eq!(count(&groups[0]), 40);
    // the non-finite point is dropped rather than written as NaN
    assert_eq!(count(&groups[1]), 29);
}

#[test]
fn emit_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested").join("run");
    let gen = Generator::new(2, &[8], 0).unwrap();
    let z = normal_tensor(&mut keyed_rng(2, "z"), &[25, 2]);
    let samples = gen.sample(&z).unwrap();
    let mut rng = keyed_rng(3, "rows");
    let history = vec![row(0, &mut rng), row(5, &mut rng)];
    let files = emit_artifacts(
        &Artifacts {
            history: &history,
            samples: &samples,
            real: &z,
            generator: gen.params(),
            svg: true,
        },
        &out,
    )
    .unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["metrics.csv", "samples.csv", "scatter.svg", "generator.elp"]);

    let text = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y"));
    let parsed: Vec<f64> = lines.flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect();
    assert_eq!(parsed, samples.data());

    let loaded = ParameterSet::load(&out.join("generator.elp"), false).unwrap();
    assert_eq!(loaded.flatten(), gen.params().flatten());

    // without svg, and for non-2-D data, no scatter plot
    let out2 = tmp.path().join("nosvg");
    let files = emit_artifacts(
        &Artifacts {
            history: &history,
            samples: &samples,
            real: &z,
            generator: gen.params(),
            svg: false,
        },
        &out2,
    )
    .unwrap();
    assert_eq!(files.len(), 3);
}

#[test]
fn unwritable_output_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = write_metrics_csv(&[], &blocker.join("m.csv")).unwrap_err().to_string();
    assert!(err.contains("file/m.csv"), "{err}");
}

#[test]
fn sliced_wasserstein_of_a_shift_is_the_mean_projected_offset() {
    // B = A + delta exactly: every projection moves all points by <u, delta>
    let a = normal_tensor(&mut keyed_rng(4, "a"), &[500, 2]);
    let delta = [1.5, -2.0];
    let b = shift(&a, delta);
    let n = 4000;
    let sw = sliced_wasserstein(&a, &b, n, 9).unwrap();
    // E|<u, delta>| over uniform directions in 2-D is 2 |delta| / pi
    let norm = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    let expect = 2.0 * norm / std::f64::consts::PI;
    assert!((sw - expect).abs() < 0.03 * expect, "{sw} vs {expect}");
}

#[test]
fn sliced_wasserstein_matches_brute_force_on_one_axis() {
    // in 1-D every projection is +-1, so SW reduces to the sorted coupling
    let mut rng = keyed_rng(5, "1d");
    let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..3.0)).collect();
    let (mut sa, mut sb) = (a.clone(), b.clone());
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let brute = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0).sqrt();
    let ta = Tensor::new(&[64, 1], a).unwrap();
    let tb = Tensor::new(&[64, 1], b).unwrap();
    assert!((sliced_wasserstein(&ta, &tb, 7, 0).unwrap() - brute).abs() < 1e-12);
    assert!((wasserstein_1d_sorted(&sa, &sb) - brute).abs() < 1e-12);
}

#[test]
fn independent_gaussians_with_offset_match_closed_form() {
    let mut rng = keyed_rng(6, "gauss");
    let a = normal_tensor(&mut rng, &[20_000, 2]);
    let b = shift(&normal_tensor(&mut rng, &[20_000, 2]), [3.0, 0.0]);
    let sw = sliced_wasserstein(&a, &b, 400, 1).unwrap();
    let expect = 2.0 * 3.0 / std::f64::consts::PI;
    assert!((sw - expect).abs() < 0.05 * expect, "{sw} vs {expect}");
}

#[test]
fn mode_coverage_cases() {
    let m = GaussianMixture::ring(8, 4.0, 0.3).unwrap();
    let means: Vec<Vec<f64>> = m.means().iter().map(|v| v.to_vec()).collect();
    assert_eq!(mode_coverage(&Tensor::from_rows(&means).unwrap(), &m, 3.0), 1.0);
    assert_eq!(mode_coverage(&Tensor::from_rows(&vec![means[5].clone(); 100]).unwrap(), &m, 3.0), 0.125);
    assert_eq!(mode_coverage(&Tensor::zeros(&[0, 2]), &m, 3.0), 0.0);
    // a point just outside the radius does not count
    let off = Tensor::from_rows(&[vec![means[0][0] + 0.91, means[0][1]]]).unwrap();
    assert_eq!(mode_coverage(&off, &m, 3.0), 0.0);
    assert_eq!(mode_coverage(&off, &m, 3.1), 0.125);

    let t = TargetDistribution::GaussianMixture2D(m.clone());
    let draws = t.sample(&mut keyed_rng(7, "draws"), 10_000);
    assert_eq!(mode_coverage(&draws, &m, 3.0), 1.0);
}

proptest! {
    #[test]
    fn sliced_wasserstein_is_a_symmetric_nonnegative_distance(seed in 0u64..500, n in 1usize..20, m in 1usize..20) {
        let mut rng = keyed_rng(seed, "prop");
        let a = normal_tensor(&mut rng, &[n, 2]);
        let b = normal_tensor(&mut rng, &[m, 2]);
        let ab = sliced_wasserstein(&a, &b, 8, seed).unwrap();
        let ba = sliced_wasserstein(&b, &a, 8, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(sliced_wasserstein(&a, &a, 8, seed).unwrap(), 0.0);
    }

    #[test]
    fn coverage_is_a_fraction(seed in 0u64..500, n in 0usize..40) {
        let m = GaussianMixture::ring(8, 4.0, 0.3).unwrap();
        let x = normal_tensor(&mut keyed_rng(seed, "cov"), &[n, 2]).map(|v| 4.0 * v);
        let c = mode_coverage(&x, &m, 3.0);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!((c * 8.0).fract(), 0.0);
    }
}
