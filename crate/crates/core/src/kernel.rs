//! RBF kernels and multi-bandwidth squared MMD.
//!
//! The default estimator is the biased V-statistic
//!
//! ```text
//! MMD² = mean_ij k(x_i, x_j) - 2 mean_ij k(x_i, y_j) + mean_ij k(y_i, y_j)
//! ```
//!
//! averaged over every bandwidth of a [`BandwidthSet`].

use diffgraph::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};

/// Kernel bandwidths, kept sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthSet {
    sigmas: Vec<f64>,
}

impl BandwidthSet {
    pub fn new(mut sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(CoreError::Empty("bandwidth set"));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(CoreError::invalid("bandwidth set", format!("sigma {s} must be positive")));
        }
        sigmas.sort_by(f64::total_cmp);
        Ok(Self { sigmas })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// `{base * 2^i : i in lo..=hi}`.
    pub fn geometric(base: f64, lo: i32, hi: i32) -> Result<Self> {
        if lo > hi {
            return Err(CoreError::invalid("bandwidth set", format!("empty exponent range {lo}..={hi}")));
        }
        Self::new((lo..=hi).map(|i| base * 2f64.powi(i)).collect())
    }

    /// Five-point grid `sigma_med * 2^{-2..2}` around the pooled median heuristic.
    pub fn median_grid(x: &Tensor, y: &Tensor) -> Result<Self> {
        Self::geometric(median_heuristic(x, y)?, -2, 2)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub values: Tensor,
    pub sigma: f64,
}

fn check_sigma(op: &'static str, sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CoreError::invalid(op, format!("sigma {sigma} must be positive")))
    }
}

fn check_pair(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(CoreError::invalid(
            op,
            format!("feature dimensions differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(CoreError::Empty(op));
    }
    Ok(())
}

/// `‖x_i − y_j‖²` via the inner-product expansion, clamped at zero.
pub fn pairwise_sq_dists(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair("pairwise_sq_dists", x, y)?;
    Ok(diffgraph::pairwise_sq_dists(x, y)?)
}

/// Entrywise `exp(-d² / (2 sigma²))`.
pub fn rbf_kernel(sq_dists: &Tensor, sigma: f64) -> Result<GramMatrix> {
    check_sigma("rbf_kernel", sigma)?;
    let c = -0.5 / (sigma * sigma);
    Ok(GramMatrix {
        values: sq_dists.map(|d| (c * d.max(0.0)).exp()),
        sigma,
    })
}

/// Biased multi-bandwidth MMD² between the rows of `x` and `y`.
pub fn mmd2_biased(x: &Tensor, y: &Tensor, bw: &BandwidthSet) -> Result<f64> {
    check_pair("mmd2_biased", x, y)?;
    let dxx = diffgraph::pairwise_sq_dists(x, x)?;
    let dxy = diffgraph::pairwise_sq_dists(x, y)?;
    let dyy = diffgraph::pairwise_sq_dists(y, y)?;
    let mut total = 0.0;
    for &s in bw.sigmas() {
        let kxx = rbf_kernel(&dxx, s)?.values.mean();
        let kxy = rbf_kernel(&dxy, s)?.values.mean();
        let kyy = rbf_kernel(&dyy, s)?.values.mean();
        total += kxx - 2.0 * kxy + kyy;
    }
    Ok(total / bw.len() as f64)
}

/// The three bandwidth-averaged kernel means of the MMD² expansion, on a graph.
#[derive(Clone, Copy, Debug)]
pub struct MmdTerms {
    pub xx: Var,
    pub xy: Var,
    pub yy: Var,
}

impl MmdTerms {
    /// `xx - 2 xy + yy`
    pub fn combine(&self, g: &mut Graph) -> Result<Var> {
        let cross = g.scale(self.xy, -2.0);
        let a = g.add(self.xx, cross)?;
        Ok(g.add(a, self.yy)?)
    }
}

fn kernel_mean(g: &mut Graph, d: Var, bw: &BandwidthSet) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &s in bw.sigmas() {
        let scaled = g.scale(d, -0.5 / (s * s));
        let k = g.exp(scaled);
        let m = g.mean(k);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    Ok(g.scale(acc.expect("non-empty bandwidth set"), 1.0 / bw.len() as f64))
}

pub fn mmd2_terms(g: &mut Graph, x: Var, y: Var, bw: &BandwidthSet) -> Result<MmdTerms> {
    let (xs, ys) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(CoreError::invalid(
            "mmd2_biased",
            format!("feature dimensions differ: {xs:?} vs {ys:?}"),
        ));
    }
    if xs[0] == 0 || ys[0] == 0 {
        return Err(CoreError::Empty("mmd2_biased"));
    }
    let dxx = g.pairwise_sq_dist(x, x)?;
    let dxy = g.pairwise_sq_dist(x, y)?;
    let dyy = g.pairwise_sq_dist(y, y)?;
    Ok(MmdTerms {
        xx: kernel_mean(g, dxx, bw)?,
        xy: kernel_mean(g, dxy, bw)?,
        yy: kernel_mean(g, dyy, bw)?,
    })
}

/// Differentiable form of [`mmd2_biased`].
pub fn mmd2_biased_graph(g: &mut Graph, x: Var, y: Var, bw: &BandwidthSet) -> Result<Var> {
    mmd2_terms(g, x, y, bw)?.combine(g)
}

/// Unbiased U-statistic (diagonal self-terms excluded). Needs at least two rows per side.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor, bw: &BandwidthSet) -> Result<f64> {
    check_pair("mmd2_unbiased", x, y)?;
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(CoreError::invalid("mmd2_unbiased", "need at least two rows per sample"));
    }
    let off_diag_mean = |k: &Tensor, n: usize| {
        let diag: f64 = (0..n).map(|i| k.data()[i * n + i]).sum();
        (k.sum() - diag) / (n * (n - 1)) as f64
    };
    let dxx = diffgraph::pairwise_sq_dists(x, x)?;
    let dxy = diffgraph::pairwise_sq_dists(x, y)?;
    let dyy = diffgraph::pairwise_sq_dists(y, y)?;
    let mut total = 0.0;
    for &s in bw.sigmas() {
        total += off_diag_mean(&rbf_kernel(&dxx, s)?.values, n)
            - 2.0 * rbf_kernel(&dxy, s)?.values.mean()
            + off_diag_mean(&rbf_kernel(&dyy, s)?.values, m);
    }
    Ok(total / bw.len() as f64)
}

/// Single-pair MMD²: `2 - 2 k(x, y)`.
pub fn mmd2_pairwise(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_sigma("mmd2_pairwise", sigma)?;
    if x.len() != y.len() {
        return Err(CoreError::invalid(
            "mmd2_pairwise",
            format!("dimensions differ: {} vs {}", x.len(), y.len()),
        ));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp())
}

/// `sqrt(median pooled pairwise d² / 2)`, or 1.0 when that median is zero.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    let pooled = Tensor::concat_rows(&[x, y])?;
    let n = pooled.rows();
    let d = diffgraph::pairwise_sq_dists(&pooled, &pooled)?;
    let mut vals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            vals.push(d.data()[i * n + j]);
        }
    }
    let med = median(&mut vals);
    Ok(if med > 0.0 { (med / 2.0).sqrt() } else { 1.0 })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn distance_closed_forms() {
        let d = pairwise_sq_dists(&t(&[vec![0.0, 0.0]]), &t(&[vec![3.0, 4.0]])).unwrap();
        assert_eq!(d.data(), &[25.0]);
        let p = t(&[vec![1.5, -2.0]]);
        assert_eq!(pairwise_sq_dists(&p, &p).unwrap().data(), &[0.0]);
        assert!(pairwise_sq_dists(&p, &t(&[vec![1.0]])).is_err());
    }

    #[test]
    fn rbf_closed_forms() {
        let s: f64 = 0.7;
        let d = Tensor::new(&[3], vec![0.0, 2.0 * s * s, 2.0 * s * s * 2f64.ln()]).unwrap();
        let k = rbf_kernel(&d, s).unwrap();
        assert_eq!(k.values.data()[0], 1.0);
        assert!((k.values.data()[1] - (-1f64).exp()).abs() < 1e-15);
        assert!((k.values.data()[2] - 0.5).abs() < 1e-15);
        assert!(rbf_kernel(&d, 0.0).is_err());
    }

    #[test]
    fn pairwise_form() {
        let s = 1.3;
        let x = [0.0, 0.0];
        let y = [s * 2f64.sqrt(), 0.0];
        assert!((mmd2_pairwise(&x, &y, s).unwrap() - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
        assert_eq!(mmd2_pairwise(&x, &x, s).unwrap(), 0.0);
        let bw = BandwidthSet::single(s).unwrap();
        let v = mmd2_biased(&t(&[x.to_vec()]), &t(&[y.to_vec()]), &bw).unwrap();
        assert!((v - mmd2_pairwise(&x, &y, s).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn separated_clusters_approach_two() {
        let x = t(&[vec![0.0], vec![0.001]]);
        let y = t(&[vec![100.0], vec![100.001]]);
        let v = mmd2_biased(&x, &y, &BandwidthSet::single(0.01).unwrap()).unwrap();
        assert!((v - 2.0).abs() < 1e-2, "{v}");
    }

    #[test]
    fn identical_samples_give_zero() {
        let x = t(&[vec![0.3, 1.0], vec![-2.0, 0.5], vec![4.0, 4.0]]);
        let bw = BandwidthSet::geometric(1.0, -2, 2).unwrap();
        assert!(mmd2_biased(&x, &x, &bw).unwrap().abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_cases() {
        let same = t(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(median_heuristic(&same, &same).unwrap(), 1.0);
        let a = t(&[vec![0.0, 0.0]]);
        let b = t(&[vec![1.0, 1.0]]);
        assert!((median_heuristic(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bandwidths_sorted_and_validated() {
        let b = BandwidthSet::new(vec![2.0, 0.5, 1.0]).unwrap();
        assert_eq!(b.sigmas(), &[0.5, 1.0, 2.0]);
        assert!(BandwidthSet::new(vec![]).is_err());
        assert!(BandwidthSet::new(vec![1.0, -1.0]).is_err());
        assert_eq!(BandwidthSet::geometric(1.0, -2, 2).unwrap().sigmas(), &[0.25, 0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn empty_batch_rejected() {
        let x = Tensor::zeros(&[0, 2]);
        let y = t(&[vec![1.0, 1.0]]);
        assert!(mmd2_biased(&x, &y, &BandwidthSet::single(1.0).unwrap()).is_err());
    }
}
