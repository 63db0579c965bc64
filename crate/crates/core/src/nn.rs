//! Weight initialization, a plain MLP and first-order optimizers.

use std::fmt;
use std::str::FromStr;

use diffgraph::{Graph, ParamGrads, ParameterSet, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CoreError, Result};
use crate::rng::normal_vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitScheme {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Gaussian with variance `2 / fan_in`.
    Kaiming,
    /// Gaussian with standard deviation 0.02.
    Normal,
    /// Orthonormal rows or columns of the weight viewed as `out x fan_in`.
    Orthogonal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        InitScheme::Xavier,
        InitScheme::Kaiming,
        InitScheme::Normal,
        InitScheme::Orthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Xavier => "xavier",
            InitScheme::Kaiming => "kaiming",
            InitScheme::Normal => "normal",
            InitScheme::Orthogonal => "orthogonal",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        InitScheme::ALL
            .into_iter()
            .find(|i| i.name() == s.to_ascii_lowercase())
            .ok_or_else(|| CoreError::invalid("init", format!("unknown init scheme `{s}`")))
    }
}

/// Weight values for a `rows x cols` matrix (row-major).
pub fn init_matrix<R: Rng>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Vec<f64> {
    let n = rows * cols;
    match scheme {
        InitScheme::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a);
            (0..n).map(|_| u.sample(rng)).collect()
        }
        InitScheme::Kaiming => {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        InitScheme::Normal => {
            let d = Normal::new(0.0, 0.02).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        InitScheme::Orthogonal => orthogonal(rows, cols, rng),
    }
}

/// Random matrix with orthonormal columns (tall) or rows (wide).
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // columns of a tall x short matrix, stored column-major
    let mut q: Vec<Vec<f64>> = (0..short).map(|_| normal_vec(rng, tall)).collect();
    for j in 0..short {
        // two passes of modified Gram-Schmidt keep the result orthonormal to machine precision
        for _ in 0..2 {
            for i in 0..j {
                let (head, tail) = q.split_at_mut(j);
                let d: f64 = head[i].iter().zip(&tail[0]).map(|(a, b)| a * b).sum();
                for (t, h) in tail[0].iter_mut().zip(&head[i]) {
                    *t -= d * h;
                }
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut q[j] {
            *v /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            if rows >= cols {
                out[i * cols + j] = *v;
            } else {
                out[j * cols + i] = *v;
            }
        }
    }
    out
}

/// Fully connected ReLU network whose parameters live in a shared [`ParameterSet`].
///
/// Layer `i` owns `{prefix}.{i}.weight` (in x out) and `{prefix}.{i}.bias`.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    first: usize,
}

impl Mlp {
    /// Append freshly initialized layers (Kaiming weights, zero biases) to `params`.
    pub fn build<R: Rng>(
        params: &mut ParameterSet,
        prefix: &str,
        dims: &[usize],
        rng: &mut R,
        trainable: bool,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(CoreError::invalid("mlp", format!("bad layer sizes {dims:?}")));
        }
        let first = params.len();
        for (i, w) in dims.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let wt = init_matrix(fi, fo, fi, fo, InitScheme::Kaiming, rng);
            params.insert(format!("{prefix}.{i}.weight"), Tensor::new(&[fi, fo], wt)?, trainable)?;
            params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fo]), trainable)?;
        }
        Ok(Self {
            dims: dims.to_vec(),
            first,
        })
    }

    /// Re-attach to layers already present in `params` (e.g. after loading a checkpoint).
    pub fn attach(params: &ParameterSet, prefix: &str) -> Result<Self> {
        let first = params
            .index_of(&format!("{prefix}.0.weight"))
            .ok_or_else(|| CoreError::invalid("mlp", format!("no layers under `{prefix}`")))?;
        let mut dims = vec![params.tensor(&format!("{prefix}.0.weight"))?.shape()[0]];
        let mut i = 0;
        while let Some(p) = params.get(&format!("{prefix}.{i}.weight")) {
            dims.push(p.tensor.shape()[1]);
            i += 1;
        }
        Ok(Self { dims, first })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `x` is `N x in_dim`; `vars` is the binding of the owning parameter set.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = vars[self.first + 2 * i];
            let b = vars[self.first + 2 * i + 1];
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// First-order optimizer over the trainable entries of a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Gradients for frozen or unknown names are rejected.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParamGrads) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (name, g) in grads {
            let idx = params
                .index_of(name)
                .ok_or_else(|| CoreError::invalid("optimizer", format!("unknown parameter `{name}`")))?;
            let p = params.get(name).unwrap();
            if !p.trainable {
                return Err(CoreError::invalid("optimizer", format!("`{name}` is frozen")));
            }
            if p.tensor.shape() != g.shape() {
                return Err(CoreError::invalid(
                    "optimizer",
                    format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.tensor.shape()),
                ));
            }
            let w = params.tensor_mut(name)?.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g.data()) {
                        *wi -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
