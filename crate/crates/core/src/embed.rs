//! Frozen random embedding networks and the embedding loss.
//!
//! Each network maps a batch to `N x d'` features. Two-dimensional points are
//! first lifted to a `1 x 8 x 8` image by a fixed random linear map owned by
//! the network; `1 x 8 x 8` and `1 x 16 x 16` images (or their flattened rows)
//! are consumed directly.

use std::fmt;
use std::str::FromStr;

use diffgraph::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::kernel::{median_heuristic, mmd2_terms, BandwidthSet, MmdTerms};
use crate::nn::{init_matrix, InitScheme};
use crate::rng::{derive_seed, keyed_rng, normal_vec};

/// Hidden channel width used by [`create_network`].
pub const DEFAULT_WIDTH: usize = 8;
pub const DEFAULT_OUT_DIM: usize = 64;
pub const DEFAULT_LAMBDA: f64 = 10.0;
const LIFT_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedArch {
    /// Three conv/ReLU/pool stages, then a linear head.
    SimpleCnn,
    /// Parallel 1x1, 3x3 and 5x5 branches, pooled and concatenated.
    MultiScale,
    /// Convolutional stem and three residual blocks.
    Residual,
    /// Patch tokens and one self-attention layer.
    Attention,
}

impl EmbedArch {
    pub const ALL: [EmbedArch; 4] = [
        EmbedArch::SimpleCnn,
        EmbedArch::MultiScale,
        EmbedArch::Residual,
        EmbedArch::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbedArch::SimpleCnn => "simple_cnn",
            EmbedArch::MultiScale => "multi_scale",
            EmbedArch::Residual => "residual",
            EmbedArch::Attention => "attention",
        }
    }
}

impl fmt::Display for EmbedArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbedArch {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        EmbedArch::ALL
            .into_iter()
            .find(|a| a.name() == s || a.name().replace('_', "") == s)
            .ok_or_else(|| CoreError::invalid("arch", format!("unknown architecture `{s}`")))
    }
}

/// A frozen random feature extractor.
#[derive(Clone, Debug)]
pub struct EmbeddingNetwork {
    arch: EmbedArch,
    init: InitScheme,
    seed: u64,
    out_dim: usize,
    width: usize,
    params: ParameterSet,
    /// First-layer convolutions precomposed with the point lift.
    fused: Vec<Fused>,
}

/// `conv(lift(x))` for `N x 2` points as one `2 x (C·H·W)` matrix plus bias.
#[derive(Clone, Debug)]
struct Fused {
    layer: &'static str,
    weight: Tensor,
    bias: Tensor,
    out: [usize; 3],
}

struct Builder<'a> {
    params: ParameterSet,
    init: InitScheme,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> Result<()> {
        let fan_in = in_c * k * k;
        let w = init_matrix(out_c, fan_in, fan_in, out_c * k * k, self.init, self.rng);
        self.params
            .insert(format!("{name}.weight"), Tensor::new(&[out_c, in_c, k, k], w)?, false)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]), false)?;
        Ok(())
    }

    fn linear(&mut self, name: &str, fi: usize, fo: usize) -> Result<()> {
        let w = init_matrix(fi, fo, fi, fo, self.init, self.rng);
        self.params.insert(format!("{name}.weight"), Tensor::new(&[fi, fo], w)?, false)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[fo]), false)?;
        Ok(())
    }
}

/// Build a frozen network with the default channel width.
pub fn create_network(
    arch: EmbedArch,
    init: InitScheme,
    out_dim: usize,
    seed: u64,
) -> Result<EmbeddingNetwork> {
    create_network_with_width(arch, init, out_dim, DEFAULT_WIDTH, seed)
}

pub fn create_network_with_width(
    arch: EmbedArch,
    init: InitScheme,
    out_dim: usize,
    width: usize,
    seed: u64,
) -> Result<EmbeddingNetwork> {
    if out_dim == 0 || width == 0 {
        return Err(CoreError::invalid("create_network", "out_dim and width must be positive"));
    }
    let mut rng = keyed_rng(seed, "embedding-network");
    let lift = Tensor::new(
        &[2, LIFT_SIDE * LIFT_SIDE],
        normal_vec(&mut rng, 2 * LIFT_SIDE * LIFT_SIDE)
            .into_iter()
            .map(|v| v * std::f64::consts::FRAC_1_SQRT_2)
            .collect(),
    )?;
    let mut b = Builder {
        params: ParameterSet::new(),
        init,
        rng: &mut rng,
    };
    b.params.insert("lift", lift, false)?;
    let w = width;
    match arch {
        EmbedArch::SimpleCnn => {
            b.conv("conv0", w, 1, 3)?;
            b.conv("conv1", w, w, 3)?;
            b.conv("conv2", w, w, 3)?;
            b.linear("head", w, out_dim)?;
        }
        EmbedArch::MultiScale => {
            for k in [1, 3, 5] {
                b.conv(&format!("branch{k}"), w, 1, k)?;
            }
            b.linear("head", 3 * w * 4, out_dim)?;
        }
        EmbedArch::Residual => {
            b.conv("stem", w, 1, 3)?;
            for i in 0..3 {
                b.conv(&format!("block{i}.a"), w, w, 3)?;
                b.conv(&format!("block{i}.b"), w, w, 3)?;
            }
            b.linear("head", w, out_dim)?;
        }
        EmbedArch::Attention => {
            b.conv("patch", w, 1, 2)?;
            let pos: Vec<f64> = normal_vec(b.rng, 16 * w).into_iter().map(|v| 0.1 * v).collect();
            b.params.insert("pos", Tensor::new(&[16 * w], pos)?, false)?;
            for name in ["query", "key", "value"] {
                b.linear(name, w, w)?;
            }
            b.linear("head", w, out_dim)?;
        }
    }
    let params = b.params;
    let fused = first_layers(arch)
        .iter()
        .map(|&(layer, pad, stride)| fuse_lift(&params, layer, pad, stride))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingNetwork {
        arch,
        init,
        seed,
        out_dim,
        width,
        params,
        fused,
    })
}

/// Convolutions applied directly to the input image: `(name, pad, stride)`.
fn first_layers(arch: EmbedArch) -> &'static [(&'static str, usize, usize)] {
    match arch {
        EmbedArch::SimpleCnn => &[("conv0", 1, 1)],
        EmbedArch::MultiScale => &[("branch1", 0, 1), ("branch3", 1, 1), ("branch5", 2, 1)],
        EmbedArch::Residual => &[("stem", 1, 1)],
        EmbedArch::Attention => &[("patch", 0, 2)],
    }
}

fn fuse_lift(params: &ParameterSet, layer: &'static str, pad: usize, stride: usize) -> Result<Fused> {
    let mut g = Graph::new();
    let basis = params.tensor("lift")?.reshape(&[2, 1, LIFT_SIDE, LIFT_SIDE])?;
    let x = g.constant(basis);
    let w = g.constant(params.tensor(&format!("{layer}.weight"))?.clone());
    let y = g.conv2d(x, w, None, stride, pad)?;
    let s = g.shape(y).to_vec();
    let out = [s[1], s[2], s[3]];
    let weight = g.value(y).reshape(&[2, s[1] * s[2] * s[3]])?;
    let b = params.tensor(&format!("{layer}.bias"))?;
    let per = s[2] * s[3];
    let bias = Tensor::new(
        &[s[1] * per],
        b.data().iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect(),
    )?;
    Ok(Fused {
        layer,
        weight,
        bias,
        out,
    })
}

impl EmbeddingNetwork {
    pub fn arch(&self) -> EmbedArch {
        self.arch
    }

    pub fn init(&self) -> InitScheme {
        self.init
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Differentiable embedding of `x`; gradients reach `x` but never the weights.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_impl(g, x, true)
    }

    /// Same map without the precomposed first layer: points are lifted to an
    /// image and convolved explicitly. Used to cross-check the fused path.
    pub fn forward_unfused(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_impl(g, x, false)
    }

    fn forward_impl(&self, g: &mut Graph, x: Var, allow_fused: bool) -> Result<Var> {
        let p = Weights {
            vars: g.bind_frozen(&self.params).vars().to_vec(),
            params: &self.params,
        };
        let mut input = self.adapt(g, &p, x)?;
        if !allow_fused {
            if let Input::Points(x) = input {
                let n = g.shape(x)[0];
                let h = g.matmul(x, p.get("lift"))?;
                input = Input::Image(g.reshape(h, &[n, 1, LIFT_SIDE, LIFT_SIDE])?);
            }
        }
        let (n, side) = match input {
            Input::Points(x) => (g.shape(x)[0], LIFT_SIDE),
            Input::Image(x) => (g.shape(x)[0], g.shape(x)[2]),
        };
        let w = self.width;
        let feat = match self.arch {
            EmbedArch::SimpleCnn => {
                let mut h = self.first(g, &p, "conv0", input)?;
                for i in 0..3 {
                    if i > 0 {
                        h = conv(g, &p, &format!("conv{i}"), h, 1)?;
                    }
                    h = g.relu(h);
                    h = g.avg_pool2d(h, 2)?;
                }
                global_pool(g, h)?
            }
            EmbedArch::MultiScale => {
                let mut branches = Vec::with_capacity(3);
                for name in ["branch1", "branch3", "branch5"] {
                    let h = self.first(g, &p, name, input)?;
                    let h = g.relu(h);
                    branches.push(g.avg_pool2d(h, side / 2)?);
                }
                let h = g.concat(&branches, 1)?;
                g.reshape(h, &[n, 12 * w])?
            }
            EmbedArch::Residual => {
                let h = self.first(g, &p, "stem", input)?;
                let h = g.relu(h);
                let mut h = g.avg_pool2d(h, 2)?;
                for i in 0..3 {
                    let a = conv(g, &p, &format!("block{i}.a"), h, 1)?;
                    let a = g.relu(a);
                    let r = conv(g, &p, &format!("block{i}.b"), a, 1)?;
                    let s = g.add(h, r)?;
                    h = g.relu(s);
                }
                global_pool(g, h)?
            }
            EmbedArch::Attention => {
                let input = match input {
                    Input::Image(img) if side > LIFT_SIDE => Input::Image(g.avg_pool2d(img, side / LIFT_SIDE)?),
                    other => other,
                };
                let t = self.first(g, &p, "patch", input)?; // N x w x 4 x 4
                let t = g.reshape(t, &[n, w, 16])?;
                let t = g.transpose(t)?; // N x 16 x w
                let t = g.reshape(t, &[n, 16 * w])?;
                let t = g.add_row(t, p.get("pos"))?;
                let x = g.reshape(t, &[n, 16, w])?;
                let q = linear(g, &p, "query", x)?;
                let k = linear(g, &p, "key", x)?;
                let v = linear(g, &p, "value", x)?;
                let kt = g.transpose(k)?;
                let s = g.batch_matmul(q, kt)?;
                let s = g.scale(s, 1.0 / (w as f64).sqrt());
                let a = g.softmax(s)?;
                let o = g.batch_matmul(a, v)?;
                let h = g.add(x, o)?;
                g.mean_axis(h, 1)?
            }
        };
        linear(g, &p, "head", feat)
    }

    /// A first-layer convolution, taken from the fused table for point input.
    fn first(&self, g: &mut Graph, p: &Weights<'_>, name: &str, input: Input) -> Result<Var> {
        let &(_, pad, stride) = first_layers(self.arch)
            .iter()
            .find(|l| l.0 == name)
            .expect("known first layer");
        match input {
            Input::Image(img) => {
                let w = p.get(&format!("{name}.weight"));
                let b = p.get(&format!("{name}.bias"));
                Ok(g.conv2d(img, w, Some(b), stride, pad)?)
            }
            Input::Points(x) => {
                let f = self.fused.iter().find(|f| f.layer == name).expect("fused layer");
                let n = g.shape(x)[0];
                let wv = g.constant(f.weight.clone());
                let bv = g.constant(f.bias.clone());
                let h = g.matmul(x, wv)?;
                let h = g.add_row(h, bv)?;
                Ok(g.reshape(h, &[n, f.out[0], f.out[1], f.out[2]])?)
            }
        }
    }

    /// Embedding values without recording gradients.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    fn adapt(&self, g: &mut Graph, _p: &Weights<'_>, x: Var) -> Result<Input> {
        let s = g.shape(x).to_vec();
        let n = s.first().copied().unwrap_or(0);
        let side = match s.as_slice() {
            [_, 2] => return Ok(Input::Points(x)),
            [_, d] if *d == 64 || *d == 256 => (*d as f64).sqrt() as usize,
            [_, 1, h, w] if h == w && (*h == 8 || *h == 16) => return Ok(Input::Image(x)),
            _ => {
                return Err(CoreError::invalid(
                    "embed",
                    format!("input shape {s:?} is not N x 2, N x 1 x 8 x 8 or N x 1 x 16 x 16"),
                ))
            }
        };
        Ok(Input::Image(g.reshape(x, &[n, 1, side, side])?))
    }
}

#[derive(Clone, Copy)]
enum Input {
    Points(Var),
    Image(Var),
}

struct Weights<'a> {
    vars: Vec<Var>,
    params: &'a ParameterSet,
}

impl Weights<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.params.index_of(name).unwrap_or_else(|| panic!("missing weight {name}"))]
    }
}

fn conv(g: &mut Graph, p: &Weights<'_>, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    Ok(g.conv2d(x, w, Some(b), 1, pad)?)
}

fn linear(g: &mut Graph, p: &Weights<'_>, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{name}.weight")))?;
    Ok(g.add_row(h, p.get(&format!("{name}.bias")))?)
}

/// Average over the remaining spatial extent and flatten to `N x C`.
fn global_pool(g: &mut Graph, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let h = if s[2] > 1 { g.avg_pool2d(h, s[2])? } else { h };
    Ok(g.reshape(h, &[s[0], s[1]])?)
}

/// Member list and shared settings of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<(EmbedArch, InitScheme, u64)>,
    pub out_dim: usize,
    pub width: usize,
    pub nets_per_type: usize,
}

impl EnsembleSpec {
    /// Architecture `i` paired with initialization `i`, `nets_per_type` copies each.
    pub fn paired(nets_per_type: usize, seed: u64) -> Self {
        let mut members = Vec::new();
        for (i, (a, s)) in EmbedArch::ALL.into_iter().zip(InitScheme::ALL).enumerate() {
            for j in 0..nets_per_type {
                members.push((a, s, derive_seed(seed, &[i as u64, j as u64])));
            }
        }
        Self {
            members,
            out_dim: DEFAULT_OUT_DIM,
            width: DEFAULT_WIDTH,
            nets_per_type,
        }
    }

    /// Every architecture with every initialization (16 networks).
    pub fn full_grid(seed: u64) -> Self {
        let mut members = Vec::new();
        for (i, a) in EmbedArch::ALL.into_iter().enumerate() {
            for (j, s) in InitScheme::ALL.into_iter().enumerate() {
                members.push((a, s, derive_seed(seed, &[i as u64, j as u64])));
            }
        }
        Self {
            members,
            out_dim: DEFAULT_OUT_DIM,
            width: DEFAULT_WIDTH,
            nets_per_type: 4,
        }
    }

    /// All four architectures sharing one initialization scheme.
    pub fn archs_one_init(init: InitScheme, seed: u64) -> Self {
        let members = EmbedArch::ALL
            .into_iter()
            .enumerate()
            .map(|(i, a)| (a, init, derive_seed(seed, &[i as u64, 0])))
            .collect();
        Self {
            members,
            out_dim: DEFAULT_OUT_DIM,
            width: DEFAULT_WIDTH,
            nets_per_type: 1,
        }
    }

    pub fn single(arch: EmbedArch, init: InitScheme, seed: u64) -> Self {
        Self {
            members: vec![(arch, init, derive_seed(seed, &[0, 0]))],
            out_dim: DEFAULT_OUT_DIM,
            width: DEFAULT_WIDTH,
            nets_per_type: 1,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_out_dim(mut self, out_dim: usize) -> Self {
        self.out_dim = out_dim;
        self
    }

    /// Same members with every seed re-derived from `salt` (fresh random weights).
    pub fn reseeded(&self, salt: u64) -> Self {
        let mut s = self.clone();
        for (i, m) in s.members.iter_mut().enumerate() {
            m.2 = derive_seed(m.2, &[salt, i as u64]);
        }
        s
    }

    pub fn build(&self) -> Result<EmbeddingEnsemble> {
        let networks = self
            .members
            .iter()
            .map(|&(a, i, s)| create_network_with_width(a, i, self.out_dim, self.width, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingEnsemble {
            networks,
            nets_per_type: self.nets_per_type,
        })
    }
}

/// `K` frozen embedding networks; the loss averages over all of them.
#[derive(Clone, Debug)]
pub struct EmbeddingEnsemble {
    networks: Vec<EmbeddingNetwork>,
    nets_per_type: usize,
}

impl EmbeddingEnsemble {
    pub fn new(networks: Vec<EmbeddingNetwork>, nets_per_type: usize) -> Self {
        Self {
            networks,
            nets_per_type,
        }
    }

    pub fn networks(&self) -> &[EmbeddingNetwork] {
        &self.networks
    }

    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn nets_per_type(&self) -> usize {
        self.nets_per_type
    }

    /// Flattened weights of every member, for frozen-ness checks.
    pub fn snapshot(&self) -> Vec<ParameterSet> {
        self.networks.iter().map(|n| n.params.clone()).collect()
    }
}

/// How kernel bandwidths are chosen in embedding space.
#[derive(Clone, Debug, PartialEq)]
pub enum Bandwidths {
    /// The same set for every network.
    Fixed(BandwidthSet),
    /// Per network, `sigma_med * 2^{lo..=hi}` with `sigma_med` the median
    /// heuristic over the pooled real and generated embeddings. The bandwidth
    /// is a function of the current values only and carries no gradient.
    Median { lo: i32, hi: i32 },
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths::Median { lo: -2, hi: 2 }
    }
}

impl Bandwidths {
    pub fn resolve(&self, real: &Tensor, gen: &Tensor) -> Result<BandwidthSet> {
        match self {
            Bandwidths::Fixed(b) => Ok(b.clone()),
            Bandwidths::Median { lo, hi } => {
                BandwidthSet::geometric(median_heuristic(real, gen)?, *lo, *hi)
            }
        }
    }
}

/// Per-network MMD terms between embedded real and generated batches.
pub fn embedding_terms(
    g: &mut Graph,
    real: &Tensor,
    gen: Var,
    ens: &EmbeddingEnsemble,
    bw: &Bandwidths,
) -> Result<Vec<MmdTerms>> {
    if ens.is_empty() {
        return Err(CoreError::Empty("embedding ensemble"));
    }
    if real.rows() == 0 || g.value(gen).rows() == 0 {
        return Err(CoreError::Empty("embedding_loss"));
    }
    if real.shape()[1..] != g.shape(gen)[1..] {
        return Err(CoreError::invalid(
            "embedding_loss",
            format!("real {:?} and generated {:?} shapes differ", real.shape(), g.shape(gen)),
        ));
    }
    let r = g.constant(real.clone());
    let mut out = Vec::with_capacity(ens.len());
    for net in &ens.networks {
        let er = net.forward(g, r)?;
        let eg = net.forward(g, gen)?;
        let set = bw.resolve(g.value(er), g.value(eg))?;
        out.push(mmd2_terms(g, er, eg, &set)?);
    }
    Ok(out)
}

/// `lambda * mean_k MMD²(psi_k(real), psi_k(gen))` on the graph. `real` enters
/// as a constant, so only `gen` can receive a gradient.
pub fn embedding_loss_graph(
    g: &mut Graph,
    real: &Tensor,
    gen: Var,
    ens: &EmbeddingEnsemble,
    bw: &Bandwidths,
    lambda: f64,
) -> Result<Var> {
    let terms = embedding_terms(g, real, gen, ens, bw)?;
    let mut acc: Option<Var> = None;
    for t in terms {
        let m = t.combine(g)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    Ok(g.scale(acc.unwrap(), lambda / ens.len() as f64))
}

pub fn embedding_loss(
    real: &Tensor,
    gen: &Tensor,
    ens: &EmbeddingEnsemble,
    bw: &Bandwidths,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(gen.clone());
    let l = embedding_loss_graph(&mut g, real, x, ens, bw, lambda)?;
    Ok(g.value(l).item()?)
}

/// Gradient of the embedding loss with respect to the generated batch, and its value.
pub fn embedding_loss_grad(
    real: &Tensor,
    gen: &Tensor,
    ens: &EmbeddingEnsemble,
    bw: &Bandwidths,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(gen.clone());
    let l = embedding_loss_graph(&mut g, real, x, ens, bw, lambda)?;
    let value = g.value(l).item()?;
    let grad = g
        .backward(l)?
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(gen.shape()));
    Ok((value, grad))
}

/// Split of the generated-batch gradient into the part driven by the
/// real/generated cross term (alignment) and the part driven by the
/// generated/generated term (diversity). `total = alignment + diversity`.
#[derive(Clone, Debug)]
pub struct GradientParts {
    pub alignment: Tensor,
    pub diversity: Tensor,
    pub total: Tensor,
}

pub fn embedding_gradient_parts(
    real: &Tensor,
    gen: &Tensor,
    ens: &EmbeddingEnsemble,
    bw: &Bandwidths,
    lambda: f64,
) -> Result<GradientParts> {
    let scale = lambda / ens.len().max(1) as f64;
    // which of (xx, xy, yy) keep their dependence on gen
    let run = |keep_cross: bool, keep_self: bool| -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(gen.clone());
        let terms = embedding_terms(&mut g, real, x, ens, bw)?;
        let mut acc: Option<Var> = None;
        for t in terms {
            let xy = if keep_cross { t.xy } else { g.constant(g.value(t.xy).clone()) };
            let yy = if keep_self { t.yy } else { g.constant(g.value(t.yy).clone()) };
            let m = MmdTerms { xx: t.xx, xy, yy }.combine(&mut g)?;
            acc = Some(match acc {
                None => m,
                Some(a) => g.add(a, m)?,
            });
        }
        let l = g.scale(acc.unwrap(), scale);
        Ok(g.backward(l)?
            .take(x)
            .unwrap_or_else(|| Tensor::zeros(gen.shape())))
    };
    Ok(GradientParts {
        alignment: run(true, false)?,
        diversity: run(false, true)?,
        total: run(true, true)?,
    })
}

/// Draw a small random batch matching a network's point input, for tests and timing.
pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    crate::rng::normal_tensor(rng, &[n, 2])
}
