//! Feed-forward regressor with dropout and twin scalar heads.
//!
//! The trunk is a stack of `affine -> activation -> dropout` blocks. Two linear
//! heads read the last trunk activation: `head_y` predicts the target and
//! `head_z` predicts the log aleatoric variance `z = ln σ²`, clamped to
//! `[z_min, z_max]`.
//!
//! Weights are stored `(fan_in × fan_out)` so a batch forward is `X·W + b`.
//!
//! Initialization: weights `U(-a, a)` with `a = sqrt(6 / fan_in)` for ReLU
//! layers and `a = sqrt(3 / fan_in)` for tanh layers and both heads; every
//! bias starts at zero, so the initial variance prediction is near `exp(0)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{check_dropout, Matrix, RngState};

pub const DEFAULT_Z_MIN: f64 = -6.0;
pub const DEFAULT_Z_MAX: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

fn default_z_min() -> f64 {
    DEFAULT_Z_MIN
}

fn default_z_max() -> f64 {
    DEFAULT_Z_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_p: f64,
    pub activation: Activation,
    #[serde(default = "default_z_min")]
    pub z_min: f64,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, dropout_p: f64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            dropout_p,
            activation: Activation::Relu,
            z_min: DEFAULT_Z_MIN,
            z_max: DEFAULT_Z_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be >= 1"));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::param(
                "hidden_dims",
                format!("layer {pos} has width 0"),
            ));
        }
        check_dropout(self.dropout_p)?;
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_min < self.z_max) {
            return Err(Error::param(
                "z_min/z_max",
                format!("need finite z_min < z_max, got [{}, {}]", self.z_min, self.z_max),
            ));
        }
        Ok(())
    }

    fn trunk_width(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// One affine map: `weight` is `(fan_in × fan_out)`, `bias` has `fan_out` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, limit: f64, rng: &mut RngState) -> Self {
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("sized above"),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row(&self.bias)?;
        Ok(out)
    }

    fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }
}

/// All trainable parameters of one model, in a fixed order:
/// hidden layers first to last, then `head_y`, then `head_z`.
///
/// The same type carries gradients ([`GradientSet`]) and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub hidden: Vec<Dense>,
    pub head_y: Dense,
    pub head_z: Dense,
}

pub type GradientSet = ParamSet;

impl ParamSet {
    pub fn zeros(config: &MlpConfig) -> Self {
        let mut fan_in = config.input_dim;
        let hidden = config
            .hidden_dims
            .iter()
            .map(|&w| {
                let d = Dense::zeros(fan_in, w);
                fan_in = w;
                d
            })
            .collect();
        Self {
            hidden,
            head_y: Dense::zeros(fan_in, 1),
            head_z: Dense::zeros(fan_in, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.fill(0.0);
        }
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.head_y))
            .chain(std::iter::once(&self.head_z))
    }

    /// Parameter tensors as flat slices (weight then bias, per layer).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|d| [d.weight.data(), d.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * (self.hidden.len() + 2));
        for d in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.head_y))
            .chain(std::iter::once(&mut self.head_z))
        {
            out.push(d.weight.data_mut());
            out.push(d.bias.as_mut_slice());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("ParamSet::set_flat", self.len(), flat.len()));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("ParamSet::accumulate", "lhs", "rhs"));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.hidden.len() == other.hidden.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.shape() == b.shape() && a.bias.len() == b.bias.len())
    }
}

/// Bookkeeping from one forward pass, consumed by [`MlpModel::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation of each hidden layer.
    pub pre: Vec<Matrix>,
    /// Post-dropout activation of each hidden layer.
    pub post: Vec<Matrix>,
    /// Dropout mask of each hidden layer (all ones in deterministic mode).
    pub masks: Vec<Matrix>,
    /// `head_z` output before clamping.
    pub z_raw: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
}

impl ForwardTrace {
    /// Last trunk activation (the input itself when there are no hidden layers).
    pub fn trunk(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.input)
    }

    pub fn batch(&self) -> usize {
        self.input.rows()
    }
}

pub enum Mode<'a> {
    /// Fresh dropout masks drawn from the generator: one variational draw.
    Stochastic(&'a mut RngState),
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    config: MlpConfig,
    params: ParamSet,
}

impl MlpModel {
    pub fn init(config: MlpConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        for &w in &config.hidden_dims {
            let limit = match config.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (3.0 / fan_in as f64).sqrt(),
            };
            hidden.push(Dense::uniform(fan_in, w, limit, rng));
            fan_in = w;
        }
        let head_limit = (3.0 / fan_in as f64).sqrt();
        let head_y = Dense::uniform(fan_in, 1, head_limit, rng);
        let head_z = Dense::uniform(fan_in, 1, head_limit, rng);
        Ok(Self {
            config,
            params: ParamSet {
                hidden,
                head_y,
                head_z,
            },
        })
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_params(config: MlpConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = ParamSet::zeros(&config);
        if !expected.same_shape(&params) {
            return Err(Error::shape(
                "MlpModel::from_params",
                format!("{:?} layout", config.hidden_dims),
                "supplied parameters",
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, x: &Matrix, mode: Mode<'_>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let masks = match mode {
            Mode::Stochastic(rng) => {
                let p = self.config.dropout_p;
                self.config
                    .hidden_dims
                    .iter()
                    .map(|&w| rng.dropout_mask(x.rows(), w, p))
                    .collect::<Result<Vec<_>>>()?
            }
            Mode::Deterministic => self
                .config
                .hidden_dims
                .iter()
                .map(|&w| Matrix::ones(x.rows(), w))
                .collect(),
        };
        self.forward_with_masks(x, masks)
    }

    /// Forward pass reusing the masks recorded in `trace`.
    pub fn replay(&self, trace: &ForwardTrace) -> Result<ForwardTrace> {
        self.forward_with_masks(&trace.input, trace.masks.clone())
    }

    pub fn forward_with_masks(&self, x: &Matrix, masks: Vec<Matrix>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        if masks.len() != self.params.hidden.len() {
            return Err(Error::shape(
                "forward_with_masks",
                format!("{} hidden layers", self.params.hidden.len()),
                format!("{} masks", masks.len()),
            ));
        }
        let act = self.config.activation;
        let mut pre = Vec::with_capacity(masks.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(masks.len());
        for (layer, mask) in self.params.hidden.iter().zip(&masks) {
            let h = post.last().unwrap_or(x);
            let p = layer.apply(h)?;
            let out = p.map(|v| act.apply(v)).hadamard(mask)?;
            pre.push(p);
            post.push(out);
        }
        let trunk = post.last().unwrap_or(x);
        let y_hat = self.params.head_y.apply(trunk)?.into_data();
        let z_raw = self.params.head_z.apply(trunk)?.into_data();
        let (lo, hi) = (self.config.z_min, self.config.z_max);
        let z_hat = z_raw.iter().map(|&z| z.clamp(lo, hi)).collect();
        Ok(ForwardTrace {
            input: x.clone(),
            pre,
            post,
            masks,
            z_raw,
            y_hat,
            z_hat,
        })
    }

    /// Exact gradient of a scalar loss given its derivatives with respect to
    /// the two head outputs. Units whose mask entry is zero receive no
    /// gradient; `z` receives none where the clamp is active.
    pub fn backward(&self, trace: &ForwardTrace, d_y: &[f64], d_z: &[f64]) -> Result<GradientSet> {
        self.check_trace(trace)?;
        let n = trace.batch();
        if d_y.len() != n || d_z.len() != n {
            return Err(Error::shape(
                "backward",
                format!("batch {n}"),
                format!("d_y {} / d_z {}", d_y.len(), d_z.len()),
            ));
        }
        let (lo, hi) = (self.config.z_min, self.config.z_max);
        let d_z_raw: Vec<f64> = trace
            .z_raw
            .iter()
            .zip(d_z)
            .map(|(&z, &g)| if z < lo || z > hi { 0.0 } else { g })
            .collect();

        let mut grads = self.params.zeros_like();
        let trunk = trace.trunk();
        let dy = Matrix::column(d_y);
        let dz = Matrix::column(&d_z_raw);

        grads.head_y.weight = trunk.t_matmul(&dy)?;
        grads.head_y.bias = vec![d_y.iter().sum()];
        grads.head_z.weight = trunk.t_matmul(&dz)?;
        grads.head_z.bias = vec![d_z_raw.iter().sum()];

        let mut d_h = dy.matmul_t(&self.params.head_y.weight)?;
        let from_z = dz.matmul_t(&self.params.head_z.weight)?;
        for (a, b) in d_h.data_mut().iter_mut().zip(from_z.data()) {
            *a += b;
        }

        let act = self.config.activation;
        for l in (0..self.params.hidden.len()).rev() {
            let mut d_pre = d_h.hadamard(&trace.masks[l])?;
            for (g, &p) in d_pre.data_mut().iter_mut().zip(trace.pre[l].data()) {
                *g *= act.derivative(p);
            }
            let h_prev = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            grads.hidden[l].weight = h_prev.t_matmul(&d_pre)?;
            grads.hidden[l].bias = d_pre.column_sums();
            if l > 0 {
                d_h = d_pre.matmul_t(&self.params.hidden[l].weight)?;
            }
        }
        Ok(grads)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input_dim {}", self.config.input_dim),
                format!("x {}x{}", x.rows(), x.cols()),
            ));
        }
        Ok(())
    }

    fn check_trace(&self, t: &ForwardTrace) -> Result<()> {
        let n = t.batch();
        let ok = t.input.cols() == self.config.input_dim
            && t.pre.len() == self.params.hidden.len()
            && t.post.len() == t.pre.len()
            && t.masks.len() == t.pre.len()
            && t
                .pre
                .iter()
                .zip(&t.masks)
                .zip(&self.params.hidden)
                .all(|((p, m), layer)| {
                    let w = layer.weight.cols();
                    p.shape() == (n, w) && m.shape() == (n, w)
                })
            && t.z_raw.len() == n
            && t.y_hat.len() == n
            && t.trunk().cols() == self.config.trunk_width();
        if ok {
            Ok(())
        } else {
            Err(Error::StaleTrace(
                "trace shapes do not match this model".into(),
            ))
        }
    }

    // Checkpoint layout, all integers u64 and reals f64, little-endian:
    //
    //   magic      8 bytes  "UCVMECKP"
    //   version    u32      = 1
    //   input_dim, n_hidden, hidden_dims[n_hidden]
    //   dropout_p, activation (u8: 0 relu, 1 tanh), z_min, z_max
    //   per layer (hidden..., head_y, head_z):
    //     fan_in, fan_out, weight[fan_in*fan_out] row-major, bias[fan_out]
    //
    // Floats are stored as raw bit patterns so a round trip is bit-exact.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        put_u64(&mut out, c.input_dim as u64);
        put_u64(&mut out, c.hidden_dims.len() as u64);
        for &d in &c.hidden_dims {
            put_u64(&mut out, d as u64);
        }
        put_f64(&mut out, c.dropout_p);
        out.push(c.activation.code());
        put_f64(&mut out, c.z_min);
        put_f64(&mut out, c.z_max);
        for layer in self.params.layers() {
            let (r, k) = layer.shape();
            put_u64(&mut out, r as u64);
            put_u64(&mut out, k as u64);
            for &v in layer.weight.data().iter().chain(&layer.bias) {
                put_f64(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = r.usize()?;
        let n_hidden = r.usize()?;
        if n_hidden > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_hidden}")));
        }
        let hidden_dims = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let dropout_p = r.f64()?;
        let activation = Activation::from_code(r.take(1)?[0])?;
        let z_min = r.f64()?;
        let z_max = r.f64()?;
        let config = MlpConfig {
            input_dim,
            hidden_dims,
            dropout_p,
            activation,
            z_min,
            z_max,
        };
        config.validate()?;
        let mut params = ParamSet::zeros(&config);
        for s in params.slices_mut().chunks_mut(2) {
            let fan_in = r.usize()?;
            let fan_out = r.usize()?;
            let [w, b] = s else { unreachable!() };
            if fan_in * fan_out != w.len() || fan_out != b.len() {
                return Err(Error::Checkpoint(format!(
                    "layer shape {fan_in}x{fan_out} disagrees with config"
                )));
            }
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Free-function form of [`MlpModel::init`].
pub fn init_model(config: MlpConfig, rng: &mut RngState) -> Result<MlpModel> {
    MlpModel::init(config, rng)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UCVMECKP";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}
