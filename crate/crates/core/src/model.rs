//! Conditional noise predictor: a SiLU MLP over `[x_t, time features, condition embedding]`.
//!
//! The network is fixed-architecture and its gradient is derived by hand:
//! [`DenoiserParams::forward`] keeps the pre-activations it needs and
//! [`DenoiserParams::backward`] replays them in reverse. Batched evaluation
//! goes through `ndarray` matrix products.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::StreamKey;

/// Conditioning input: a learned row of the embedding table, or the null row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn class_id(self) -> Option<usize> {
        match self {
            Condition::Class(c) => Some(c),
            Condition::Null => None,
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "{c}"),
            Condition::Null => write!(f, "null"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub cond_dim: usize,
    /// Sinusoidal timestep features; must be even.
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    /// Largest timestep the network accepts.
    pub timesteps: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.data_dim == 0 || self.n_conditions == 0 || self.cond_dim == 0 {
            return bad("data_dim, n_conditions and cond_dim must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be positive and even");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive");
        }
        Ok(())
    }

    /// `(out, in)` shape of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.data_dim, fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.layer_shapes().iter().map(|(o, i)| o * i + o).sum();
        dense + (self.n_conditions + 1) * self.cond_dim
    }
}

const MIN_TIME_FREQ: f64 = 1e-4;
const MAX_TIME_FREQ: f64 = 0.1;

/// Sinusoidal features `[sin(t w_k)..., cos(t w_k)...]`, with `w_k` geometric
/// from `MAX_TIME_FREQ` down to `MIN_TIME_FREQ` radians per step. The usual
/// ladder tops out at one radian per step, which aliases on a strided grid
/// and makes the predicted noise jitter between neighboring inference steps.
/// `timesteps` is accepted so callers pass the schedule length; the ladder
/// itself is in absolute steps.
pub fn time_features(t: usize, timesteps: usize, dim: usize, out: &mut [f64]) {
    let _ = timesteps;
    let half = dim / 2;
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = MAX_TIME_FREQ * (MIN_TIME_FREQ / MAX_TIME_FREQ).powf(frac);
        let a = t as f64 * w;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// Row-major `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable state of the denoiser. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    pub layers: Vec<Dense>,
    /// `(n_conditions + 1, cond_dim)`; the last row is the null embedding.
    pub embedding: Array2<f64>,
    /// Optimizer steps applied so far; zero marks an untrained network.
    pub steps_trained: u64,
}

/// Intermediate values of a batched forward pass, consumed by `backward`.
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    conds: Vec<Condition>,
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        let embedding = Array2::zeros((arch.n_conditions + 1, arch.cond_dim));
        Ok(DenoiserParams {
            arch,
            layers,
            embedding,
            steps_trained: 0,
        })
    }

    /// LeCun-normal weights, zero biases, unit-normal embeddings.
    pub fn init(arch: Architecture, key: StreamKey) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = key.rng();
        for layer in &mut p.layers {
            let scale = 1.0 / (layer.weight.ncols() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                });
        }
        p.embedding.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch.clone()).expect("architecture already validated")
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn null_row(&self) -> usize {
        self.arch.n_conditions
    }

    fn row_of(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.null_row()),
            Condition::Class(c) if c < self.arch.n_conditions => Ok(c),
            Condition::Class(c) => Err(Error::Usage(format!(
                "condition {c} outside [0, {})",
                self.arch.n_conditions
            ))),
        }
    }

    /// Embedding vector for `cond`.
    pub fn embedding_of(&self, cond: Condition) -> Result<Vec<f64>> {
        Ok(self.embedding.row(self.row_of(cond)?).to_vec())
    }

    /// Flat views of every tensor in a fixed order (layers, then embedding).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            v.push(l.weight.as_slice().expect("standard layout"));
            v.push(l.bias.as_slice().expect("standard layout"));
        }
        v.push(self.embedding.as_slice().expect("standard layout"));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            v.push(l.weight.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.embedding.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &DenoiserParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.arch.timesteps {
            Err(Error::Usage(format!(
                "timestep {t} outside [1, {}]",
                self.arch.timesteps
            )))
        } else {
            Ok(())
        }
    }

    fn build_input(
        &self,
        x: ArrayView2<f64>,
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<Array2<f64>> {
        let a = &self.arch;
        check_dim(a.data_dim, x.ncols())?;
        check_dim(x.nrows(), ts.len())?;
        check_dim(x.nrows(), conds.len())?;
        let mut input = Array2::zeros((x.nrows(), a.input_dim()));
        let mut tf = vec![0.0; a.time_dim];
        let mut last_t = usize::MAX;
        for (i, (&t, &c)) in ts.iter().zip(conds).enumerate() {
            self.check_t(t)?;
            if t != last_t {
                time_features(t, a.timesteps, a.time_dim, &mut tf);
                last_t = t;
            }
            let row_idx = self.row_of(c)?;
            let mut row = input.row_mut(i);
            row.slice_mut(s![..a.data_dim]).assign(&x.row(i));
            row.slice_mut(s![a.data_dim..a.data_dim + a.time_dim])
                .as_slice_mut()
                .expect("contiguous row")
                .copy_from_slice(&tf);
            row.slice_mut(s![a.data_dim + a.time_dim..])
                .assign(&self.embedding.row(row_idx));
        }
        Ok(input)
    }

    /// Batched forward pass with per-row timestep and condition.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let input = self.build_input(x, ts, conds)?;
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(n_layers - 1);
        for (li, layer) in self.layers.iter().enumerate() {
            let src = if li == 0 { &input } else { &post[li - 1] };
            let mut z = src.dot(&layer.weight.t());
            z += &layer.bias;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { layer: li });
            }
            if li + 1 < n_layers {
                post.push(z.mapv(silu));
            }
            pre.push(z);
        }
        let out = pre.last().expect("at least one layer").clone();
        Ok((
            out,
            ForwardCache {
                input,
                pre,
                post,
                conds: conds.to_vec(),
            },
        ))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the network output is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>, grads: &mut DenoiserParams) {
        let mut g = grad_out.to_owned();
        for li in (0..self.layers.len()).rev() {
            let src = if li == 0 {
                &cache.input
            } else {
                &cache.post[li - 1]
            };
            let gl = &mut grads.layers[li];
            general_mat_mul(1.0, &g.t(), src, 1.0, &mut gl.weight);
            gl.bias += &g.sum_axis(Axis(0));
            let mut g_in = g.dot(&self.layers[li].weight);
            if li > 0 {
                g_in.zip_mut_with(&cache.pre[li - 1], |gv, &z| *gv *= silu_grad(z));
            } else {
                let off = self.arch.data_dim + self.arch.time_dim;
                for (i, &c) in cache.conds.iter().enumerate() {
                    let row = self.row_of(c).expect("validated in forward");
                    let src_row = g_in.slice(s![i, off..]);
                    let mut dst = grads.embedding.row_mut(row);
                    dst += &src_row;
                }
            }
            g = g_in;
        }
    }

    /// Noise prediction for a batch sharing one timestep and condition.
    pub fn predict_batch(&self, x: ArrayView2<f64>, t: usize, cond: Condition) -> Result<Array2<f64>> {
        let n = x.nrows();
        let (out, _) = self.forward(x, &vec![t; n], &vec![cond; n])?;
        Ok(out)
    }

    /// `eps_theta(x, t, cond)` for a single point.
    pub fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        check_dim(self.arch.data_dim, x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let out = self.predict_batch(view, t, cond)?;
        Ok(out.into_raw_vec_and_offset().0)
    }
}
