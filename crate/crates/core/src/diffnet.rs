//! Dense ReLU feed-forward networks with exact reverse-mode gradients.
//!
//! Both the generator `T(x, u)` and the potential `v(x, y)` are instances of
//! [`MlpNet`]. Parameters live in one flat vector so that optimizer updates
//! are plain vector arithmetic (see [`flat`]).
//!
//! # Parameter layout
//!
//! Layers are stored input-to-output. A layer with `fan_in = a` and
//! `fan_out = b` occupies `a * b + b` consecutive entries: first the weight
//! matrix `W` in row-major order with shape `(a, b)` (so `W[k][o]` connects
//! input unit `k` to output unit `o`), then the `b` biases. The layer computes
//! `z = x W + bias`; hidden layers apply ReLU, the output layer is linear.
//!
//! # Checkpoint format (version 1, all integers little-endian)
//!
//! | bytes          | content                                          |
//! |----------------|--------------------------------------------------|
//! | 8              | magic `b"CDOTMLP\0"`                             |
//! | 4              | `u32` format version (1)                         |
//! | 4              | `u32` input_dim                                  |
//! | 4              | `u32` output_dim                                 |
//! | 4              | `u32` activation code (0 = ReLU)                 |
//! | 4              | `u32` number of hidden layers `L`                |
//! | 4 * L          | `u32` hidden widths                              |
//! | 8              | `u64` parameter count `P`                        |
//! | 8 * P          | parameters as IEEE-754 `f64`, little-endian      |

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_HIDDEN_LAYERS: usize = 6;

const MAGIC: &[u8; 8] = b"CDOTMLP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

/// Architecture of a scalar-output MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl LayerSlot {
    fn end(&self) -> usize {
        self.bias + self.fan_out
    }
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            output_dim: 1,
            activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Six hidden layers of [`DEFAULT_HIDDEN_WIDTH`] units, seven layers total.
    pub fn with_default_hidden(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, vec![DEFAULT_HIDDEN_WIDTH; DEFAULT_HIDDEN_LAYERS])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.output_dim != 1 {
            return Err(Error::invalid("output_dim must be 1"));
        }
        if let Some(pos) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("hidden layer {pos} has zero width")));
        }
        Ok(())
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth() + 1);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                };
                offset = slot.end();
                slot
            })
            .collect()
    }
}

/// Activations recorded by [`MlpNet::forward_batch`], one matrix per layer
/// boundary. `activations[0]` is the input batch and the last entry holds
/// the network outputs (`n x 1`).
#[derive(Clone, Debug)]
pub struct Tape<S> {
    activations: Vec<Array2<S>>,
}

impl<S: Real> Tape<S> {
    pub fn outputs(&self) -> ArrayView1<'_, S> {
        self.activations
            .last()
            .expect("tape holds at least the input")
            .column(0)
    }

    pub fn batch_len(&self) -> usize {
        self.activations[0].nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet<S> {
    arch: MlpArch,
    params: Vec<S>,
    slots: Vec<LayerSlot>,
}

impl<S: Real> MlpNet<S> {
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        let n = arch.param_count();
        Self::from_params(arch, vec![S::zero(); n])
    }

    pub fn from_params(arch: MlpArch, params: Vec<S>) -> Result<Self> {
        arch.validate()?;
        check_len("MlpNet::from_params", arch.param_count(), params.len())?;
        let slots = arch.slots();
        Ok(Self {
            arch,
            params,
            slots,
        })
    }

    /// He-uniform initialization: weights drawn from `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`, biases zero.
    pub fn he_uniform<R: Rng + ?Sized>(arch: MlpArch, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for slot in net.slots.clone() {
            let bound = (6.0 / slot.fan_in as f64).sqrt();
            for w in &mut net.params[slot.weights..slot.bias] {
                *w = S::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[S]) -> Result<()> {
        check_len("MlpNet::set_params", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weights(&self, slot: &LayerSlot) -> ArrayView2<'_, S> {
        ArrayView2::from_shape(
            (slot.fan_in, slot.fan_out),
            &self.params[slot.weights..slot.bias],
        )
        .expect("slot shape matches layout")
    }

    fn bias(&self, slot: &LayerSlot) -> ArrayView1<'_, S> {
        ArrayView1::from(&self.params[slot.bias..slot.end()])
    }

    pub fn forward(&self, input: &[S]) -> Result<S> {
        check_len("MlpNet::forward", self.arch.input_dim, input.len())?;
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.predict_batch(batch)?[0])
    }

    /// Gradients of `upstream * forward(input)` with respect to the parameters
    /// and the input.
    pub fn backward(&self, input: &[S], upstream: S) -> Result<(Vec<S>, Vec<S>)> {
        check_len("MlpNet::backward", self.arch.input_dim, input.len())?;
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let tape = self.forward_batch(batch)?;
        let mut param_grad = vec![S::zero(); self.params.len()];
        let input_grad = self
            .backward_batch(&tape, &[upstream], &mut param_grad, true)?
            .expect("input gradient requested");
        Ok((param_grad, input_grad.row(0).to_vec()))
    }

    /// Evaluates a batch (one input per row) and keeps the activations.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, S>) -> Result<Tape<S>> {
        check_len("MlpNet::forward_batch", self.arch.input_dim, inputs.ncols())?;
        let mut activations = Vec::with_capacity(self.slots.len() + 1);
        activations.push(inputs.to_owned());
        let last = self.slots.len() - 1;
        for (l, slot) in self.slots.iter().enumerate() {
            let mut z = activations[l].dot(&self.weights(slot));
            z += &self.bias(slot);
            if l != last {
                z.mapv_inplace(relu);
            }
            activations.push(z);
        }
        Ok(Tape { activations })
    }

    /// Evaluates a batch without retaining intermediate activations.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, S>) -> Result<Array1<S>> {
        check_len("MlpNet::predict_batch", self.arch.input_dim, inputs.ncols())?;
        let last = self.slots.len() - 1;
        let mut a = inputs.to_owned();
        for (l, slot) in self.slots.iter().enumerate() {
            let mut z = a.dot(&self.weights(slot));
            z += &self.bias(slot);
            if l != last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        Ok(a.column(0).to_owned())
    }

    /// Reverse pass for a recorded batch. `upstream[r]` multiplies output `r`.
    /// Parameter gradients are *added* into `param_grad`; the input gradient
    /// (`n x input_dim`) is returned when requested.
    pub fn backward_batch(
        &self,
        tape: &Tape<S>,
        upstream: &[S],
        param_grad: &mut [S],
        want_input_grad: bool,
    ) -> Result<Option<Array2<S>>> {
        let n = tape.batch_len();
        check_len("MlpNet::backward_batch upstream", n, upstream.len())?;
        check_len(
            "MlpNet::backward_batch param_grad",
            self.params.len(),
            param_grad.len(),
        )?;
        let mut delta = Array2::from_shape_vec((n, 1), upstream.to_vec()).expect("column");
        for (l, slot) in self.slots.iter().enumerate().rev() {
            let input = &tape.activations[l];
            {
                let (head, tail) = param_grad.split_at_mut(slot.bias);
                let mut dw = ArrayViewMut2::from_shape(
                    (slot.fan_in, slot.fan_out),
                    &mut head[slot.weights..],
                )
                .expect("slot shape matches layout");
                general_mat_mul(S::one(), &input.t(), &delta, S::one(), &mut dw);
                for (g, d) in tail[..slot.fan_out]
                    .iter_mut()
                    .zip(delta.sum_axis(Axis(0)).iter())
                {
                    *g += *d;
                }
            }
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut upstream_act = delta.dot(&self.weights(slot).t());
            if l == 0 {
                return Ok(Some(upstream_act));
            }
            // ReLU'(z) = 1 iff z > 0, which is equivalent to relu(z) > 0.
            ndarray::Zip::from(&mut upstream_act)
                .and(input)
                .for_each(|g, &a| {
                    if a <= S::zero() {
                        *g = S::zero();
                    }
                });
            delta = upstream_act;
        }
        unreachable!("network has at least one layer")
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(w, self.arch.input_dim)?;
        write_u32(w, self.arch.output_dim)?;
        w.write_all(&self.arch.activation.code().to_le_bytes())?;
        write_u32(w, self.arch.hidden_widths.len())?;
        for &width in &self.arch.hidden_widths {
            write_u32(w, width)?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not an MLP block (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported MLP format version {version}"
            )));
        }
        let input_dim = read_u32(r)? as usize;
        let output_dim = read_u32(r)? as usize;
        let activation = Activation::from_code(read_u32(r)?)?;
        let n_hidden = read_u32(r)? as usize;
        let hidden_widths = (0..n_hidden)
            .map(|_| read_u32(r).map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = MlpArch {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
        };
        arch.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
        let count = read_u64(r)? as usize;
        if count != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let params = read_f64_vec(r, count)?.into_iter().map(S::lit).collect();
        Self::from_params(arch, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[inline]
fn relu<S: Real>(z: S) -> S {
    if z > S::zero() {
        z
    } else {
        S::zero()
    }
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64_slice<W: Write, S: Real>(w: &mut W, xs: &[S]) -> Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64_vec<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count.min(1 << 24));
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Elementwise operations on flat parameter vectors.
pub mod flat {
    use crate::error::{check_len, Result};
    use crate::scalar::Real;

    /// Returns `a * x + y`.
    pub fn axpy<S: Real>(a: S, x: &[S], y: &[S]) -> Result<Vec<S>> {
        check_len("flat::axpy", x.len(), y.len())?;
        Ok(x.iter().zip(y).map(|(&xi, &yi)| a * xi + yi).collect())
    }

    /// `y <- a * x + y`.
    pub fn axpy_in_place<S: Real>(a: S, x: &[S], y: &mut [S]) -> Result<()> {
        check_len("flat::axpy_in_place", x.len(), y.len())?;
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
        Ok(())
    }

    pub fn scale<S: Real>(a: S, x: &[S]) -> Vec<S> {
        x.iter().map(|&xi| a * xi).collect()
    }

    /// `acc <- acc + grad`.
    pub fn accumulate_grad<S: Real>(acc: &mut [S], grad: &[S]) -> Result<()> {
        axpy_in_place(S::one(), grad, acc)
    }

    /// `||x - y||^2`.
    pub fn squared_distance<S: Real>(x: &[S], y: &[S]) -> Result<S> {
        check_len("flat::squared_distance", x.len(), y.len())?;
        Ok(x.iter()
            .zip(y)
            .map(|(&a, &b)| (a - b) * (a - b))
            .fold(S::zero(), |acc, t| acc + t))
    }

    /// `y <- y + rate * (x - y)`, the exponential-averaging update.
    pub fn move_toward<S: Real>(y: &mut [S], x: &[S], rate: S) -> Result<()> {
        check_len("flat::move_toward", x.len(), y.len())?;
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += rate * (xi - *yi);
        }
        Ok(())
    }

    pub fn all_finite<S: Real>(x: &[S]) -> bool {
        x.iter().all(|v| v.is_finite())
    }
}
