//! `TinySeg3D`: a three-layer fully convolutional 3D segmentation network
//! with hand-written backpropagation.
//!
//! ```text
//! image (1 ch) -> conv 3x3x3, 8 ch, pad 1 -> ReLU
//!              -> conv 3x3x3, 8 ch, pad 1 -> ReLU
//!              -> conv 1x1x1, 1 ch        -> logistic -> probability
//! ```
//!
//! Parameters live in one flat buffer in this order (kernels indexed
//! `[out][in][kz][ky][kx]`, zero padding, cross-correlation):
//!
//! | tensor | shape          | offset |
//! |--------|----------------|--------|
//! | w1     | 8 x 1 x 3x3x3  | 0      |
//! | b1     | 8              | 216    |
//! | w2     | 8 x 8 x 3x3x3  | 224    |
//! | b2     | 8              | 1952   |
//! | w3     | 1 x 8 x 1x1x1  | 1960   |
//! | b3     | 1              | 1968   |
//!
//! All reductions run in a fixed order, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::loss::{evaluate, LossSpec};
use crate::optim::{sgd_step, SgdConfig};
use crate::params::AdaptiveParams;
use crate::rng::Xoshiro256StarStar;
use crate::volume::{ensure_same_dims, Dims, MaskVolume, Volume3D};
use alloc::vec;
use alloc::vec::Vec;

pub const HIDDEN: usize = 8;
const K3: usize = 27;

pub const W1: usize = 0;
pub const B1: usize = W1 + HIDDEN * K3;
pub const W2: usize = B1 + HIDDEN;
pub const B2: usize = W2 + HIDDEN * HIDDEN * K3;
pub const W3: usize = B2 + HIDDEN;
pub const B3: usize = W3 + HIDDEN;
pub const PARAM_COUNT: usize = B3 + 1;

/// Shapes of the six parameter tensors, in buffer order.
pub const TENSOR_SHAPES: [&[usize]; 6] =
    [&[HIDDEN, 1, 3, 3, 3], &[HIDDEN], &[HIDDEN, HIDDEN, 3, 3, 3], &[HIDDEN], &[1, HIDDEN, 1, 1, 1], &[1]];

/// Smallest admissible extent along each axis.
pub const MIN_EXTENT: usize = 3;

/// Gradient of the loss w.r.t. every parameter, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySeg3D {
    params: Vec<f64>,
    velocity: Vec<f64>,
}

/// Activations kept by the forward pass for backpropagation, stored in the
/// zero-bordered layout.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    dims: Dims,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub prob: Volume3D,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Zero-bordered layout: every activation plane is stored with a one-voxel
/// halo so a kernel tap becomes a single contiguous shifted run.
#[derive(Debug, Clone, Copy)]
struct Padded {
    dims: Dims,
    py: usize,
    px: usize,
    len: usize,
    /// Flat range covering every interior voxel (and the halo columns and
    /// rows between them).
    span: (usize, usize),
}

impl Padded {
    fn new(dims: Dims) -> Self {
        let (pz, py, px) = (dims.nz + 2, dims.ny + 2, dims.nx + 2);
        let at = |z: usize, y: usize, x: usize| (z * py + y) * px + x;
        Self { dims, py, px, len: pz * py * px, span: (at(1, 1, 1), at(dims.nz, dims.ny, dims.nx) + 1) }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.py + y) * self.px + x
    }

    /// Flat offset of kernel tap `k` (0..27).
    fn tap(&self, k: usize) -> isize {
        let (dz, dy, dx) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
        (dz * self.py as isize + dy) * self.px as isize + dx
    }

    fn pad(&self, src: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let mut out = vec![0.0; self.len];
        for z in 0..d.nz {
            for y in 0..d.ny {
                let o = self.at(z + 1, y + 1, 1);
                out[o..o + d.nx].copy_from_slice(&src[d.index(z, y, 0)..d.index(z, y, 0) + d.nx]);
            }
        }
        out
    }

    fn unpad(&self, src: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let mut out = Vec::with_capacity(d.len());
        for z in 0..d.nz {
            for y in 0..d.ny {
                let o = self.at(z + 1, y + 1, 1);
                out.extend_from_slice(&src[o..o + d.nx]);
            }
        }
        out
    }

    /// Zeroes the halo voxels inside the span.
    fn clear_halo(&self, buf: &mut [f64]) {
        let d = self.dims;
        for z in 1..=d.nz {
            for y in 0..self.py {
                let row = self.at(z, y, 0);
                if y == 0 || y == self.py - 1 {
                    buf[row..row + self.px].fill(0.0);
                } else {
                    buf[row] = 0.0;
                    buf[row + self.px - 1] = 0.0;
                }
            }
        }
    }
}

/// Fixed-order dot product with eight interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Positions per cache block; a block of all output channels stays in L1.
const BLOCK: usize = 256;

fn blocks(span: (usize, usize)) -> impl Iterator<Item = (usize, usize)> {
    (span.0..span.1).step_by(BLOCK).map(move |b| (b, (b + BLOCK).min(span.1)))
}

#[inline]
fn run(buf: &[f64], lo: usize, hi: usize, off: isize) -> &[f64] {
    let a = (lo as isize + off) as usize;
    &buf[a..a + (hi - lo)]
}

/// Output positions per register tile.
const LANES: usize = 4;

/// `out[o][v] += Σ_c Σ_k wt[(c * 27 + k) * 8 + o] * input[c][v + offs[k]]`
/// for every `v` in `span`, with all eight output channels held in
/// registers across the taps.
fn conv8_accumulate(input: &[f64], cin: usize, pd: &Padded, offs: &[isize; K3], wt: &[f64], out: &mut [f64]) {
    let n = pd.len;
    let (s0, s1) = pd.span;
    let tiles_end = s0 + (s1 - s0) / LANES * LANES;
    for v in (s0..tiles_end).step_by(LANES) {
        let mut acc = [[0.0f64; LANES]; HIDDEN];
        for c in 0..cin {
            let src = &input[c * n..(c + 1) * n];
            for (k, &off) in offs.iter().enumerate() {
                let a = (v as isize + off) as usize;
                let x: &[f64; LANES] = src[a..a + LANES].try_into().expect("tile");
                let wv: &[f64; HIDDEN] = wt[(c * K3 + k) * HIDDEN..(c * K3 + k + 1) * HIDDEN].try_into().expect("weights");
                for o in 0..HIDDEN {
                    for l in 0..LANES {
                        acc[o][l] += wv[o] * x[l];
                    }
                }
            }
        }
        for (o, a) in acc.iter().enumerate() {
            for (dst, s) in out[o * n + v..o * n + v + LANES].iter_mut().zip(a) {
                *dst += s;
            }
        }
    }
    for v in tiles_end..s1 {
        for o in 0..HIDDEN {
            let mut s = 0.0;
            for c in 0..cin {
                for (k, &off) in offs.iter().enumerate() {
                    s += wt[(c * K3 + k) * HIDDEN + o] * input[c * n + (v as isize + off) as usize];
                }
            }
            out[o * n + v] += s;
        }
    }
}

/// 3x3x3 zero-padded convolution on padded buffers, `cin` channels to
/// [`HIDDEN`] channels. The output halo is zero.
fn conv3_forward(input: &[f64], cin: usize, pd: &Padded, w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = pd.len;
    let (s0, s1) = pd.span;
    let mut out = vec![0.0; HIDDEN * n];
    for o in 0..HIDDEN {
        out[o * n + s0..o * n + s1].fill(b[o]);
    }
    let offs: [isize; K3] = core::array::from_fn(|k| pd.tap(k));
    let mut wt = vec![0.0; cin * K3 * HIDDEN];
    for o in 0..HIDDEN {
        for c in 0..cin {
            for k in 0..K3 {
                wt[(c * K3 + k) * HIDDEN + o] = w[(o * cin + c) * K3 + k];
            }
        }
    }
    conv8_accumulate(input, cin, pd, &offs, &wt, &mut out);
    for o in 0..HIDDEN {
        pd.clear_halo(&mut out[o * n..(o + 1) * n]);
    }
    out
}

/// Backward pass of [`conv3_forward`]; `delta` must have a zero halo.
/// Accumulates weight and bias gradients and returns the input gradient
/// (halo zeroed) when `want_input` is set. The input gradient is itself a
/// convolution of `delta` with the mirrored taps, so it requires
/// `cin == HIDDEN`.
fn conv3_backward(
    input: &[f64],
    cin: usize,
    pd: &Padded,
    w: &[f64],
    delta: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n = pd.len;
    let (s0, s1) = pd.span;
    for o in 0..HIDDEN {
        gb[o] += delta[o * n + s0..o * n + s1].iter().sum::<f64>();
    }
    for (lo, hi) in blocks(pd.span) {
        let len = hi - lo;
        let tiles = len / LANES * LANES;
        let d: [&[f64]; HIDDEN] = core::array::from_fn(|o| &delta[o * n + lo..o * n + hi]);
        for c in 0..cin {
            let src = &input[c * n..(c + 1) * n];
            for k in 0..K3 {
                let s = run(src, lo, hi, pd.tap(k));
                let mut acc = [[0.0f64; LANES]; HIDDEN];
                for t in (0..tiles).step_by(LANES) {
                    let x: &[f64; LANES] = s[t..t + LANES].try_into().expect("tile");
                    for o in 0..HIDDEN {
                        let dv: &[f64; LANES] = d[o][t..t + LANES].try_into().expect("tile");
                        for l in 0..LANES {
                            acc[o][l] += dv[l] * x[l];
                        }
                    }
                }
                for o in 0..HIDDEN {
                    let tail: f64 = (tiles..len).map(|t| d[o][t] * s[t]).sum();
                    gw[(o * cin + c) * K3 + k] += acc[o].iter().sum::<f64>() + tail;
                }
            }
        }
    }
    if !want_input {
        return None;
    }
    assert_eq!(cin, HIDDEN, "input gradient needs a square layer");
    // gin[c][u] = Σ_o Σ_k w[o][c][k] * delta[o][u - off_k]
    let offs: [isize; K3] = core::array::from_fn(|k| -pd.tap(k));
    let mut wt = vec![0.0; HIDDEN * K3 * HIDDEN];
    for o in 0..HIDDEN {
        for c in 0..cin {
            for k in 0..K3 {
                wt[(o * K3 + k) * HIDDEN + c] = w[(o * cin + c) * K3 + k];
            }
        }
    }
    let mut gin = vec![0.0; cin * n];
    conv8_accumulate(delta, HIDDEN, pd, &offs, &wt, &mut gin);
    for c in 0..cin {
        pd.clear_halo(&mut gin[c * n..(c + 1) * n]);
    }
    Some(gin)
}

impl TinySeg3D {
    pub fn zeros() -> Self {
        Self { params: vec![0.0; PARAM_COUNT], velocity: vec![0.0; PARAM_COUNT] }
    }

    /// He-normal kernels (`sigma = sqrt(2 / fan_in)`), zero biases. Draws
    /// come from one xoshiro256** stream in buffer order.
    pub fn init(seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut m = Self::zeros();
        let mut fill = |range: core::ops::Range<usize>, fan_in: usize| {
            let sigma = libm::sqrt(2.0 / fan_in as f64);
            for w in &mut m.params[range] {
                *w = rng.normal(0.0, sigma);
            }
        };
        fill(W1..B1, K3);
        fill(W2..B2, HIDDEN * K3);
        fill(W3..B3, HIDDEN);
        m
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::InvalidInput(alloc::format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { params, velocity: vec![0.0; PARAM_COUNT] })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    fn check_input(image: &Volume3D) -> Result<()> {
        if image.dims().min_extent() < MIN_EXTENT {
            return Err(Error::InvalidDims(image.dims()));
        }
        Ok(())
    }

    pub fn forward_trace(&self, image: &Volume3D) -> Result<ForwardTrace> {
        Self::check_input(image)?;
        let dims = image.dims();
        let pd = Padded::new(dims);
        let p = &self.params;
        let input = pd.pad(image.data());
        let mut h1 = conv3_forward(&input, 1, &pd, &p[W1..B1], &p[B1..W2]);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = conv3_forward(&h1, HIDDEN, &pd, &p[W2..B2], &p[B2..W3]);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let n = pd.len;
        let mut logits = vec![p[B3]; n];
        for c in 0..HIDDEN {
            axpy(&mut logits, p[W3 + c], &h2[c * n..(c + 1) * n]);
        }
        let prob = Volume3D::new(dims, pd.unpad(&logits).into_iter().map(sigmoid).collect())?;
        Ok(ForwardTrace { dims, input, h1, h2, prob })
    }

    /// Per-voxel foreground probability, same dims as `image`.
    pub fn forward(&self, image: &Volume3D) -> Result<Volume3D> {
        Ok(self.forward_trace(image)?.prob)
    }

    /// Mean loss of one sample and its exact gradient w.r.t. every parameter.
    pub fn backward(
        &self,
        image: &Volume3D,
        mask: &MaskVolume,
        spec: &LossSpec,
        params: Option<&AdaptiveParams>,
    ) -> Result<(f64, ParamGrads)> {
        ensure_same_dims(image.dims(), mask.dims())?;
        let trace = self.forward_trace(image)?;
        let loss = evaluate(&trace.prob, mask, spec, params)?;
        Ok((loss.value, self.backprop(&trace, loss.grad.data())))
    }

    /// Chains `dloss_dprob` through the network recorded in `trace`.
    pub fn backprop(&self, trace: &ForwardTrace, dloss_dprob: &[f64]) -> ParamGrads {
        let pd = Padded::new(trace.dims);
        let n = pd.len;
        let p = &self.params;
        let mut g = vec![0.0; PARAM_COUNT];

        let dz: Vec<f64> = dloss_dprob
            .iter()
            .zip(trace.prob.data())
            .map(|(&d, &q)| d * q * (1.0 - q))
            .collect();
        g[B3] = dz.iter().sum();
        let dz = pd.pad(&dz);

        let mut d2 = vec![0.0; HIDDEN * n];
        for c in 0..HIDDEN {
            let h = &trace.h2[c * n..(c + 1) * n];
            g[W3 + c] = dot(&dz, h);
            let w = p[W3 + c];
            for ((d, &z), &hv) in d2[c * n..(c + 1) * n].iter_mut().zip(&dz).zip(h) {
                *d = if hv > 0.0 { w * z } else { 0.0 };
            }
        }

        let (gw1, rest) = g.split_at_mut(B1);
        let (gb1, rest) = rest.split_at_mut(W2 - B1);
        let (gw2, rest) = rest.split_at_mut(B2 - W2);
        let gb2 = &mut rest[..W3 - B2];

        let mut d1 = conv3_backward(&trace.h1, HIDDEN, &pd, &p[W2..B2], &d2, gw2, gb2, true)
            .expect("input gradient requested");
        for (d, &h) in d1.iter_mut().zip(&trace.h1) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        conv3_backward(&trace.input, 1, &pd, &p[W1..B1], &d1, gw1, gb1, false);
        ParamGrads(g)
    }

    /// Momentum SGD update using the model's own velocity buffer.
    pub fn sgd_step(&mut self, grads: &ParamGrads, cfg: &SgdConfig) {
        sgd_step(&mut self.params, &mut self.velocity, grads.as_slice(), cfg);
    }
}
