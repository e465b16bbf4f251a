//! Residual 3D convolutional denoiser `D(x) = x - N(x)` with exact
//! reverse-mode gradients.
//!
//! Complex frames enter the network as two real channels (re, im). Volumes
//! are stored channel-major as `channel x frame x row x col`. Convolutions
//! are cross-correlations with zero "same" padding; hidden layers apply an
//! optional per-batch normalization and a ReLU, the last layer is linear.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::series::DynamicSeries;

const NORM_EPS: f64 = 1e-5;

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub width: usize,
    /// Kernel extent over (frame, row, col); each entry odd.
    pub kernel: [usize; 3],
    pub normalization: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { layers: 3, width: 8, kernel: [3, 3, 3], normalization: false, seed: 7 }
    }
}

impl DenoiserConfig {
    /// Five layers of 64 filters.
    pub fn full_scale() -> Self {
        Self { layers: 5, width: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("denoiser needs at least one layer"));
        }
        if self.layers > 1 && self.width == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::invalid(format!("kernel {:?} must be odd", self.kernel)));
        }
        Ok(())
    }
}

/// Per-channel affine parameters of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    /// `out_ch x in_ch x kt x kx x ky`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<Norm<T>>,
    pub relu: bool,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: [usize; 3], normalization: bool, relu: bool) -> Self {
        let taps = kernel.iter().product::<usize>();
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * taps],
            bias: vec![T::zero(); out_ch],
            norm: normalization.then(|| Norm { scale: vec![T::one(); out_ch], shift: vec![T::zero(); out_ch] }),
            relu,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.norm.as_ref().map_or(0, |n| 2 * n.scale.len())
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::invalid(format!("kernel {:?} must be odd", self.kernel)));
        }
        if self.weight.len() != self.out_ch * self.in_ch * self.taps() || self.bias.len() != self.out_ch {
            return Err(Error::shape("layer parameter lengths"));
        }
        if let Some(n) = &self.norm {
            if n.scale.len() != self.out_ch || n.shift.len() != self.out_ch {
                return Err(Error::shape("normalization parameter lengths"));
            }
        }
        Ok(())
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.in_ch == other.in_ch
            && self.out_ch == other.out_ch
            && self.kernel == other.kernel
            && self.relu == other.relu
            && self.norm.is_some() == other.norm.is_some()
    }
}

/// Weights of the residual denoiser, shared across unrolled iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    layers: Vec<ConvLayer<T>>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn from_layers(layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let p = Self { layers };
        p.validate()?;
        Ok(p)
    }

    /// All-zero network: the denoiser is the identity.
    pub fn zeros(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.layers;
        let layers = (0..n)
            .map(|l| {
                let last = l + 1 == n;
                let cin = if l == 0 { 2 } else { cfg.width };
                let cout = if last { 2 } else { cfg.width };
                ConvLayer::new(cin, cout, cfg.kernel, cfg.normalization && !last, !last)
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Uniform fan-in/fan-out initialization; the last layer starts at zero
    /// so the untrained denoiser is the identity.
    pub fn init(cfg: &DenoiserConfig) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nl = p.layers.len();
        for layer in p.layers.iter_mut().take(nl - 1) {
            let taps = layer.taps() as f64;
            let half = (6.0 / ((layer.in_ch as f64 + layer.out_ch as f64) * taps)).sqrt();
            for w in &mut layer.weight {
                *w = T::of(rng.gen_range(-half..half));
            }
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::invalid("empty network"))?;
        if first.in_ch != 2 || self.layers.last().map(|l| l.out_ch) != Some(2) {
            return Err(Error::shape("network must map 2 channels to 2 channels"));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(Error::shape(format!("channel mismatch between layers {l} and {}", l + 1)));
            }
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if self.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Parameters in canonical order: per layer weight, bias, scale, shift.
    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.layers.iter().flat_map(|l| {
            let norm = l.norm.iter().flat_map(|n| n.scale.iter().chain(&n.shift));
            l.weight.iter().chain(&l.bias).chain(norm)
        })
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            let norm = l.norm.iter_mut().flat_map(|n| n.scale.iter_mut().chain(n.shift.iter_mut()));
            l.weight.iter_mut().chain(l.bias.iter_mut()).chain(norm)
        })
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!("{} values for {} parameters", values.len(), self.param_count())));
        }
        for (p, v) in self.iter_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    /// Same architecture with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.iter_mut().for_each(|v| *v = T::zero());
        z
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_structure(b))
    }

    /// `self += other`, used to accumulate gradients across iterations.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert!(self.same_structure(other));
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a = *a + *b;
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the parameter bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.iter() {
            h ^= v.as_f64().to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^ self.layers.len() as u64
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        DenoiserParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernel: l.kernel,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    norm: l.norm.as_ref().map(|n| Norm { scale: conv(&n.scale), shift: conv(&n.shift) }),
                    relu: l.relu,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims {
    frames: usize,
    rows: usize,
    cols: usize,
}

impl Dims {
    fn voxels(self) -> usize {
        self.frames * self.rows * self.cols
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    input: Vec<T>,
    normalized: Option<(Vec<T>, Vec<T>)>, // (x_hat, inverse std per channel)
    pre_activation: Vec<T>,
}

/// Activations retained by [`denoise_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct DenoiseCache<T> {
    dims: Dims,
    fingerprint: u64,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> DenoiseCache<T> {
    /// Smallest distance of any ReLU input from the kink at zero.
    pub fn relu_margin(&self) -> f64 {
        let hidden = self.layers.len().saturating_sub(1);
        self.layers[..hidden]
            .iter()
            .flat_map(|l| l.pre_activation.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()))
    }
}

fn to_channels<T: Real>(x: &DynamicSeries<T>) -> Vec<T> {
    let n = x.data().len();
    let mut v = vec![T::zero(); 2 * n];
    for (i, z) in x.data().iter().enumerate() {
        v[i] = z.re;
        v[n + i] = z.im;
    }
    v
}

#[cfg(feature = "parallel")]
fn for_each_channel<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk).enumerate().for_each(|(c, s)| f(c, s));
}

#[cfg(not(feature = "parallel"))]
fn for_each_channel<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    data.chunks_mut(chunk).enumerate().for_each(|(c, s)| f(c, s));
}

/// Valid output index range for a tap offset `off` along an axis of length `n`.
#[inline]
fn valid(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

fn conv_forward<T: Real>(layer: &ConvLayer<T>, input: &[T], dims: Dims) -> Vec<T> {
    let vox = dims.voxels();
    let [kt, kx, ky] = layer.kernel;
    let (rt, rx, ry) = ((kt / 2) as isize, (kx / 2) as isize, (ky / 2) as isize);
    let taps = layer.taps();
    let mut out = vec![T::zero(); layer.out_ch * vox];
    for_each_channel(&mut out, vox, |co, dst| {
        dst.iter_mut().for_each(|v| *v = layer.bias[co]);
        for ci in 0..layer.in_ch {
            let src = &input[ci * vox..(ci + 1) * vox];
            let wbase = (co * layer.in_ch + ci) * taps;
            for a in 0..kt {
                let dt = a as isize - rt;
                let (t0, t1) = valid(dims.frames, dt);
                for b in 0..kx {
                    let dr = b as isize - rx;
                    let (r0, r1) = valid(dims.rows, dr);
                    for c in 0..ky {
                        let dc = c as isize - ry;
                        let (c0, c1) = valid(dims.cols, dc);
                        let w = layer.weight[wbase + (a * kx + b) * ky + c];
                        if w == T::zero() {
                            continue;
                        }
                        for t in t0..t1 {
                            let st = (t as isize + dt) as usize;
                            for r in r0..r1 {
                                let sr = (r as isize + dr) as usize;
                                let o = (t * dims.rows + r) * dims.cols;
                                let s = ((st * dims.rows + sr) * dims.cols) as isize + dc;
                                let orow = &mut dst[o + c0..o + c1];
                                let srow = &src[(s + c0 as isize) as usize..(s + c1 as isize) as usize];
                                for (ov, sv) in orow.iter_mut().zip(srow) {
                                    *ov = *ov + w * *sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns (grad weight, grad bias, grad input).
fn conv_backward<T: Real>(
    layer: &ConvLayer<T>,
    input: &[T],
    gout: &[T],
    dims: Dims,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let vox = dims.voxels();
    let [kt, kx, ky] = layer.kernel;
    let (rt, rx, ry) = ((kt / 2) as isize, (kx / 2) as isize, (ky / 2) as isize);
    let taps = layer.taps();

    let gbias: Vec<T> = gout.chunks_exact(vox).map(|g| g.iter().copied().sum()).collect();

    let mut gweight = vec![T::zero(); layer.weight.len()];
    for_each_channel(&mut gweight, layer.in_ch * taps, |co, gw| {
        let g = &gout[co * vox..(co + 1) * vox];
        for ci in 0..layer.in_ch {
            let src = &input[ci * vox..(ci + 1) * vox];
            for a in 0..kt {
                let dt = a as isize - rt;
                let (t0, t1) = valid(dims.frames, dt);
                for b in 0..kx {
                    let dr = b as isize - rx;
                    let (r0, r1) = valid(dims.rows, dr);
                    for c in 0..ky {
                        let dc = c as isize - ry;
                        let (c0, c1) = valid(dims.cols, dc);
                        let mut acc = T::zero();
                        for t in t0..t1 {
                            let st = (t as isize + dt) as usize;
                            for r in r0..r1 {
                                let sr = (r as isize + dr) as usize;
                                let o = (t * dims.rows + r) * dims.cols;
                                let s = ((st * dims.rows + sr) * dims.cols) as isize + dc;
                                let grow = &g[o + c0..o + c1];
                                let srow = &src[(s + c0 as isize) as usize..(s + c1 as isize) as usize];
                                acc = acc + grow.iter().zip(srow).fold(T::zero(), |m, (x, y)| m + *x * *y);
                            }
                        }
                        gw[ci * taps + (a * kx + b) * ky + c] = acc;
                    }
                }
            }
        }
    });

    let mut gin = Vec::new();
    if need_input_grad {
        gin = vec![T::zero(); layer.in_ch * vox];
        for_each_channel(&mut gin, vox, |ci, dst| {
            for co in 0..layer.out_ch {
                let g = &gout[co * vox..(co + 1) * vox];
                let wbase = (co * layer.in_ch + ci) * taps;
                for a in 0..kt {
                    let dt = a as isize - rt;
                    let (t0, t1) = valid(dims.frames, dt);
                    for b in 0..kx {
                        let dr = b as isize - rx;
                        let (r0, r1) = valid(dims.rows, dr);
                        for c in 0..ky {
                            let dc = c as isize - ry;
                            let (c0, c1) = valid(dims.cols, dc);
                            let w = layer.weight[wbase + (a * kx + b) * ky + c];
                            if w == T::zero() {
                                continue;
                            }
                            for t in t0..t1 {
                                let st = (t as isize + dt) as usize;
                                for r in r0..r1 {
                                    let sr = (r as isize + dr) as usize;
                                    let o = (t * dims.rows + r) * dims.cols;
                                    let s = ((st * dims.rows + sr) * dims.cols) as isize + dc;
                                    let grow = &g[o + c0..o + c1];
                                    let drow = &mut dst[(s + c0 as isize) as usize..(s + c1 as isize) as usize];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv = *dv + w * *gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    (gweight, gbias, gin)
}

/// Applies the denoiser; `y = x - N(x)`.
pub fn denoise_forward<T: Real>(
    x: &DynamicSeries<T>,
    p: &DenoiserParams<T>,
) -> Result<(DynamicSeries<T>, DenoiseCache<T>)> {
    if p.layers.first().map(|l| l.in_ch) != Some(2) || p.layers.last().map(|l| l.out_ch) != Some(2) {
        return Err(Error::shape("denoiser must take and return 2 channels (re, im)"));
    }
    let dims = Dims { frames: x.nframes(), rows: x.height(), cols: x.width() };
    let vox = dims.voxels();
    let mut act = to_channels(x);
    let mut caches = Vec::with_capacity(p.layers.len());

    for layer in &p.layers {
        if act.len() != layer.in_ch * vox {
            return Err(Error::shape("activation channels do not match layer"));
        }
        let mut z = conv_forward(layer, &act, dims);
        let mut normalized = None;
        if let Some(norm) = &layer.norm {
            let mut xhat = z.clone();
            let mut inv_std = vec![T::zero(); layer.out_ch];
            let n = T::of(vox as f64);
            for c in 0..layer.out_ch {
                let ch = &mut xhat[c * vox..(c + 1) * vox];
                let mean = ch.iter().copied().sum::<T>() / n;
                let var = ch.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
                let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
                inv_std[c] = is;
                for (h, zv) in ch.iter_mut().zip(&mut z[c * vox..(c + 1) * vox]) {
                    *h = (*h - mean) * is;
                    *zv = norm.scale[c] * *h + norm.shift[c];
                }
            }
            normalized = Some((xhat, inv_std));
        }
        let next =
            if layer.relu { z.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect() } else { z.clone() };
        caches.push(LayerCache { input: std::mem::replace(&mut act, next), normalized, pre_activation: z });
    }

    let n = x.data().len();
    let data = x.data().iter().enumerate().map(|(i, z)| Complex::new(z.re - act[i], z.im - act[n + i])).collect();
    let y = DynamicSeries::from_parts(x.nframes(), x.height(), x.width(), data);
    y.check_finite()?;
    Ok((y, DenoiseCache { dims, fingerprint: p.fingerprint(), layers: caches }))
}

/// Exact gradients of `denoise_forward` given the upstream gradient with
/// respect to `y` (real and imaginary parts as independent coordinates).
pub fn denoise_backward<T: Real>(
    p: &DenoiserParams<T>,
    cache: &DenoiseCache<T>,
    upstream: &DynamicSeries<T>,
) -> Result<(DenoiserParams<T>, DynamicSeries<T>)> {
    let dims = cache.dims;
    if upstream.shape() != (dims.frames, dims.rows, dims.cols) {
        return Err(Error::StaleCache(format!(
            "upstream {:?} vs cached {:?}",
            upstream.shape(),
            (dims.frames, dims.rows, dims.cols)
        )));
    }
    if cache.layers.len() != p.layers.len() || cache.fingerprint != p.fingerprint() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    let vox = dims.voxels();
    let mut grads = p.zeros_like();

    // dL/dN = -upstream
    let mut g: Vec<T> = to_channels(upstream).into_iter().map(|v| -v).collect();
    for (l, (layer, lc)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
        if layer.relu {
            for (gv, zv) in g.iter_mut().zip(&lc.pre_activation) {
                if *zv <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        if let (Some(norm), Some((xhat, inv_std))) = (&layer.norm, &lc.normalized) {
            let gn = grads.layers[l].norm.as_mut().expect("structure checked");
            let n = T::of(vox as f64);
            for c in 0..layer.out_ch {
                let gc = &mut g[c * vox..(c + 1) * vox];
                let xc = &xhat[c * vox..(c + 1) * vox];
                let sum_g: T = gc.iter().copied().sum();
                let sum_gx: T = gc.iter().zip(xc).map(|(a, b)| *a * *b).sum();
                gn.shift[c] = sum_g;
                gn.scale[c] = sum_gx;
                let k = norm.scale[c] * inv_std[c];
                let (mg, mgx) = (sum_g / n, sum_gx / n);
                for (gv, xv) in gc.iter_mut().zip(xc) {
                    *gv = k * (*gv - mg - *xv * mgx);
                }
            }
        }
        let (gw, gb, gin) = conv_backward(layer, &lc.input, &g, dims, true);
        grads.layers[l].weight = gw;
        grads.layers[l].bias = gb;
        g = gin;
    }

    let n = upstream.data().len();
    let data = upstream.data().iter().enumerate().map(|(i, u)| Complex::new(u.re + g[i], u.im + g[n + i])).collect();
    let gx = DynamicSeries::from_parts(dims.frames, dims.rows, dims.cols, data);
    Ok((grads, gx))
}
