//! Frame-similarity graph estimated from navigator signals, its Laplacian
//! energy and the manifold-averaged series `Q = W X`.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::series::{inner_slices, DynamicSeries};

/// Navigator k-space samples, one fixed-length vector per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigatorSignals<T> {
    nframes: usize,
    siglen: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> NavigatorSignals<T> {
    pub fn new(nframes: usize, siglen: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if nframes == 0 || siglen == 0 {
            return Err(Error::shape("empty navigator signals"));
        }
        if data.len() != nframes * siglen {
            return Err(Error::shape(format!("navigator data length {} != {nframes}x{siglen}", data.len())));
        }
        if let Some(index) = crate::series::first_non_finite(&data) {
            return Err(Error::NonFinite { what: "navigator", index });
        }
        Ok(Self { nframes, siglen, data })
    }

    pub fn nframes(&self) -> usize {
        self.nframes
    }

    pub fn siglen(&self) -> usize {
        self.siglen
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        &self.data[t * self.siglen..(t + 1) * self.siglen]
    }

    /// Euclidean distance between two frames' navigator vectors.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.frame(i).iter().zip(self.frame(j)).map(|(a, b)| (a - b).norm_sqr().as_f64()).sum::<f64>().sqrt()
    }
}

/// Kernel bandwidth for [`estimate_weights`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median of the retained neighbor distances.
    Auto,
    Fixed(f64),
}

/// Symmetric similarity weights `W`, degrees `d` and implicitly `L = D - W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldGraph<T> {
    nframes: usize,
    weights: Vec<T>,
    degrees: Vec<T>,
}

impl<T: Real> ManifoldGraph<T> {
    /// Validates a dense row-major weight matrix and derives degrees.
    pub fn from_weights(nframes: usize, weights: Vec<T>) -> Result<Self> {
        if nframes == 0 || weights.len() != nframes * nframes {
            return Err(Error::shape(format!("weight matrix length {} for {nframes} frames", weights.len())));
        }
        for i in 0..nframes {
            if weights[i * nframes + i] != T::zero() {
                return Err(Error::invalid(format!("nonzero diagonal weight at {i}")));
            }
            for j in 0..nframes {
                let w = weights[i * nframes + j];
                if !(w >= T::zero() && w <= T::one()) {
                    return Err(Error::invalid(format!("weight ({i},{j}) = {w} outside [0,1]")));
                }
                if w != weights[j * nframes + i] {
                    return Err(Error::invalid(format!("weights not symmetric at ({i},{j})")));
                }
            }
        }
        let degrees = weights.chunks_exact(nframes).map(|row| row.iter().copied().sum()).collect();
        Ok(Self { nframes, weights, degrees })
    }

    /// Graph with no edges.
    pub fn empty(nframes: usize) -> Self {
        Self { nframes, weights: vec![T::zero(); nframes * nframes], degrees: vec![T::zero(); nframes] }
    }

    pub fn nframes(&self) -> usize {
        self.nframes
    }

    pub fn weight(&self, i: usize, j: usize) -> T {
        self.weights[i * self.nframes + j]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn degrees(&self) -> &[T] {
        &self.degrees
    }

    /// Laplacian entry `L_ij`.
    pub fn laplacian(&self, i: usize, j: usize) -> T {
        if i == j {
            self.degrees[i] - self.weight(i, i)
        } else {
            -self.weight(i, j)
        }
    }

    /// Strongest neighbor of frame `i`, lowest index on ties.
    pub fn strongest_neighbor(&self, i: usize) -> Option<usize> {
        let row = &self.weights[i * self.nframes..(i + 1) * self.nframes];
        let mut best: Option<usize> = None;
        for (j, &w) in row.iter().enumerate() {
            if j != i && w > T::zero() && best.is_none_or(|b| w > row[b]) {
                best = Some(j);
            }
        }
        best
    }

    pub fn cast<U: Real>(&self) -> ManifoldGraph<U> {
        ManifoldGraph {
            nframes: self.nframes,
            weights: self.weights.iter().map(|w| U::of(w.as_f64())).collect(),
            degrees: self.degrees.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }
}

/// Gaussian-kernel k-nearest-neighbor graph on navigator distances.
///
/// Each frame keeps its `k` nearest frames (index order breaks ties); the
/// union is symmetrized by max and the result scaled so the largest weight is 1.
pub fn estimate_weights<T: Real>(
    nav: &NavigatorSignals<T>,
    bandwidth: Bandwidth,
    k: usize,
) -> Result<ManifoldGraph<T>> {
    let n = nav.nframes();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("neighbor count {k} must be in 1..{n}")));
    }
    if let Bandwidth::Fixed(s) = bandwidth {
        if !(s > 0.0) {
            return Err(Error::invalid(format!("bandwidth {s} must be positive")));
        }
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = nav.distance(i, j);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut keep = vec![false; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            keep[i * n + j] = true;
            keep[j * n + i] = true;
        }
    }

    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Auto => {
            let mut retained: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| keep[i * n + j])
                .map(|(i, j)| dist[i * n + j])
                .collect();
            retained.sort_by(f64::total_cmp);
            let m = retained.len();
            let median = if m % 2 == 1 { retained[m / 2] } else { 0.5 * (retained[m / 2 - 1] + retained[m / 2]) };
            if !(median > 0.0) {
                return Err(Error::invalid("median navigator distance is zero; supply an explicit bandwidth"));
            }
            median
        }
    };

    let mut w = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && keep[i * n + j] {
                let d = dist[i * n + j];
                w[i * n + j] = (-(d * d) / (sigma * sigma)).exp();
            }
        }
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut w {
            *v = (*v / max).min(1.0);
        }
    }
    ManifoldGraph::from_weights(n, w.into_iter().map(T::of).collect())
}

fn check_frames<T: Real>(x: &DynamicSeries<T>, g: &ManifoldGraph<T>) -> Result<()> {
    if x.nframes() != g.nframes() {
        return Err(Error::shape(format!("series has {} frames, graph {}", x.nframes(), g.nframes())));
    }
    Ok(())
}

/// `tr(X^H L X)` with frames as columns.
pub fn storm_energy<T: Real>(x: &DynamicSeries<T>, g: &ManifoldGraph<T>) -> Result<T> {
    check_frames(x, g)?;
    let n = g.nframes();
    let mut e = T::zero();
    for i in 0..n {
        e = e + g.degrees()[i] * x.frame(i).iter().map(|z| z.norm_sqr()).sum::<T>();
        for j in 0..n {
            let w = g.weight(i, j);
            if w != T::zero() {
                e = e - w * inner_slices(x.frame(i), x.frame(j)).re;
            }
        }
    }
    Ok(e)
}

/// `tr(X^H D X) + tr(Z^H D Z) - 2 Re tr(X^H W Z)`; equals twice the
/// Laplacian energy when `Z = X`.
pub fn split_energy<T: Real>(x: &DynamicSeries<T>, z: &DynamicSeries<T>, g: &ManifoldGraph<T>) -> Result<T> {
    check_frames(x, g)?;
    x.ensure_same_shape(z, "split_energy")?;
    let n = g.nframes();
    let two = T::of(2.0);
    let mut e = T::zero();
    for i in 0..n {
        let d = g.degrees()[i];
        e = e
            + d * x.frame(i).iter().map(|v| v.norm_sqr()).sum::<T>()
            + d * z.frame(i).iter().map(|v| v.norm_sqr()).sum::<T>();
        for j in 0..n {
            let w = g.weight(i, j);
            if w != T::zero() {
                e = e - two * w * inner_slices(x.frame(i), z.frame(j)).re;
            }
        }
    }
    Ok(e)
}

/// Frame `i` of the output is `sum_j W_ij x_j`.
pub fn compute_q<T: Real>(x: &DynamicSeries<T>, g: &ManifoldGraph<T>) -> Result<DynamicSeries<T>> {
    check_frames(x, g)?;
    let mut out = x.zeros_like();
    let n = g.nframes();
    for i in 0..n {
        for j in 0..n {
            let w = g.weight(i, j);
            if w == T::zero() {
                continue;
            }
            let src = x.frame(j);
            for (o, s) in out.frame_mut(i).iter_mut().zip(src) {
                *o = *o + *s * w;
            }
        }
    }
    Ok(out)
}
