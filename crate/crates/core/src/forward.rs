//! Undersampled per-frame Fourier operator, golden-angle pseudo-radial masks
//! and the analytic data-consistency solve.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::series::{inner_slices, Direction, DynamicSeries, Fft2};

/// Golden-angle increment in degrees, 180 * (3 - sqrt 5) / 2.
pub fn golden_angle_deg() -> f64 {
    180.0 * (3.0 - 5f64.sqrt()) / 2.0
}

/// Rasterizes a line through the centered DC index at `theta_deg`.
///
/// Lines within 45 degrees of horizontal step along columns and round the row
/// offset; steeper lines step along rows. Points come out ordered along the
/// major axis.
pub fn rasterize_line(height: usize, width: usize, theta_deg: f64) -> Vec<(usize, usize)> {
    let (cr, cc) = ((height / 2) as i64, (width / 2) as i64);
    let theta = theta_deg.rem_euclid(180.0);
    let rad = theta.to_radians();
    let mut points = Vec::new();
    if theta <= 45.0 || theta >= 135.0 {
        let slope = rad.tan();
        for c in 0..width as i64 {
            let r = cr + ((c - cc) as f64 * slope).round() as i64;
            if (0..height as i64).contains(&r) {
                points.push((r as usize, c as usize));
            }
        }
    } else {
        let slope = rad.cos() / rad.sin();
        for r in 0..height as i64 {
            let c = cc + ((r - cr) as f64 * slope).round() as i64;
            if (0..width as i64).contains(&c) {
                points.push((r as usize, c as usize));
            }
        }
    }
    points
}

/// Binary k-space sampling masks, one per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPattern {
    nframes: usize,
    height: usize,
    width: usize,
    lines_per_frame: usize,
    masks: Vec<bool>,
}

impl SamplingPattern {
    pub fn new(nframes: usize, height: usize, width: usize, lines_per_frame: usize, masks: Vec<bool>) -> Result<Self> {
        if masks.len() != nframes * height * width {
            return Err(Error::shape(format!("mask length {} != {nframes}x{height}x{width}", masks.len())));
        }
        let n = height * width;
        if n == 0 {
            return Err(Error::shape("empty frame"));
        }
        if let Some(t) = masks.chunks_exact(n).position(|m| !m.iter().any(|&s| s)) {
            return Err(Error::invalid(format!("frame {t} has no sampled location")));
        }
        Ok(Self { nframes, height, width, lines_per_frame, masks })
    }

    /// Every location sampled in every frame.
    pub fn full(nframes: usize, height: usize, width: usize) -> Self {
        Self { nframes, height, width, lines_per_frame: height.max(width), masks: vec![true; nframes * height * width] }
    }

    pub fn nframes(&self) -> usize {
        self.nframes
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn lines_per_frame(&self) -> usize {
        self.lines_per_frame
    }

    pub fn masks(&self) -> &[bool] {
        &self.masks
    }

    pub fn mask(&self, t: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.masks[t * n..(t + 1) * n]
    }

    pub fn dc_index(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }

    pub fn sampled_count(&self, t: usize) -> usize {
        self.mask(t).iter().filter(|&&s| s).count()
    }

    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.nframes {
            return Err(Error::shape(format!("frame range {range:?} outside 0..{}", self.nframes)));
        }
        let n = self.height * self.width;
        Ok(Self {
            nframes: range.len(),
            height: self.height,
            width: self.width,
            lines_per_frame: self.lines_per_frame,
            masks: self.masks[range.start * n..range.end * n].to_vec(),
        })
    }

    /// Removes navigator locations, except the DC sample, from every frame.
    pub fn excluding(&self, nav: &NavigatorLines) -> Result<Self> {
        if (nav.height, nav.width) != (self.height, self.width) {
            return Err(Error::shape("navigator geometry differs from pattern"));
        }
        let n = self.height * self.width;
        let dc = self.dc_index();
        let mut masks = self.masks.clone();
        for frame in masks.chunks_exact_mut(n) {
            for &(r, c) in nav.lines.iter().flatten() {
                let i = r * self.width + c;
                if i != dc {
                    frame[i] = false;
                }
            }
        }
        Self::new(self.nframes, self.height, self.width, self.lines_per_frame, masks)
    }
}

/// Golden-angle pseudo-radial masks; frame `t` uses global line indices
/// `start_index + t*lines_per_frame ..`, so consecutive frames never repeat.
pub fn golden_angle_pattern(
    nframes: usize,
    height: usize,
    width: usize,
    lines_per_frame: usize,
    start_index: usize,
) -> Result<SamplingPattern> {
    if lines_per_frame == 0 {
        return Err(Error::invalid("lines_per_frame must be >= 1"));
    }
    if lines_per_frame > height.max(width) {
        return Err(Error::invalid(format!(
            "{lines_per_frame} lines exceed the {} distinct rasterizable lines",
            height.max(width)
        )));
    }
    if nframes == 0 || height < 2 || width < 2 {
        return Err(Error::shape("empty sampling geometry"));
    }
    let delta = golden_angle_deg();
    let n = height * width;
    let dc = (height / 2) * width + width / 2;
    let mut masks = vec![false; nframes * n];
    for (t, frame) in masks.chunks_exact_mut(n).enumerate() {
        frame[dc] = true;
        for k in 0..lines_per_frame {
            let g = (start_index + t * lines_per_frame + k) as f64;
            let theta = (g * delta).rem_euclid(180.0);
            for (r, c) in rasterize_line(height, width, theta) {
                frame[r * width + c] = true;
            }
        }
    }
    SamplingPattern::new(nframes, height, width, lines_per_frame, masks)
}

/// Fixed navigator lines shared by every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NavigatorLines {
    height: usize,
    width: usize,
    lines: Vec<Vec<(usize, usize)>>,
}

impl NavigatorLines {
    /// `count` lines through the center at angles `i * 180 / count`, so two
    /// lines are the horizontal and vertical center lines.
    pub fn centered(height: usize, width: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("need at least one navigator line"));
        }
        let lines = (0..count).map(|i| rasterize_line(height, width, i as f64 * 180.0 / count as f64)).collect();
        Ok(Self { height, width, lines })
    }

    /// Treats a pattern's sampled locations as navigator samples; every frame
    /// must share the same mask.
    pub fn from_pattern(p: &SamplingPattern) -> Result<Self> {
        let first = p.mask(0);
        if let Some(t) = (1..p.nframes()).find(|&t| p.mask(t) != first) {
            return Err(Error::invalid(format!("navigator mask of frame {t} differs from frame 0")));
        }
        let points =
            first.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| (i / p.width(), i % p.width())).collect();
        Ok(Self { height: p.height(), width: p.width(), lines: vec![points] })
    }

    pub fn lines(&self) -> &[Vec<(usize, usize)>] {
        &self.lines
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Navigator signal length per frame.
    pub fn siglen(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for &(r, c) in self.lines.iter().flatten() {
            m[r * self.width + c] = true;
        }
        m
    }
}

/// Measured k-space: zero-filled grid plus its sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData<T> {
    pattern: SamplingPattern,
    values: DynamicSeries<T>,
}

impl<T: Real> KSpaceData<T> {
    pub fn new(pattern: SamplingPattern, values: DynamicSeries<T>) -> Result<Self> {
        if (pattern.nframes(), pattern.height(), pattern.width()) != values.shape() {
            return Err(Error::shape("k-space values do not match sampling pattern"));
        }
        let zero = Complex::new(T::zero(), T::zero());
        if let Some(i) = pattern.masks().iter().zip(values.data()).position(|(&m, v)| !m && *v != zero) {
            return Err(Error::invalid(format!("nonzero k-space value at unsampled index {i}")));
        }
        Ok(Self { pattern, values })
    }

    pub fn pattern(&self) -> &SamplingPattern {
        &self.pattern
    }

    /// Zero-filled k-space grid.
    pub fn values(&self) -> &DynamicSeries<T> {
        &self.values
    }

    pub fn nframes(&self) -> usize {
        self.pattern.nframes()
    }

    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Ok(Self { pattern: self.pattern.slice_frames(range.clone())?, values: self.values.slice_frames(range)? })
    }
}

/// Cached-plan implementation of the forward model operations.
#[derive(Clone)]
pub struct FourierOp<T: Real> {
    fft: Fft2<T>,
}

impl<T: Real> FourierOp<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self { fft: Fft2::new(height, width) }
    }

    pub fn fft(&self) -> &Fft2<T> {
        &self.fft
    }

    fn check_geometry(&self, shape: (usize, usize, usize), p: &SamplingPattern) -> Result<()> {
        if shape != (p.nframes(), p.height(), p.width()) {
            return Err(Error::shape(format!(
                "series {:?} vs pattern {:?}",
                shape,
                (p.nframes(), p.height(), p.width())
            )));
        }
        if (p.height(), p.width()) != (self.fft.height(), self.fft.width()) {
            return Err(Error::shape("operator planned for a different frame size"));
        }
        Ok(())
    }

    pub fn apply_a(&self, x: &DynamicSeries<T>, p: &SamplingPattern) -> Result<KSpaceData<T>> {
        self.check_geometry(x.shape(), p)?;
        let mut k = self.fft.apply(x, Direction::Forward);
        apply_mask(&mut k, p);
        Ok(KSpaceData { pattern: p.clone(), values: k })
    }

    pub fn apply_a_star(&self, b: &KSpaceData<T>) -> Result<DynamicSeries<T>> {
        self.check_geometry(b.values.shape(), &b.pattern)?;
        Ok(self.fft.apply(&b.values, Direction::Inverse))
    }

    /// Solves `[A_i^H A_i + (l1 + l2 d_i) I] x_i = A_i^H b_i + l1 y_i + l2 q_i`
    /// for every frame, diagonally in k-space.
    pub fn dc_solve(
        &self,
        b: &KSpaceData<T>,
        y: &DynamicSeries<T>,
        q: &DynamicSeries<T>,
        lambda1: T,
        lambda2: T,
        degrees: &[T],
    ) -> Result<DynamicSeries<T>> {
        self.check_geometry(y.shape(), &b.pattern)?;
        y.ensure_same_shape(q, "dc_solve q")?;
        check_regularization(lambda1, lambda2, degrees, y.nframes())?;

        let mut rhs = y.scaled(lambda1);
        rhs.axpy(lambda2, q);
        self.fft.apply_inplace(&mut rhs, Direction::Forward);
        let n = rhs.frame_len();
        for t in 0..y.nframes() {
            let shift = lambda1 + lambda2 * degrees[t];
            let mask = b.pattern.mask(t);
            let meas = b.values.frame(t);
            for (i, z) in rhs.frame_mut(t).iter_mut().enumerate().take(n) {
                let denom = if mask[i] { T::one() + shift } else { shift };
                if denom == T::zero() {
                    return Err(Error::Singular { frame: t });
                }
                *z = (*z + meas[i]) / denom;
            }
        }
        self.fft.apply_inplace(&mut rhs, Direction::Inverse);
        Ok(rhs)
    }

    /// Norm of `A*(Ax - b) + l1 (x - y) + l2 (D x - q)`.
    #[allow(clippy::too_many_arguments)]
    pub fn normal_residual(
        &self,
        x: &DynamicSeries<T>,
        b: &KSpaceData<T>,
        y: &DynamicSeries<T>,
        q: &DynamicSeries<T>,
        lambda1: T,
        lambda2: T,
        degrees: &[T],
    ) -> Result<T> {
        self.check_geometry(x.shape(), &b.pattern)?;
        x.ensure_same_shape(y, "normal_residual y")?;
        x.ensure_same_shape(q, "normal_residual q")?;
        if degrees.len() != x.nframes() {
            return Err(Error::shape("degree vector length"));
        }
        let mut k = self.fft.apply(x, Direction::Forward);
        apply_mask(&mut k, &b.pattern);
        for (a, m) in k.data_mut().iter_mut().zip(b.values.data()) {
            *a = *a - m;
        }
        self.fft.apply_inplace(&mut k, Direction::Inverse);
        let mut r = k;
        for t in 0..x.nframes() {
            let d = degrees[t];
            let (xf, yf, qf) = (x.frame(t), y.frame(t), q.frame(t));
            for (i, z) in r.frame_mut(t).iter_mut().enumerate() {
                *z = *z + (xf[i] - yf[i]) * lambda1 + (xf[i] * d - qf[i]) * lambda2;
            }
        }
        Ok(r.norm())
    }
}

pub(crate) fn check_regularization<T: Real>(l1: T, l2: T, degrees: &[T], nframes: usize) -> Result<()> {
    if degrees.len() != nframes {
        return Err(Error::shape(format!("{} degrees for {nframes} frames", degrees.len())));
    }
    if !(l1 >= T::zero() && l2 >= T::zero()) {
        return Err(Error::invalid("regularization weights must be nonnegative"));
    }
    if let Some(i) = degrees.iter().position(|&d| !(d >= T::zero() && d.is_finite())) {
        return Err(Error::invalid(format!("degree {i} is negative or non-finite")));
    }
    Ok(())
}

pub(crate) fn apply_mask<T: Real>(k: &mut DynamicSeries<T>, p: &SamplingPattern) {
    let zero = Complex::new(T::zero(), T::zero());
    for (z, &m) in k.data_mut().iter_mut().zip(p.masks()) {
        if !m {
            *z = zero;
        }
    }
}

pub fn apply_a<T: Real>(x: &DynamicSeries<T>, p: &SamplingPattern) -> Result<KSpaceData<T>> {
    FourierOp::new(x.height(), x.width()).apply_a(x, p)
}

pub fn apply_a_star<T: Real>(b: &KSpaceData<T>) -> Result<DynamicSeries<T>> {
    FourierOp::new(b.pattern.height(), b.pattern.width()).apply_a_star(b)
}

pub fn dc_solve<T: Real>(
    b: &KSpaceData<T>,
    y: &DynamicSeries<T>,
    q: &DynamicSeries<T>,
    lambda1: T,
    lambda2: T,
    degrees: &[T],
) -> Result<DynamicSeries<T>> {
    FourierOp::new(y.height(), y.width()).dc_solve(b, y, q, lambda1, lambda2, degrees)
}

#[allow(clippy::too_many_arguments)]
pub fn normal_residual<T: Real>(
    x: &DynamicSeries<T>,
    b: &KSpaceData<T>,
    y: &DynamicSeries<T>,
    q: &DynamicSeries<T>,
    lambda1: T,
    lambda2: T,
    degrees: &[T],
) -> Result<T> {
    FourierOp::new(x.height(), x.width()).normal_residual(x, b, y, q, lambda1, lambda2, degrees)
}

/// `<A x, b>` in k-space, used by adjoint checks.
pub fn kspace_inner<T: Real>(a: &KSpaceData<T>, b: &KSpaceData<T>) -> Complex<T> {
    inner_slices(a.values.data(), b.values.data())
}
