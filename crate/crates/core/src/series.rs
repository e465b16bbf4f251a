//! Complex dynamic image series and centered unitary per-frame 2D FFTs.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::real::Real;

/// A stack of complex frames stored frame-major, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicSeries<T> {
    nframes: usize,
    height: usize,
    width: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> DynamicSeries<T> {
    /// Builds a series after checking geometry and finiteness.
    pub fn new(nframes: usize, height: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        check_dims(nframes, height, width)?;
        if data.len() != nframes * height * width {
            return Err(Error::shape(format!("data length {} != {nframes}x{height}x{width}", data.len())));
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { what: "series", index });
        }
        Ok(Self { nframes, height, width, data })
    }

    pub fn zeros(nframes: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(nframes, height, width)?;
        Ok(Self { nframes, height, width, data: vec![Complex::new(T::zero(), T::zero()); nframes * height * width] })
    }

    pub fn from_fn(
        nframes: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex<T>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(nframes * height * width);
        for t in 0..nframes {
            for r in 0..height {
                for c in 0..width {
                    data.push(f(t, r, c));
                }
            }
        }
        Self::new(nframes, height, width, data)
    }

    /// Wraps data produced by arithmetic on already validated series.
    pub(crate) fn from_parts(nframes: usize, height: usize, width: usize, data: Vec<Complex<T>>) -> Self {
        debug_assert_eq!(data.len(), nframes * height * width);
        Self { nframes, height, width, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(
            self.nframes,
            self.height,
            self.width,
            vec![Complex::new(T::zero(), T::zero()); self.data.len()],
        )
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

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// (nframes, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nframes, self.height, self.width)
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex<T>] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, Complex<T>> {
        self.data.chunks_exact(self.frame_len())
    }

    pub fn get(&self, t: usize, r: usize, c: usize) -> Complex<T> {
        self.data[(t * self.height + r) * self.width + c]
    }

    /// Copies frames `range` into a new series.
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.nframes {
            return Err(Error::shape(format!("frame range {range:?} outside 0..{}", self.nframes)));
        }
        let n = self.frame_len();
        Ok(Self::from_parts(range.len(), self.height, self.width, self.data[range.start * n..range.end * n].to_vec()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b * alpha;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let data = self.data.iter().map(|z| *z * alpha).collect();
        Self::from_parts(self.nframes, self.height, self.width, data)
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_parts(self.nframes, self.height, self.width, data)
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> DynamicSeries<U> {
        let data = self.data.iter().map(|z| Complex::new(U::of(z.re.as_f64()), U::of(z.im.as_f64()))).collect();
        DynamicSeries::from_parts(self.nframes, self.height, self.width, data)
    }

    pub fn check_finite(&self) -> Result<()> {
        match first_non_finite(&self.data) {
            Some(index) => Err(Error::NonFinite { what: "series", index }),
            None => Ok(()),
        }
    }
}

fn check_dims(nframes: usize, height: usize, width: usize) -> Result<()> {
    if nframes == 0 {
        return Err(Error::shape("series needs at least one frame"));
    }
    for (name, n) in [("height", height), ("width", width)] {
        if n < 4 || n % 2 != 0 {
            return Err(Error::shape(format!("{name} {n} must be even and >= 4")));
        }
    }
    Ok(())
}

pub(crate) fn first_non_finite<T: Real>(data: &[Complex<T>]) -> Option<usize> {
    data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite()))
}

/// Sum over all entries of `conj(a) * b`.
pub fn inner<T: Real>(a: &DynamicSeries<T>, b: &DynamicSeries<T>) -> Result<Complex<T>> {
    a.ensure_same_shape(b, "inner")?;
    Ok(inner_slices(a.data(), b.data()))
}

pub(crate) fn inner_slices<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(Complex::new(T::zero(), T::zero()), |acc, (x, y)| acc + x.conj() * y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned centered unitary 2D DFT for one frame geometry.
///
/// The forward transform places the DC coefficient at `(height/2, width/2)`
/// and both directions carry a `1/sqrt(height*width)` factor.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: T::one() / T::of((height * width) as f64).sqrt(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Transforms one frame in place.
    pub fn process(&self, frame: &mut [Complex<T>], direction: Direction) {
        let (h, w) = (self.height, self.width);
        assert_eq!(frame.len(), h * w, "frame length does not match plan");
        let (rows, cols) = match direction {
            Direction::Forward => (&self.row_fwd, &self.col_fwd),
            Direction::Inverse => (&self.row_inv, &self.col_inv),
        };

        // For even sizes fftshift and ifftshift coincide: a half rotation.
        swap_halves(frame, h, w);
        rows.process(frame);
        let mut transposed = transpose(frame, h, w);
        cols.process(&mut transposed);
        let back = transpose(&transposed, w, h);
        frame.copy_from_slice(&back);
        swap_halves(frame, h, w);

        for z in frame.iter_mut() {
            *z = *z * self.scale;
        }
    }

    pub fn forward(&self, frame: &mut [Complex<T>]) {
        self.process(frame, Direction::Forward);
    }

    pub fn inverse(&self, frame: &mut [Complex<T>]) {
        self.process(frame, Direction::Inverse);
    }

    /// Applies the transform to every frame of `series`.
    pub fn apply(&self, series: &DynamicSeries<T>, direction: Direction) -> DynamicSeries<T> {
        let mut out = series.clone();
        self.apply_inplace(&mut out, direction);
        out
    }

    pub fn apply_inplace(&self, series: &mut DynamicSeries<T>, direction: Direction) {
        assert_eq!((series.height(), series.width()), (self.height, self.width));
        let n = series.frame_len();
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            series.data_mut().par_chunks_exact_mut(n).for_each(|f| self.process(f, direction));
        }
        #[cfg(not(feature = "parallel"))]
        for f in series.data_mut().chunks_exact_mut(n) {
            self.process(f, direction);
        }
    }
}

fn swap_halves<T: Copy>(frame: &mut [T], h: usize, w: usize) {
    frame.rotate_left((h / 2) * w);
    for row in frame.chunks_exact_mut(w) {
        row.rotate_left(w / 2);
    }
}

fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Per-frame centered unitary 2D DFT of a whole series.
pub fn fft2<T: Real>(series: &DynamicSeries<T>, direction: Direction) -> Result<DynamicSeries<T>> {
    series.check_finite()?;
    Ok(Fft2::new(series.height(), series.width()).apply(series, direction))
}
