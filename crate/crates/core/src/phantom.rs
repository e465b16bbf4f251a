//! Synthetic free-breathing cardiac phantom with known motion phases.
//!
//! A torso ellipse holds a contracting heart ellipse and a small spine disc.
//! The whole scene travels on a small circle driven by the respiratory phase;
//! the heart radii follow the cardiac phase, and a lateral heart shift driven
//! by the sine of the cardiac phase separates systole-bound from
//! diastole-bound frames of equal size.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::NavigatorLines;
use crate::manifold::NavigatorSignals;
use crate::real::Real;
use crate::series::{Direction, DynamicSeries, Fft2};

const TORSO_LEVEL: f64 = 0.5;
const HEART_LEVEL: f64 = 1.0;
const SPINE_LEVEL: f64 = 0.3;
const EDGE_PX: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub nframes: usize,
    /// Frames per cardiac cycle.
    pub cardiac_period: f64,
    /// Frames per respiratory cycle.
    pub resp_period: f64,
    /// Radius of the respiratory scene motion in pixels.
    pub resp_amplitude: f64,
    /// Systolic heart size relative to diastole.
    pub contraction_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            nframes: 60,
            cardiac_period: 7.7,
            resp_period: 29.3,
            resp_amplitude: 1.0,
            contraction_ratio: 0.65,
            noise_sigma: 0.0,
            seed: 1,
        }
    }
}

impl PhantomConfig {
    /// 64x64 frames, 204 of them.
    pub fn full_scale() -> Self {
        Self { height: 64, width: 64, nframes: 204, resp_amplitude: 2.0, ..Self::default() }
    }

    /// Image row through the resting heart center.
    pub fn heart_row(&self) -> usize {
        let g = Geometry::new(self);
        (g.torso_center.0 + g.heart_offset.0).round() as usize
    }

    /// Largest pixel magnitude of a noiseless frame.
    pub fn max_intensity(&self) -> f64 {
        HEART_LEVEL
    }

    pub fn validate(&self) -> Result<()> {
        if self.nframes == 0 {
            return Err(Error::invalid("phantom needs at least one frame"));
        }
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::invalid("phantom frames must be even and at least 16x16"));
        }
        if !(self.cardiac_period >= 4.0 && self.resp_period >= 4.0) {
            return Err(Error::invalid("motion periods must be at least 4 frames"));
        }
        if self.cardiac_period == self.resp_period {
            return Err(Error::invalid("cardiac and respiratory periods must differ"));
        }
        if !(self.contraction_ratio > 0.0 && self.contraction_ratio <= 1.0) {
            return Err(Error::invalid("contraction ratio must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.resp_amplitude >= 0.0) {
            return Err(Error::invalid("noise and amplitude must be nonnegative"));
        }
        let g = Geometry::new(self);
        let fits = |center: f64, radius: f64, len: usize| {
            center - radius - self.resp_amplitude - 1.0 >= 0.0
                && center + radius + self.resp_amplitude + 1.0 <= (len - 1) as f64
        };
        if !fits(g.torso_center.0, g.torso_radii.0, self.height) || !fits(g.torso_center.1, g.torso_radii.1, self.width)
        {
            return Err(Error::invalid(format!(
                "respiratory amplitude {} pushes the torso out of a {}x{} frame",
                self.resp_amplitude, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// True motion phases per frame, radians in `[0, 2pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub cardiac: Vec<f64>,
    pub respiratory: Vec<f64>,
}

fn circular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

impl PhaseRecord {
    pub fn len(&self) -> usize {
        self.cardiac.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cardiac.is_empty()
    }

    pub fn cardiac_diff(&self, i: usize, j: usize) -> f64 {
        circular_diff(self.cardiac[i], self.cardiac[j])
    }

    pub fn respiratory_diff(&self, i: usize, j: usize) -> f64 {
        circular_diff(self.respiratory[i], self.respiratory[j])
    }

    /// Euclidean distance on the phase torus.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.cardiac_diff(i, j).hypot(self.respiratory_diff(i, j))
    }
}

struct Geometry {
    torso_center: (f64, f64),
    torso_radii: (f64, f64),
    heart_offset: (f64, f64),
    heart_radii: (f64, f64),
    spine_offset: (f64, f64),
    spine_radius: f64,
    /// Lateral heart shift in pixels per unit sin(cardiac); zero without
    /// contraction.
    cardiac_sway: f64,
}

impl Geometry {
    fn new(cfg: &PhantomConfig) -> Self {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        Self {
            torso_center: (h / 2.0, w / 2.0),
            torso_radii: (0.30 * h, 0.40 * w),
            heart_offset: (-0.06 * h, 0.08 * w),
            heart_radii: (0.15 * h, 0.17 * w),
            spine_offset: (0.19 * h, 0.0),
            spine_radius: 0.06 * w,
            cardiac_sway: 0.3 * w * (1.0 - cfg.contraction_ratio),
        }
    }
}

fn soft_ellipse(r: f64, c: f64, center: (f64, f64), radii: (f64, f64)) -> f64 {
    let dy = (r - center.0) / radii.0;
    let dx = (c - center.1) / radii.1;
    let rho = dx.hypot(dy);
    let signed = (1.0 - rho) * radii.0.min(radii.1);
    0.5 * (1.0 + (signed / EDGE_PX).tanh())
}

/// Noiseless complex frame for one phase pair.
fn render(cfg: &PhantomConfig, geo: &Geometry, cardiac: f64, resp: f64) -> Vec<Complex<f64>> {
    let (h, w) = (cfg.height, cfg.width);
    let shift = (cfg.resp_amplitude * resp.sin(), cfg.resp_amplitude * resp.cos());
    let scale = cfg.contraction_ratio + (1.0 - cfg.contraction_ratio) * 0.5 * (1.0 + cardiac.cos());
    let torso = (geo.torso_center.0 + shift.0, geo.torso_center.1 + shift.1);
    let heart = (torso.0 + geo.heart_offset.0, torso.1 + geo.heart_offset.1 + geo.cardiac_sway * cardiac.sin());
    let heart_radii = (geo.heart_radii.0 * scale, geo.heart_radii.1 * scale);
    let spine = (torso.0 + geo.spine_offset.0, torso.1 + geo.spine_offset.1);

    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            let mag = TORSO_LEVEL * soft_ellipse(rf, cf, torso, geo.torso_radii)
                + (HEART_LEVEL - TORSO_LEVEL) * soft_ellipse(rf, cf, heart, heart_radii)
                + SPINE_LEVEL * soft_ellipse(rf, cf, spine, (geo.spine_radius, geo.spine_radius));
            let phase = 0.5 * PI * (cf / w as f64 - 0.5) + 0.3 * PI * (rf / h as f64 - 0.5);
            out.push(Complex::from_polar(mag.min(HEART_LEVEL), phase));
        }
    }
    out
}

/// Renders the phantom series and its phases; deterministic in `cfg.seed`.
pub fn generate_phantom<T: Real>(cfg: &PhantomConfig) -> Result<(DynamicSeries<T>, PhaseRecord)> {
    cfg.validate()?;
    let geo = Geometry::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c0 = rng.gen_range(0.0..2.0 * PI);
    let r0 = rng.gen_range(0.0..2.0 * PI);

    let mut phases = PhaseRecord { cardiac: Vec::new(), respiratory: Vec::new() };
    let mut data = Vec::with_capacity(cfg.nframes * cfg.height * cfg.width);
    for t in 0..cfg.nframes {
        let cardiac = (c0 + 2.0 * PI * t as f64 / cfg.cardiac_period).rem_euclid(2.0 * PI);
        let resp = (r0 + 2.0 * PI * t as f64 / cfg.resp_period).rem_euclid(2.0 * PI);
        phases.cardiac.push(cardiac);
        phases.respiratory.push(resp);
        for z in render(cfg, &geo, cardiac, resp) {
            let noise = if cfg.noise_sigma > 0.0 {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex::new(re, im) * (cfg.noise_sigma / 2f64.sqrt())
            } else {
                Complex::new(0.0, 0.0)
            };
            let v = z + noise;
            data.push(Complex::new(T::of(v.re), T::of(v.im)));
        }
    }
    let x = DynamicSeries::new(cfg.nframes, cfg.height, cfg.width, data)?;
    Ok((x, phases))
}

/// Samples each frame's k-space along the fixed navigator lines, line-major.
pub fn simulate_navigators<T: Real>(x: &DynamicSeries<T>, lines: &NavigatorLines) -> Result<NavigatorSignals<T>> {
    if (lines.height(), lines.width()) != (x.height(), x.width()) {
        return Err(Error::shape("navigator geometry does not match the series"));
    }
    let fft = Fft2::new(x.height(), x.width());
    let k = fft.apply(x, Direction::Forward);
    let siglen = lines.siglen();
    let mut data = Vec::with_capacity(x.nframes() * siglen);
    for t in 0..x.nframes() {
        for &(r, c) in lines.lines().iter().flatten() {
            data.push(k.get(t, r, c));
        }
    }
    NavigatorSignals::new(x.nframes(), siglen, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motionless_phantom_is_static() {
        let cfg = PhantomConfig { resp_amplitude: 0.0, contraction_ratio: 1.0, ..Default::default() };
        let (x, ph) = generate_phantom::<f64>(&cfg).unwrap();
        assert_eq!(ph.len(), 60);
        for t in 1..60 {
            assert_eq!(x.frame(t), x.frame(0));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = PhantomConfig { noise_sigma: 0.05, ..Default::default() };
        let a = generate_phantom::<f64>(&cfg).unwrap();
        let b = generate_phantom::<f64>(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        let other = generate_phantom::<f64>(&PhantomConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn magnitudes_are_bounded() {
        let cfg = PhantomConfig { noise_sigma: 0.02, ..Default::default() };
        let (x, _) = generate_phantom::<f64>(&cfg).unwrap();
        let bound = cfg.max_intensity() + 5.0 * cfg.noise_sigma;
        assert!(x.data().iter().all(|z| z.norm() <= bound));
    }

    #[test]
    fn rejects_out_of_bounds_motion() {
        let cfg = PhantomConfig { resp_amplitude: 8.0, ..Default::default() };
        assert!(generate_phantom::<f64>(&cfg).is_err());
        let cfg = PhantomConfig { resp_period: 7.7, ..Default::default() };
        assert!(generate_phantom::<f64>(&cfg).is_err());
    }

    #[test]
    fn identical_frames_give_identical_navigators() {
        let (x, _) = generate_phantom::<f64>(&PhantomConfig { nframes: 1, ..Default::default() }).unwrap();
        let two = DynamicSeries::new(2, 32, 32, [x.data(), x.data()].concat()).unwrap();
        let lines = NavigatorLines::centered(32, 32, 2).unwrap();
        let nav = simulate_navigators(&two, &lines).unwrap();
        assert_eq!(nav.frame(0), nav.frame(1));
        assert_eq!(nav.siglen(), 64);
    }
}
