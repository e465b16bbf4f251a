//! Binary container shared by every pipeline artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDST" | version u16 | kind u8 | precision u8 | ndims u32 | dims u64*ndims
//!        | nmeta u32 | meta u64*nmeta | payload | crc32(payload) u32
//! ```
//!
//! `dims` count payload floats exactly, so the payload holds
//! `product(dims) * byte_width` bytes. `meta` carries integer side
//! information whose meaning depends on the kind.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;

use crate::denoiser::{ConvLayer, DenoiserParams};
use crate::error::{Error, Result};
use crate::forward::{KSpaceData, SamplingPattern};
use crate::manifold::{ManifoldGraph, NavigatorSignals};
use crate::phantom::PhaseRecord;
use crate::real::{Precision, Real};
use crate::series::DynamicSeries;
use crate::unrolled::EpochRecord;

pub const MAGIC: &[u8; 4] = b"MDST";
pub const VERSION: u16 = 1;

const LAYER_META: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// dims `[F, H, W, 2]`: interleaved re, im.
    Series = 1,
    /// dims `[F, H, W, 3]`: re, im, mask; meta `[lines_per_frame]`.
    KSpace = 2,
    /// dims `[F, F]`: weight matrix.
    Graph = 3,
    /// dims `[P + 2]`: network parameters then lambda1, lambda2; meta
    /// `[layers, (in, out, kt, kx, ky, relu, norm) per layer]`.
    Params = 4,
    /// dims `[F, 2]`: cardiac, respiratory phase.
    Phases = 5,
    /// dims `[E, 5]`: outer, epoch, loss, lambda1, lambda2.
    History = 6,
    /// dims `[F, L, 2]`: navigator samples, interleaved re, im.
    Navigators = 7,
}

impl Kind {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => Kind::Series,
            2 => Kind::KSpace,
            3 => Kind::Graph,
            4 => Kind::Params,
            5 => Kind::Phases,
            6 => Kind::History,
            7 => Kind::Navigators,
            other => return Err(Error::Format(format!("unknown container kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Series => "series",
            Kind::KSpace => "kspace",
            Kind::Graph => "graph",
            Kind::Params => "params",
            Kind::Phases => "phases",
            Kind::History => "history",
            Kind::Navigators => "navigators",
        }
    }
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 1,
        Precision::F64 => 2,
    }
}

fn precision_from_tag(tag: u8) -> Result<Precision> {
    match tag {
        1 => Ok(Precision::F32),
        2 => Ok(Precision::F64),
        other => Err(Error::Format(format!("unknown precision tag {other}"))),
    }
}

/// Decoded container with a raw payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub precision: Precision,
    pub dims: Vec<u64>,
    pub meta: Vec<u64>,
    pub payload: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64s(&mut self, n: u32) -> Result<Vec<u64>> {
        if n as usize > self.bytes.len() / 8 {
            return Err(Error::Format("truncated container".into()));
        }
        (0..n).map(|_| self.u64()).collect()
    }
}

impl Container {
    fn from_floats<T: Real>(kind: Kind, dims: Vec<u64>, meta: Vec<u64>, values: &[T]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * T::PRECISION.byte_width());
        for v in values {
            v.write_le(&mut payload);
        }
        Self { kind, precision: T::PRECISION, dims, meta, payload }
    }

    fn element_count(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * (self.dims.len() + self.meta.len()) + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(precision_tag(self.precision));
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for m in &self.meta {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a container file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = Kind::from_tag(r.u8()?)?;
        let precision = precision_from_tag(r.u8()?)?;
        let ndims = r.u32()?;
        let dims = r.u64s(ndims)?;
        let nmeta = r.u32()?;
        let meta = r.u64s(nmeta)?;
        let mut c = Self { kind, precision, dims, meta, payload: Vec::new() };
        let len = c
            .element_count()?
            .checked_mul(precision.byte_width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        c.payload = payload.to_vec();
        Ok(c)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn expect(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {} container, found {}", kind.name(), self.kind.name())));
        }
        Ok(())
    }

    fn dims_usize(&self, rank: usize) -> Result<Vec<usize>> {
        if self.dims.len() != rank {
            return Err(Error::Format(format!(
                "{} container needs {rank} dimensions, found {}",
                self.kind.name(),
                self.dims.len()
            )));
        }
        self.dims.iter().map(|&d| usize::try_from(d).map_err(|_| Error::Format("dimension too large".into()))).collect()
    }

    /// Payload floats converted to `T`; exact when the stored precision is `T`
    /// or narrower.
    pub fn floats<T: Real>(&self) -> Vec<T> {
        let w = self.precision.byte_width();
        self.payload
            .chunks_exact(w)
            .map(|b| match self.precision {
                Precision::F32 => T::of(f32::read_le(b) as f64),
                Precision::F64 => T::of(f64::read_le(b)),
            })
            .collect()
    }

    pub fn from_series<T: Real>(x: &DynamicSeries<T>) -> Self {
        let (f, h, w) = x.shape();
        let values: Vec<T> = x.data().iter().flat_map(|z| [z.re, z.im]).collect();
        Self::from_floats(Kind::Series, vec![f as u64, h as u64, w as u64, 2], Vec::new(), &values)
    }

    pub fn to_series<T: Real>(&self) -> Result<DynamicSeries<T>> {
        self.expect(Kind::Series)?;
        let d = self.dims_usize(4)?;
        if d[3] != 2 {
            return Err(Error::Format("series payload must hold (re, im) pairs".into()));
        }
        let data = pairs(&self.floats::<T>());
        DynamicSeries::new(d[0], d[1], d[2], data).map_err(format_err)
    }

    pub fn from_kspace<T: Real>(b: &KSpaceData<T>) -> Self {
        let (f, h, w) = b.values().shape();
        let values: Vec<T> = b
            .values()
            .data()
            .iter()
            .zip(b.pattern().masks())
            .flat_map(|(z, &m)| [z.re, z.im, if m { T::one() } else { T::zero() }])
            .collect();
        let meta = vec![b.pattern().lines_per_frame() as u64];
        Self::from_floats(Kind::KSpace, vec![f as u64, h as u64, w as u64, 3], meta, &values)
    }

    pub fn to_kspace<T: Real>(&self) -> Result<KSpaceData<T>> {
        self.expect(Kind::KSpace)?;
        let d = self.dims_usize(4)?;
        if d[3] != 3 || self.meta.len() != 1 {
            return Err(Error::Format("k-space payload must hold (re, im, mask) triples".into()));
        }
        let raw = self.floats::<T>();
        let mut data = Vec::with_capacity(raw.len() / 3);
        let mut masks = Vec::with_capacity(raw.len() / 3);
        for c in raw.chunks_exact(3) {
            data.push(Complex::new(c[0], c[1]));
            masks.push(if c[2] == T::one() {
                true
            } else if c[2] == T::zero() {
                false
            } else {
                return Err(Error::Format(format!("mask entry {} is not 0 or 1", c[2])));
            });
        }
        let pattern = SamplingPattern::new(d[0], d[1], d[2], self.meta[0] as usize, masks).map_err(format_err)?;
        let values = DynamicSeries::new(d[0], d[1], d[2], data).map_err(format_err)?;
        KSpaceData::new(pattern, values).map_err(format_err)
    }

    pub fn from_graph<T: Real>(g: &ManifoldGraph<T>) -> Self {
        let n = g.nframes() as u64;
        Self::from_floats(Kind::Graph, vec![n, n], Vec::new(), g.weights())
    }

    pub fn to_graph<T: Real>(&self) -> Result<ManifoldGraph<T>> {
        self.expect(Kind::Graph)?;
        let d = self.dims_usize(2)?;
        if d[0] != d[1] {
            return Err(Error::Format("graph weight matrix must be square".into()));
        }
        ManifoldGraph::from_weights(d[0], self.floats()).map_err(format_err)
    }

    pub fn from_params<T: Real>(p: &DenoiserParams<T>, lambda1: f64, lambda2: f64) -> Self {
        let mut meta = vec![p.layers().len() as u64];
        for l in p.layers() {
            meta.extend([
                l.in_ch as u64,
                l.out_ch as u64,
                l.kernel[0] as u64,
                l.kernel[1] as u64,
                l.kernel[2] as u64,
                l.relu as u64,
                l.norm.is_some() as u64,
            ]);
        }
        let mut values = p.to_flat();
        values.push(T::of(lambda1));
        values.push(T::of(lambda2));
        Self::from_floats(Kind::Params, vec![values.len() as u64], meta, &values)
    }

    /// Network parameters and the trained (lambda1, lambda2).
    pub fn to_params<T: Real>(&self) -> Result<(DenoiserParams<T>, f64, f64)> {
        self.expect(Kind::Params)?;
        let nlayers = *self.meta.first().ok_or_else(|| Error::Format("params meta is empty".into()))? as usize;
        if self.meta.len() != 1 + LAYER_META * nlayers {
            return Err(Error::Format(format!("params meta length {} for {nlayers} layers", self.meta.len())));
        }
        let mut layers = Vec::with_capacity(nlayers);
        for m in self.meta[1..].chunks_exact(LAYER_META) {
            let flag = |v: u64| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("layer flag {other} is not 0 or 1"))),
            };
            let dim = |v: u64| {
                usize::try_from(v)
                    .ok()
                    .filter(|&v| v <= 1 << 16)
                    .ok_or_else(|| Error::Format(format!("layer dimension {v} out of range")))
            };
            let kernel = [dim(m[2])?, dim(m[3])?, dim(m[4])?];
            layers.push(ConvLayer::new(dim(m[0])?, dim(m[1])?, kernel, flag(m[6])?, flag(m[5])?));
        }
        let mut params = DenoiserParams::from_layers(layers).map_err(format_err)?;
        let d = self.dims_usize(1)?;
        if d[0] != params.param_count() + 2 {
            return Err(Error::Format(format!(
                "params payload holds {} values, architecture needs {}",
                d[0],
                params.param_count() + 2
            )));
        }
        let values = self.floats::<T>();
        params.set_flat(&values[..d[0] - 2]).map_err(format_err)?;
        params.validate().map_err(format_err)?;
        Ok((params, values[d[0] - 2].as_f64(), values[d[0] - 1].as_f64()))
    }

    pub fn from_phases(p: &PhaseRecord) -> Self {
        let values: Vec<f64> = p.cardiac.iter().zip(&p.respiratory).flat_map(|(&c, &r)| [c, r]).collect();
        Self::from_floats(Kind::Phases, vec![p.len() as u64, 2], Vec::new(), &values)
    }

    pub fn to_phases(&self) -> Result<PhaseRecord> {
        self.expect(Kind::Phases)?;
        let d = self.dims_usize(2)?;
        if d[1] != 2 {
            return Err(Error::Format("phase payload must hold (cardiac, respiratory) pairs".into()));
        }
        let v = self.floats::<f64>();
        Ok(PhaseRecord {
            cardiac: v.iter().step_by(2).copied().collect(),
            respiratory: v.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    pub fn from_history(h: &[EpochRecord]) -> Self {
        let values: Vec<f64> =
            h.iter().flat_map(|r| [r.outer as f64, r.epoch as f64, r.loss, r.lambda1, r.lambda2]).collect();
        Self::from_floats(Kind::History, vec![h.len() as u64, 5], Vec::new(), &values)
    }

    pub fn to_history(&self) -> Result<Vec<EpochRecord>> {
        self.expect(Kind::History)?;
        let d = self.dims_usize(2)?;
        if d[1] != 5 {
            return Err(Error::Format("history rows must have 5 columns".into()));
        }
        Ok(self
            .floats::<f64>()
            .chunks_exact(5)
            .map(|r| EpochRecord {
                outer: r[0] as usize,
                epoch: r[1] as usize,
                loss: r[2],
                lambda1: r[3],
                lambda2: r[4],
            })
            .collect())
    }

    pub fn from_navigators<T: Real>(n: &NavigatorSignals<T>) -> Self {
        let values: Vec<T> = n.data().iter().flat_map(|z| [z.re, z.im]).collect();
        let dims = vec![n.nframes() as u64, n.siglen() as u64, 2];
        Self::from_floats(Kind::Navigators, dims, Vec::new(), &values)
    }

    pub fn to_navigators<T: Real>(&self) -> Result<NavigatorSignals<T>> {
        self.expect(Kind::Navigators)?;
        let d = self.dims_usize(3)?;
        if d[2] != 2 {
            return Err(Error::Format("navigator payload must hold (re, im) pairs".into()));
        }
        NavigatorSignals::new(d[0], d[1], pairs(&self.floats::<T>())).map_err(format_err)
    }
}

fn pairs<T: Real>(v: &[T]) -> Vec<Complex<T>> {
    v.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect()
}

/// Content that decodes but violates a domain invariant is a format error.
fn format_err(e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
