//! 3D volume and mask data model, geometry arithmetic, interpolation, and
//! the header+raw interchange file format.
//!
//! Conventions fixed across the crate:
//! - voxel order is x-fastest row-major: `idx = x + nx*(y + ny*z)`
//! - the world coordinate of voxel `(i,j,k)` is `origin + (i,j,k)*spacing`
//! - volumes are `f32`, masks are `u8` restricted to {0,1}
//! - all types are immutable after construction; operations are pure

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Default out-of-grid background for CT volumes in HU.
pub const CT_BACKGROUND: f32 = -1024.0;
/// Default out-of-grid background for PET volumes.
pub const PET_BACKGROUND: f32 = 0.0;

/// Interpolation mode for resampling and field application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Regular 3D grid: voxel counts, physical spacing (mm/voxel), and the world
/// position (mm) of the center of voxel (0,0,0).
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    /// Grid centered on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [
            -0.5 * (dims[0] - 1) as f64 * spacing[0],
            -0.5 * (dims[1] - 1) as f64 * spacing[1],
            -0.5 * (dims[2] - 1) as f64 * spacing[2],
        ];
        Geometry::new(dims, spacing, origin)
    }

    #[inline]
    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [
            (w[0] - self.origin[0]) / self.spacing[0],
            (w[1] - self.origin[1]) / self.spacing[1],
            (w[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World center of an integer voxel index.
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.voxel_to_world([x as f64, y as f64, z as f64])
    }
}

/// Dense 3D scalar volume of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::LengthMismatch {
                expected: geometry.num_voxels(),
                found: data.len(),
            });
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let n = geometry.num_voxels();
        Volume { geometry, data: vec![value; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Trilinear interpolation at a world point. Points outside the
    /// voxel-center hull return `background`.
    pub fn sample_trilinear(&self, p: [f64; 3], background: f32) -> f32 {
        let u = self.geometry.world_to_voxel(p);
        let d = self.geometry.dims;
        for a in 0..3 {
            if !(u[a] >= 0.0 && u[a] <= (d[a] - 1) as f64) {
                return background;
            }
        }
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let fl = u[a].floor();
            let mut i = fl as usize;
            if d[a] >= 2 && i > d[a] - 2 {
                i = d[a] - 2; // u[a] == d-1 exactly
            }
            i0[a] = i;
            f[a] = if d[a] >= 2 { u[a] - i as f64 } else { 0.0 };
        }
        let i1 = [
            (i0[0] + 1).min(d[0] - 1),
            (i0[1] + 1).min(d[1] - 1),
            (i0[2] + 1).min(d[2] - 1),
        ];
        let g = &self.geometry;
        let c = |x: usize, y: usize, z: usize| self.data[g.index(x, y, z)] as f64;
        let (fx, fy, fz) = (f[0], f[1], f[2]);
        let v00 = c(i0[0], i0[1], i0[2]) * (1.0 - fx) + c(i1[0], i0[1], i0[2]) * fx;
        let v10 = c(i0[0], i1[1], i0[2]) * (1.0 - fx) + c(i1[0], i1[1], i0[2]) * fx;
        let v01 = c(i0[0], i0[1], i1[2]) * (1.0 - fx) + c(i1[0], i0[1], i1[2]) * fx;
        let v11 = c(i0[0], i1[1], i1[2]) * (1.0 - fx) + c(i1[0], i1[1], i1[2]) * fx;
        let v0 = v00 * (1.0 - fy) + v10 * fy;
        let v1 = v01 * (1.0 - fy) + v11 * fy;
        (v0 * (1.0 - fz) + v1 * fz) as f32
    }

    /// Nearest-neighbor sample at a world point.
    pub fn sample_nearest(&self, p: [f64; 3], background: f32) -> f32 {
        let u = self.geometry.world_to_voxel(p);
        let d = self.geometry.dims;
        let mut i = [0usize; 3];
        for a in 0..3 {
            let r = u[a].round();
            if !(r >= 0.0 && r <= (d[a] - 1) as f64) {
                return background;
            }
            i[a] = r as usize;
        }
        self.data[self.geometry.index(i[0], i[1], i[2])]
    }

    /// Resample onto `target`; each output voxel is sampled at its world
    /// center from `self`.
    pub fn resample(&self, target: &Geometry, mode: Interp, background: f32) -> Volume {
        let mut data = vec![0.0f32; target.num_voxels()];
        let [nx, ny, nz] = target.dims;
        let mut idx = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let w = target.voxel_center(x, y, z);
                    data[idx] = match mode {
                        Interp::Trilinear => self.sample_trilinear(w, background),
                        Interp::Nearest => self.sample_nearest(w, background),
                    };
                    idx += 1;
                }
            }
        }
        Volume { geometry: target.clone(), data }
    }

    /// Crop to the half-open voxel box `[lo, hi)`. The origin shifts so that
    /// world coordinates are preserved.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume> {
        let d = self.geometry.dims;
        for a in 0..3 {
            if !(lo[a] < hi[a] && hi[a] <= d[a]) {
                return Err(Error::Bounds(format!(
                    "crop [{lo:?}, {hi:?}) out of range for dims {d:?}"
                )));
            }
        }
        let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let origin = self.geometry.voxel_center(lo[0], lo[1], lo[2]);
        let geometry = Geometry::new(dims, self.geometry.spacing, origin)?;
        let mut data = Vec::with_capacity(geometry.num_voxels());
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                let row = self.geometry.index(lo[0], y, z);
                data.extend_from_slice(&self.data[row..row + dims[0]]);
            }
        }
        Ok(Volume { geometry, data })
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Dense binary mask; data values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub geometry: Geometry,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::LengthMismatch {
                expected: geometry.num_voxels(),
                found: data.len(),
            });
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Mask { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.num_voxels();
        Mask { geometry, data: vec![0; n] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = v as u8;
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.geometry.voxel_volume_mm3()
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Mask> {
        let v = self.to_volume().crop(lo, hi)?;
        Ok(Mask {
            geometry: v.geometry,
            data: v.data.iter().map(|&f| (f != 0.0) as u8).collect(),
        })
    }

    /// Nearest-neighbor resample onto `target`; out-of-grid is 0.
    pub fn resample_nearest(&self, target: &Geometry) -> Mask {
        let v = self.to_volume().resample(target, Interp::Nearest, 0.0);
        Mask {
            geometry: v.geometry,
            data: v.data.iter().map(|&f| (f != 0.0) as u8).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&b| b as f32).collect(),
        }
    }

    /// Threshold a volume at `thresh` (strictly greater).
    pub fn from_volume_threshold(v: &Volume, thresh: f32) -> Mask {
        Mask {
            geometry: v.geometry.clone(),
            data: v.data.iter().map(|&f| (f > thresh) as u8).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Interchange format: `<name>.hdr` (UTF-8 key=value lines, fixed key order:
// dims, spacing, origin, dtype, file) + `<name>.raw` (little-endian dense
// array, x-fastest).
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    // Rust's shortest round-trip formatting keeps headers bit-stable.
    format!("{v}")
}

fn write_header(path: &Path, geom: &Geometry, dtype: &str, raw_name: &str) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("dims={} {} {}\n", geom.dims[0], geom.dims[1], geom.dims[2]));
    s.push_str(&format!(
        "spacing={} {} {}\n",
        fmt_f64(geom.spacing[0]),
        fmt_f64(geom.spacing[1]),
        fmt_f64(geom.spacing[2])
    ));
    s.push_str(&format!(
        "origin={} {} {}\n",
        fmt_f64(geom.origin[0]),
        fmt_f64(geom.origin[1]),
        fmt_f64(geom.origin[2])
    ));
    s.push_str(&format!("dtype={dtype}\n"));
    s.push_str(&format!("file={raw_name}\n"));
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parsed interchange header.
pub struct Header {
    pub geometry: Geometry,
    pub dtype: String,
    pub raw_path: PathBuf,
}

/// Read and validate a `.hdr` file. Keys must appear in the fixed order
/// dims, spacing, origin, dtype, file.
pub fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut take = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::header(path, format!("missing key `{key}`")))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::header(path, format!("malformed line `{line}`")))?;
        if k != key {
            return Err(Error::header(path, format!("expected key `{key}`, found `{k}`")));
        }
        Ok(v.to_string())
    };
    let parse3 = |s: &str, key: &str| -> Result<[f64; 3]> {
        let parts: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::header(path, format!("bad `{key}` value: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::header(path, format!("`{key}` needs 3 values")));
        }
        Ok([parts[0], parts[1], parts[2]])
    };
    let dims_f = parse3(&take("dims")?, "dims")?;
    if dims_f.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(Error::header(path, "dims must be positive integers"));
    }
    let dims = [dims_f[0] as usize, dims_f[1] as usize, dims_f[2] as usize];
    let spacing = parse3(&take("spacing")?, "spacing")?;
    let origin = parse3(&take("origin")?, "origin")?;
    let dtype = take("dtype")?;
    if dtype != "f32" && dtype != "u8" {
        return Err(Error::header(path, format!("unsupported dtype `{dtype}`")));
    }
    let raw_name = take("file")?;
    let geometry = Geometry::new(dims, spacing, origin)?;
    let raw_path = path.parent().unwrap_or_else(|| Path::new(".")).join(raw_name);
    Ok(Header { geometry, dtype, raw_path })
}

fn hdr_raw_paths(path: &Path) -> (PathBuf, PathBuf, String) {
    // Accept either `<base>` or `<base>.hdr`.
    let base = if path.extension().map(|e| e == "hdr").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let hdr = base.with_extension("hdr");
    let raw = base.with_extension("raw");
    let raw_name = raw
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.raw".into());
    (hdr, raw, raw_name)
}

/// Write `<base>.hdr` + `<base>.raw` for a volume (dtype f32).
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let (hdr, raw, raw_name) = hdr_raw_paths(path);
    write_header(&hdr, &v.geometry, "f32", &raw_name)?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for &f in &v.data {
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    let mut file = fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&raw, e))
}

/// Load a volume saved by [`save_volume`].
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (hdr, _, _) = hdr_raw_paths(path);
    let h = read_header(&hdr)?;
    if h.dtype != "f32" {
        return Err(Error::header(&hdr, format!("expected dtype f32, found {}", h.dtype)));
    }
    let bytes = fs::read(&h.raw_path).map_err(|e| Error::io(&h.raw_path, e))?;
    let expected = h.geometry.num_voxels() * 4;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, found: bytes.len() });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite(h.raw_path.display().to_string()));
    }
    Volume::new(h.geometry, data)
}

/// Write `<base>.hdr` + `<base>.raw` for a mask (dtype u8, one byte per voxel).
pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    let (hdr, raw, raw_name) = hdr_raw_paths(path);
    write_header(&hdr, &m.geometry, "u8", &raw_name)?;
    let mut file = fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    file.write_all(&m.data).map_err(|e| Error::io(&raw, e))
}

/// Load a mask saved by [`save_mask`].
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (hdr, _, _) = hdr_raw_paths(path);
    let h = read_header(&hdr)?;
    if h.dtype != "u8" {
        return Err(Error::header(&hdr, format!("expected dtype u8, found {}", h.dtype)));
    }
    let bytes = fs::read(&h.raw_path).map_err(|e| Error::io(&h.raw_path, e))?;
    let expected = h.geometry.num_voxels();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, found: bytes.len() });
    }
    Mask::new(h.geometry, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_volume() -> Volume {
        // v(x,y,z) = 2*wx + 3*wy - wz, linear in world coordinates.
        let g = Geometry::new([5, 4, 3], [1.5, 2.0, 2.5], [-1.0, 0.5, 2.0]).unwrap();
        let mut data = vec![0.0; g.num_voxels()];
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let w = g.voxel_center(x, y, z);
                    data[g.index(x, y, z)] = (2.0 * w[0] + 3.0 * w[1] - w[2]) as f32;
                }
            }
        }
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn world_voxel_round_trip() {
        let g = Geometry::new([7, 6, 5], [0.7, 1.1, 2.3], [3.0, -4.0, 5.5]).unwrap();
        for z in 0..5 {
            for y in 0..6 {
                for x in 0..7 {
                    let w = g.voxel_center(x, y, z);
                    let v = g.world_to_voxel(w);
                    assert!((v[0] - x as f64).abs() < 1e-9);
                    assert!((v[1] - y as f64).abs() < 1e-9);
                    assert!((v[2] - z as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn trilinear_identity_at_centers() {
        let v = ramp_volume();
        let g = v.geometry.clone();
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    let w = g.voxel_center(x, y, z);
                    assert_eq!(v.sample_trilinear(w, -9.0), v.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_is_average() {
        let g = Geometry::new([2, 1, 1], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0]).unwrap();
        let s = v.sample_trilinear([0.5, 0.0, 0.0], -9.0);
        assert!((s - 0.5).abs() < 1e-7);
    }

    #[test]
    fn trilinear_outside_returns_background() {
        let v = ramp_volume();
        assert_eq!(v.sample_trilinear([-100.0, 0.0, 0.0], -1024.0), -1024.0);
        assert_eq!(v.sample_nearest([1e9, 0.0, 0.0], 7.0), 7.0);
    }

    /// Independent 8-corner weighted-sum oracle.
    fn trilinear_oracle(v: &Volume, p: [f64; 3]) -> f64 {
        let g = &v.geometry;
        let u = g.world_to_voxel(p);
        let base = [u[0].floor() as usize, u[1].floor() as usize, u[2].floor() as usize];
        let mut acc = 0.0f64;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let i = [
                        (base[0] + dx).min(g.dims[0] - 1),
                        (base[1] + dy).min(g.dims[1] - 1),
                        (base[2] + dz).min(g.dims[2] - 1),
                    ];
                    let w = |f: f64, d: usize| if d == 1 { f } else { 1.0 - f };
                    let fx = u[0] - base[0] as f64;
                    let fy = u[1] - base[1] as f64;
                    let fz = u[2] - base[2] as f64;
                    acc += v.data[g.index(i[0], i[1], i[2])] as f64
                        * w(fx, dx)
                        * w(fy, dy)
                        * w(fz, dz);
                }
            }
        }
        acc
    }

    #[test]
    fn trilinear_matches_corner_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Geometry::new([8, 7, 6], [1.0, 1.3, 0.8], [0.0, -2.0, 1.0]).unwrap();
        let data: Vec<f32> = (0..g.num_voxels()).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let v = Volume::new(g.clone(), data).unwrap();
        for _ in 0..200 {
            let u = [
                rng.gen_range(0.0..(g.dims[0] - 1) as f64),
                rng.gen_range(0.0..(g.dims[1] - 1) as f64),
                rng.gen_range(0.0..(g.dims[2] - 1) as f64),
            ];
            let p = g.voxel_to_world(u);
            let got = v.sample_trilinear(p, 0.0) as f64;
            let want = trilinear_oracle(&v, p);
            assert!((got - want).abs() < 1e-3, "got {got}, want {want}");
        }
    }

    #[test]
    fn resample_identity_when_geometry_matches() {
        let v = ramp_volume();
        let r = v.resample(&v.geometry, Interp::Trilinear, -1024.0);
        for (a, b) in v.data.iter().zip(&r.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let g = Geometry::new([4, 4, 4], [2.0, 2.0, 2.0], [0.0, 0.0, 0.0]).unwrap();
        let v = Volume::filled(g, 3.5);
        let target = Geometry::new([7, 5, 9], [1.0, 1.7, 0.9], [0.2, 0.3, 0.4]).unwrap();
        let r = v.resample(&target, Interp::Trilinear, 3.5);
        assert!(r.data.iter().all(|&f| (f - 3.5).abs() < 1e-6));
    }

    #[test]
    fn upsample_2x_of_ramp_hits_half_steps() {
        // target voxel centers land on half-steps of the source grid; the
        // trilinear interpolant of a linear field is the field itself.
        let v = ramp_volume();
        let g = &v.geometry;
        let target = Geometry::new(
            [2 * g.dims[0] - 1, 2 * g.dims[1] - 1, 2 * g.dims[2] - 1],
            [g.spacing[0] / 2.0, g.spacing[1] / 2.0, g.spacing[2] / 2.0],
            g.origin,
        )
        .unwrap();
        let r = v.resample(&target, Interp::Trilinear, 0.0);
        for z in 0..target.dims[2] {
            for y in 0..target.dims[1] {
                for x in 0..target.dims[0] {
                    let w = target.voxel_center(x, y, z);
                    let want = (2.0 * w[0] + 3.0 * w[1] - w[2]) as f32;
                    let got = r.at(x, y, z);
                    assert!((got - want).abs() < 1e-3, "at {x},{y},{z}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let v = ramp_volume();
        let c = v.crop([0, 0, 0], v.geometry.dims).unwrap();
        assert_eq!(v, c);
    }

    #[test]
    fn crop_single_voxel() {
        let v = ramp_volume();
        let c = v.crop([2, 1, 1], [3, 2, 2]).unwrap();
        assert_eq!(c.geometry.dims, [1, 1, 1]);
        assert_eq!(c.data[0], v.at(2, 1, 1));
        let w = v.geometry.voxel_center(2, 1, 1);
        assert_eq!(c.geometry.origin, w);
    }

    #[test]
    fn crop_preserves_world_sampling() {
        let v = ramp_volume();
        let c = v.crop([1, 1, 0], [4, 3, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = [
                rng.gen_range(1.2..2.8),
                rng.gen_range(1.2..1.8),
                rng.gen_range(0.2..1.8),
            ];
            let w = v.geometry.voxel_to_world(u);
            let a = v.sample_trilinear(w, -9.0);
            let b = c.sample_trilinear(w, -9.0);
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn crop_bounds_violation() {
        let v = ramp_volume();
        assert!(v.crop([0, 0, 0], [6, 4, 3]).is_err());
        assert!(v.crop([2, 0, 0], [2, 4, 3]).is_err());
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Geometry::new([6, 5, 4], [0.98, 0.98, 5.0], [-12.25, 3.5, 0.0]).unwrap();
        let data: Vec<f32> = (0..g.num_voxels()).map(|_| rng.gen_range(-1000.0..1000.0)).collect();
        let v = Volume::new(g, data).unwrap();
        let path = dir.path().join("vol");
        save_volume(&v, &path).unwrap();
        let r = load_volume(&path).unwrap();
        assert_eq!(v.geometry, r.geometry);
        assert_eq!(v.data, r.data); // bit-exact
    }

    #[test]
    fn save_single_voxel_zero_writes_four_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([1, 1, 1], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap();
        let v = Volume::filled(g, 0.0);
        save_volume(&v, &dir.path().join("one")).unwrap();
        let raw = fs::read(dir.path().join("one.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 4]);
    }

    #[test]
    fn mask_raw_is_byte_per_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([2, 2, 1], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap();
        let m = Mask::new(g, vec![0, 1, 1, 0]).unwrap();
        save_mask(&m, &dir.path().join("m")).unwrap();
        let raw = fs::read(dir.path().join("m.raw")).unwrap();
        assert_eq!(raw, vec![0, 1, 1, 0]);
        let r = load_mask(&dir.path().join("m")).unwrap();
        assert_eq!(m, r);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([4, 4, 4], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]).unwrap();
        let v = Volume::filled(g, 1.0);
        let path = dir.path().join("bad");
        save_volume(&v, &path).unwrap();
        // 65 elements instead of 64
        let mut bytes = fs::read(dir.path().join("bad.raw")).unwrap();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(dir.path().join("bad.raw"), bytes).unwrap();
        match load_volume(&path) {
            Err(Error::LengthMismatch { expected, found }) => {
                assert_eq!(expected, 64 * 4);
                assert_eq!(found, 65 * 4);
            }
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("s.hdr");
        fs::write(
            &hdr,
            "dims=1 1 1\nspacing=0 1 1\norigin=0 0 0\ndtype=f32\nfile=s.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), 0.0f32.to_le_bytes()).unwrap();
        assert!(load_volume(&hdr).is_err());
    }

    #[test]
    fn header_key_order_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("o.hdr");
        fs::write(
            &hdr,
            "spacing=1 1 1\ndims=1 1 1\norigin=0 0 0\ndtype=f32\nfile=o.raw\n",
        )
        .unwrap();
        assert!(load_volume(&hdr).is_err());
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_volume(Path::new("/nonexistent/vol")).is_err());
    }
}
