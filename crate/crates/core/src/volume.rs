//! Voxel volumes, bit-exact RVOL file I/O, connected components, and the
//! synthetic vessel-phantom generator.
//!
//! Voxel order is x-fastest throughout: `index = x + nx * (y + ny * z)`.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{component_seed, counter_noise, Rng};

pub const RVOL_MAGIC: &[u8; 6] = b"RVOL1\n";

/// Dense 3D grid over one scalar element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    data: Vec<T>,
}

impl<T: Copy + Default + PartialEq> Volume<T> {
    pub fn new(dims: (usize, usize, usize), fill: T) -> Self {
        assert!(dims.0 >= 1 && dims.1 >= 1 && dims.2 >= 1, "dims must be >= 1");
        Volume {
            dims,
            spacing: (1.0, 1.0, 1.0),
            data: vec![fill; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<T>) -> Result<Self> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::DimsTooSmall { dims, reason: "all dims must be >= 1".into() });
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::RvolLengthMismatch { expected: n, got: data.len() });
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let (nx, ny, _) = self.dims;
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Remaps the volume under an axis permutation, e.g. `[2, 0, 1]` sends
    /// old axis 2 to new axis 0. Used by equivariance tests.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Volume<T> {
        let d = [self.dims.0, self.dims.1, self.dims.2];
        let s = [self.spacing.0, self.spacing.1, self.spacing.2];
        let nd = (d[perm[0]], d[perm[1]], d[perm[2]]);
        let mut out = Volume::new(nd, T::default());
        out.spacing = (s[perm[0]], s[perm[1]], s[perm[2]]);
        for z in 0..self.dims.2 {
            for y in 0..self.dims.1 {
                for x in 0..self.dims.0 {
                    let c = [x, y, z];
                    out.set(c[perm[0]], c[perm[1]], c[perm[2]], self.get(x, y, z));
                }
            }
        }
        out
    }

    /// Mirrors the volume along one axis.
    pub fn reflect_axis(&self, axis: usize) -> Volume<T> {
        let mut out = Volume::new(self.dims, T::default());
        out.spacing = self.spacing;
        let d = [self.dims.0, self.dims.1, self.dims.2];
        for z in 0..self.dims.2 {
            for y in 0..self.dims.1 {
                for x in 0..self.dims.0 {
                    let mut c = [x, y, z];
                    c[axis] = d[axis] - 1 - c[axis];
                    out.set(c[0], c[1], c[2], self.get(x, y, z));
                }
            }
        }
        out
    }
}

/// Checks a mask holds only 0/1 values.
pub fn validate_binary(mask: &Volume<u8>) -> Result<()> {
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 1 {
            return Err(Error::NonBinaryMask { value: u32::from(v), index: i });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// RVOL file format
// ---------------------------------------------------------------------------
//
//   RVOL1\n
//   dims=nx,ny,nz;spacing=sx,sy,sz;dtype=f32;\n
//   <raw little-endian payload, nx*ny*nz elements>

/// Element types that RVOL can carry.
pub trait RvolElement: Copy + Default + PartialEq {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl RvolElement for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl RvolElement for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.push(*self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

fn rvol_header(dims: (usize, usize, usize), spacing: (f32, f32, f32), dtype: &str) -> String {
    format!(
        "dims={},{},{};spacing={},{},{};dtype={};\n",
        dims.0, dims.1, dims.2, spacing.0, spacing.1, spacing.2, dtype
    )
}

pub fn save_rvol<T: RvolElement>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(RVOL_MAGIC)?;
    w.write_all(rvol_header(v.dims, v.spacing, T::DTYPE).as_bytes())?;
    let mut payload = Vec::with_capacity(v.data.len() * T::SIZE);
    for e in &v.data {
        e.write_le(&mut payload);
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// A loaded volume of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum RvolVolume {
    F32(Volume<f32>),
    U8(Volume<u8>),
}

impl RvolVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            RvolVolume::F32(v) => v.dims(),
            RvolVolume::U8(v) => v.dims(),
        }
    }

    pub fn into_f32(self) -> Result<Volume<f32>> {
        match self {
            RvolVolume::F32(v) => Ok(v),
            RvolVolume::U8(_) => Err(Error::RvolDtype { found: "u8", expected: "f32" }),
        }
    }

    pub fn into_u8(self) -> Result<Volume<u8>> {
        match self {
            RvolVolume::U8(v) => Ok(v),
            RvolVolume::F32(_) => Err(Error::RvolDtype { found: "f32", expected: "u8" }),
        }
    }
}

struct RvolHeader {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    dtype: String,
}

fn parse_header(line: &str) -> Result<RvolHeader> {
    let bad = |msg: &str| Error::RvolHeader(format!("{msg}: {line:?}"));
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    for field in line.trim_end_matches('\n').split(';') {
        if field.is_empty() {
            continue;
        }
        let (key, val) = field.split_once('=').ok_or_else(|| bad("field without '='"))?;
        match key {
            "dims" => {
                let parts: Vec<&str> = val.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad("dims needs three components"));
                }
                let mut d = [0usize; 3];
                for (slot, p) in d.iter_mut().zip(&parts) {
                    *slot = p.parse().map_err(|_| bad("non-integer dim"))?;
                    if *slot == 0 {
                        return Err(bad("zero dim"));
                    }
                }
                dims = Some((d[0], d[1], d[2]));
            }
            "spacing" => {
                let parts: Vec<&str> = val.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad("spacing needs three components"));
                }
                let mut s = [0f32; 3];
                for (slot, p) in s.iter_mut().zip(&parts) {
                    *slot = p.parse().map_err(|_| bad("non-numeric spacing"))?;
                    if !slot.is_finite() || *slot <= 0.0 {
                        return Err(bad("spacing must be positive and finite"));
                    }
                }
                spacing = Some((s[0], s[1], s[2]));
            }
            "dtype" => {
                dtype = Some(val.to_string());
            }
            _ => return Err(bad("unknown field")),
        }
    }
    Ok(RvolHeader {
        dims: dims.ok_or_else(|| bad("missing dims"))?,
        spacing: spacing.ok_or_else(|| bad("missing spacing"))?,
        dtype: dtype.ok_or_else(|| bad("missing dtype"))?,
    })
}

pub fn load_rvol(path: impl AsRef<Path>) -> Result<RvolVolume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < RVOL_MAGIC.len() || &bytes[..RVOL_MAGIC.len()] != RVOL_MAGIC {
        return Err(Error::RvolMagic);
    }
    let rest = &bytes[RVOL_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::RvolHeader("unterminated header line".into()))?;
    let line = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::RvolHeader("header is not UTF-8".into()))?;
    let header = parse_header(line)?;
    let payload = &rest[nl + 1..];
    let n = header.dims.0 * header.dims.1 * header.dims.2;

    fn decode<T: RvolElement>(
        payload: &[u8],
        n: usize,
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
    ) -> Result<Volume<T>> {
        if payload.len() % T::SIZE != 0 {
            return Err(Error::RvolTruncated { got: payload.len(), elem_size: T::SIZE });
        }
        let count = payload.len() / T::SIZE;
        if count != n {
            return Err(Error::RvolLengthMismatch { expected: n, got: count });
        }
        let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
        Volume::from_data(dims, spacing, data)
    }

    match header.dtype.as_str() {
        "f32" => Ok(RvolVolume::F32(decode::<f32>(payload, n, header.dims, header.spacing)?)),
        "u8" => Ok(RvolVolume::U8(decode::<u8>(payload, n, header.dims, header.spacing)?)),
        other => Err(Error::RvolHeader(format!("unsupported dtype {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<(i64, i64, i64)> {
        match self {
            Connectivity::Six => vec![
                (-1, 0, 0),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push((dx, dy, dz));
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

/// Labels connected foreground components of a binary mask. Component labels
/// are assigned in first-encounter scan order starting at 1; background is 0.
pub fn connected_components(mask: &Volume<u8>, connectivity: Connectivity) -> Result<(Volume<u32>, usize)> {
    validate_binary(mask)?;
    let (nx, ny, nz) = mask.dims();
    let offsets = connectivity.offsets();
    let mut labels: Volume<u32> = Volume::new(mask.dims(), 0);
    let mut count = 0u32;
    let mut stack: Vec<usize> = Vec::new();

    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels.data()[start] != 0 {
            continue;
        }
        count += 1;
        labels.data_mut()[start] = count;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y, z) = mask.coords(idx);
            for &(dx, dy, dz) in &offsets {
                let nxp = x as i64 + dx;
                let nyp = y as i64 + dy;
                let nzp = z as i64 + dz;
                if nxp < 0 || nyp < 0 || nzp < 0 {
                    continue;
                }
                let (nxp, nyp, nzp) = (nxp as usize, nyp as usize, nzp as usize);
                if nxp >= nx || nyp >= ny || nzp >= nz {
                    continue;
                }
                let nidx = mask.index(nxp, nyp, nzp);
                if mask.data()[nidx] == 1 && labels.data()[nidx] == 0 {
                    labels.data_mut()[nidx] = count;
                    stack.push(nidx);
                }
            }
        }
    }
    Ok((labels, count as usize))
}

// ---------------------------------------------------------------------------
// Synthetic vessel phantom
// ---------------------------------------------------------------------------

/// Parameters of a deterministic synthetic phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub branch_count: usize,
    /// Tube radius bounds in voxels, inclusive.
    pub tube_radius_range: (f64, f64),
    /// Number of liver segment classes (labels 1..=class_count).
    pub class_count: usize,
}

impl PhantomSpec {
    pub fn new(dims: (usize, usize, usize), seed: u64) -> Self {
        PhantomSpec {
            dims,
            seed,
            branch_count: 2,
            tube_radius_range: (1.5, 2.5),
            class_count: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.branch_count < 1 {
            return Err(Error::Config("branch_count must be >= 1".into()));
        }
        if self.class_count < 1 {
            return Err(Error::Config("class_count must be >= 1".into()));
        }
        let (rmin, rmax) = self.tube_radius_range;
        if !(rmin >= 1.0 && rmax >= rmin) {
            return Err(Error::Config(format!(
                "tube_radius_range must satisfy 1 <= min <= max, got ({rmin}, {rmax})"
            )));
        }
        // Centerlines are confined to [margin, dim-1-margin] per axis so every
        // tube voxel stays inside the liver region (2-voxel border excluded).
        let margin = centerline_margin(rmax);
        for (name, d) in [("x", self.dims.0), ("y", self.dims.1), ("z", self.dims.2)] {
            if (d as f64 - 1.0) - margin < margin {
                return Err(Error::DimsTooSmall {
                    dims: self.dims,
                    reason: format!(
                        "axis {name} ({d} voxels) cannot contain a tube of radius {rmax}; need at least {} voxels",
                        (2.0 * margin + 1.0).ceil() as usize
                    ),
                });
            }
        }
        Ok(())
    }
}

fn centerline_margin(r_max: f64) -> f64 {
    2.0 + r_max
}

/// One phantom branch: a piecewise-linear centerline plus its tube radius.
#[derive(Debug, Clone)]
struct Branch {
    /// Polyline used for tube rasterization (may include the shared trunk).
    tube_polyline: Vec<[f64; 3]>,
    /// Polyline used for the nearest-branch label partition (the limb only).
    label_polyline: Vec<[f64; 3]>,
    radius: f64,
}

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn dist_point_polyline(p: [f64; 3], poly: &[[f64; 3]]) -> f64 {
    if poly.len() == 1 {
        return dist_point_segment(p, poly[0], poly[0]);
    }
    poly.windows(2)
        .map(|w| dist_point_segment(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn polyline_len(poly: &[[f64; 3]]) -> f64 {
    poly.windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum()
}

/// Generates the deterministic branch geometry for a spec.
fn build_branches(spec: &PhantomSpec) -> Vec<Branch> {
    let mut rng = Rng::new(component_seed(spec.seed, "phantom-geometry"));
    let (nx, ny, nz) = spec.dims;
    let (rmin, rmax) = spec.tube_radius_range;
    let margin = centerline_margin(rmax);
    let lo = [margin, margin, margin];
    let hi = [nx as f64 - 1.0 - margin, ny as f64 - 1.0 - margin, nz as f64 - 1.0 - margin];
    let clamp = |p: [f64; 3]| -> [f64; 3] {
        [
            p[0].clamp(lo[0], hi[0]),
            p[1].clamp(lo[1], hi[1]),
            p[2].clamp(lo[2], hi[2]),
        ]
    };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];

    if spec.branch_count == 1 {
        // A lone branch is a straight vertical tube.
        let radius = rng.range_f64(rmin, rmax);
        let root = clamp([center[0], center[1], lo[2]]);
        let tip = clamp([center[0], center[1], hi[2]]);
        let line = vec![root, tip];
        return vec![Branch { tube_polyline: line.clone(), label_polyline: line, radius }];
    }

    // Trunk from the bottom up to a bifurcation point, then one limb per branch.
    let root = clamp([
        center[0] + rng.range_f64(-1.0, 1.0),
        center[1] + rng.range_f64(-1.0, 1.0),
        lo[2],
    ]);
    let bif = clamp([
        center[0] + rng.range_f64(-1.5, 1.5),
        center[1] + rng.range_f64(-1.5, 1.5),
        lo[2] + (hi[2] - lo[2]) * rng.range_f64(0.25, 0.4),
    ]);

    let radial = 0.5 * f64::min(hi[0] - lo[0], hi[1] - lo[1]);
    let phase = rng.range_f64(0.0, std::f64::consts::TAU);
    let mut branches = Vec::with_capacity(spec.branch_count);
    let trunk_radius = {
        // Radii are drawn after the geometry stream so layout and thickness
        // stay independent; the trunk uses the widest limb radius.
        let mut radii = Vec::with_capacity(spec.branch_count);
        let mut rr = Rng::new(component_seed(spec.seed, "phantom-radii"));
        for _ in 0..spec.branch_count {
            radii.push(rr.range_f64(rmin, rmax));
        }
        radii
    };

    for (i, &radius) in trunk_radius.iter().enumerate() {
        let theta = phase
            + std::f64::consts::TAU * i as f64 / spec.branch_count as f64
            + rng.range_f64(-0.2, 0.2);
        let reach = radial * rng.range_f64(0.7, 1.0);
        let tip = clamp([
            center[0] + reach * theta.cos(),
            center[1] + reach * theta.sin(),
            hi[2] - rng.range_f64(0.0, 0.15) * (hi[2] - lo[2]),
        ]);
        let mid = clamp([
            bif[0] + 0.5 * (tip[0] - bif[0]) + rng.range_f64(-1.5, 1.5),
            bif[1] + 0.5 * (tip[1] - bif[1]) + rng.range_f64(-1.5, 1.5),
            bif[2] + 0.5 * (tip[2] - bif[2]),
        ]);
        let limb = vec![bif, mid, tip];
        let mut tube = vec![root];
        tube.extend_from_slice(&limb);
        branches.push(Branch { tube_polyline: tube, label_polyline: limb, radius });
    }
    branches
}

/// Rasterizes one tube: the digital centerline curve plus every voxel whose
/// center lies within `radius - 1` of the polyline. A radius-1 tube is thus
/// exactly the digital curve.
fn rasterize_tube(mask: &mut Volume<u8>, branch: &Branch) {
    let (nx, ny, nz) = mask.dims();
    let poly = &branch.tube_polyline;

    // Digital curve: dense samples rounded to the lattice.
    let total = polyline_len(poly).max(1e-9);
    let steps = (total / 0.25).ceil() as usize;
    for w in poly.windows(2) {
        let seg = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
        let seg_len = (seg[0] * seg[0] + seg[1] * seg[1] + seg[2] * seg[2]).sqrt();
        let seg_steps = ((seg_len / total) * steps as f64).ceil().max(1.0) as usize;
        for s in 0..=seg_steps {
            let t = s as f64 / seg_steps as f64;
            let p = [w[0][0] + t * seg[0], w[0][1] + t * seg[1], w[0][2] + t * seg[2]];
            let v = [p[0].round() as i64, p[1].round() as i64, p[2].round() as i64];
            if v[0] >= 0 && v[1] >= 0 && v[2] >= 0 {
                let (x, y, z) = (v[0] as usize, v[1] as usize, v[2] as usize);
                if x < nx && y < ny && z < nz {
                    mask.set(x, y, z, 1);
                }
            }
        }
    }

    // Body voxels within radius - 1 of the polyline.
    let body = branch.radius - 1.0;
    if body <= 0.0 {
        return;
    }
    let reach = body.ceil() as i64 + 1;
    let mut bb_lo = [i64::MAX; 3];
    let mut bb_hi = [i64::MIN; 3];
    for p in poly {
        for a in 0..3 {
            bb_lo[a] = bb_lo[a].min(p[a].floor() as i64 - reach);
            bb_hi[a] = bb_hi[a].max(p[a].ceil() as i64 + reach);
        }
    }
    let dims = [nx as i64, ny as i64, nz as i64];
    for a in 0..3 {
        bb_lo[a] = bb_lo[a].max(0);
        bb_hi[a] = bb_hi[a].min(dims[a] - 1);
    }
    for z in bb_lo[2]..=bb_hi[2] {
        for y in bb_lo[1]..=bb_hi[1] {
            for x in bb_lo[0]..=bb_hi[0] {
                let p = [x as f64, y as f64, z as f64];
                if dist_point_polyline(p, poly) <= body {
                    mask.set(x as usize, y as usize, z as usize, 1);
                }
            }
        }
    }
}

/// Generates the phantom triple: CT-like intensity, binary vessel mask, and
/// segment labels. Identical specs yield bit-identical volumes.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume<f32>, Volume<u8>, Volume<u8>)> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let branches = build_branches(spec);

    let mut vessel: Volume<u8> = Volume::new(spec.dims, 0);
    for b in &branches {
        rasterize_tube(&mut vessel, b);
    }
    debug_assert!(vessel.data().iter().any(|&v| v == 1));

    // Labels: liver region (interior minus a 2-voxel border) partitioned by
    // nearest branch centerline; ties go to the smaller branch index.
    let mut labels: Volume<u8> = Volume::new(spec.dims, 0);
    for z in 2..nz.saturating_sub(2) {
        for y in 2..ny.saturating_sub(2) {
            for x in 2..nx.saturating_sub(2) {
                let p = [x as f64, y as f64, z as f64];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, b) in branches.iter().enumerate() {
                    let d = dist_point_polyline(p, &b.label_polyline);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                labels.set(x, y, z, ((best % spec.class_count) + 1) as u8);
            }
        }
    }

    // Intensity: smooth vertical ramp, brighter vessels, counter-based noise.
    let noise_seed = component_seed(spec.seed, "phantom-noise");
    let mut intensity: Volume<f32> = Volume::new(spec.dims, 0.0);
    for idx in 0..intensity.len() {
        let (_, _, z) = intensity.coords(idx);
        let base = 0.2 + 0.3 * z as f64 / (nz.max(2) - 1) as f64;
        let vessel_boost = if vessel.data()[idx] == 1 { 0.5 } else { 0.0 };
        let noise = counter_noise(noise_seed, idx as u64, 0.05);
        intensity.data_mut()[idx] = (base + vessel_boost + noise) as f32;
    }

    Ok((intensity, vessel, labels))
}
