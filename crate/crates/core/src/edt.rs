//! Exact 3D Euclidean distance transform of a binary mask, plus its
//! normalized gradient field.
//!
//! Distances are measured in voxel units from each foreground voxel to the
//! nearest background voxel. The separable squared transform uses the
//! lower-envelope-of-parabolas method, so squared distances are exact
//! integers and can be compared 1:1 against the brute-force oracle.

use crate::error::{Error, Result};
use crate::volume::{validate_binary, Volume};

/// Degenerate-gradient threshold: central differences on integer-rooted
/// distances are either 0 or at least ~1/2, so anything below this is noise.
pub const EPS_GRAD: f64 = 1e-6;

/// Distance field with its gradient and unit gradient.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub dist: Volume<f64>,
    pub grad: Vec<[f64; 3]>,
    pub unit_grad: Vec<[f64; 3]>,
}

impl DistanceField {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dist.dims()
    }
}

fn check_mask(mask: &Volume<u8>) -> Result<()> {
    validate_binary(mask)?;
    if mask.data().iter().all(|&v| v == 1) {
        return Err(Error::AllForeground);
    }
    Ok(())
}

/// 1D squared-distance transform (lower envelope of parabolas).
/// `f` holds source costs (0 at seeds, +inf elsewhere), `out` the result.
fn dt_1d(f: &[f64], out: &mut [f64], loc: &mut [usize], bound: &mut [f64]) {
    let n = f.len();
    debug_assert!(out.len() == n && loc.len() == n && bound.len() == n + 1);
    let mut k = 0usize;
    loc[0] = 0;
    bound[0] = f64::NEG_INFINITY;
    bound[1] = f64::INFINITY;

    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };

    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[loc[k]] == f64::INFINITY {
            // Everything so far was unreachable; restart the envelope at q.
            k = 0;
            loc[0] = q;
            bound[0] = f64::NEG_INFINITY;
            bound[1] = f64::INFINITY;
            continue;
        }
        let mut s = intersect(loc[k], q);
        while k > 0 && s <= bound[k] {
            k -= 1;
            s = intersect(loc[k], q);
        }
        k += 1;
        loc[k] = q;
        bound[k] = s;
        bound[k + 1] = f64::INFINITY;
    }

    let mut k = 0usize;
    for q in 0..n {
        while bound[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - loc[k] as f64;
        out[q] = d * d + f[loc[k]];
    }
}

/// Squared EDT via three separable passes. Background voxels are seeds.
fn squared_edt(mask: &Volume<u8>, threads: usize) -> Volume<f64> {
    let (nx, ny, nz) = mask.dims();
    let mut sq: Volume<f64> = Volume::new(mask.dims(), 0.0);
    for (o, &m) in sq.data_mut().iter_mut().zip(mask.data()) {
        *o = if m == 0 { 0.0 } else { f64::INFINITY };
    }

    // Pass along x: lines indexed by (y, z).
    run_lines(threads, ny * nz, nx, |line, f, out, loc, bound, scratch| {
        let (y, z) = (line % ny, line / ny);
        for x in 0..nx {
            f[x] = scratch.get(x, y, z);
        }
        dt_1d(&f[..nx], &mut out[..nx], &mut loc[..nx], &mut bound[..nx + 1]);
        (0..nx).map(|x| (scratch.index(x, y, z), out[x])).collect()
    }, &mut sq);

    // Pass along y.
    run_lines(threads, nx * nz, ny, |line, f, out, loc, bound, scratch| {
        let (x, z) = (line % nx, line / nx);
        for y in 0..ny {
            f[y] = scratch.get(x, y, z);
        }
        dt_1d(&f[..ny], &mut out[..ny], &mut loc[..ny], &mut bound[..ny + 1]);
        (0..ny).map(|y| (scratch.index(x, y, z), out[y])).collect()
    }, &mut sq);

    // Pass along z.
    run_lines(threads, nx * ny, nz, |line, f, out, loc, bound, scratch| {
        let (x, y) = (line % nx, line / nx);
        for z in 0..nz {
            f[z] = scratch.get(x, y, z);
        }
        dt_1d(&f[..nz], &mut out[..nz], &mut loc[..nz], &mut bound[..nz + 1]);
        (0..nz).map(|z| (scratch.index(x, y, z), out[z])).collect()
    }, &mut sq);

    sq
}

/// Runs `work` over every scanline, optionally across threads. Each line
/// produces (index, value) writes; lines never overlap, so the result is
/// identical for any thread count.
fn run_lines<F>(threads: usize, lines: usize, line_len: usize, work: F, vol: &mut Volume<f64>)
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [usize], &mut [f64], &Volume<f64>) -> Vec<(usize, f64)>
        + Sync,
{
    let threads = threads.max(1).min(lines.max(1));
    if threads == 1 {
        let mut f = vec![0.0; line_len];
        let mut out = vec![0.0; line_len];
        let mut loc = vec![0usize; line_len];
        let mut bound = vec![0.0; line_len + 1];
        let mut writes = Vec::new();
        for line in 0..lines {
            writes.extend(work(line, &mut f, &mut out, &mut loc, &mut bound, vol));
        }
        for (i, v) in writes {
            vol.data_mut()[i] = v;
        }
        return;
    }
    let chunk = lines.div_ceil(threads);
    let mut all: Vec<Vec<(usize, f64)>> = Vec::new();
    std::thread::scope(|scope| {
        let vol_ref: &Volume<f64> = vol;
        let work_ref = &work;
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(lines);
                    let mut f = vec![0.0; line_len];
                    let mut out = vec![0.0; line_len];
                    let mut loc = vec![0usize; line_len];
                    let mut bound = vec![0.0; line_len + 1];
                    let mut writes = Vec::new();
                    for line in lo..hi {
                        writes.extend(work_ref(line, &mut f, &mut out, &mut loc, &mut bound, vol_ref));
                    }
                    writes
                })
            })
            .collect();
        for h in handles {
            all.push(h.join().expect("edt worker panicked"));
        }
    });
    for writes in all {
        for (i, v) in writes {
            vol.data_mut()[i] = v;
        }
    }
}

/// Exact EDT of a binary mask, with gradients.
pub fn exact_edt(mask: &Volume<u8>) -> Result<DistanceField> {
    exact_edt_threaded(mask, 1)
}

/// Same as [`exact_edt`] with an explicit worker-thread cap.
pub fn exact_edt_threaded(mask: &Volume<u8>, threads: usize) -> Result<DistanceField> {
    check_mask(mask)?;
    let sq = squared_edt(mask, threads);
    let mut dist: Volume<f64> = Volume::new(mask.dims(), 0.0);
    for (d, &s) in dist.data_mut().iter_mut().zip(sq.data()) {
        *d = s.sqrt();
    }
    Ok(fill_gradient(dist))
}

/// Exposes exact squared distances (integers) for oracle comparisons.
pub fn exact_edt_squared(mask: &Volume<u8>) -> Result<Volume<f64>> {
    check_mask(mask)?;
    Ok(squared_edt(mask, 1))
}

/// O(n^2) all-pairs exact EDT. Test oracle; intended for dims <= 16^3.
pub fn brute_force_edt(mask: &Volume<u8>) -> Result<DistanceField> {
    let sq = brute_force_edt_squared(mask)?;
    let mut dist: Volume<f64> = Volume::new(mask.dims(), 0.0);
    for (d, &s) in dist.data_mut().iter_mut().zip(sq.data()) {
        *d = s.sqrt();
    }
    Ok(fill_gradient(dist))
}

pub fn brute_force_edt_squared(mask: &Volume<u8>) -> Result<Volume<f64>> {
    check_mask(mask)?;
    let (nx, ny, nz) = mask.dims();
    let mut background = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 {
                    background.push((x as i64, y as i64, z as i64));
                }
            }
        }
    }
    let mut sq: Volume<f64> = Volume::new(mask.dims(), 0.0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                let mut best = i64::MAX;
                for &(bx, by, bz) in &background {
                    let (dx, dy, dz) = (x as i64 - bx, y as i64 - by, z as i64 - bz);
                    best = best.min(dx * dx + dy * dy + dz * dz);
                }
                sq.set(x, y, z, best as f64);
            }
        }
    }
    Ok(sq)
}

/// Central-difference gradient of the distance volume (one-sided at borders)
/// and its normalization; degenerate gradients become the zero vector.
pub fn edt_gradient(dist: &Volume<f64>) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let (nx, ny, nz) = dist.dims();
    let n = dist.len();
    let mut grad = vec![[0.0; 3]; n];
    let mut unit = vec![[0.0; 3]; n];
    let diff = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = dist.index(x, y, z);
                let gx = match (x > 0, x + 1 < nx) {
                    (true, true) => diff(dist.get(x - 1, y, z), dist.get(x + 1, y, z), 2.0),
                    (true, false) => diff(dist.get(x - 1, y, z), dist.get(x, y, z), 1.0),
                    (false, true) => diff(dist.get(x, y, z), dist.get(x + 1, y, z), 1.0),
                    (false, false) => 0.0,
                };
                let gy = match (y > 0, y + 1 < ny) {
                    (true, true) => diff(dist.get(x, y - 1, z), dist.get(x, y + 1, z), 2.0),
                    (true, false) => diff(dist.get(x, y - 1, z), dist.get(x, y, z), 1.0),
                    (false, true) => diff(dist.get(x, y, z), dist.get(x, y + 1, z), 1.0),
                    (false, false) => 0.0,
                };
                let gz = match (z > 0, z + 1 < nz) {
                    (true, true) => diff(dist.get(x, y, z - 1), dist.get(x, y, z + 1), 2.0),
                    (true, false) => diff(dist.get(x, y, z - 1), dist.get(x, y, z), 1.0),
                    (false, true) => diff(dist.get(x, y, z), dist.get(x, y, z + 1), 1.0),
                    (false, false) => 0.0,
                };
                grad[idx] = [gx, gy, gz];
                let norm = (gx * gx + gy * gy + gz * gz).sqrt();
                unit[idx] = if norm >= EPS_GRAD {
                    [gx / norm, gy / norm, gz / norm]
                } else {
                    [0.0; 3]
                };
            }
        }
    }
    (grad, unit)
}

fn fill_gradient(dist: Volume<f64>) -> DistanceField {
    let (grad, unit_grad) = edt_gradient(&dist);
    DistanceField { dist, grad, unit_grad }
}
