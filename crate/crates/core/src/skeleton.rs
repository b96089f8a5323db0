//! 3D skeletonization of a binary mask and keypoint sampling along the
//! resulting centerline.
//!
//! Thinning runs six directional sub-iterations per pass (one per face
//! direction) and deletes border voxels that are simple for the (26, 6)
//! connectivity pair and are not curve endpoints. Candidates are collected in
//! scan order and re-checked sequentially before each deletion, which keeps
//! the 26-component count of the mask intact.

use crate::edt::DistanceField;
use crate::error::{Error, Result};
use crate::volume::{validate_binary, Volume};

/// Centerline voxels of a mask, in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub voxels: Vec<[usize; 3]>,
    pub source_dims: (usize, usize, usize),
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Renders the skeleton back into a binary volume.
    pub fn to_mask(&self) -> Volume<u8> {
        let mut m: Volume<u8> = Volume::new(self.source_dims, 0);
        for &[x, y, z] in &self.voxels {
            m.set(x, y, z, 1);
        }
        m
    }
}

/// Keypoints sampled from a skeleton: positions, local radii, orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    pub orientations: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const FACE_DIRS: [[i64; 3]; 6] = [
    [0, 0, -1],
    [0, 0, 1],
    [0, -1, 0],
    [0, 1, 0],
    [-1, 0, 0],
    [1, 0, 0],
];

#[inline]
fn fg_at(mask: &Volume<u8>, x: i64, y: i64, z: i64) -> bool {
    let (nx, ny, nz) = mask.dims();
    x >= 0
        && y >= 0
        && z >= 0
        && (x as usize) < nx
        && (y as usize) < ny
        && (z as usize) < nz
        && mask.get(x as usize, y as usize, z as usize) == 1
}

/// Collects the 3x3x3 neighborhood as a bool cube indexed by
/// `(dx+1) + 3*((dy+1) + 3*(dz+1))`; out-of-bounds is background.
fn neighborhood(mask: &Volume<u8>, x: usize, y: usize, z: usize) -> [bool; 27] {
    let mut nb = [false; 27];
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let i = ((dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1))) as usize;
                nb[i] = fg_at(mask, x as i64 + dx, y as i64 + dy, z as i64 + dz);
            }
        }
    }
    nb
}

#[inline]
fn nb_index(dx: i64, dy: i64, dz: i64) -> usize {
    ((dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1))) as usize
}

fn foreground_neighbor_count(nb: &[bool; 27]) -> usize {
    let center = nb_index(0, 0, 0);
    nb.iter()
        .enumerate()
        .filter(|&(i, &v)| v && i != center)
        .count()
}

/// Condition (a): the foreground voxels of the punctured 26-neighborhood form
/// exactly one 26-connected component.
fn single_foreground_component(nb: &[bool; 27]) -> bool {
    let center = nb_index(0, 0, 0);
    let mut seen = [false; 27];
    let mut components = 0;
    for start in 0..27 {
        if start == center || !nb[start] || seen[start] {
            continue;
        }
        components += 1;
        if components > 1 {
            return false;
        }
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (ix, iy, iz) = ((i % 3) as i64, ((i / 3) % 3) as i64, (i / 9) as i64);
            for j in 0..27 {
                if j == center || seen[j] || !nb[j] {
                    continue;
                }
                let (jx, jy, jz) = ((j % 3) as i64, ((j / 3) % 3) as i64, (j / 9) as i64);
                if (ix - jx).abs() <= 1 && (iy - jy).abs() <= 1 && (iz - jz).abs() <= 1 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components == 1
}

/// Condition (b): the background voxels of the 18-neighborhood form exactly
/// one 6-connected component that touches a face neighbor of the center.
fn single_background_component(nb: &[bool; 27]) -> bool {
    // Offsets with at most two nonzero coordinates (the 18-neighborhood).
    let mut in_n18 = [false; 27];
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                if (1..=2).contains(&nonzero) {
                    in_n18[nb_index(dx, dy, dz)] = true;
                }
            }
        }
    }
    let is_face = |i: usize| -> bool {
        let (ix, iy, iz) = ((i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1);
        ix.abs() + iy.abs() + iz.abs() == 1
    };

    let mut seen = [false; 27];
    let mut touching_components = 0;
    for start in 0..27 {
        if !in_n18[start] || nb[start] || seen[start] {
            continue;
        }
        // Flood one 6-connected background component inside N18.
        let mut touches = is_face(start);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (ix, iy, iz) = ((i % 3) as i64, ((i / 3) % 3) as i64, (i / 9) as i64);
            for j in 0..27 {
                if !in_n18[j] || nb[j] || seen[j] {
                    continue;
                }
                let (jx, jy, jz) = ((j % 3) as i64, ((j / 3) % 3) as i64, (j / 9) as i64);
                if (ix - jx).abs() + (iy - jy).abs() + (iz - jz).abs() == 1 {
                    seen[j] = true;
                    touches = touches || is_face(j);
                    stack.push(j);
                }
            }
        }
        if touches {
            touching_components += 1;
            if touching_components > 1 {
                return false;
            }
        }
    }
    touching_components == 1
}

fn is_simple(mask: &Volume<u8>, x: usize, y: usize, z: usize) -> bool {
    let nb = neighborhood(mask, x, y, z);
    single_foreground_component(&nb) && single_background_component(&nb)
}

fn is_endpoint(mask: &Volume<u8>, x: usize, y: usize, z: usize) -> bool {
    let nb = neighborhood(mask, x, y, z);
    foreground_neighbor_count(&nb) <= 1
}

/// Thins a binary mask to its centerline.
pub fn skeletonize(mask: &Volume<u8>) -> Result<Skeleton> {
    validate_binary(mask)?;
    if mask.data().iter().all(|&v| v == 0) {
        return Err(Error::EmptyForeground);
    }
    let (nx, ny, nz) = mask.dims();
    let mut work = mask.clone();
    let mut candidates: Vec<[usize; 3]> = Vec::new();

    loop {
        let mut deleted_this_pass = false;
        for dir in FACE_DIRS {
            candidates.clear();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if work.get(x, y, z) != 1 {
                            continue;
                        }
                        // Border in this direction: the face neighbor is background.
                        if fg_at(&work, x as i64 + dir[0], y as i64 + dir[1], z as i64 + dir[2]) {
                            continue;
                        }
                        if is_endpoint(&work, x, y, z) {
                            continue;
                        }
                        if is_simple(&work, x, y, z) {
                            candidates.push([x, y, z]);
                        }
                    }
                }
            }
            // Sequential re-check: earlier deletions may have made a
            // candidate non-simple or an endpoint.
            for &[x, y, z] in &candidates {
                if !is_endpoint(&work, x, y, z) && is_simple(&work, x, y, z) {
                    work.set(x, y, z, 0);
                    deleted_this_pass = true;
                }
            }
        }
        if !deleted_this_pass {
            break;
        }
    }

    let mut voxels = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if work.get(x, y, z) == 1 {
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    Ok(Skeleton { voxels, source_dims: mask.dims() })
}

fn sq_dist(a: [usize; 3], b: [usize; 3]) -> u64 {
    let d = |p: usize, q: usize| {
        let d = p as i64 - q as i64;
        (d * d) as u64
    };
    d(a[0], b[0]) + d(a[1], b[1]) + d(a[2], b[2])
}

/// Uniform keypoint sampling by farthest-point selection, with local radius
/// and orientation pulled from the distance field.
///
/// If the skeleton holds at most `n_req` voxels they are all kept in skeleton
/// order; otherwise selection starts at the lexicographically smallest voxel
/// and greedily maximizes the min distance to the chosen set, breaking ties
/// lexicographically.
pub fn sample_keypoints(sk: &Skeleton, field: &DistanceField, n_req: usize) -> Result<KeypointSet> {
    if n_req < 1 {
        return Err(Error::Config("keypoint count must be >= 1".into()));
    }
    if sk.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if field.dims() != sk.source_dims {
        return Err(Error::DimMismatch { a: field.dims(), b: sk.source_dims });
    }

    let chosen: Vec<[usize; 3]> = if sk.len() <= n_req {
        sk.voxels.clone()
    } else {
        let seed = *sk
            .voxels
            .iter()
            .min_by_key(|v| (v[0], v[1], v[2]))
            .expect("nonempty skeleton");
        let mut selected = vec![seed];
        let mut min_d: Vec<u64> = sk.voxels.iter().map(|&v| sq_dist(v, seed)).collect();
        while selected.len() < n_req {
            let mut best: Option<(u64, [usize; 3], usize)> = None;
            for (i, &v) in sk.voxels.iter().enumerate() {
                let d = min_d[i];
                let better = match best {
                    None => true,
                    Some((bd, bv, _)) => {
                        d > bd || (d == bd && (v[0], v[1], v[2]) < (bv[0], bv[1], bv[2]))
                    }
                };
                if better {
                    best = Some((d, v, i));
                }
            }
            let (_, next, _) = best.expect("nonempty skeleton");
            selected.push(next);
            for (i, &v) in sk.voxels.iter().enumerate() {
                min_d[i] = min_d[i].min(sq_dist(v, next));
            }
        }
        selected
    };

    let mut points = Vec::with_capacity(chosen.len());
    let mut radii = Vec::with_capacity(chosen.len());
    let mut orientations = Vec::with_capacity(chosen.len());
    for &[x, y, z] in &chosen {
        let idx = field.dist.index(x, y, z);
        points.push([x as f64, y as f64, z as f64]);
        radii.push(field.dist.data()[idx]);
        orientations.push(field.unit_grad[idx]);
    }
    Ok(KeypointSet { points, radii, orientations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::exact_edt;
    use crate::volume::{connected_components, make_phantom, Connectivity, PhantomSpec};

    fn line_mask() -> Volume<u8> {
        let mut m: Volume<u8> = Volume::new((12, 5, 5), 0);
        for x in 1..11 {
            m.set(x, 2, 2, 1);
        }
        m
    }

    #[test]
    fn thin_line_is_fixed_point() {
        let m = line_mask();
        let sk = skeletonize(&m).unwrap();
        assert_eq!(sk.to_mask(), m);
    }

    #[test]
    fn single_voxel_survives() {
        let mut m: Volume<u8> = Volume::new((5, 5, 5), 0);
        m.set(2, 2, 2, 1);
        let sk = skeletonize(&m).unwrap();
        assert_eq!(sk.voxels, vec![[2, 2, 2]]);
    }

    #[test]
    fn empty_mask_rejected() {
        let m: Volume<u8> = Volume::new((4, 4, 4), 0);
        assert!(matches!(skeletonize(&m), Err(Error::EmptyForeground)));
    }

    #[test]
    fn solid_tube_thins_to_single_path() {
        // 3x3 cross-section, 20 voxels long, with background margin.
        let mut m: Volume<u8> = Volume::new((7, 7, 24), 0);
        for z in 2..22 {
            for y in 2..5 {
                for x in 2..5 {
                    m.set(x, y, z, 1);
                }
            }
        }
        let sk = skeletonize(&m).unwrap();
        let sk_mask = sk.to_mask();
        let (_, count) = connected_components(&sk_mask, Connectivity::TwentySix).unwrap();
        assert_eq!(count, 1);
        for &[x, y, z] in &sk.voxels {
            let nb = neighborhood(&sk_mask, x, y, z);
            assert!(
                foreground_neighbor_count(&nb) <= 2,
                "voxel ({x},{y},{z}) has more than 2 skeleton neighbors"
            );
        }
        assert!(sk.len() >= 18, "tube skeleton too short: {}", sk.len());
    }

    #[test]
    fn skeleton_subset_preserves_components_idempotent_on_phantoms() {
        for seed in 0..8 {
            let spec = PhantomSpec::new((32, 32, 32), seed);
            let (_, vessel, _) = make_phantom(&spec).unwrap();
            let sk = skeletonize(&vessel).unwrap();
            for &[x, y, z] in &sk.voxels {
                assert_eq!(vessel.get(x, y, z), 1, "skeleton voxel outside mask");
            }
            let sk_mask = sk.to_mask();
            let (_, mask_cc) = connected_components(&vessel, Connectivity::TwentySix).unwrap();
            let (_, sk_cc) = connected_components(&sk_mask, Connectivity::TwentySix).unwrap();
            assert_eq!(mask_cc, sk_cc, "seed {seed}: component count changed");
            let again = skeletonize(&sk_mask).unwrap();
            assert_eq!(again.voxels, sk.voxels, "seed {seed}: not idempotent");
        }
    }

    #[test]
    fn undersized_skeleton_returns_all_in_order() {
        let mut m: Volume<u8> = Volume::new((9, 5, 5), 0);
        for x in 2..7 {
            m.set(x, 2, 2, 1);
        }
        let sk = skeletonize(&m).unwrap();
        assert_eq!(sk.len(), 5);
        let field = exact_edt(&m).unwrap();
        let kp = sample_keypoints(&sk, &field, 10).unwrap();
        assert_eq!(kp.len(), 5);
        let xs: Vec<f64> = kp.points.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn farthest_point_on_collinear_skeleton() {
        let mut m: Volume<u8> = Volume::new((12, 5, 5), 0);
        for x in 0..10 {
            m.set(x, 2, 2, 1);
        }
        let sk = skeletonize(&m).unwrap();
        assert_eq!(sk.len(), 10);
        let field = exact_edt(&m).unwrap();
        let kp = sample_keypoints(&sk, &field, 2).unwrap();
        let mut xs: Vec<f64> = kp.points.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 9.0]);
    }

    #[test]
    fn farthest_point_pair_realizes_diameter_from_seed() {
        for seed in [3u64, 4, 5] {
            let spec = PhantomSpec::new((24, 24, 24), seed);
            let (_, vessel, _) = make_phantom(&spec).unwrap();
            let sk = skeletonize(&vessel).unwrap();
            if sk.len() < 3 {
                continue;
            }
            let field = exact_edt(&vessel).unwrap();
            let kp = sample_keypoints(&sk, &field, 2).unwrap();
            let seed_voxel = *sk.voxels.iter().min_by_key(|v| (v[0], v[1], v[2])).unwrap();
            let best = sk.voxels.iter().map(|&v| sq_dist(v, seed_voxel)).max().unwrap();
            let got = sq_dist(
                [kp.points[1][0] as usize, kp.points[1][1] as usize, kp.points[1][2] as usize],
                seed_voxel,
            );
            assert_eq!(got, best);
        }
    }

    #[test]
    fn keypoint_radii_bounded_on_radius_two_tube() {
        let spec = PhantomSpec {
            dims: (24, 24, 24),
            seed: 1,
            branch_count: 1,
            tube_radius_range: (2.0, 2.0),
            class_count: 2,
        };
        let (_, vessel, _) = make_phantom(&spec).unwrap();
        let sk = skeletonize(&vessel).unwrap();
        let field = exact_edt(&vessel).unwrap();
        let kp = sample_keypoints(&sk, &field, 16).unwrap();
        assert!(!kp.is_empty());
        for &r in &kp.radii {
            assert!((1.0..=3.0).contains(&r), "radius {r} out of [1,3]");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = PhantomSpec::new((32, 32, 32), 9);
        let (_, vessel, _) = make_phantom(&spec).unwrap();
        let sk = skeletonize(&vessel).unwrap();
        let field = exact_edt(&vessel).unwrap();
        let a = sample_keypoints(&sk, &field, 12).unwrap();
        let b = sample_keypoints(&sk, &field, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_request_rejected() {
        let m = line_mask();
        let sk = skeletonize(&m).unwrap();
        let field = exact_edt(&m).unwrap();
        assert!(sample_keypoints(&sk, &field, 0).is_err());
    }

    #[test]
    fn keypoint_invariants_hold_on_phantoms() {
        for seed in [2u64, 6, 11] {
            let spec = PhantomSpec::new((32, 32, 32), seed);
            let (_, vessel, _) = make_phantom(&spec).unwrap();
            let sk = skeletonize(&vessel).unwrap();
            let field = exact_edt(&vessel).unwrap();
            let kp = sample_keypoints(&sk, &field, 32).unwrap();
            for i in 0..kp.len() {
                assert!(kp.radii[i] > 0.0);
                let n = kp.orientations[i];
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!(norm.abs() < 1e-9 || (norm - 1.0).abs() < 1e-9);
                let p = kp.points[i];
                assert!(sk.voxels.contains(&[p[0] as usize, p[1] as usize, p[2] as usize]));
            }
        }
    }
}
