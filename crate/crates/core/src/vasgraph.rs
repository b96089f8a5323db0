//! kNN graph construction over skeleton keypoints, adjacency normalization,
//! and initial node features.

use crate::error::{Error, Result};
use crate::jsonw::{fmt_f64, fmt_f64_array};
use crate::skeleton::KeypointSet;
use crate::tensor::{mlp_forward, Graph, MlpParams, Tensor};

/// Dense adjacency storage caps the graph size.
pub const MAX_KEYPOINTS: usize = 1024;

/// Keypoint graph with dense adjacency and derived matrices.
#[derive(Debug, Clone)]
pub struct VesselGraph {
    pub keypoints: KeypointSet,
    pub k: usize,
    /// Symmetric 0/1 adjacency with zero diagonal.
    pub adjacency: Tensor,
    /// Self-loop symmetric normalization, once computed.
    pub norm_adjacency: Option<Tensor>,
    /// Initial node features X, once computed.
    pub node_features: Option<Tensor>,
    /// GCN embeddings Z, once computed.
    pub embeddings: Option<Tensor>,
}

impl VesselGraph {
    pub fn node_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Upper-triangle edge list in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.at(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Builds the symmetrized directed-kNN graph over raw voxel coordinates.
/// Distance ties break toward the smaller keypoint index.
pub fn build_knn(kp: &KeypointSet, k: usize) -> Result<VesselGraph> {
    let n = kp.len();
    if n > MAX_KEYPOINTS {
        return Err(Error::TooManyKeypoints { n, max: MAX_KEYPOINTS });
    }
    if k < 1 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    let mut adjacency = Tensor::zeros(n, n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        for j in 0..n {
            if j != i {
                order.push((sq_dist(kp.points[i], kp.points[j]), j));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in order.iter().take(k) {
            // Union of directed edges keeps A symmetric.
            adjacency.set(i, j, 1.0);
            adjacency.set(j, i, 1.0);
        }
    }
    Ok(VesselGraph {
        keypoints: kp.clone(),
        k,
        adjacency,
        norm_adjacency: None,
        node_features: None,
        embeddings: None,
    })
}

/// Fills `norm_adjacency` with `D^-1/2 (A + I) D^-1/2`, where `D` is the
/// degree matrix of `A + I`. Computed as two explicit matrix products so the
/// entrywise formula stays available as an independent test oracle.
pub fn normalize_adjacency(g: &mut VesselGraph) {
    let n = g.node_count();
    let mut a_loop = g.adjacency.clone();
    for i in 0..n {
        let v = a_loop.at(i, i) + 1.0;
        a_loop.set(i, i, v);
    }
    let mut d_inv_sqrt = Tensor::zeros(n, n);
    for i in 0..n {
        let deg: f64 = a_loop.row(i).iter().sum();
        d_inv_sqrt.set(i, i, 1.0 / deg.sqrt());
    }
    let mut tape = Graph::new();
    let a_id = tape.constant(a_loop);
    let d_id = tape.constant(d_inv_sqrt);
    let left = tape.matmul(d_id, a_id).expect("square shapes");
    let full = tape.matmul(left, d_id).expect("square shapes");
    g.norm_adjacency = Some(tape.value(full).clone());
}

/// Raw per-keypoint feature rows `[p_hat, r_hat, n]`: positions min-max
/// normalized to the unit cube, radii scaled by the max radius, orientations
/// as-is.
pub fn feature_inputs(kp: &KeypointSet) -> Tensor {
    let n = kp.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &kp.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let r_max = kp.radii.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = Tensor::zeros(n, 7);
    for i in 0..n {
        for a in 0..3 {
            let span = hi[a] - lo[a];
            let v = if span > 0.0 { (kp.points[i][a] - lo[a]) / span } else { 0.0 };
            out.set(i, a, v);
        }
        out.set(i, 3, if r_max > 0.0 { kp.radii[i] / r_max } else { 0.0 });
        for a in 0..3 {
            out.set(i, 4 + a, kp.orientations[i][a]);
        }
    }
    out
}

/// Computes initial node features `X = MLP([p_hat, r_hat, n])` row-wise and
/// stores them on the graph. The MLP input width must be 7.
pub fn init_node_features(g: &mut VesselGraph, mlp: &MlpParams) -> Result<()> {
    if mlp.widths[0] != 7 {
        return Err(Error::ShapeMismatch {
            op: "init_node_features",
            left: vec![7],
            right: mlp.widths.clone(),
        });
    }
    let inputs = feature_inputs(&g.keypoints);
    let mut tape = Graph::new();
    let x = tape.constant(inputs);
    let out = mlp_forward(&mut tape, &mlp.store, &mlp.prefix, &mlp.widths, x)?;
    g.node_features = Some(tape.value(out).clone());
    Ok(())
}

/// Serializes the graph artifact with canonical key order and 17-significant-
/// digit floats. Requires node features to be present.
pub fn graph_to_json(g: &VesselGraph) -> Result<String> {
    let x = g
        .node_features
        .as_ref()
        .ok_or_else(|| Error::Config("graph JSON requires node features".into()))?;
    let n = g.node_count();
    let mut s = String::new();
    s.push_str(&format!("{{\"n\":{n},\"k\":{},", g.k));

    let points: Vec<String> = g
        .keypoints
        .points
        .iter()
        .map(|p| format!("[{},{},{}]", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2])))
        .collect();
    s.push_str(&format!("\"points\":[{}],", points.join(",")));

    s.push_str(&format!("\"radii\":{},", fmt_f64_array(&g.keypoints.radii)));

    let orients: Vec<String> = g
        .keypoints
        .orientations
        .iter()
        .map(|o| format!("[{},{},{}]", fmt_f64(o[0]), fmt_f64(o[1]), fmt_f64(o[2])))
        .collect();
    s.push_str(&format!("\"orientations\":[{}],", orients.join(",")));

    let edges: Vec<String> = g.edges().iter().map(|&(i, j)| format!("[{i},{j}]")).collect();
    s.push_str(&format!("\"edges\":[{}],", edges.join(",")));

    let rows: Vec<String> = (0..n).map(|i| fmt_f64_array(x.row(i))).collect();
    s.push_str(&format!("\"x\":[{}]}}", rows.join(",")));
    Ok(s)
}
