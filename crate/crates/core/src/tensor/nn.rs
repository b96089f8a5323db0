//! Network building blocks: MLP, GCN stack, and cross-attention.

use super::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// GCN stack configuration: `widths = [d0, ..., d]`, one layer per adjacent
/// pair. The activation applies after every layer except the last unless
/// `activate_final` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub activate_final: bool,
}

impl GcnConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("gcn needs at least [d0, d] widths".into()));
        }
        Ok(GcnConfig { widths, activation: Activation::Relu, activate_final: false })
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

fn apply_activation(g: &mut Graph, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Identity => x,
    }
}

/// Row-independent MLP: alternating linear + ReLU with a linear final layer.
/// Layer `i` reads `{prefix}/{i}/w` and `{prefix}/{i}/b`.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    widths: &[usize],
    x: NodeId,
) -> Result<NodeId> {
    if widths.len() < 2 {
        return Err(Error::Config("mlp needs at least [input, output] widths".into()));
    }
    if g.value(x).cols() != widths[0] {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            left: g.value(x).shape().to_vec(),
            right: widths.to_vec(),
        });
    }
    let mut h = x;
    for i in 0..widths.len() - 1 {
        let w = g.param(store, &format!("{prefix}/{i}/w"))?;
        let b = g.param(store, &format!("{prefix}/{i}/b"))?;
        let lin = g.matmul(h, w)?;
        h = g.add_bias(lin, b)?;
        if i + 1 < widths.len() - 1 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Stacked graph convolutions `H <- act(A_hat . H . W_l)`, returning the node
/// embeddings. Layer `l` reads `{prefix}/{l}/w`.
pub fn gcn_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &GcnConfig,
    x: NodeId,
    norm_adj: NodeId,
) -> Result<NodeId> {
    let n = g.value(norm_adj).rows();
    if g.value(norm_adj).cols() != n || g.value(x).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "gcn_forward",
            left: g.value(norm_adj).shape().to_vec(),
            right: g.value(x).shape().to_vec(),
        });
    }
    if g.value(x).cols() != cfg.widths[0] {
        return Err(Error::ShapeMismatch {
            op: "gcn_forward",
            left: g.value(x).shape().to_vec(),
            right: cfg.widths.clone(),
        });
    }
    let mut h = x;
    for l in 0..cfg.layer_count() {
        let w = g.param(store, &format!("{prefix}/{l}/w"))?;
        let agg = g.matmul(norm_adj, h)?;
        h = g.matmul(agg, w)?;
        if l + 1 < cfg.layer_count() || cfg.activate_final {
            h = apply_activation(g, h, cfg.activation);
        }
    }
    Ok(h)
}

/// Cross-attention output plus its weight matrix (for invariant checks).
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionOut {
    pub output: NodeId,
    pub weights: NodeId,
}

/// Single-head scaled dot-product cross-attention. Queries come from `f`
/// (T x d_f), keys and values from `z` (N x d). Reads `{prefix}/wq`,
/// `{prefix}/wk`, `{prefix}/wv`.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f: NodeId,
    z: NodeId,
) -> Result<CrossAttentionOut> {
    cross_attention_biased(g, store, prefix, f, z, None)
}

/// Cross-attention with an optional additive per-key bias row on the logits.
pub fn cross_attention_biased(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f: NodeId,
    z: NodeId,
    key_bias: Option<NodeId>,
) -> Result<CrossAttentionOut> {
    let wq = g.param(store, &format!("{prefix}/wq"))?;
    let wk = g.param(store, &format!("{prefix}/wk"))?;
    let wv = g.param(store, &format!("{prefix}/wv"))?;
    if g.value(f).cols() != g.value(wq).rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_attention query projection",
            left: g.value(f).shape().to_vec(),
            right: g.value(wq).shape().to_vec(),
        });
    }
    if g.value(z).cols() != g.value(wk).rows() || g.value(z).cols() != g.value(wv).rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_attention key/value projection",
            left: g.value(z).shape().to_vec(),
            right: g.value(wk).shape().to_vec(),
        });
    }
    let d_k = g.value(wq).cols();
    if g.value(wk).cols() != d_k {
        return Err(Error::ShapeMismatch {
            op: "cross_attention d_k",
            left: g.value(wq).shape().to_vec(),
            right: g.value(wk).shape().to_vec(),
        });
    }
    let q = g.matmul(f, wq)?;
    let k = g.matmul(z, wk)?;
    let v = g.matmul(z, wv)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let mut logits = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(bias) = key_bias {
        logits = g.add_bias(logits, bias)?;
    }
    let weights = g.softmax_rows(logits);
    let output = g.matmul(weights, v)?;
    Ok(CrossAttentionOut { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.range_f64(-1.5, 1.5)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let mut store = ParamStore::new();
        store.add("mlp/0/w", Tensor::identity(4)).unwrap();
        store.add("mlp/0/b", Tensor::zeros(1, 4)).unwrap();
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let x = random_tensor(&mut rng, 5, 4);
        let xid = g.constant(x.clone());
        let y = mlp_forward(&mut g, &store, "mlp", &[4, 4], xid).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut store = ParamStore::new();
        store.add("mlp/0/w", Tensor::zeros(3, 2)).unwrap();
        store.add("mlp/0/b", Tensor::row_vector(&[0.7, -0.3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let y = mlp_forward(&mut g, &store, "mlp", &[3, 2], x).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(y).row(r), &[0.7, -0.3]);
        }
    }

    #[test]
    fn two_layer_mlp_matches_composed_oracle() {
        let mut rng = Rng::new(8);
        let mut store = ParamStore::new();
        store.add_linear("mlp/0", 4, 6, &mut rng).unwrap();
        store.add_linear("mlp/1", 6, 3, &mut rng).unwrap();
        let x = random_tensor(&mut rng, 5, 4);

        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let y = mlp_forward(&mut g, &store, "mlp", &[4, 6, 3], xid).unwrap();

        // Independent composition from raw core ops.
        let mut o = Graph::new();
        let xo = o.constant(x);
        let w0 = o.constant(store.get("mlp/0/w").unwrap().clone());
        let b0 = o.constant(store.get("mlp/0/b").unwrap().clone());
        let w1 = o.constant(store.get("mlp/1/w").unwrap().clone());
        let b1 = o.constant(store.get("mlp/1/b").unwrap().clone());
        let h = o.matmul(xo, w0).unwrap();
        let h = o.add_bias(h, b0).unwrap();
        let h = o.relu(h);
        let h = o.matmul(h, w1).unwrap();
        let expect = o.add_bias(h, b1).unwrap();

        for (a, b) in g.value(y).data().iter().zip(o.value(expect).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_width_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.add("mlp/0/w", Tensor::identity(4)).unwrap();
        store.add("mlp/0/b", Tensor::zeros(1, 4)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            mlp_forward(&mut g, &store, "mlp", &[4, 4], x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gcn_identity_adjacency_identity_weights_is_noop() {
        let mut store = ParamStore::new();
        store.add("gcn/0/w", Tensor::identity(3)).unwrap();
        let cfg = GcnConfig {
            widths: vec![3, 3],
            activation: Activation::Identity,
            activate_final: false,
        };
        let mut g = Graph::new();
        let mut rng = Rng::new(12);
        let x = random_tensor(&mut rng, 4, 3);
        let xid = g.constant(x.clone());
        let adj = g.constant(Tensor::identity(4));
        let z = gcn_forward(&mut g, &store, "gcn", &cfg, xid, adj).unwrap();
        assert_eq!(g.value(z), &x);
    }

    #[test]
    fn gcn_isolated_nodes_transform_independently() {
        let mut rng = Rng::new(13);
        let mut store = ParamStore::new();
        store.add_xavier("gcn/0/w", 3, 2, &mut rng).unwrap();
        let cfg = GcnConfig::new(vec![3, 2]).unwrap();

        let x1 = random_tensor(&mut rng, 1, 3);
        let x2 = random_tensor(&mut rng, 1, 3);
        let stacked = Tensor::from_rows(&[x1.row(0).to_vec(), x2.row(0).to_vec()]);

        let mut g = Graph::new();
        let xid = g.constant(stacked);
        let adj = g.constant(Tensor::identity(2));
        let z = gcn_forward(&mut g, &store, "gcn", &cfg, xid, adj).unwrap();

        for (i, xi) in [x1, x2].into_iter().enumerate() {
            let mut solo = Graph::new();
            let xs = solo.constant(xi);
            let adj1 = solo.constant(Tensor::identity(1));
            let zs = gcn_forward(&mut solo, &store, "gcn", &cfg, xs, adj1).unwrap();
            for (a, b) in g.value(z).row(i).iter().zip(solo.value(zs).row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mut rng = Rng::new(14);
        let n = 5;
        let mut store = ParamStore::new();
        store.add_xavier("gcn/0/w", 3, 4, &mut rng).unwrap();
        store.add_xavier("gcn/1/w", 4, 2, &mut rng).unwrap();
        let cfg = GcnConfig::new(vec![3, 4, 2]).unwrap();
        let x = random_tensor(&mut rng, n, 3);
        let adj = random_tensor(&mut rng, n, n);

        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let aid = g.constant(adj.clone());
        let z = gcn_forward(&mut g, &store, "gcn", &cfg, xid, aid).unwrap();

        // Dense oracle with plain loops.
        let dense_mm = |a: &Tensor, b: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(a.rows(), b.cols());
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut s = 0.0;
                    for k in 0..a.cols() {
                        s += a.at(i, k) * b.at(k, j);
                    }
                    out.set(i, j, s);
                }
            }
            out
        };
        let mut h = x;
        for (l, expect_relu) in [(0usize, true), (1usize, false)] {
            let w = store.get(&format!("gcn/{l}/w")).unwrap();
            h = dense_mm(&dense_mm(&adj, &h), w);
            if expect_relu {
                for v in h.data_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        for (a, b) in g.value(z).data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_identity_activation_is_linear_in_x() {
        let mut rng = Rng::new(15);
        let mut store = ParamStore::new();
        store.add_xavier("gcn/0/w", 3, 3, &mut rng).unwrap();
        store.add_xavier("gcn/1/w", 3, 2, &mut rng).unwrap();
        let cfg = GcnConfig {
            widths: vec![3, 3, 2],
            activation: Activation::Identity,
            activate_final: false,
        };
        let n = 4;
        let adj = random_tensor(&mut rng, n, n);
        let x1 = random_tensor(&mut rng, n, 3);
        let x2 = random_tensor(&mut rng, n, 3);
        let (a, b) = (rng.range_f64(-2.0, 2.0), rng.range_f64(-2.0, 2.0));

        let run = |x: Tensor| -> Tensor {
            let mut g = Graph::new();
            let xid = g.constant(x);
            let aid = g.constant(adj.clone());
            let z = gcn_forward(&mut g, &store, "gcn", &cfg, xid, aid).unwrap();
            g.value(z).clone()
        };
        let mut combo = Tensor::zeros(n, 3);
        for i in 0..combo.len() {
            combo.data_mut()[i] = a * x1.data()[i] + b * x2.data()[i];
        }
        let lhs = run(combo);
        let (y1, y2) = (run(x1), run(x2));
        for i in 0..lhs.len() {
            let rhs = a * y1.data()[i] + b * y2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_uniform_weights_average_values() {
        // Zero query row: uniform weights over V rows -> mean of V.
        let mut store = ParamStore::new();
        store.add("attn/wq", Tensor::identity(2)).unwrap();
        store.add("attn/wk", Tensor::identity(2)).unwrap();
        store.add("attn/wv", Tensor::identity(2)).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::row_vector(&[0.0, 0.0]));
        let z = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]));
        // K = Z here, V = Z; with Q = 0 the logits vanish.
        let out = cross_attention(&mut g, &store, "attn", f, z).unwrap();
        assert_eq!(g.value(out.output).data(), &[1.0, 2.0]);
        assert_eq!(g.value(out.weights).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut rng = Rng::new(16);
        let mut store = ParamStore::new();
        store.add_xavier("attn/wq", 3, 4, &mut rng).unwrap();
        store.add_xavier("attn/wk", 2, 4, &mut rng).unwrap();
        store.add_xavier("attn/wv", 2, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant(random_tensor(&mut rng, 5, 3));
        let zt = random_tensor(&mut rng, 1, 2);
        let z = g.constant(zt.clone());
        let out = cross_attention(&mut g, &store, "attn", f, z).unwrap();

        let mut o = Graph::new();
        let zo = o.constant(zt);
        let wv = o.constant(store.get("attn/wv").unwrap().clone());
        let v = o.matmul(zo, wv).unwrap();
        for r in 0..5 {
            for (a, b) in g.value(out.output).row(r).iter().zip(o.value(v).row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_step_by_step_oracle() {
        let mut rng = Rng::new(17);
        let (t, n, d_f, d, d_k, d_v) = (4, 6, 5, 3, 8, 5);
        let mut store = ParamStore::new();
        store.add_xavier("attn/wq", d_f, d_k, &mut rng).unwrap();
        store.add_xavier("attn/wk", d, d_k, &mut rng).unwrap();
        store.add_xavier("attn/wv", d, d_v, &mut rng).unwrap();
        let ft = random_tensor(&mut rng, t, d_f);
        let zt = random_tensor(&mut rng, n, d);

        let mut g = Graph::new();
        let f = g.constant(ft.clone());
        let z = g.constant(zt.clone());
        let out = cross_attention(&mut g, &store, "attn", f, z).unwrap();

        let mut o = Graph::new();
        let fo = o.constant(ft);
        let zo = o.constant(zt);
        let wq = o.constant(store.get("attn/wq").unwrap().clone());
        let wk = o.constant(store.get("attn/wk").unwrap().clone());
        let wv = o.constant(store.get("attn/wv").unwrap().clone());
        let q = o.matmul(fo, wq).unwrap();
        let k = o.matmul(zo, wk).unwrap();
        let v = o.matmul(zo, wv).unwrap();
        let kt = o.transpose(k);
        let s = o.matmul(q, kt).unwrap();
        let s = o.scale(s, 1.0 / (d_k as f64).sqrt());
        let w = o.softmax_rows(s);
        let expect = o.matmul(w, v).unwrap();

        for (a, b) in g.value(out.output).data().iter().zip(o.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_outputs_in_value_hull() {
        let mut rng = Rng::new(18);
        for _ in 0..20 {
            let (t, n, d_f, d, d_k, d_v) = (3, 5, 4, 4, 6, 3);
            let mut store = ParamStore::new();
            store.add_xavier("attn/wq", d_f, d_k, &mut rng).unwrap();
            store.add_xavier("attn/wk", d, d_k, &mut rng).unwrap();
            store.add_xavier("attn/wv", d, d_v, &mut rng).unwrap();
            let mut g = Graph::new();
            let f = g.constant(random_tensor(&mut rng, t, d_f));
            let zt = random_tensor(&mut rng, n, d);
            let z = g.constant(zt.clone());
            let out = cross_attention(&mut g, &store, "attn", f, z).unwrap();

            let weights = g.value(out.weights);
            for r in 0..t {
                let sum: f64 = weights.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(weights.row(r).iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
            // Per-coordinate convex hull of V rows.
            let mut o = Graph::new();
            let zo = o.constant(zt);
            let wv = o.constant(store.get("attn/wv").unwrap().clone());
            let v = o.matmul(zo, wv).unwrap();
            let vt = o.value(v);
            let outt = g.value(out.output);
            for c in 0..d_v {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for r in 0..n {
                    lo = lo.min(vt.at(r, c));
                    hi = hi.max(vt.at(r, c));
                }
                for r in 0..t {
                    let val = outt.at(r, c);
                    assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
                }
            }
        }
    }
}
