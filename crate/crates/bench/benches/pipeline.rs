//! Criterion benchmarks for the hot paths: distance transform, thinning,
//! graph math, attention, and a full training iteration.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use vastopo_core::edt::exact_edt;
use vastopo_core::pipeline::{train, BackboneConfig, Fusion, TopoConfig, TrainConfig};
use vastopo_core::rng::Rng;
use vastopo_core::scl::SclConfig;
use vastopo_core::skeleton::{sample_keypoints, skeletonize};
use vastopo_core::tensor::{cross_attention, gcn_forward, GcnConfig, Graph, ParamStore, Tensor};
use vastopo_core::vasgraph::{build_knn, normalize_adjacency};
use vastopo_core::volume::{make_phantom, PhantomSpec, Volume};

fn phantom(edge: usize, seed: u64) -> (Volume<f32>, Volume<u8>, Volume<u8>) {
    make_phantom(&PhantomSpec::new((edge, edge, edge), seed)).expect("valid phantom spec")
}

fn bench_edt(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_edt");
    for edge in [16usize, 32, 48] {
        let (_, vessel, _) = phantom(edge, 3);
        group.bench_with_input(BenchmarkId::from_parameter(edge), &vessel, |b, mask| {
            b.iter(|| exact_edt(black_box(mask)).unwrap())
        });
    }
    group.finish();
}

fn bench_skeletonize(c: &mut Criterion) {
    let (_, vessel, _) = phantom(32, 3);
    c.bench_function("skeletonize_32", |b| b.iter(|| skeletonize(black_box(&vessel)).unwrap()));
}

fn bench_graph_build(c: &mut Criterion) {
    let (_, vessel, _) = phantom(48, 5);
    let field = exact_edt(&vessel).unwrap();
    let sk = skeletonize(&vessel).unwrap();
    let kp = sample_keypoints(&sk, &field, 128).unwrap();
    let k = kp.len().saturating_sub(1).clamp(1, 8);
    c.bench_function("build_knn_normalize", |b| {
        b.iter(|| {
            let mut g = build_knn(black_box(&kp), k).unwrap();
            normalize_adjacency(&mut g);
            g
        })
    });
}

fn bench_gcn_forward(c: &mut Criterion) {
    let n = 256;
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    store.add_xavier("gcn/0/w", 32, 32, &mut rng).unwrap();
    store.add_xavier("gcn/1/w", 32, 32, &mut rng).unwrap();
    let cfg = GcnConfig::new(vec![32, 32, 32]).unwrap();
    let x = Tensor::from_vec(n, 32, (0..n * 32).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
    let adj = Tensor::from_vec(n, n, (0..n * n).map(|_| rng.range_f64(0.0, 0.1)).collect()).unwrap();
    c.bench_function("gcn_forward_n256", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let aid = g.constant(adj.clone());
            gcn_forward(&mut g, &store, "gcn", &cfg, xid, aid).unwrap()
        })
    });
}

fn bench_cross_attention(c: &mut Criterion) {
    let (t, n, d_f, d) = (512, 64, 32, 32);
    let mut rng = Rng::new(13);
    let mut store = ParamStore::new();
    store.add_xavier("attn/wq", d_f, 32, &mut rng).unwrap();
    store.add_xavier("attn/wk", d, 32, &mut rng).unwrap();
    store.add_xavier("attn/wv", d, d_f, &mut rng).unwrap();
    let f = Tensor::from_vec(t, d_f, (0..t * d_f).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
    let z = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
    c.bench_function("cross_attention_t512_n64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let fid = g.constant(f.clone());
            let zid = g.constant(z.clone());
            cross_attention(&mut g, &store, "attn", fid, zid).unwrap()
        })
    });
}

fn bench_train_iteration(c: &mut Criterion) {
    let (ct, vessel, labels) = phantom(16, 7);
    let cfg = TrainConfig {
        backbone: BackboneConfig {
            fusion: Fusion::CrossAttention,
            iterations: 1,
            seed: 7,
            ..BackboneConfig::default()
        },
        topo: TopoConfig { n_keypoints: 32, knn_k: 4, ..TopoConfig::default() },
        scl: Some(SclConfig::default()),
    };
    c.bench_function("train_iteration_16", |b| {
        b.iter(|| train(black_box(&ct), black_box(&vessel), black_box(&labels), &cfg).unwrap())
    });
}

criterion_group!(
    benches,
    bench_edt,
    bench_skeletonize,
    bench_graph_build,
    bench_gcn_forward,
    bench_cross_attention,
    bench_train_iteration
);
criterion_main!(benches);
