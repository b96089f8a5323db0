//! Toy segmentation backbone with vascular-topology fusion, plus training,
//! inference, and the ablation driver.
//!
//! The backbone is deliberately small: non-overlapping patches projected to
//! tokens with learned position embeddings, one topology-fusion step, and a
//! linear per-token head unpatched back to voxel logits. Voxel logits cover
//! the background (label 0) plus `class_count` segment classes, and the
//! cross-entropy runs over every voxel, so border voxels are supervised and
//! whole-volume Dice is meaningful.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::edt::exact_edt;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::rng::{component_seed, Rng};
use crate::scl::{
    scl_loss_weighted, select_anchor_indices, Anchor, AnchorSet, DenominatorMode, MemoryBank,
    MemoryStrategy, SclConfig,
};
use crate::skeleton::{sample_keypoints, skeletonize};
use crate::tensor::{
    cross_attention, cross_attention_biased, gcn_forward, load_checkpoint, mlp_forward,
    save_checkpoint, Activation, GcnConfig, Graph, NodeId, ParamStore, Tensor,
};
use crate::vasgraph::{build_knn, feature_inputs, normalize_adjacency, VesselGraph};
use crate::volume::{load_rvol, make_phantom, save_rvol, PhantomSpec, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    Concat,
    DistanceBias,
    CrossAttention,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [
        Fusion::None,
        Fusion::Concat,
        Fusion::DistanceBias,
        Fusion::CrossAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::Concat => "concat",
            Fusion::DistanceBias => "distance_bias",
            Fusion::CrossAttention => "cross_attention",
        }
    }

    fn index(self) -> usize {
        Fusion::ALL.iter().position(|&f| f == self).expect("listed")
    }

    fn needs_graph(self) -> bool {
        matches!(self, Fusion::Concat | Fusion::CrossAttention)
    }

    fn needs_edt(self) -> bool {
        self != Fusion::None
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "concat" => Ok(Fusion::Concat),
            "distance_bias" => Ok(Fusion::DistanceBias),
            "cross_attention" => Ok(Fusion::CrossAttention),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
    /// Segment classes (labels 1..=class_count); logits add background.
    pub class_count: usize,
    pub fusion: Fusion,
    pub lambda_scl: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            token_dim: 32,
            attn_dim: 32,
            class_count: 3,
            fusion: Fusion::CrossAttention,
            lambda_scl: 0.1,
            lr: 0.02,
            iterations: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TopoConfig {
    pub n_keypoints: usize,
    pub knn_k: usize,
    pub mlp_widths: Vec<usize>,
    pub gcn_widths: Vec<usize>,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig {
            n_keypoints: 256,
            knn_k: 8,
            mlp_widths: vec![7, 32, 32],
            gcn_widths: vec![32, 32, 32],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub topo: TopoConfig,
    pub scl: Option<SclConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            topo: TopoConfig::default(),
            scl: Some(SclConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.patch_size < 1 {
            return Err(Error::Config("patch size must be >= 1".into()));
        }
        if b.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        if b.token_dim < 1 || b.attn_dim < 1 {
            return Err(Error::Config("token/attention widths must be >= 1".into()));
        }
        if self.topo.mlp_widths.first() != Some(&7) {
            return Err(Error::Config("topology MLP input width must be 7".into()));
        }
        if self.topo.mlp_widths.last() != self.topo.gcn_widths.first() {
            return Err(Error::Config("MLP output width must match GCN input width".into()));
        }
        if self.topo.gcn_widths.len() < 2 || self.topo.mlp_widths.len() < 2 {
            return Err(Error::Config("MLP/GCN need at least [in, out] widths".into()));
        }
        if let Some(scl) = &self.scl {
            scl.validate()?;
        }
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        *self.topo.gcn_widths.last().expect("validated")
    }

    fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            widths: self.topo.gcn_widths.clone(),
            activation: Activation::Relu,
            activate_final: false,
        }
    }

    /// Voxel logit width: background plus the segment classes.
    pub fn logit_classes(&self) -> usize {
        self.backbone.class_count + 1
    }
}

/// Token lattice of one volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub dims: (usize, usize, usize),
    pub patch: usize,
}

impl TokenGrid {
    pub fn new(dims: (usize, usize, usize), patch: usize) -> Result<Self> {
        if patch == 0 || dims.0 % patch != 0 || dims.1 % patch != 0 || dims.2 % patch != 0 {
            return Err(Error::Config(format!(
                "dims {dims:?} not divisible by patch size {patch}"
            )));
        }
        Ok(TokenGrid { dims, patch })
    }

    pub fn token_dims(&self) -> (usize, usize, usize) {
        (self.dims.0 / self.patch, self.dims.1 / self.patch, self.dims.2 / self.patch)
    }

    pub fn token_count(&self) -> usize {
        let (tx, ty, tz) = self.token_dims();
        tx * ty * tz
    }

    pub fn voxels_per_token(&self) -> usize {
        self.patch * self.patch * self.patch
    }

    /// Token index owning voxel (x, y, z); tokens are x-fastest.
    #[inline]
    pub fn token_of(&self, x: usize, y: usize, z: usize) -> usize {
        let (tx, ty, _) = self.token_dims();
        (x / self.patch) + tx * ((y / self.patch) + ty * (z / self.patch))
    }

    /// Flat offset of the voxel inside its patch (x-fastest).
    #[inline]
    pub fn offset_of(&self, x: usize, y: usize, z: usize) -> usize {
        let p = self.patch;
        (x % p) + p * ((y % p) + p * (z % p))
    }
}

/// Precomputed topology inputs for one vessel mask, matching what the
/// configured fusion actually consumes.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub graph: Option<(VesselGraph, Tensor)>,
    pub edt_token_means: Option<Vec<f64>>,
}

/// Builds the topology branch inputs from the vessel mask.
pub fn prepare_topology(
    vessel: &Volume<u8>,
    cfg: &TrainConfig,
    grid: &TokenGrid,
) -> Result<Topology> {
    let fusion = cfg.backbone.fusion;
    let mut topo = Topology::default();
    if !fusion.needs_edt() {
        return Ok(topo);
    }
    let field = exact_edt(vessel)?;

    // Mean distance per token patch.
    let mut sums = vec![0.0f64; grid.token_count()];
    let (nx, ny, nz) = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                sums[grid.token_of(x, y, z)] += field.dist.get(x, y, z);
            }
        }
    }
    let per = grid.voxels_per_token() as f64;
    topo.edt_token_means = Some(sums.into_iter().map(|s| s / per).collect());

    if fusion.needs_graph() {
        let sk = skeletonize(vessel)?;
        let kp = sample_keypoints(&sk, &field, cfg.topo.n_keypoints)?;
        if kp.len() < 2 {
            return Err(Error::Config(
                "vessel skeleton yields fewer than 2 keypoints; cannot build a kNN graph".into(),
            ));
        }
        let k = cfg.topo.knn_k.min(kp.len() - 1).max(1);
        let mut graph = build_knn(&kp, k)?;
        normalize_adjacency(&mut graph);
        let inputs = feature_inputs(&kp);
        topo.graph = Some((graph, inputs));
    }
    Ok(topo)
}

/// Initializes every parameter the configured fusion needs for one volume
/// shape. All randomness flows from the backbone seed through named
/// component sub-seeds.
pub fn init_params(cfg: &TrainConfig, grid: &TokenGrid) -> Result<ParamStore> {
    cfg.validate()?;
    let b = &cfg.backbone;
    let mut store = ParamStore::new();
    let p3 = grid.voxels_per_token();
    let t = grid.token_count();
    let classes = cfg.logit_classes();

    let mut rng = Rng::new(component_seed(b.seed, "stem"));
    store.add_xavier("stem/w", p3, b.token_dim, &mut rng)?;
    store.add("stem/b", Tensor::zeros(1, b.token_dim))?;
    store.add_xavier("stem/pos", t, b.token_dim, &mut rng)?;

    let mut rng = Rng::new(component_seed(b.seed, "head"));
    store.add_xavier("head/w", b.token_dim, p3 * classes, &mut rng)?;
    store.add("head/b", Tensor::zeros(1, p3 * classes))?;

    if b.fusion.needs_graph() {
        let mut rng = Rng::new(component_seed(b.seed, "topo"));
        for i in 0..cfg.topo.mlp_widths.len() - 1 {
            store.add_linear(
                &format!("topo_mlp/{i}"),
                cfg.topo.mlp_widths[i],
                cfg.topo.mlp_widths[i + 1],
                &mut rng,
            )?;
        }
        for l in 0..cfg.topo.gcn_widths.len() - 1 {
            store.add_xavier(
                &format!("gcn/{l}/w"),
                cfg.topo.gcn_widths[l],
                cfg.topo.gcn_widths[l + 1],
                &mut rng,
            )?;
        }
    }
    match b.fusion {
        Fusion::CrossAttention => {
            let d = cfg.embed_dim();
            let mut rng = Rng::new(component_seed(b.seed, "fuse_attn"));
            store.add_xavier("fuse_attn/wq", b.token_dim, b.attn_dim, &mut rng)?;
            store.add_xavier("fuse_attn/wk", d, b.attn_dim, &mut rng)?;
            store.add_xavier("fuse_attn/wv", d, b.token_dim, &mut rng)?;
        }
        Fusion::Concat => {
            let d = cfg.embed_dim();
            let mut rng = Rng::new(component_seed(b.seed, "fuse_concat"));
            store.add_xavier("fuse_concat/w", b.token_dim + d, b.token_dim, &mut rng)?;
            store.add("fuse_concat/b", Tensor::zeros(1, b.token_dim))?;
        }
        Fusion::DistanceBias => {
            let mut rng = Rng::new(component_seed(b.seed, "fuse_dbias"));
            store.add_xavier("fuse_dbias/wq", b.token_dim, b.attn_dim, &mut rng)?;
            store.add_xavier("fuse_dbias/wk", b.token_dim, b.attn_dim, &mut rng)?;
            store.add_xavier("fuse_dbias/wv", b.token_dim, b.token_dim, &mut rng)?;
            store.add("fuse_dbias/alpha", Tensor::scalar(1.0))?;
        }
        Fusion::None => {}
    }
    Ok(store)
}

/// Flattens a volume into the token-major patch matrix (T x P^3).
pub fn patch_matrix(intensity: &Volume<f32>, grid: &TokenGrid) -> Tensor {
    let t = grid.token_count();
    let p3 = grid.voxels_per_token();
    let mut m = Tensor::zeros(t, p3);
    let (nx, ny, nz) = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let tok = grid.token_of(x, y, z);
                let off = grid.offset_of(x, y, z);
                m.set(tok, off, f64::from(intensity.get(x, y, z)));
            }
        }
    }
    m
}

/// Reindex map sending head output (T x P^3*classes) to voxel logits
/// (V x classes).
fn unpatch_map(grid: &TokenGrid, classes: usize) -> Vec<usize> {
    let (nx, ny, nz) = grid.dims;
    let p3c = grid.voxels_per_token() * classes;
    let mut src = vec![0usize; nx * ny * nz * classes];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = x + nx * (y + ny * z);
                let tok = grid.token_of(x, y, z);
                let off = grid.offset_of(x, y, z);
                for c in 0..classes {
                    src[v * classes + c] = tok * p3c + off * classes + c;
                }
            }
        }
    }
    src
}

/// One forward pass: token encoding, fusion, decode; exposes the fused
/// tokens (the SCL feature source) and the per-voxel logits.
pub struct ForwardPass {
    pub fused_tokens: NodeId,
    pub voxel_logits: NodeId,
}

/// Encodes patches into tokens: linear projection plus position embeddings.
pub fn encode_tokens(
    g: &mut Graph,
    store: &ParamStore,
    patches: &Tensor,
) -> Result<NodeId> {
    let p = g.constant(patches.clone());
    let w = g.param(store, "stem/w")?;
    let b = g.param(store, "stem/b")?;
    let pos = g.param(store, "stem/pos")?;
    let proj = g.matmul(p, w)?;
    let biased = g.add_bias(proj, b)?;
    g.add(biased, pos)
}

/// Runs the topology branch to node embeddings Z.
pub fn topology_embeddings(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    topo: &Topology,
) -> Result<NodeId> {
    let (graph, inputs) = topo
        .graph
        .as_ref()
        .ok_or_else(|| Error::Config("fusion requires the topology graph".into()))?;
    let norm_adj = graph
        .norm_adjacency
        .as_ref()
        .ok_or_else(|| Error::Config("graph adjacency not normalized".into()))?;
    let x = g.constant(inputs.clone());
    let h0 = mlp_forward(g, store, "topo_mlp", &cfg.topo.mlp_widths, x)?;
    let adj = g.constant(norm_adj.clone());
    gcn_forward(g, store, "gcn", &cfg.gcn_config(), h0, adj)
}

/// Applies the configured fusion variant to the tokens.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    tokens: NodeId,
    topo: &Topology,
) -> Result<NodeId> {
    match cfg.backbone.fusion {
        Fusion::None => Ok(tokens),
        Fusion::CrossAttention => {
            let z = topology_embeddings(g, store, cfg, topo)?;
            let attn = cross_attention(g, store, "fuse_attn", tokens, z)?;
            g.add(tokens, attn.output)
        }
        Fusion::Concat => {
            let z = topology_embeddings(g, store, cfg, topo)?;
            let pooled = g.mean_rows(z);
            let t = g.value(tokens).rows();
            let rep = g.repeat_row(pooled, t)?;
            let cat = g.concat_rows(tokens, rep)?;
            let w = g.param(store, "fuse_concat/w")?;
            let b = g.param(store, "fuse_concat/b")?;
            let lin = g.matmul(cat, w)?;
            g.add_bias(lin, b)
        }
        Fusion::DistanceBias => {
            let means = topo
                .edt_token_means
                .as_ref()
                .ok_or_else(|| Error::Config("distance bias requires the EDT token means".into()))?;
            let neg_means: Vec<f64> = means.iter().map(|&m| -m).collect();
            let bias_base = g.constant(Tensor::row_vector(&neg_means));
            let alpha = g.param(store, "fuse_dbias/alpha")?;
            let bias = g.scale_by(alpha, bias_base)?;
            let attn = cross_attention_biased(g, store, "fuse_dbias", tokens, tokens, Some(bias))?;
            g.add(tokens, attn.output)
        }
    }
}

/// Linear head plus unpatching to per-voxel logits.
pub fn decode_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    grid: &TokenGrid,
    fused: NodeId,
) -> Result<NodeId> {
    let classes = cfg.logit_classes();
    let w = g.param(store, "head/w")?;
    let b = g.param(store, "head/b")?;
    let lin = g.matmul(fused, w)?;
    let head = g.add_bias(lin, b)?;
    let voxels = grid.dims.0 * grid.dims.1 * grid.dims.2;
    g.reindex(head, voxels, classes, unpatch_map(grid, classes))
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    grid: &TokenGrid,
    patches: &Tensor,
    topo: &Topology,
) -> Result<ForwardPass> {
    let tokens = encode_tokens(g, store, patches)?;
    let fused = fuse(g, store, cfg, tokens, topo)?;
    let voxel_logits = decode_logits(g, store, cfg, grid, fused)?;
    Ok(ForwardPass { fused_tokens: fused, voxel_logits })
}

// ---------------------------------------------------------------------------
// SCL wiring over the forward pass
// ---------------------------------------------------------------------------

/// The voxel bookkeeping SCL needs, fixed per volume.
struct SclIndex {
    /// Voxel indices with nonzero ground-truth label.
    labeled_voxels: Vec<usize>,
    /// Their labels (1..=class_count).
    labels: Vec<usize>,
    /// Vessel membership per labeled voxel.
    vessel: Vec<bool>,
    /// Owning token per labeled voxel.
    token: Vec<usize>,
}

impl SclIndex {
    /// `vessel = None` drops the vessel center from every negative set;
    /// `fusion = none` removes the vascular branch entirely, so its training
    /// runs must not read the vessel mask anywhere, SCL included.
    fn build(labels: &Volume<u8>, vessel: Option<&Volume<u8>>, grid: &TokenGrid) -> Self {
        let mut out = SclIndex {
            labeled_voxels: Vec::new(),
            labels: Vec::new(),
            vessel: Vec::new(),
            token: Vec::new(),
        };
        let (nx, ny, nz) = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let l = labels.get(x, y, z);
                    if l == 0 {
                        continue;
                    }
                    out.labeled_voxels.push(x + nx * (y + ny * z));
                    out.labels.push(l as usize);
                    out.vessel.push(vessel.is_some_and(|v| v.get(x, y, z) == 1));
                    out.token.push(grid.token_of(x, y, z));
                }
            }
        }
        out
    }
}

/// Frozen anchor selection: per-class voxel positions into the labeled set.
#[derive(Debug, Clone)]
pub struct AnchorSelection {
    pub threshold: f64,
    /// Per class: indices into the labeled-voxel arrays.
    pub per_class: Vec<Vec<usize>>,
}

impl AnchorSelection {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

fn confidences(logits: &Tensor) -> Vec<f64> {
    let probs = logits.softmax_rows_values();
    (0..probs.rows())
        .map(|r| probs.row(r).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect()
}

fn select_anchors_for_pass(
    logits: &Tensor,
    index: &SclIndex,
    class_count: usize,
    percentile: f64,
) -> Result<AnchorSelection> {
    let conf = confidences(logits);
    let labeled_conf: Vec<f64> = index.labeled_voxels.iter().map(|&v| conf[v]).collect();
    let (threshold, per_class) =
        select_anchor_indices(&labeled_conf, &index.labels, class_count, percentile)?;
    Ok(AnchorSelection { threshold, per_class })
}

/// Builds the differentiable SCL term for a frozen anchor selection.
/// Returns `None` when the preconditions fail benignly (no anchors, or a
/// single present class leaves every negative set empty).
fn scl_term(
    g: &mut Graph,
    pass: &ForwardPass,
    index: &SclIndex,
    selection: &AnchorSelection,
    bank: &MemoryBank,
    scl_cfg: &SclConfig,
    class_count: usize,
) -> Result<Option<NodeId>> {
    if selection.total() == 0 {
        return Ok(None);
    }
    let t = g.value(pass.fused_tokens).rows();

    // Center weights per class and for the vessel, over tokens.
    let mut class_weights = vec![vec![0.0f64; t]; class_count];
    let mut class_counts = vec![0usize; class_count];
    let mut vessel_weights = vec![0.0f64; t];
    let mut vessel_count = 0usize;
    for (i, &tok) in index.token.iter().enumerate() {
        class_weights[index.labels[i] - 1][tok] += 1.0;
        class_counts[index.labels[i] - 1] += 1;
        if index.vessel[i] {
            vessel_weights[tok] += 1.0;
            vessel_count += 1;
        }
    }
    let present = class_counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Ok(None);
    }
    let mut centers: Vec<Option<NodeId>> = Vec::with_capacity(class_count);
    for c in 0..class_count {
        if class_counts[c] == 0 {
            centers.push(None);
            continue;
        }
        let inv = 1.0 / class_counts[c] as f64;
        let w: Vec<f64> = class_weights[c].iter().map(|&v| v * inv).collect();
        centers.push(Some(g.weighted_sum_rows(pass.fused_tokens, &w)?));
    }
    let vessel_center = if vessel_count > 0 {
        let inv = 1.0 / vessel_count as f64;
        let w: Vec<f64> = vessel_weights.iter().map(|&v| v * inv).collect();
        Some(g.weighted_sum_rows(pass.fused_tokens, &w)?)
    } else {
        None
    };

    // Anchor voxels grouped by (class, token) with multiplicity.
    let mut anchors: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); class_count];
    for (c, list) in selection.per_class.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let mut groups: BTreeMap<usize, f64> = BTreeMap::new();
        for &i in list {
            *groups.entry(index.token[i]).or_insert(0.0) += 1.0;
        }
        for (tok, mult) in groups {
            let row = g.gather_row(pass.fused_tokens, tok)?;
            anchors[c].push((row, mult));
        }
    }

    let loss = scl_loss_weighted(g, &anchors, &centers, vessel_center, bank, scl_cfg)?;
    Ok(Some(loss))
}

/// Detached anchor features (current forward values) for the memory update.
fn detached_anchor_set(
    fused_values: &Tensor,
    logits: &Tensor,
    index: &SclIndex,
    selection: &AnchorSelection,
) -> AnchorSet {
    let conf = confidences(logits);
    let per_class = selection
        .per_class
        .iter()
        .map(|list| {
            list.iter()
                .map(|&i| {
                    let feature = fused_values.row(index.token[i]).to_vec();
                    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let unit_feature = if norm > 0.0 {
                        feature.iter().map(|v| v / norm).collect()
                    } else {
                        vec![0.0; feature.len()]
                    };
                    Anchor {
                        feature,
                        unit_feature,
                        confidence: conf[index.labeled_voxels[i]],
                        voxel: index.labeled_voxels[i],
                    }
                })
                .collect()
        })
        .collect();
    AnchorSet { per_class, threshold: selection.threshold }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,ce,scl,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.ce, r.scl, r.total);
    }
    s
}

#[derive(Debug)]
pub struct TrainOutput {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub bank: MemoryBank,
    pub log: Vec<LogRow>,
}

/// Trains the toy model on one phantom triple.
pub fn train(
    intensity: &Volume<f32>,
    vessel: &Volume<u8>,
    labels: &Volume<u8>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if intensity.dims() != vessel.dims() || intensity.dims() != labels.dims() {
        return Err(Error::DimMismatch { a: intensity.dims(), b: vessel.dims() });
    }
    let n_cls = cfg.backbone.class_count;
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize > n_cls) {
        return Err(Error::LabelOutOfRange { label: bad as usize, max: n_cls });
    }
    let grid = TokenGrid::new(intensity.dims(), cfg.backbone.patch_size)?;
    let topo = prepare_topology(vessel, cfg, &grid)?;
    let mut store = init_params(cfg, &grid)?;
    let patches = patch_matrix(intensity, &grid);
    let label_vec: Vec<usize> = labels.data().iter().map(|&l| l as usize).collect();
    let scl_vessel = if cfg.backbone.fusion == Fusion::None { None } else { Some(vessel) };
    let scl_index = SclIndex::build(labels, scl_vessel, &grid);
    let scl_cfg = cfg.scl.clone();
    let mut bank = MemoryBank::new(
        n_cls,
        scl_cfg.as_ref().map_or(1, |c| c.memory_capacity),
        scl_cfg.as_ref().map_or(MemoryStrategy::Fifo, |c| c.strategy),
    );
    let mut log = Vec::with_capacity(cfg.backbone.iterations);

    for iter in 0..cfg.backbone.iterations {
        let mut g = Graph::new();
        let pass = forward(&mut g, &store, cfg, &grid, &patches, &topo)?;
        let ce = g.cross_entropy(pass.voxel_logits, &label_vec)?;
        let ce_value = g.value(ce).at(0, 0);

        let mut scl_value = 0.0;
        let mut selection: Option<AnchorSelection> = None;
        let mut total = ce;
        if let Some(sc) = &scl_cfg {
            let logits_values = g.value(pass.voxel_logits).clone();
            let sel = select_anchors_for_pass(&logits_values, &scl_index, n_cls, sc.percentile)?;
            if let Some(term) = scl_term(&mut g, &pass, &scl_index, &sel, &bank, sc, n_cls)? {
                scl_value = g.value(term).at(0, 0);
                let weighted = g.scale(term, cfg.backbone.lambda_scl);
                total = g.add(ce, weighted)?;
            }
            selection = Some(sel);
        }
        let total_value = g.value(total).at(0, 0);
        if !ce_value.is_finite() || !scl_value.is_finite() || !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "training loss",
                iteration: iter,
                ce: ce_value,
                scl: scl_value,
            });
        }

        g.backward(total)?;
        store.apply_grads(&g.param_grads())?;
        store.adam_step(cfg.backbone.lr, 0.9, 0.999, 1e-8)?;

        if scl_cfg.is_some() {
            let sel = selection.as_ref().expect("selection set when scl enabled");
            let fused_values = g.value(pass.fused_tokens).clone();
            let logits_values = g.value(pass.voxel_logits).clone();
            let anchors = detached_anchor_set(&fused_values, &logits_values, &scl_index, sel);
            bank.update(&anchors)?;
        }

        log.push(LogRow { iter, ce: ce_value, scl: scl_value, total: total_value });
    }

    Ok(TrainOutput { cfg: cfg.clone(), store, bank, log })
}

/// Runs inference with a trained model: argmax over per-voxel softmax, ties
/// to the smallest class index. The vessel mask feeds only the topology
/// branch; with `fusion = none` it is never read.
pub fn infer(
    cfg: &TrainConfig,
    store: &ParamStore,
    intensity: &Volume<f32>,
    vessel: &Volume<u8>,
) -> Result<Volume<u8>> {
    cfg.validate()?;
    let grid = TokenGrid::new(intensity.dims(), cfg.backbone.patch_size)?;
    let pos = store.get("stem/pos")?;
    if pos.rows() != grid.token_count() {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} tokens but volume has {}",
            pos.rows(),
            grid.token_count()
        )));
    }
    let topo = prepare_topology(vessel, cfg, &grid)?;
    let patches = patch_matrix(intensity, &grid);
    let mut g = Graph::new();
    let pass = forward(&mut g, store, cfg, &grid, &patches, &topo)?;
    let logits = g.value(pass.voxel_logits);
    let classes = cfg.logit_classes();
    let mut out: Volume<u8> = Volume::new(intensity.dims(), 0);
    for v in 0..logits.rows() {
        let row = logits.row(v);
        let mut best = 0usize;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        out.data_mut()[v] = best as u8;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint container (parameters + memory bank + config)
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub bank: MemoryBank,
}

fn strategy_index(s: MemoryStrategy) -> f64 {
    match s {
        MemoryStrategy::Fifo => 0.0,
        MemoryStrategy::Cats => 1.0,
    }
}

pub fn save_model(out: &TrainOutput, path: impl AsRef<Path>) -> Result<()> {
    let mut store = out.store.clone();
    let b = &out.cfg.backbone;
    store.add(
        "config/backbone",
        Tensor::row_vector(&[
            b.patch_size as f64,
            b.token_dim as f64,
            b.attn_dim as f64,
            b.class_count as f64,
            b.fusion.index() as f64,
            b.lambda_scl,
            b.lr,
            b.iterations as f64,
            (b.seed >> 32) as f64,
            (b.seed & 0xffff_ffff) as f64,
        ]),
    )?;
    store.add(
        "config/topo",
        Tensor::row_vector(&[out.cfg.topo.n_keypoints as f64, out.cfg.topo.knn_k as f64]),
    )?;
    let widths: Vec<f64> = out.cfg.topo.mlp_widths.iter().map(|&w| w as f64).collect();
    store.add("config/topo/mlp_widths", Tensor::row_vector(&widths))?;
    let widths: Vec<f64> = out.cfg.topo.gcn_widths.iter().map(|&w| w as f64).collect();
    store.add("config/topo/gcn_widths", Tensor::row_vector(&widths))?;
    match &out.cfg.scl {
        Some(s) => store.add(
            "config/scl",
            Tensor::row_vector(&[
                1.0,
                s.temperature,
                s.percentile,
                s.memory_capacity as f64,
                strategy_index(s.strategy),
                match s.denominator_mode {
                    DenominatorMode::PaperLiteral => 0.0,
                    DenominatorMode::WithPositive => 1.0,
                },
            ]),
        )?,
        None => store.add("config/scl", Tensor::row_vector(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))?,
    }
    out.bank.to_params(&mut store)?;
    save_checkpoint(&store, path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let full = load_checkpoint(path)?;
    let missing = |name: &str| Error::CheckpointFormat(format!("missing {name}"));

    let bb = full.get("config/backbone").map_err(|_| missing("config/backbone"))?;
    if bb.len() != 10 {
        return Err(Error::CheckpointFormat("bad config/backbone record".into()));
    }
    let d = bb.data();
    let fusion = *Fusion::ALL
        .get(d[4] as usize)
        .ok_or_else(|| Error::CheckpointFormat("bad fusion index".into()))?;
    let backbone = BackboneConfig {
        patch_size: d[0] as usize,
        token_dim: d[1] as usize,
        attn_dim: d[2] as usize,
        class_count: d[3] as usize,
        fusion,
        lambda_scl: d[5],
        lr: d[6],
        iterations: d[7] as usize,
        seed: ((d[8] as u64) << 32) | (d[9] as u64),
    };
    let tc = full.get("config/topo").map_err(|_| missing("config/topo"))?;
    let mlp_widths: Vec<usize> = full
        .get("config/topo/mlp_widths")
        .map_err(|_| missing("config/topo/mlp_widths"))?
        .data()
        .iter()
        .map(|&w| w as usize)
        .collect();
    let gcn_widths: Vec<usize> = full
        .get("config/topo/gcn_widths")
        .map_err(|_| missing("config/topo/gcn_widths"))?
        .data()
        .iter()
        .map(|&w| w as usize)
        .collect();
    let topo = TopoConfig {
        n_keypoints: tc.data()[0] as usize,
        knn_k: tc.data()[1] as usize,
        mlp_widths,
        gcn_widths,
    };
    let sc = full.get("config/scl").map_err(|_| missing("config/scl"))?;
    let scl = if sc.data()[0] > 0.5 {
        Some(SclConfig {
            temperature: sc.data()[1],
            percentile: sc.data()[2],
            memory_capacity: sc.data()[3] as usize,
            strategy: if sc.data()[4] > 0.5 { MemoryStrategy::Cats } else { MemoryStrategy::Fifo },
            denominator_mode: if sc.data()[5] > 0.5 {
                DenominatorMode::WithPositive
            } else {
                DenominatorMode::PaperLiteral
            },
        })
    } else {
        None
    };
    let cfg = TrainConfig { backbone, topo, scl };

    let bank = MemoryBank::from_params(
        &full,
        cfg.backbone.class_count,
        cfg.scl.as_ref().map_or(1, |s| s.memory_capacity),
        cfg.scl.as_ref().map_or(MemoryStrategy::Fifo, |s| s.strategy),
    )?;

    let mut store = ParamStore::new();
    for name in full.names() {
        if name.starts_with("config/") || name.starts_with("memo/") {
            continue;
        }
        store.add(&name, full.get(&name)?.clone())?;
    }
    Ok(Checkpoint { cfg, store, bank })
}

// ---------------------------------------------------------------------------
// File-level orchestration
// ---------------------------------------------------------------------------

/// Loads `<prefix>.ct.rvol`, `<prefix>.vessel.rvol`, `<prefix>.labels.rvol`.
pub fn load_phantom_files(prefix: &str) -> Result<(Volume<f32>, Volume<u8>, Volume<u8>)> {
    let ct = load_rvol(format!("{prefix}.ct.rvol"))?.into_f32()?;
    let vessel = load_rvol(format!("{prefix}.vessel.rvol"))?.into_u8()?;
    let labels = load_rvol(format!("{prefix}.labels.rvol"))?.into_u8()?;
    Ok((ct, vessel, labels))
}

/// Writes the phantom triple next to the prefix.
pub fn write_phantom_files(prefix: &str, spec: &PhantomSpec) -> Result<()> {
    let (ct, vessel, labels) = make_phantom(spec)?;
    save_rvol(&ct, format!("{prefix}.ct.rvol"))?;
    save_rvol(&vessel, format!("{prefix}.vessel.rvol"))?;
    save_rvol(&labels, format!("{prefix}.labels.rvol"))?;
    Ok(())
}

/// Trains from phantom files and writes checkpoint + CSV log.
pub fn train_toy(
    prefix: &str,
    cfg: &TrainConfig,
    ckpt_path: impl AsRef<Path>,
    log_path: Option<&Path>,
) -> Result<TrainOutput> {
    let (ct, vessel, labels) = load_phantom_files(prefix)?;
    let out = train(&ct, &vessel, &labels, cfg)?;
    save_model(&out, ckpt_path)?;
    if let Some(p) = log_path {
        std::fs::write(p, log_to_csv(&out.log))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub fusion: Fusion,
    pub scl: Option<MemoryStrategy>,
    pub dsc: f64,
    pub miou: f64,
    pub rvd: f64,
}

pub fn ablate_rows_to_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("fusion,scl,dsc,miou,rvd\n");
    for r in rows {
        let scl = r.scl.map_or("none", MemoryStrategy::as_str);
        let _ = writeln!(s, "{},{},{},{},{}", r.fusion.as_str(), scl, r.dsc, r.miou, r.rvd);
    }
    s
}

/// Trains and scores every fusion x SCL-strategy combination on one phantom,
/// mirroring the two ablation axes: 4 fusion variants x {none, fifo, cats}.
pub fn ablate(
    intensity: &Volume<f32>,
    vessel: &Volume<u8>,
    labels: &Volume<u8>,
    base: &TrainConfig,
) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::with_capacity(12);
    for fusion in Fusion::ALL {
        for scl in [None, Some(MemoryStrategy::Fifo), Some(MemoryStrategy::Cats)] {
            let mut cfg = base.clone();
            cfg.backbone.fusion = fusion;
            cfg.scl = scl.map(|strategy| SclConfig {
                strategy,
                ..base.scl.clone().unwrap_or_default()
            });
            let out = train(intensity, vessel, labels, &cfg)?;
            let pred = infer(&cfg, &out.store, intensity, vessel)?;
            let report = evaluate(&pred, labels, Some(cfg.backbone.class_count))?;
            rows.push(AblateRow {
                fusion,
                scl,
                dsc: report.macro_dsc,
                miou: report.macro_miou,
                rvd: report.mean_rvd,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Full-pipeline gradient check
// ---------------------------------------------------------------------------

/// Builds a small phantom and checks end-to-end gradients (CE + lambda*SCL,
/// frozen anchor selection) for the configured fusion. Returns the max
/// relative error.
pub fn pipeline_grad_check(fusion: Fusion, scale: usize, seed: u64) -> Result<f64> {
    let spec = PhantomSpec {
        dims: (scale, scale, scale),
        seed,
        branch_count: 2,
        tube_radius_range: (1.0, 1.0),
        class_count: 2,
    };
    let (ct, vessel, labels) = make_phantom(&spec)?;
    let cfg = TrainConfig {
        backbone: BackboneConfig {
            patch_size: 4,
            token_dim: 6,
            attn_dim: 5,
            class_count: 2,
            fusion,
            lambda_scl: 0.1,
            lr: 0.0,
            iterations: 0,
            seed,
        },
        topo: TopoConfig {
            n_keypoints: 8,
            knn_k: 3,
            mlp_widths: vec![7, 5],
            gcn_widths: vec![5, 4],
        },
        scl: Some(SclConfig { temperature: 0.5, ..SclConfig::default() }),
    };
    cfg.validate()?;
    let grid = TokenGrid::new(ct.dims(), cfg.backbone.patch_size)?;
    let topo = prepare_topology(&vessel, &cfg, &grid)?;
    let mut store = init_params(&cfg, &grid)?;
    let patches = patch_matrix(&ct, &grid);
    let label_vec: Vec<usize> = labels.data().iter().map(|&l| l as usize).collect();
    let scl_vessel = if fusion == Fusion::None { None } else { Some(&vessel) };
    let scl_index = SclIndex::build(&labels, scl_vessel, &grid);
    let bank = MemoryBank::new(2, 4, MemoryStrategy::Cats);
    let scl_cfg = cfg.scl.clone().expect("set above");

    // Freeze the anchor selection from the unperturbed forward so the
    // checked function is differentiable (selection is detached by design).
    let selection = {
        let mut g = Graph::new();
        let pass = forward(&mut g, &store, &cfg, &grid, &patches, &topo)?;
        let logits = g.value(pass.voxel_logits).clone();
        select_anchors_for_pass(&logits, &scl_index, 2, scl_cfg.percentile)?
    };

    crate::tensor::grad_check(
        &mut store,
        |s, g| {
            let pass = forward(g, s, &cfg, &grid, &patches, &topo)?;
            let ce = g.cross_entropy(pass.voxel_logits, &label_vec)?;
            match scl_term(g, &pass, &scl_index, &selection, &bank, &scl_cfg, 2)? {
                Some(term) => {
                    let weighted = g.scale(term, cfg.backbone.lambda_scl);
                    g.add(ce, weighted)
                }
                None => Ok(ce),
            }
        },
        1e-5,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn phantom32(seed: u64) -> (Volume<f32>, Volume<u8>, Volume<u8>) {
        make_phantom(&PhantomSpec::new((32, 32, 32), seed)).unwrap()
    }

    fn small_cfg(fusion: Fusion) -> TrainConfig {
        TrainConfig {
            backbone: BackboneConfig {
                patch_size: 4,
                token_dim: 8,
                attn_dim: 6,
                class_count: 3,
                fusion,
                lambda_scl: 0.1,
                lr: 0.02,
                iterations: 10,
                seed: 11,
            },
            topo: TopoConfig {
                n_keypoints: 16,
                knn_k: 4,
                mlp_widths: vec![7, 6],
                gcn_widths: vec![6, 5],
            },
            scl: Some(SclConfig::default()),
        }
    }

    #[test]
    fn config_rejects_single_class() {
        let mut cfg = small_cfg(Fusion::None);
        cfg.backbone.class_count = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_rejects_indivisible_dims() {
        assert!(TokenGrid::new((30, 32, 32), 4).is_err());
        assert!(TokenGrid::new((32, 32, 32), 4).is_ok());
    }

    #[test]
    fn constant_volume_zero_stem_gives_position_embeddings() {
        let cfg = small_cfg(Fusion::None);
        let grid = TokenGrid::new((8, 8, 8), 4).unwrap();
        let mut store = init_params(&cfg, &grid).unwrap();
        let p3 = grid.voxels_per_token();
        store.set("stem/w", Tensor::zeros(p3, cfg.backbone.token_dim)).unwrap();
        let vol: Volume<f32> = Volume::new((8, 8, 8), 0.37);
        let patches = patch_matrix(&vol, &grid);
        let mut g = Graph::new();
        let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
        assert_eq!(g.value(tokens), store.get("stem/pos").unwrap());
    }

    #[test]
    fn patch_size_equal_to_dims_gives_one_token() {
        let grid = TokenGrid::new((4, 4, 4), 4).unwrap();
        assert_eq!(grid.token_count(), 1);
        let cfg = small_cfg(Fusion::None);
        let store = init_params(&cfg, &grid).unwrap();
        let vol: Volume<f32> = Volume::new((4, 4, 4), 1.0);
        let patches = patch_matrix(&vol, &grid);
        let mut g = Graph::new();
        let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
        assert_eq!(g.value(tokens).rows(), 1);
    }

    #[test]
    fn encode_tokens_matches_per_patch_oracle() {
        let cfg = small_cfg(Fusion::None);
        let grid = TokenGrid::new((8, 8, 8), 4).unwrap();
        let store = init_params(&cfg, &grid).unwrap();
        let mut rng = Rng::new(3);
        let mut vol: Volume<f32> = Volume::new((8, 8, 8), 0.0);
        for v in vol.data_mut() {
            *v = rng.range_f64(-1.0, 1.0) as f32;
        }
        let patches = patch_matrix(&vol, &grid);
        let mut g = Graph::new();
        let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
        let got = g.value(tokens);

        let w = store.get("stem/w").unwrap();
        let b = store.get("stem/b").unwrap();
        let pos = store.get("stem/pos").unwrap();
        for t in 0..grid.token_count() {
            for c in 0..cfg.backbone.token_dim {
                let mut expect = b.at(0, c) + pos.at(t, c);
                for o in 0..grid.voxels_per_token() {
                    expect += patches.at(t, o) * w.at(o, c);
                }
                assert!((got.at(t, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_none_leaves_tokens_untouched() {
        let cfg = small_cfg(Fusion::None);
        let (ct, vessel, _) = phantom32(1);
        let grid = TokenGrid::new(ct.dims(), 4).unwrap();
        let store = init_params(&cfg, &grid).unwrap();
        let topo = prepare_topology(&vessel, &cfg, &grid).unwrap();
        assert!(topo.graph.is_none() && topo.edt_token_means.is_none());
        let patches = patch_matrix(&ct, &grid);
        let mut g = Graph::new();
        let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
        let fused = fuse(&mut g, &store, &cfg, tokens, &topo).unwrap();
        assert_eq!(fused, tokens);
    }

    #[test]
    fn zero_query_cross_attention_adds_same_summary_to_every_token() {
        let cfg = small_cfg(Fusion::CrossAttention);
        let (ct, vessel, _) = phantom32(2);
        let grid = TokenGrid::new(ct.dims(), 4).unwrap();
        let mut store = init_params(&cfg, &grid).unwrap();
        store
            .set("fuse_attn/wq", Tensor::zeros(cfg.backbone.token_dim, cfg.backbone.attn_dim))
            .unwrap();
        let topo = prepare_topology(&vessel, &cfg, &grid).unwrap();
        let patches = patch_matrix(&ct, &grid);
        let mut g = Graph::new();
        let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
        let fused = fuse(&mut g, &store, &cfg, tokens, &topo).unwrap();
        let tok_v = g.value(tokens).clone();
        let fused_v = g.value(fused).clone();
        let first: Vec<f64> = (0..tok_v.cols()).map(|c| fused_v.at(0, c) - tok_v.at(0, c)).collect();
        for t in 1..tok_v.rows() {
            for c in 0..tok_v.cols() {
                let delta = fused_v.at(t, c) - tok_v.at(t, c);
                assert!((delta - first[c]).abs() < 1e-12);
            }
        }
        // The shared summary is the mean of the V rows.
        let mut o = Graph::new();
        let z = topology_embeddings(&mut o, &store, &cfg, &topo).unwrap();
        let wv = o.param(&store, "fuse_attn/wv").unwrap();
        let v = o.matmul(z, wv).unwrap();
        let mean = o.mean_rows(v);
        for (a, b) in first.iter().zip(o.value(mean).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_variants_match_composed_oracles() {
        let (ct, vessel, _) = phantom32(5);
        let grid = TokenGrid::new(ct.dims(), 4).unwrap();
        let patches = patch_matrix(&ct, &grid);

        for fusion in [Fusion::Concat, Fusion::DistanceBias, Fusion::CrossAttention] {
            let cfg = small_cfg(fusion);
            let store = init_params(&cfg, &grid).unwrap();
            let topo = prepare_topology(&vessel, &cfg, &grid).unwrap();
            let mut g = Graph::new();
            let tokens = encode_tokens(&mut g, &store, &patches).unwrap();
            let fused = fuse(&mut g, &store, &cfg, tokens, &topo).unwrap();
            let tok_v = g.value(tokens).clone();
            let fused_v = g.value(fused).clone();
            assert_eq!(fused_v.shape(), tok_v.shape(), "{fusion:?} changed token shape");

            // Step-by-step re-composition on a fresh tape.
            let mut o = Graph::new();
            let tok = o.constant(tok_v.clone());
            let expect = match fusion {
                Fusion::Concat => {
                    let z = topology_embeddings(&mut o, &store, &cfg, &topo).unwrap();
                    let pooled = o.mean_rows(z);
                    let rep = o.repeat_row(pooled, tok_v.rows()).unwrap();
                    let cat = o.concat_rows(tok, rep).unwrap();
                    let w = o.param(&store, "fuse_concat/w").unwrap();
                    let b = o.param(&store, "fuse_concat/b").unwrap();
                    let lin = o.matmul(cat, w).unwrap();
                    o.add_bias(lin, b).unwrap()
                }
                Fusion::CrossAttention => {
                    let z = topology_embeddings(&mut o, &store, &cfg, &topo).unwrap();
                    let wq = o.param(&store, "fuse_attn/wq").unwrap();
                    let wk = o.param(&store, "fuse_attn/wk").unwrap();
                    let wv = o.param(&store, "fuse_attn/wv").unwrap();
                    let q = o.matmul(tok, wq).unwrap();
                    let k = o.matmul(z, wk).unwrap();
                    let v = o.matmul(z, wv).unwrap();
                    let kt = o.transpose(k);
                    let s = o.matmul(q, kt).unwrap();
                    let s = o.scale(s, 1.0 / (cfg.backbone.attn_dim as f64).sqrt());
                    let w = o.softmax_rows(s);
                    let out = o.matmul(w, v).unwrap();
                    o.add(tok, out).unwrap()
                }
                Fusion::DistanceBias => {
                    let means = topo.edt_token_means.as_ref().unwrap();
                    let wq = o.param(&store, "fuse_dbias/wq").unwrap();
                    let wk = o.param(&store, "fuse_dbias/wk").unwrap();
                    let wv = o.param(&store, "fuse_dbias/wv").unwrap();
                    let alpha = store.get("fuse_dbias/alpha").unwrap().at(0, 0);
                    let q = o.matmul(tok, wq).unwrap();
                    let k = o.matmul(tok, wk).unwrap();
                    let v = o.matmul(tok, wv).unwrap();
                    let kt = o.transpose(k);
                    let s = o.matmul(q, kt).unwrap();
                    let s = o.scale(s, 1.0 / (cfg.backbone.attn_dim as f64).sqrt());
                    let biased: Vec<f64> = means.iter().map(|&m| -alpha * m).collect();
                    let bias = o.constant(Tensor::row_vector(&biased));
                    let s = o.add_bias(s, bias).unwrap();
                    let w = o.softmax_rows(s);
                    let out = o.matmul(w, v).unwrap();
                    o.add(tok, out).unwrap()
                }
                Fusion::None => unreachable!(),
            };
            for (a, b) in fused_v.data().iter().zip(o.value(expect).data()) {
                assert!((a - b).abs() <= 1e-12, "{fusion:?} mismatch");
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_confidence() {
        let cfg = small_cfg(Fusion::None);
        let grid = TokenGrid::new((8, 8, 8), 4).unwrap();
        let mut store = init_params(&cfg, &grid).unwrap();
        let classes = cfg.logit_classes();
        let p3 = grid.voxels_per_token();
        store.set("head/w", Tensor::zeros(cfg.backbone.token_dim, p3 * classes)).unwrap();
        store.set("head/b", Tensor::zeros(1, p3 * classes)).unwrap();
        let vol: Volume<f32> = Volume::new((8, 8, 8), 0.5);
        let patches = patch_matrix(&vol, &grid);
        let mut g = Graph::new();
        let pass = forward(&mut g, &store, &cfg, &grid, &patches, &Topology::default()).unwrap();
        let probs = g.value(pass.voxel_logits).softmax_rows_values();
        let uniform = 1.0 / classes as f64;
        assert!(probs.data().iter().all(|&p| (p - uniform).abs() < 1e-15));
    }

    #[test]
    fn decode_matches_per_patch_unfold_oracle() {
        let cfg = small_cfg(Fusion::None);
        let grid = TokenGrid::new((8, 8, 8), 4).unwrap();
        let store = init_params(&cfg, &grid).unwrap();
        let mut rng = Rng::new(9);
        let mut vol: Volume<f32> = Volume::new((8, 8, 8), 0.0);
        for v in vol.data_mut() {
            *v = rng.range_f64(-1.0, 1.0) as f32;
        }
        let patches = patch_matrix(&vol, &grid);
        let mut g = Graph::new();
        let pass = forward(&mut g, &store, &cfg, &grid, &patches, &Topology::default()).unwrap();
        let logits = g.value(pass.voxel_logits);
        let fused = g.value(pass.fused_tokens);
        let w = store.get("head/w").unwrap();
        let b = store.get("head/b").unwrap();
        let classes = cfg.logit_classes();
        let (nx, ny, _) = grid.dims;
        for (x, y, z) in [(0, 0, 0), (3, 2, 1), (7, 7, 7), (4, 1, 6)] {
            let tok = grid.token_of(x, y, z);
            let off = grid.offset_of(x, y, z);
            let v = x + nx * (y + ny * z);
            for c in 0..classes {
                let col = off * classes + c;
                let mut expect = b.at(0, col);
                for j in 0..cfg.backbone.token_dim {
                    expect += fused.at(tok, j) * w.at(j, col);
                }
                assert!((logits.at(v, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_training_has_constant_loss() {
        let (ct, vessel, labels) = phantom32(4);
        let mut cfg = small_cfg(Fusion::None);
        cfg.backbone.lr = 0.0;
        cfg.backbone.lambda_scl = 0.0;
        cfg.backbone.iterations = 5;
        cfg.scl = None;
        let out = train(&ct, &vessel, &labels, &cfg).unwrap();
        let first = out.log[0].total;
        for row in &out.log {
            assert_eq!(row.total, first);
            assert_eq!(row.scl, 0.0);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (ct, vessel, labels) = phantom32(6);
        let cfg = small_cfg(Fusion::CrossAttention);
        let a = train(&ct, &vessel, &labels, &cfg).unwrap();
        let b = train(&ct, &vessel, &labels, &cfg).unwrap();
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        for name in a.store.names() {
            assert_eq!(a.store.get(&name).unwrap(), b.store.get(&name).unwrap());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (ct, vessel, labels) = phantom32(7);
        let mut cfg = small_cfg(Fusion::CrossAttention);
        cfg.backbone.iterations = 40;
        let out = train(&ct, &vessel, &labels, &cfg).unwrap();
        assert!(
            out.log.last().unwrap().total < out.log[0].total,
            "loss did not decrease: {} -> {}",
            out.log[0].total,
            out.log.last().unwrap().total
        );
    }

    #[test]
    fn untrained_zero_head_infers_constant_smallest_class() {
        let (ct, vessel, _) = phantom32(8);
        let cfg = small_cfg(Fusion::None);
        let grid = TokenGrid::new(ct.dims(), 4).unwrap();
        let mut store = init_params(&cfg, &grid).unwrap();
        let classes = cfg.logit_classes();
        let p3 = grid.voxels_per_token();
        store.set("head/w", Tensor::zeros(cfg.backbone.token_dim, p3 * classes)).unwrap();
        store.set("head/b", Tensor::zeros(1, p3 * classes)).unwrap();
        let pred = infer(&cfg, &store, &ct, &vessel).unwrap();
        assert!(pred.data().iter().all(|&l| l == 0), "tie must break to class 0");
    }

    #[test]
    fn fusion_none_predictions_ignore_vessel_mask() {
        let (ct, vessel, labels) = phantom32(9);
        let mut cfg = small_cfg(Fusion::None);
        cfg.backbone.iterations = 5;
        let out = train(&ct, &vessel, &labels, &cfg).unwrap();
        let pred = infer(&cfg, &out.store, &ct, &vessel).unwrap();

        let mut perturbed = vessel.clone();
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let i = rng.below(perturbed.len());
            perturbed.data_mut()[i] ^= 1;
        }
        let pred2 = infer(&cfg, &out.store, &ct, &perturbed).unwrap();
        assert_eq!(pred, pred2);
    }

    #[test]
    fn checkpoint_round_trips_model_and_config() {
        let dir = std::env::temp_dir().join("vastopo_pipeline_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.vgnp");
        let (ct, vessel, labels) = phantom32(10);
        let mut cfg = small_cfg(Fusion::CrossAttention);
        cfg.backbone.iterations = 5;
        cfg.backbone.seed = 0xDEAD_BEEF_0012_3456;
        let out = train(&ct, &vessel, &labels, &cfg).unwrap();
        save_model(&out, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.cfg.backbone.seed, cfg.backbone.seed);
        assert_eq!(back.cfg.backbone.fusion, Fusion::CrossAttention);
        assert_eq!(back.cfg.topo.mlp_widths, cfg.topo.mlp_widths);
        assert_eq!(
            back.bank.total_entries(),
            out.bank.total_entries(),
            "memory bank entries must survive the round trip"
        );
        let pred_a = infer(&cfg, &out.store, &ct, &vessel).unwrap();
        let pred_b = infer(&back.cfg, &back.store, &ct, &vessel).unwrap();
        assert_eq!(pred_a, pred_b);
    }

    #[test]
    fn pipeline_gradients_pass_for_all_fusion_modes() {
        for fusion in Fusion::ALL {
            let err = pipeline_grad_check(fusion, 8, 5).unwrap();
            assert!(err <= 1e-4, "{fusion:?}: pipeline grad error {err}");
        }
    }

    #[test]
    fn infer_rejects_token_count_mismatch() {
        let (ct, vessel, labels) = phantom32(12);
        let mut cfg = small_cfg(Fusion::None);
        cfg.backbone.iterations = 1;
        let out = train(&ct, &vessel, &labels, &cfg).unwrap();
        let small: Volume<f32> = Volume::new((16, 16, 16), 0.0);
        let small_vessel: Volume<u8> = Volume::new((16, 16, 16), 0);
        assert!(infer(&cfg, &out.store, &small, &small_vessel).is_err());
    }
}
