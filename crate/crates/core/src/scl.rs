//! Structural contrastive loss: confidence-percentile anchor selection,
//! class/vessel feature centers, the InfoNCE-style loss over cosine
//! similarities, and the per-class memory bank of historical negatives.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryStrategy {
    /// First-in-first-out queue; over capacity the oldest entry is evicted.
    Fifo,
    /// Confidence-aware replacement: a new item displaces the lowest-
    /// confidence entry when it beats it, otherwise it is discarded.
    Cats,
}

impl MemoryStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryStrategy::Fifo => "fifo",
            MemoryStrategy::Cats => "cats",
        }
    }
}

/// Which terms the loss denominator sums over. The printed equation uses the
/// negative set only (`PaperLiteral`, may go negative); `WithPositive` adds
/// the positive term, giving the usual nonnegative InfoNCE form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenominatorMode {
    PaperLiteral,
    WithPositive,
}

#[derive(Debug, Clone)]
pub struct SclConfig {
    pub temperature: f64,
    /// Confidence percentile for anchor selection, in (0, 100).
    pub percentile: f64,
    /// Memory capacity per class.
    pub memory_capacity: usize,
    pub strategy: MemoryStrategy,
    pub denominator_mode: DenominatorMode,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig {
            temperature: 0.1,
            percentile: 95.0,
            memory_capacity: 16,
            strategy: MemoryStrategy::Cats,
            denominator_mode: DenominatorMode::PaperLiteral,
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::Config("percentile must lie in (0, 100)".into()));
        }
        if self.memory_capacity < 1 {
            return Err(Error::Config("memory capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// One selected anchor: raw feature, its unit-normalized copy, confidence,
/// and the voxel index it came from.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub feature: Vec<f64>,
    pub unit_feature: Vec<f64>,
    pub confidence: f64,
    pub voxel: usize,
}

/// Anchors grouped by class (index 0 holds class 1).
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub per_class: Vec<Vec<Anchor>>,
    pub threshold: f64,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

/// Nearest-rank percentile: index `ceil(q/100 * n)` of the ascending sort.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyVoxelSet);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    let rank = rank.clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Selects per-class anchor voxel indices: strict exceedances of the global
/// confidence percentile, grouped by label, in ascending voxel order.
pub fn select_anchor_indices(
    conf: &[f64],
    labels: &[usize],
    class_count: usize,
    percentile: f64,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if conf.is_empty() || conf.len() != labels.len() {
        return Err(Error::EmptyVoxelSet);
    }
    let threshold = nearest_rank_percentile(conf, percentile)?;
    let mut per_class = vec![Vec::new(); class_count];
    for (i, (&c, &label)) in conf.iter().zip(labels).enumerate() {
        if label == 0 || label > class_count {
            return Err(Error::LabelOutOfRange { label, max: class_count });
        }
        if c > threshold {
            per_class[label - 1].push(i);
        }
    }
    Ok((threshold, per_class))
}

/// Full anchor selection over aligned per-voxel features, confidences, and
/// ground-truth labels (background voxels excluded by the caller).
pub fn select_anchors(
    features: &Tensor,
    conf: &[f64],
    labels: &[usize],
    class_count: usize,
    cfg: &SclConfig,
) -> Result<AnchorSet> {
    cfg.validate()?;
    if features.rows() != conf.len() {
        return Err(Error::ShapeMismatch {
            op: "select_anchors",
            left: features.shape().to_vec(),
            right: vec![conf.len()],
        });
    }
    let (threshold, indices) = select_anchor_indices(conf, labels, class_count, cfg.percentile)?;
    let per_class = indices
        .into_iter()
        .map(|idxs| {
            idxs.into_iter()
                .map(|voxel| {
                    let feature = features.row(voxel).to_vec();
                    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let unit_feature = if norm > 0.0 {
                        feature.iter().map(|v| v / norm).collect()
                    } else {
                        vec![0.0; feature.len()]
                    };
                    Anchor { feature, unit_feature, confidence: conf[voxel], voxel }
                })
                .collect()
        })
        .collect();
    Ok(AnchorSet { per_class, threshold })
}

/// Per-class and vessel feature centers.
#[derive(Debug, Clone)]
pub struct ClassCenters {
    /// Index 0 holds class 1; absent classes are `None`.
    pub per_class: Vec<Option<Vec<f64>>>,
    /// Mean feature over ground-truth vessel voxels; `None` when the vessel
    /// mask is empty (callers should log the omission).
    pub vessel: Option<Vec<f64>>,
}

/// Arithmetic feature means per class and over the vessel mask.
pub fn class_centers(
    features: &Tensor,
    labels: &[usize],
    vessel: &[bool],
    class_count: usize,
) -> Result<ClassCenters> {
    if features.rows() != labels.len() || labels.len() != vessel.len() {
        return Err(Error::ShapeMismatch {
            op: "class_centers",
            left: vec![features.rows()],
            right: vec![labels.len(), vessel.len()],
        });
    }
    let d = features.cols();
    let mut sums = vec![vec![0.0f64; d]; class_count];
    let mut counts = vec![0usize; class_count];
    let mut vessel_sum = vec![0.0f64; d];
    let mut vessel_count = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label == 0 || label > class_count {
            return Err(Error::LabelOutOfRange { label, max: class_count });
        }
        let row = features.row(i);
        for (s, &v) in sums[label - 1].iter_mut().zip(row) {
            *s += v;
        }
        counts[label - 1] += 1;
        if vessel[i] {
            for (s, &v) in vessel_sum.iter_mut().zip(row) {
                *s += v;
            }
            vessel_count += 1;
        }
    }
    let per_class = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                None
            } else {
                Some(s.into_iter().map(|v| v / c as f64).collect())
            }
        })
        .collect();
    let vessel = if vessel_count == 0 {
        None
    } else {
        Some(vessel_sum.into_iter().map(|v| v / vessel_count as f64).collect())
    };
    Ok(ClassCenters { per_class, vessel })
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub confidence: f64,
    pub counter: u64,
}

/// Bounded per-class store of historical negative features.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    classes: Vec<Vec<MemoryEntry>>,
    capacity: usize,
    strategy: MemoryStrategy,
    next_counter: u64,
}

impl MemoryBank {
    pub fn new(class_count: usize, capacity: usize, strategy: MemoryStrategy) -> Self {
        MemoryBank {
            classes: vec![Vec::new(); class_count],
            capacity,
            strategy,
            next_counter: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> MemoryStrategy {
        self.strategy
    }

    /// Entries for one class (1-based class id).
    pub fn entries(&self, class: usize) -> &[MemoryEntry] {
        &self.classes[class - 1]
    }

    pub fn total_entries(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Inserts one feature under the configured eviction strategy.
    pub fn insert(&mut self, class: usize, feature: Vec<f64>, confidence: f64) -> Result<()> {
        if class == 0 || class > self.classes.len() {
            return Err(Error::LabelOutOfRange { label: class, max: self.classes.len() });
        }
        let slot = &mut self.classes[class - 1];
        if let Some(existing) = slot.first() {
            if existing.feature.len() != feature.len() {
                return Err(Error::ShapeMismatch {
                    op: "memory insert",
                    left: vec![existing.feature.len()],
                    right: vec![feature.len()],
                });
            }
        }
        let entry = MemoryEntry { feature, confidence, counter: self.next_counter };
        self.next_counter += 1;
        if slot.len() < self.capacity {
            slot.push(entry);
            return Ok(());
        }
        match self.strategy {
            MemoryStrategy::Fifo => {
                slot.push(entry);
                let oldest = slot
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| e.counter)
                    .map(|(i, _)| i)
                    .expect("nonempty");
                slot.remove(oldest);
            }
            MemoryStrategy::Cats => {
                // Victim: minimum confidence, ties going to the older entry.
                let victim = slot
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        a.confidence
                            .total_cmp(&b.confidence)
                            .then(a.counter.cmp(&b.counter))
                    })
                    .map(|(i, _)| i)
                    .expect("nonempty");
                if entry.confidence > slot[victim].confidence {
                    slot[victim] = entry;
                }
            }
        }
        Ok(())
    }

    /// Inserts every anchor of the set, per class in voxel order. Anchor
    /// features are stored detached: no gradient ever flows into the bank.
    pub fn update(&mut self, anchors: &AnchorSet) -> Result<()> {
        for (ci, list) in anchors.per_class.iter().enumerate() {
            for anchor in list {
                self.insert(ci + 1, anchor.feature.clone(), anchor.confidence)?;
            }
        }
        Ok(())
    }

    /// Serializes the bank into checkpoint parameters under
    /// `memo/<class>/<slot>` (+ `/meta` rows holding confidence and counter).
    pub fn to_params(&self, store: &mut ParamStore) -> Result<()> {
        for (ci, slot) in self.classes.iter().enumerate() {
            for (si, e) in slot.iter().enumerate() {
                let name = format!("memo/{}/{si}", ci + 1);
                store.add(&name, Tensor::row_vector(&e.feature))?;
                store.add(
                    &format!("{name}/meta"),
                    Tensor::row_vector(&[e.confidence, e.counter as f64]),
                )?;
            }
        }
        Ok(())
    }

    /// Rebuilds a bank from checkpoint parameters.
    pub fn from_params(
        store: &ParamStore,
        class_count: usize,
        capacity: usize,
        strategy: MemoryStrategy,
    ) -> Result<Self> {
        let mut bank = MemoryBank::new(class_count, capacity, strategy);
        let mut max_counter = 0u64;
        for class in 1..=class_count {
            for slot in 0..capacity {
                let name = format!("memo/{class}/{slot}");
                if !store.contains(&name) {
                    break;
                }
                let feature = store.get(&name)?.data().to_vec();
                let meta = store.get(&format!("{name}/meta"))?;
                if meta.len() != 2 {
                    return Err(Error::CheckpointFormat(format!("bad meta row for {name}")));
                }
                let counter = meta.data()[1] as u64;
                max_counter = max_counter.max(counter + 1);
                bank.classes[class - 1].push(MemoryEntry {
                    feature,
                    confidence: meta.data()[0],
                    counter,
                });
            }
        }
        bank.next_counter = max_counter;
        Ok(bank)
    }
}

// ---------------------------------------------------------------------------
// Negative sets and the loss
// ---------------------------------------------------------------------------

/// The negatives contrasted against one class's anchors: every other present
/// class center, the vessel center when available, and every other-class
/// memory entry. Symbolic (indices, not copies) so the graph and value paths
/// share one membership rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    /// 1-based class id this set belongs to.
    pub class: usize,
    /// 1-based classes contributing their centers.
    pub center_classes: Vec<usize>,
    pub includes_vessel: bool,
    /// `(class, slot)` positions into the memory bank.
    pub memory_slots: Vec<(usize, usize)>,
}

impl NegativeSet {
    /// Enumerates the negatives for `class` given which class centers exist.
    pub fn for_class(
        class: usize,
        centers_present: &[bool],
        vessel_present: bool,
        bank: &MemoryBank,
    ) -> Self {
        let center_classes = (1..=centers_present.len())
            .filter(|&k| k != class && centers_present[k - 1])
            .collect();
        let mut memory_slots = Vec::new();
        for k in 1..=bank.class_count() {
            if k != class {
                for slot in 0..bank.entries(k).len() {
                    memory_slots.push((k, slot));
                }
            }
        }
        NegativeSet { class, center_classes, includes_vessel: vessel_present, memory_slots }
    }

    pub fn len(&self) -> usize {
        self.center_classes.len() + usize::from(self.includes_vessel) + self.memory_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph-level SCL: anchors and centers are tape nodes (single feature rows),
/// memory negatives enter as constants. Returns a scalar node.
///
/// `anchors_per_class[c]` and `centers[c]` hold class `c+1`. Classes without
/// anchors are skipped and excluded from the outer average.
pub fn scl_loss(
    g: &mut Graph,
    anchors_per_class: &[Vec<NodeId>],
    centers: &[Option<NodeId>],
    vessel_center: Option<NodeId>,
    bank: &MemoryBank,
    cfg: &SclConfig,
) -> Result<NodeId> {
    let weighted: Vec<Vec<(NodeId, f64)>> = anchors_per_class
        .iter()
        .map(|list| list.iter().map(|&id| (id, 1.0)).collect())
        .collect();
    scl_loss_weighted(g, &weighted, centers, vessel_center, bank, cfg)
}

/// [`scl_loss`] with anchor multiplicities: an anchor node with weight `m`
/// contributes like `m` identical anchors. Voxels sharing a token row carry
/// identical features, so grouping them keeps the tape small without
/// changing the loss value.
pub fn scl_loss_weighted(
    g: &mut Graph,
    anchors_per_class: &[Vec<(NodeId, f64)>],
    centers: &[Option<NodeId>],
    vessel_center: Option<NodeId>,
    bank: &MemoryBank,
    cfg: &SclConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if anchors_per_class.len() != centers.len() {
        return Err(Error::ShapeMismatch {
            op: "scl_loss",
            left: vec![anchors_per_class.len()],
            right: vec![centers.len()],
        });
    }
    let class_count = anchors_per_class.len();
    if bank.class_count() != class_count {
        return Err(Error::ShapeMismatch {
            op: "scl_loss memory bank",
            left: vec![bank.class_count()],
            right: vec![class_count],
        });
    }
    let inv_tau = 1.0 / cfg.temperature;
    let centers_present: Vec<bool> = centers.iter().map(Option::is_some).collect();
    let mut class_losses: Vec<NodeId> = Vec::new();

    for c in 0..class_count {
        let anchors = &anchors_per_class[c];
        if anchors.is_empty() {
            continue;
        }
        let center = centers[c]
            .ok_or_else(|| Error::Config(format!("class {} has anchors but no center", c + 1)))?;

        let set = NegativeSet::for_class(c + 1, &centers_present, vessel_center.is_some(), bank);
        if set.is_empty() {
            return Err(Error::Config(format!("empty negative set for class {}", c + 1)));
        }
        let mut negatives: Vec<NodeId> = Vec::with_capacity(set.len());
        for &k in &set.center_classes {
            negatives.push(centers[k - 1].expect("listed centers are present"));
        }
        if set.includes_vessel {
            negatives.push(vessel_center.expect("listed only when present"));
        }
        for &(k, slot) in &set.memory_slots {
            let id = g.constant(Tensor::row_vector(&bank.entries(k)[slot].feature));
            negatives.push(id);
        }

        let mut weight_total = 0.0;
        let mut sum: Option<NodeId> = None;
        for &(a, weight) in anchors {
            if weight <= 0.0 {
                return Err(Error::Config("anchor weight must be positive".into()));
            }
            let pos = g.cosine_sim(a, center)?;
            let pos = g.scale(pos, inv_tau);
            let mut sim_row: Option<NodeId> = None;
            for &nid in &negatives {
                let s = g.cosine_sim(a, nid)?;
                let s = g.scale(s, inv_tau);
                sim_row = Some(match sim_row {
                    None => s,
                    Some(row) => g.concat_rows(row, s)?,
                });
            }
            let mut denom_row = sim_row.expect("negatives nonempty");
            if cfg.denominator_mode == DenominatorMode::WithPositive {
                denom_row = g.concat_rows(denom_row, pos)?;
            }
            let lse = g.logsumexp_row(denom_row)?;
            let neg_pos = g.scale(pos, -1.0);
            let term = g.add(lse, neg_pos)?;
            let term = g.scale(term, weight);
            weight_total += weight;
            sum = Some(match sum {
                None => term,
                Some(s) => g.add(s, term)?,
            });
        }
        class_losses.push(g.scale(sum.expect("anchors nonempty"), 1.0 / weight_total));
    }

    if class_losses.is_empty() {
        return Err(Error::Config("no class has any anchor".into()));
    }
    let mut total = class_losses[0];
    for &l in &class_losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / class_losses.len() as f64))
}

/// Value-level convenience over [`scl_loss`]: anchors and centers enter as
/// constants on a scratch tape.
pub fn scl_loss_value(
    anchors: &AnchorSet,
    centers: &ClassCenters,
    bank: &MemoryBank,
    cfg: &SclConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let anchor_ids: Vec<Vec<NodeId>> = anchors
        .per_class
        .iter()
        .map(|list| {
            list.iter()
                .map(|a| g.constant(Tensor::row_vector(&a.feature)))
                .collect()
        })
        .collect();
    let center_ids: Vec<Option<NodeId>> = centers
        .per_class
        .iter()
        .map(|c| c.as_ref().map(|v| g.constant(Tensor::row_vector(v))))
        .collect();
    let vessel_id = centers.vessel.as_ref().map(|v| g.constant(Tensor::row_vector(v)));
    let loss = scl_loss(&mut g, &anchor_ids, &center_ids, vessel_id, bank, cfg)?;
    Ok(g.value(loss).at(0, 0))
}
