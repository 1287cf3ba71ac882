//! Weight Clustering Pruning (WCP).
//!
//! Each compressible layer is clustered into `K` scalar centroids with
//! centroid 0 pinned at exactly zero. Weights assigned to the zero centroid
//! are pruned. The nonzero centroids are put in ascending order (ties by
//! original slot) and the assignments remapped, so equal reconstructions
//! always produce the same bytes on the wire.

mod bits;
mod cost;
mod kmeans;
mod wire;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector, PruneMask};
use crate::rng::mix_seed;

pub use bits::{BitReader, BitWriter};
pub use cost::{comm_cost_bits, index_bits, CommCost};
pub use kmeans::{lloyd, LloydOutcome};
pub use wire::{deserialize, serialize, MessageBody, WireMessage, HEADER_BYTES, MAGIC, WIRE_VERSION};

/// Bit width of transmitted real values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ValueWidth {
    B16,
    B32,
    B64,
}

impl ValueWidth {
    pub fn bits(self) -> u32 {
        match self {
            ValueWidth::B16 => 16,
            ValueWidth::B32 => 32,
            ValueWidth::B64 => 64,
        }
    }

    /// Rounds to the nearest value representable at this width.
    pub fn round(self, x: f64) -> f64 {
        match self {
            ValueWidth::B16 => half::f16::from_f64(x).to_f64(),
            ValueWidth::B32 => f64::from(x as f32),
            ValueWidth::B64 => x,
        }
    }

    pub(crate) fn to_raw(self, x: f64) -> u64 {
        match self {
            ValueWidth::B16 => u64::from(half::f16::from_f64(x).to_bits()),
            ValueWidth::B32 => u64::from((x as f32).to_bits()),
            ValueWidth::B64 => x.to_bits(),
        }
    }

    pub(crate) fn value_from_raw(self, raw: u64) -> f64 {
        match self {
            ValueWidth::B16 => half::f16::from_bits(raw as u16).to_f64(),
            ValueWidth::B32 => f64::from(f32::from_bits(raw as u32)),
            ValueWidth::B64 => f64::from_bits(raw),
        }
    }
}

impl TryFrom<u32> for ValueWidth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(ValueWidth::B16),
            32 => Ok(ValueWidth::B32),
            64 => Ok(ValueWidth::B64),
            other => Err(Error::Config(format!("value width must be 16, 32 or 64 bits, got {other}"))),
        }
    }
}

impl From<ValueWidth> for u32 {
    fn from(w: ValueWidth) -> u32 {
        w.bits()
    }
}

impl std::fmt::Display for ValueWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Indices are stored as `u16`.
pub const MAX_CLUSTERS: usize = 1 << 16;

pub fn validate_k(k: usize) -> Result<()> {
    if (2..=MAX_CLUSTERS).contains(&k) {
        Ok(())
    } else {
        Err(Error::Config(format!("cluster count K must be in 2..={MAX_CLUSTERS}, got {k}")))
    }
}

/// Per compressible layer, `K` centroid values; slot 0 is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    k: usize,
    layers: Vec<Vec<f64>>,
}

impl CentroidTable {
    pub fn zeros(layout: &LayerLayout, k: usize) -> Self {
        Self { k, layers: vec![vec![0.0; k]; layout.num_compressible()] }
    }

    pub fn from_layers(k: usize, layers: Vec<Vec<f64>>) -> Result<Self> {
        validate_k(k)?;
        for (l, table) in layers.iter().enumerate() {
            if table.len() != k {
                return Err(Error::LayoutMismatch(format!(
                    "centroid table {l} has {} slots, expected {k}",
                    table.len()
                )));
            }
            if table[0] != 0.0 {
                return Err(Error::Protocol(format!("centroid table {l} slot 0 is {}", table[0])));
            }
            if let Some(v) = table.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("centroid table {l} holds {v}")));
            }
        }
        Ok(Self { k, layers })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn matches(&self, layout: &LayerLayout, k: usize) -> bool {
        self.k == k && self.layers.len() == layout.num_compressible()
    }

    /// `self ← a·self + b·other`, slot by slot.
    pub fn mix_in_place(&mut self, a: f64, b: f64, other: &CentroidTable) -> Result<()> {
        if self.k != other.k || self.layers.len() != other.layers.len() {
            return Err(Error::LayoutMismatch("centroid tables differ in shape".into()));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m = a * *m + b * t;
            }
            mine[0] = 0.0;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for table in &mut self.layers {
            for v in table.iter_mut() {
                *v *= a;
            }
            table[0] = 0.0;
        }
    }

    /// True when a layer carries no usable warm-start information
    /// (every nonzero slot is exactly zero).
    pub fn layer_is_blank(&self, l: usize) -> bool {
        self.layers[l][1..].iter().all(|v| *v == 0.0)
    }
}

/// Per compressible layer, one index in `[0, K)` per weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    layers: Vec<Vec<u16>>,
}

impl AssignmentMap {
    pub fn from_layers(layers: Vec<Vec<u16>>) -> Self {
        Self { layers }
    }

    pub fn layer(&self, l: usize) -> &[u16] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<u16>] {
        &self.layers
    }
}

/// The centroid-form message content: tables, assignments and the raw
/// values of every non-compressible layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidPayload {
    pub width: ValueWidth,
    pub tables: CentroidTable,
    pub assignments: AssignmentMap,
    pub uncompressed: Vec<Vec<f64>>,
}

impl CentroidPayload {
    pub fn k(&self) -> usize {
        self.tables.k()
    }
}

/// Full-precision message content used when compression is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePayload {
    pub width: ValueWidth,
    pub values: Vec<f64>,
}

impl DensePayload {
    pub fn from_model(w: &ParamVector, width: ValueWidth) -> Self {
        Self { width, values: w.values().iter().map(|v| width.round(*v)).collect() }
    }

    pub fn decode(&self, layout: &Arc<LayerLayout>) -> Result<ParamVector> {
        ParamVector::from_values(Arc::clone(layout), self.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WcpConfig {
    pub k: usize,
    pub t_max: usize,
    pub width: ValueWidth,
}

impl Default for WcpConfig {
    fn default() -> Self {
        Self { k: 32, t_max: 20, width: ValueWidth::B32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub iterations: usize,
    pub converged: bool,
    pub distortion_trace: Vec<f64>,
    /// Largest |reconstruction − input| over the layer.
    pub max_abs_error: f64,
    /// Largest distance from an input weight to its nearest final centroid.
    pub max_nearest_distance: f64,
    pub warm_started: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeStats {
    pub layers: Vec<LayerStats>,
    /// ‖decode(payload) − input‖₂ over the whole model, including the
    /// width rounding of uncompressed layers.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub payload: CentroidPayload,
    pub mask: PruneMask,
    pub stats: EncodeStats,
}

/// Seeded Lloyd runs per layer without a warm start; the lowest final
/// distortion wins.
pub const COLD_RESTARTS: usize = 32;

/// Clusters every compressible layer of `w` and replaces those layers with
/// their quantized reconstruction. Non-compressible layers of `w` are left
/// untouched; the payload carries them rounded to the value width.
///
/// `init` warm-starts the nonzero centroids layer by layer; a layer whose
/// nonzero slots are all zero falls back to `COLD_RESTARTS` k-means++
/// seedings drawn with a generator derived from `(seed, layer)`.
pub fn wcp_encode(
    w: &mut ParamVector,
    cfg: &WcpConfig,
    init: Option<&CentroidTable>,
    seed: u64,
) -> Result<Encoded> {
    validate_k(cfg.k)?;
    if cfg.t_max == 0 {
        return Err(Error::Config("T_max must be at least 1".into()));
    }
    w.ensure_finite("wcp_encode input")?;
    let layout = Arc::clone(w.layout());
    if let Some(g) = init {
        if !g.matches(&layout, cfg.k) {
            return Err(Error::LayoutMismatch(format!(
                "warm-start table has K={} over {} layers; expected K={} over {}",
                g.k(),
                g.num_layers(),
                cfg.k,
                layout.num_compressible()
            )));
        }
    }

    let original = w.clone();
    let mut mask = PruneMask::all(Arc::clone(&layout), true);
    let mut tables = Vec::with_capacity(layout.num_compressible());
    let mut assigns = Vec::with_capacity(layout.num_compressible());
    let mut layer_stats = Vec::with_capacity(layout.num_compressible());

    for (slot, layer) in layout.compressible().enumerate() {
        let theta = w.layer(layer).to_vec();
        let warm = init.filter(|g| !g.layer_is_blank(slot));
        let outcome = match warm {
            Some(g) => kmeans::lloyd(&theta, g.layer(slot).to_vec(), cfg.t_max)?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[layer as u64]));
                let mut best: Option<kmeans::LloydOutcome> = None;
                for _ in 0..COLD_RESTARTS {
                    let out = kmeans::lloyd(&theta, kmeans::seeded_init(&theta, cfg.k, &mut rng), cfg.t_max)?;
                    if best.as_ref().is_none_or(|b| out.final_distortion() < b.final_distortion()) {
                        best = Some(out);
                    }
                }
                best.expect("at least one restart")
            }
        };
        let (values, assign) = sort_remap(&outcome.centroids, &outcome.assign, cfg.width);

        let mut max_abs_error = 0.0f64;
        let mut max_nearest = 0.0f64;
        let lookup = kmeans::NearestIndex::new(&values);
        {
            let target = w.layer_mut(layer);
            for (t, a) in target.iter_mut().zip(&assign) {
                let q = values[*a as usize];
                max_abs_error = max_abs_error.max((q - *t).abs());
                max_nearest = max_nearest.max((values[lookup.nearest(*t) as usize] - *t).abs());
                *t = q;
            }
        }
        for (bit, a) in mask.layer_mut(layer).iter_mut().zip(&assign) {
            *bit = *a != 0;
        }
        layer_stats.push(LayerStats {
            iterations: outcome.iterations,
            converged: outcome.converged,
            distortion_trace: outcome.trace,
            max_abs_error,
            max_nearest_distance: max_nearest,
            warm_started: warm.is_some(),
        });
        tables.push(values);
        assigns.push(assign);
    }

    let uncompressed = layout
        .uncompressed()
        .map(|l| w.layer(l).iter().map(|v| cfg.width.round(*v)).collect())
        .collect();
    let payload = CentroidPayload {
        width: cfg.width,
        tables: CentroidTable { k: cfg.k, layers: tables },
        assignments: AssignmentMap { layers: assigns },
        uncompressed,
    };
    let decoded = wcp_decode(&payload, &layout)?;
    let reconstruction_error = decoded.l2_dist_sq(&original)?.sqrt();
    Ok(Encoded { payload, mask, stats: EncodeStats { layers: layer_stats, reconstruction_error } })
}

/// Canonical form: zero stays in slot 0, the remaining centroids are rounded
/// to the value width and sorted ascending (ties by original slot). Points
/// whose centroid coincides with a lower slot after rounding move to that
/// slot, so an index is nonzero exactly when its reconstruction is.
fn sort_remap(centroids: &[f64], assign: &[u16], width: ValueWidth) -> (Vec<f64>, Vec<u16>) {
    let k = centroids.len();
    let mut order: Vec<usize> = (1..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut values = Vec::with_capacity(k);
    values.push(0.0);
    let mut remap = vec![0u16; k];
    for (new_slot, &old) in order.iter().enumerate() {
        let v = width.round(centroids[old]);
        // -0.0 and 0.0 must not differ on the wire.
        let v = if v == 0.0 { 0.0 } else { v };
        values.push(v);
        remap[old] = (new_slot + 1) as u16;
    }
    // Collapse equal values onto the lowest slot holding them.
    let mut canonical: Vec<u16> = (0..k).map(|j| j as u16).collect();
    for j in 1..k {
        if let Some(first) = values[..j].iter().position(|v| *v == values[j]) {
            canonical[j] = first as u16;
        }
    }
    let assign = assign.iter().map(|a| canonical[remap[*a as usize] as usize]).collect();
    (values, assign)
}

/// Reconstructs a model: compressible layers by table lookup, the rest
/// from the raw values.
pub fn wcp_decode(p: &CentroidPayload, layout: &Arc<LayerLayout>) -> Result<ParamVector> {
    let k = p.k();
    if p.tables.num_layers() != layout.num_compressible()
        || p.assignments.layers.len() != layout.num_compressible()
    {
        return Err(Error::CorruptPayload(format!(
            "payload has {} tables, layout has {} compressible layers",
            p.tables.num_layers(),
            layout.num_compressible()
        )));
    }
    if p.uncompressed.len() != layout.layers().len() - layout.num_compressible() {
        return Err(Error::CorruptPayload("uncompressed tensor count mismatch".into()));
    }
    let mut out = ParamVector::zeros(Arc::clone(layout));
    for (slot, layer) in layout.compressible().enumerate() {
        let table = p.tables.layer(slot);
        let assign = p.assignments.layer(slot);
        let target = out.layer_mut(layer);
        if assign.len() != target.len() {
            return Err(Error::CorruptPayload(format!(
                "layer {layer}: {} assignments for {} weights",
                assign.len(),
                target.len()
            )));
        }
        for (t, a) in target.iter_mut().zip(assign) {
            let a = *a as usize;
            if a >= k {
                return Err(Error::CorruptPayload(format!("layer {layer}: index {a} ≥ K={k}")));
            }
            *t = table[a];
        }
    }
    for (raw, layer) in p.uncompressed.iter().zip(layout.uncompressed()) {
        let target = out.layer_mut(layer);
        if raw.len() != target.len() {
            return Err(Error::CorruptPayload(format!("layer {layer}: raw length mismatch")));
        }
        target.copy_from_slice(raw);
    }
    out.ensure_finite("wcp_decode")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(vals: &[f64]) -> ParamVector {
        let layout = Arc::new(LayerLayout::single("w", vals.len(), true).unwrap());
        ParamVector::from_values(layout, vals.to_vec()).unwrap()
    }

    fn cfg(k: usize) -> WcpConfig {
        WcpConfig { k, t_max: 20, width: ValueWidth::B64 }
    }

    #[test]
    fn all_zero_layer() {
        let mut w = single(&[0.0; 6]);
        let enc = wcp_encode(&mut w, &cfg(2), None, 0).unwrap();
        assert!(enc.payload.assignments.layer(0).iter().all(|a| *a == 0));
        assert_eq!(enc.mask.count_kept(), 0);
        assert!(w.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seeded_example_finds_the_optimal_partition() {
        let theta = [0.1, 0.12, -0.5, -0.48, 0.0];
        for seed in 0..20 {
            let mut w = single(&theta);
            let enc = wcp_encode(&mut w, &cfg(3), None, seed).unwrap();
            let table = enc.payload.tables.layer(0);
            assert_eq!(table[0], 0.0);
            assert!((table[1] + 0.49).abs() < 1e-12);
            assert!((table[2] - 0.11).abs() < 1e-12);
            assert_eq!(enc.payload.assignments.layer(0), &[2, 2, 1, 1, 0]);
        }
    }

    #[test]
    fn decode_lookup() {
        let layout = Arc::new(LayerLayout::single("w", 3, true).unwrap());
        let p = CentroidPayload {
            width: ValueWidth::B32,
            tables: CentroidTable::from_layers(2, vec![vec![0.0, 1.0]]).unwrap(),
            assignments: AssignmentMap::from_layers(vec![vec![1, 1, 0]]),
            uncompressed: vec![],
        };
        assert_eq!(wcp_decode(&p, &layout).unwrap().values(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn decode_rejects_out_of_range_index() {
        let layout = Arc::new(LayerLayout::single("w", 2, true).unwrap());
        let p = CentroidPayload {
            width: ValueWidth::B32,
            tables: CentroidTable::from_layers(2, vec![vec![0.0, 1.0]]).unwrap(),
            assignments: AssignmentMap::from_layers(vec![vec![1, 2]]),
            uncompressed: vec![],
        };
        assert!(matches!(wcp_decode(&p, &layout), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn uncompressed_only_layout_is_identity_copy() {
        let layout = Arc::new(LayerLayout::from_shapes(&[("b", &[3])]).unwrap());
        let mut w = ParamVector::from_values(Arc::clone(&layout), vec![0.5, -0.25, 2.0]).unwrap();
        let enc = wcp_encode(&mut w, &WcpConfig::default(), None, 0).unwrap();
        assert_eq!(enc.payload.uncompressed, vec![vec![0.5, -0.25, 2.0]]);
        assert_eq!(wcp_decode(&enc.payload, &layout).unwrap(), w);
    }

    #[test]
    fn canonical_order_is_ascending_with_zero_first() {
        let mut w = single(&[0.9, -0.7, 0.3, 0.31, -0.69, 0.0, 0.88, 0.02]);
        let enc = wcp_encode(&mut w, &cfg(4), None, 11).unwrap();
        let t = enc.payload.tables.layer(0);
        assert_eq!(t[0], 0.0);
        assert!(t[1..].windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn encode_replaces_weights_and_mask_marks_nonzero() {
        let orig = [0.5, 0.52, -0.3, 0.01, 0.0, -0.31];
        let mut w = single(&orig);
        let enc = wcp_encode(&mut w, &cfg(3), None, 5).unwrap();
        let decoded = wcp_decode(&enc.payload, w.layout()).unwrap();
        assert_eq!(decoded, w);
        for (v, keep) in w.values().iter().zip(enc.mask.bits()) {
            assert_eq!(*v != 0.0, *keep);
        }
        let err: f64 = orig.iter().zip(w.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((err - enc.stats.reconstruction_error).abs() < 1e-15);
    }

    #[test]
    fn blank_warm_start_falls_back_to_seeded_init() {
        let mut w = single(&[1.0, 2.0, 3.0, -1.0]);
        let blank = CentroidTable::zeros(w.layout(), 3);
        let enc = wcp_encode(&mut w, &cfg(3), Some(&blank), 2).unwrap();
        assert!(!enc.stats.layers[0].warm_started);
        assert!(enc.mask.count_kept() > 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut w = single(&[1.0, 2.0]);
        assert!(wcp_encode(&mut w, &cfg(1), None, 0).is_err());
        let wrong = CentroidTable::zeros(w.layout(), 4);
        assert!(wcp_encode(&mut w, &cfg(3), Some(&wrong), 0).is_err());
        let bad = WcpConfig { t_max: 0, ..cfg(3) };
        assert!(wcp_encode(&mut w, &bad, None, 0).is_err());
        w.values_mut()[0] = f64::NAN;
        assert!(matches!(wcp_encode(&mut w, &cfg(3), None, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn more_clusters_than_values_leaves_empty_slots() {
        let mut w = single(&[1.0, 1.0, -2.0]);
        let enc = wcp_encode(&mut w, &cfg(8), None, 0).unwrap();
        assert_eq!(w.values(), &[1.0, 1.0, -2.0]);
        assert_eq!(enc.stats.reconstruction_error, 0.0);
    }
}
