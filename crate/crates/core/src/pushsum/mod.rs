//! Push-sum state, buffered aggregation and mass splitting.

mod ledger;

use std::sync::Arc;

use crate::buffer::Buffered;
use crate::error::{Error, Result};
use crate::params::{ParamVector, PruneMask};
use crate::wcp::CentroidTable;

pub use ledger::{PerturbationSample, Reference, SystemLedger, PERTURBATION_SLACK};

/// Below this a node's mass counts as collapsed.
pub const MIN_MASS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PushSumState {
    pub mass: f64,
    pub model: ParamVector,
    pub dictionary: CentroidTable,
    pub mask: PruneMask,
}

impl PushSumState {
    /// Fresh state: mass 1, an all-zero dictionary and an all-true mask.
    pub fn new(model: ParamVector, k: usize) -> Self {
        let layout = Arc::clone(model.layout());
        Self {
            mass: 1.0,
            dictionary: CentroidTable::zeros(&layout, k),
            mask: PruneMask::all(layout, true),
            model,
        }
    }
}

/// A received message after wire decoding.
#[derive(Debug, Clone)]
pub struct DecodedMessage {
    pub id: u64,
    pub sender: u32,
    pub mass: f64,
    pub gen_event: u64,
    pub model: Arc<ParamVector>,
    pub tables: Option<Arc<CentroidTable>>,
}

impl Buffered for DecodedMessage {
    fn sender(&self) -> u32 {
        self.sender
    }

    fn mass(&self) -> f64 {
        self.mass
    }
}

/// Mass-weighted merge of the buffer into `state`.
///
/// `S = s + Σσ`, `w ← (s/S)·w + Σ(σ/S)·ŵ`, the dictionary is mixed with the
/// same weights slot by slot, and `s ← S`. An empty buffer leaves the state
/// untouched. Messages without centroid tables (dense bodies) take part in
/// the model average only; the dictionary average is then renormalized over
/// the messages that do carry tables.
pub fn aggregate(state: &mut PushSumState, msgs: &[DecodedMessage]) -> Result<()> {
    if msgs.is_empty() {
        return Ok(());
    }
    for m in msgs {
        if !(m.mass > 0.0 && m.mass.is_finite()) {
            return Err(Error::Protocol(format!("message {} from {} has mass {}", m.id, m.sender, m.mass)));
        }
        state.model.same_layout(&m.model)?;
    }
    let own = state.mass;
    let total = own + msgs.iter().map(|m| m.mass).sum::<f64>();

    let mut mixed = state.model.clone();
    mixed.scale(own / total);
    for m in msgs {
        mixed.add_scaled(m.mass / total, &m.model)?;
    }

    let with_tables: Vec<(&CentroidTable, f64)> =
        msgs.iter().filter_map(|m| m.tables.as_deref().map(|t| (t, m.mass))).collect();
    if !with_tables.is_empty() {
        let table_total = own + with_tables.iter().map(|(_, s)| s).sum::<f64>();
        let mut dict = state.dictionary.clone();
        dict.scale(own / table_total);
        for (t, s) in with_tables {
            dict.mix_in_place(1.0, s / table_total, t)?;
        }
        state.dictionary = dict;
    }

    state.model = mixed;
    state.mass = total;
    Ok(())
}

/// Folds `older` into `newer`: masses add, the model and the centroid
/// tables become their mass-weighted average. The result carries the same
/// mass and numerator as the two messages together.
pub fn merge_messages(older: &DecodedMessage, newer: &mut DecodedMessage) -> Result<()> {
    for m in [older, &*newer] {
        if !(m.mass > 0.0 && m.mass.is_finite()) {
            return Err(Error::Protocol(format!("message {} from {} has mass {}", m.id, m.sender, m.mass)));
        }
    }
    let total = older.mass + newer.mass;
    let (a, b) = (older.mass / total, newer.mass / total);
    let mut model = (*newer.model).clone();
    model.scale(b);
    model.add_scaled(a, &older.model)?;
    if let (Some(old_t), Some(new_t)) = (&older.tables, &newer.tables) {
        let mut t = (**new_t).clone();
        t.mix_in_place(b, a, old_t)?;
        newer.tables = Some(Arc::new(t));
    }
    newer.model = Arc::new(model);
    newer.mass = total;
    Ok(())
}

/// Plain neighbour averaging, `w ← (w + Σŵ) / (1 + |B|)`, ignoring masses.
pub fn uniform_average(model: &mut ParamVector, msgs: &[DecodedMessage]) -> Result<()> {
    if msgs.is_empty() {
        return Ok(());
    }
    let n = (msgs.len() + 1) as f64;
    let mut mixed = model.clone();
    mixed.scale(1.0 / n);
    for m in msgs {
        mixed.add_scaled(1.0 / n, &m.model)?;
    }
    *model = mixed;
    Ok(())
}

/// Splits the mass into `out_degree + 1` equal parts: one is kept, one goes
/// with each outgoing message. Returns `(retained, share)`.
pub fn split_mass(state: &mut PushSumState, out_degree: usize) -> (f64, f64) {
    let share = state.mass / (out_degree as f64 + 1.0);
    state.mass = share;
    (share, share)
}
