//! System-wide accounting of push-sum mass and numerator.
//!
//! No client can see these totals; the simulator keeps them to check at run
//! time that the protocol conserves mass and that lossy compression only
//! perturbs the numerator by the amount the sender-side error explains.
//! Node masses and models live in the client states and are passed in; the
//! ledger owns the in-flight side (sent but not yet aggregated, including
//! buffered messages) and the evicted-mass bookkeeping.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone)]
struct InFlight {
    mass: f64,
    content: Arc<ParamVector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSample {
    /// ‖ΔX_tot‖₂ produced by the broadcast.
    pub measured: f64,
    /// `(d⁺/(d⁺+1))·y·ε_c`.
    pub bound: f64,
    /// ‖message model − sender model‖₂.
    pub eps_c: f64,
    pub out_degree: usize,
    /// Absolute change of `Y_tot` across the broadcast.
    pub mass_change: f64,
}

#[derive(Debug, Clone)]
pub struct Reference {
    /// `X_tot / Y_tot`.
    pub model: ParamVector,
    /// Mean of ‖w_i − w̄‖² over the supplied nodes.
    pub consensus_error: f64,
    pub total_mass: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SystemLedger {
    in_flight: BTreeMap<u64, InFlight>,
    expected_mass: f64,
    destroyed_mass: f64,
    merged_mass: f64,
    broadcasts: u64,
    perturbation_violations: u64,
    max_perturbation_ratio: f64,
}

pub const PERTURBATION_SLACK: f64 = 1e-9;

impl SystemLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers mass entering the system (initial clients, joins).
    pub fn register_node(&mut self, mass: f64) {
        self.expected_mass += mass;
    }

    pub fn expected_mass(&self) -> f64 {
        self.expected_mass
    }

    pub fn destroyed_mass(&self) -> f64 {
        self.destroyed_mass
    }

    /// Mass carried over by merging one in-flight message into another.
    pub fn merged_mass(&self) -> f64 {
        self.merged_mass
    }

    pub fn broadcasts(&self) -> u64 {
        self.broadcasts
    }

    pub fn perturbation_violations(&self) -> u64 {
        self.perturbation_violations
    }

    /// Largest observed `measured / (bound + slack)` over all broadcasts.
    pub fn max_perturbation_ratio(&self) -> f64 {
        self.max_perturbation_ratio
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn in_flight_mass(&self) -> f64 {
        self.in_flight.values().map(|m| m.mass).sum()
    }

    /// `Y_tot`: node masses plus every in-flight share.
    pub fn total_mass<I: IntoIterator<Item = f64>>(&self, node_masses: I) -> f64 {
        node_masses.into_iter().sum::<f64>() + self.in_flight_mass()
    }

    /// Relative gap between `Y_tot + destroyed` and the registered mass.
    pub fn mass_drift<I: IntoIterator<Item = f64>>(&self, node_masses: I) -> f64 {
        let total = self.total_mass(node_masses) + self.destroyed_mass;
        (total - self.expected_mass).abs() / self.expected_mass
    }

    /// Records a broadcast: `sender_mass` was split into `retained` plus one
    /// `share` per message id in `messages`, each carrying `message_model`
    /// while the sender keeps `sender_model`.
    ///
    /// The numerator change is measured from the ledger contributions that
    /// actually change (the sender's own term and the new in-flight terms)
    /// and checked against `(d⁺/(d⁺+1))·y·ε_c`.
    pub fn record_broadcast(
        &mut self,
        sender_mass: f64,
        retained: f64,
        share: f64,
        messages: &[u64],
        message_model: &Arc<ParamVector>,
        sender_model: &ParamVector,
    ) -> Result<PerturbationSample> {
        message_model.same_layout(sender_model)?;
        let d = messages.len();
        let mut delta: Vec<f64> = sender_model.values().iter().map(|w| retained * w - sender_mass * w).collect();
        for &id in messages {
            if self.in_flight.insert(id, InFlight { mass: share, content: Arc::clone(message_model) }).is_some() {
                return Err(Error::Protocol(format!("message id {id} reused")));
            }
            for (dx, m) in delta.iter_mut().zip(message_model.values()) {
                *dx += share * m;
            }
        }
        let measured = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eps_c = message_model.l2_dist_sq(sender_model)?.sqrt();
        let bound = d as f64 / (d as f64 + 1.0) * sender_mass * eps_c;
        let mass_change = (retained + d as f64 * share - sender_mass).abs();
        self.broadcasts += 1;
        self.max_perturbation_ratio = self.max_perturbation_ratio.max(measured / (bound + PERTURBATION_SLACK));
        if measured > bound + PERTURBATION_SLACK {
            self.perturbation_violations += 1;
            return Err(Error::Invariant(format!(
                "numerator perturbation {measured:e} exceeds bound {bound:e} (d={d}, y={sender_mass}, eps={eps_c:e})"
            )));
        }
        Ok(PerturbationSample { measured, bound, eps_c, out_degree: d, mass_change })
    }

    /// A message was aggregated by its receiver; returns its mass.
    pub fn consume(&mut self, id: u64) -> Result<f64> {
        self.in_flight
            .remove(&id)
            .map(|m| m.mass)
            .ok_or_else(|| Error::Protocol(format!("consumed unknown message {id}")))
    }

    /// A message was evicted and its mass leaves the system.
    pub fn destroy(&mut self, id: u64) -> Result<f64> {
        let mass = self.consume(id)?;
        self.destroyed_mass += mass;
        Ok(mass)
    }

    /// Message `from` was folded into message `into`, which now carries
    /// both masses and `content`.
    pub fn merge(&mut self, from: u64, into: u64, content: Arc<ParamVector>) -> Result<()> {
        let mass = self.consume(from)?;
        let entry = self
            .in_flight
            .get_mut(&into)
            .ok_or_else(|| Error::Protocol(format!("merge into unknown message {into}")))?;
        entry.mass += mass;
        entry.content = content;
        self.merged_mass += mass;
        Ok(())
    }

    /// `w̄ = X_tot / Y_tot` over the given `(mass, model)` nodes plus every
    /// in-flight share, and the consensus error of those nodes around it.
    pub fn reference<'a, I>(&self, nodes: I) -> Result<Reference>
    where
        I: IntoIterator<Item = (f64, &'a ParamVector)>,
    {
        let nodes: Vec<(f64, &ParamVector)> = nodes.into_iter().collect();
        let first = nodes
            .first()
            .map(|(_, w)| *w)
            .ok_or_else(|| Error::Config("reference needs at least one node".into()))?;
        let mut numerator = ParamVector::zeros(Arc::clone(first.layout()));
        let mut total_mass = 0.0;
        for (mass, w) in &nodes {
            numerator.add_scaled(*mass, w)?;
            total_mass += mass;
        }
        for m in self.in_flight.values() {
            numerator.add_scaled(m.mass, &m.content)?;
            total_mass += m.mass;
        }
        if total_mass <= 0.0 {
            return Err(Error::Invariant(format!("total mass {total_mass} is not positive")));
        }
        numerator.scale(1.0 / total_mass);
        let mut spread = 0.0;
        for (_, w) in &nodes {
            spread += w.l2_dist_sq(&numerator)?;
        }
        Ok(Reference { consensus_error: spread / nodes.len() as f64, model: numerator, total_mass })
    }
}
