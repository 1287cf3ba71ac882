//! Per-tick metrics, run summaries and their on-disk forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sim::schedule::Plan;

/// One row per evaluation tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub time: f64,
    pub mean_acc: f64,
    pub mean_loss: f64,
    #[serde(rename = "E_con")]
    pub e_con: f64,
    #[serde(rename = "Y_tot_drift")]
    pub y_tot_drift: f64,
    pub destroyed_mass: f64,
    pub cum_bytes: u64,
    pub max_staleness: u64,
    pub online: usize,
    pub activations: u64,
    #[serde(rename = "Y_tot")]
    pub y_tot: f64,
    pub wbar_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayedClient {
    pub client: u32,
    pub join_time: f64,
    /// Best local test accuracy seen at any evaluation tick after joining.
    pub running_max_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StalenessReport {
    pub count: usize,
    pub max: u64,
    pub mean: f64,
    pub histogram: BTreeMap<u64, u64>,
}

/// Aggregates reported once per run.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunSummary {
    pub activations: u64,
    pub deliveries: u64,
    pub broadcasts: u64,
    pub aggregated_messages: u64,
    pub superseded: u64,
    pub overflowed: u64,
    pub cum_bytes: u64,
    /// Serialized size of one push, when every push had the same size.
    pub per_push_bytes: Option<u64>,
    pub min_push_bytes: u64,
    pub max_push_bytes: u64,
    pub max_mass_drift: f64,
    pub min_mass: f64,
    pub destroyed_mass: f64,
    pub merged_mass: f64,
    /// Largest measured/bound ratio of the numerator perturbation check.
    pub max_perturbation_ratio: f64,
    pub perturbation_violations: u64,
    pub local_steps: u64,
    pub contraction_checks: u64,
    pub max_contraction_ratio: f64,
    /// Largest drift/bound ratio over all local updates.
    pub max_drift_ratio: f64,
    pub final_mean_acc: f64,
    pub final_acc_sd: f64,
    /// `(client, accuracy)` at the last tick for every online client.
    pub final_client_acc: Vec<(u32, f64)>,
    pub delayed: Vec<DelayedClient>,
    pub staleness: StalenessReport,
    pub stepsize_warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub staleness: Vec<u64>,
    pub summary: RunSummary,
}

impl MetricsLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Statistics over every aggregated message's age in activations.
pub fn staleness_report(records: &[u64]) -> StalenessReport {
    let mut histogram = BTreeMap::new();
    for s in records {
        *histogram.entry(*s).or_insert(0) += 1;
    }
    StalenessReport {
        count: records.len(),
        max: records.iter().copied().max().unwrap_or(0),
        mean: if records.is_empty() { 0.0 } else { records.iter().sum::<u64>() as f64 / records.len() as f64 },
        histogram,
    }
}

/// Fails when any aggregated message was older than `cap` activations.
pub fn enforce_staleness(report: &StalenessReport, cap: Option<u64>) -> Result<()> {
    match cap {
        Some(tau) if report.max > tau => {
            Err(Error::Invariant(format!("staleness {} exceeds the cap {tau}", report.max)))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub crate_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub plan: &'a Plan,
    pub summary: &'a RunSummary,
}

pub fn write_manifest(path: &Path, cfg: &ExperimentConfig, plan: &Plan, summary: &RunSummary) -> Result<()> {
    let resolved = cfg.resolved();
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: &resolved,
        plan,
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
