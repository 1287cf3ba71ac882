//! Experiment matrices, ablations and communication-cost reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Ablation, ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::sim::{self, MetricsLog};
use crate::wcp::{self, comm_cost_bits, CommCost, ValueWidth};

/// Methods × Dirichlet concentrations × seeds, all other settings from
/// `base`.
#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub base: ExperimentConfig,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl MatrixSpec {
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            for &method in &self.methods {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.method = method;
                    c.seed = seed;
                    c.data.alpha = alpha;
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub config_hash: String,
    pub final_mean_acc: Option<f64>,
    pub acc_sd: Option<f64>,
    pub per_push_bytes: Option<u64>,
    pub cum_bytes: Option<u64>,
    /// Per-push bytes relative to pushcen with the same `(alpha, seed)`.
    pub relative_overhead: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub config: ExperimentConfig,
    pub result: Result<MetricsLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsTable {
    pub rows: Vec<CellResult>,
}

/// Runs every cell on a pool of `threads` workers (all cores when `None`).
/// Cell failures are kept per cell rather than aborting the matrix.
pub fn run_matrix(spec: &MatrixSpec, threads: Option<usize>) -> Result<Vec<CellOutcome>> {
    let cells = spec.cells();
    if cells.is_empty() {
        return Err(Error::Config("the matrix has no cells".into()));
    }
    for c in &cells {
        c.resolved().validate()?;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|config| {
                let result = sim::run(&config);
                CellOutcome { config, result }
            })
            .collect()
    }))
}

impl ResultsTable {
    pub fn from_outcomes(outcomes: &[CellOutcome]) -> Self {
        let mut rows: Vec<CellResult> = outcomes
            .iter()
            .map(|o| {
                let (method, alpha, seed) = (o.config.method, o.config.data.alpha, o.config.seed);
                let config_hash = o.config.hash();
                match &o.result {
                    Ok(log) => CellResult {
                        method,
                        alpha,
                        seed,
                        config_hash,
                        final_mean_acc: Some(log.summary.final_mean_acc),
                        acc_sd: Some(log.summary.final_acc_sd),
                        per_push_bytes: log.summary.per_push_bytes,
                        cum_bytes: Some(log.summary.cum_bytes),
                        relative_overhead: None,
                        error: None,
                    },
                    Err(e) => CellResult {
                        method,
                        alpha,
                        seed,
                        config_hash,
                        final_mean_acc: None,
                        acc_sd: None,
                        per_push_bytes: None,
                        cum_bytes: None,
                        relative_overhead: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        let reference: BTreeMap<(u64, u64), u64> = rows
            .iter()
            .filter(|r| r.method == Method::Pushcen)
            .filter_map(|r| Some(((r.alpha.to_bits(), r.seed), r.per_push_bytes?)))
            .collect();
        for r in &mut rows {
            if let (Some(own), Some(base)) = (r.per_push_bytes, reference.get(&(r.alpha.to_bits(), r.seed))) {
                r.relative_overhead = Some(own as f64 / *base as f64);
            }
        }
        Self { rows }
    }

    /// True when at least one cell failed.
    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "alpha",
            "seed",
            "final_mean_acc",
            "acc_sd",
            "per_push_bytes",
            "cum_bytes",
            "relative_overhead",
            "config_hash",
            "error",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.alpha.to_string(),
                r.seed.to_string(),
                opt(r.final_mean_acc.map(|v| v.to_string())),
                opt(r.acc_sd.map(|v| v.to_string())),
                opt(r.per_push_bytes.map(|v| v.to_string())),
                opt(r.cum_bytes.map(|v| v.to_string())),
                opt(r.relative_overhead.map(|v| v.to_string())),
                r.config_hash.clone(),
                opt(r.error.clone()),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Seed-averaged accuracy per `(alpha, method)`.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(u64, Method), Vec<&CellResult>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.alpha.to_bits(), r.method)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((alpha, method), rows)| {
                let accs: Vec<f64> = rows.iter().filter_map(|r| r.final_mean_acc).collect();
                let sds: Vec<f64> = rows.iter().filter_map(|r| r.acc_sd).collect();
                SummaryRow {
                    alpha: f64::from_bits(alpha),
                    method,
                    seeds: accs.len(),
                    failed: rows.len() - accs.len(),
                    mean_acc: mean(&accs),
                    seed_sd: sim::population_sd(&accs),
                    mean_client_sd: mean(&sds),
                    per_push_bytes: rows.iter().find_map(|r| r.per_push_bytes),
                    relative_overhead: rows.iter().find_map(|r| r.relative_overhead),
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:<14} {:>5} {:>9} {:>8} {:>9} {:>10} {:>9}",
            "alpha", "method", "seeds", "mean_acc", "seed_sd", "client_sd", "push_bytes", "overhead"
        );
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{:>6}  {:<14} {:>5} {:>9.4} {:>8.4} {:>9.4} {:>10} {:>9}",
                s.alpha,
                s.method.name(),
                s.seeds,
                s.mean_acc,
                s.seed_sd,
                s.mean_client_sd,
                s.per_push_bytes.map_or("-".into(), |b| b.to_string()),
                s.relative_overhead.map_or("-".into(), |o| format!("{o:.2}x")),
            );
        }
        if self.is_partial() {
            let failed = self.rows.iter().filter(|r| r.error.is_some()).count();
            let _ = writeln!(out, "PARTIAL: {failed} cell(s) failed");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub alpha: f64,
    pub method: Method,
    pub seeds: usize,
    pub failed: usize,
    pub mean_acc: f64,
    pub seed_sd: f64,
    pub mean_client_sd: f64,
    pub per_push_bytes: Option<u64>,
    pub relative_overhead: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoReg,
    NoBuffer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoReg, Variant::NoBuffer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReg => "no_reg",
            Variant::NoBuffer => "no_buffer",
        }
    }

    pub fn ablation(self) -> Ablation {
        Ablation { no_reg: self == Variant::NoReg, no_buffer: self == Variant::NoBuffer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
    /// `mean_acc − mean_acc(full)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Runs the full configuration and both ablations on the same seeds.
pub fn ablation_report(base: &ExperimentConfig, seeds: &[u64], threads: Option<usize>) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for v in Variant::ALL {
        for &seed in seeds {
            cells.push((v, ExperimentConfig { seed, ablation: v.ablation(), ..base.clone() }));
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let accs: Vec<(Variant, f64)> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|(v, c)| sim::run(&c).map(|log| (v, log.summary.final_mean_acc)))
            .collect::<Result<_>>()
    })?;
    let mut rows: Vec<AblationRow> = Variant::ALL
        .into_iter()
        .map(|v| {
            let accs: Vec<f64> = accs.iter().filter(|(w, _)| *w == v).map(|(_, a)| *a).collect();
            AblationRow { variant: v, mean_acc: mean(&accs), accs, delta: 0.0 }
        })
        .collect();
    let full = rows[0].mean_acc;
    for r in &mut rows {
        r.delta = r.mean_acc - full;
    }
    Ok(AblationReport { seeds: seeds.to_vec(), rows })
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>9} {:>8}", "variant", "mean_acc", "delta");
        for r in &self.rows {
            let _ = writeln!(out, "{:<10} {:>9.4} {:>+8.4}", r.variant.name(), r.mean_acc, r.delta);
        }
        out
    }
}

/// Predicted and measured message sizes for one configuration's model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub clusters: usize,
    pub value_bits: u32,
    pub predicted_bits: CommCost,
    pub header_bytes: usize,
    /// Serialized size of a centroid message for a freshly initialized model.
    pub measured_wcp_bytes: usize,
    /// Serialized size of a dense message at the same width.
    pub measured_dense_bytes: usize,
    pub measured_ratio: f64,
}

pub fn cost_report(cfg: &ExperimentConfig) -> Result<CostReport> {
    let cfg = cfg.resolved();
    let objective = cfg.model.build(&cfg.data)?;
    let layout = objective.layout();
    let width: ValueWidth = cfg.trainer.value_bits;
    let predicted_bits = comm_cost_bits(layout, cfg.trainer.clusters, width)?;
    let mut w = objective.init_model(&mut crate::rng::stream(cfg.seed, &[crate::rng::tag::INIT]));
    let dense = wcp::MessageBody::Dense(wcp::DensePayload::from_model(&w, width));
    let enc = wcp::wcp_encode(&mut w, &cfg.trainer.wcp(), None, cfg.seed)?;
    let centroid = wcp::MessageBody::Centroid(enc.payload);
    let measured_wcp_bytes = wcp::serialize(&centroid, layout, 1.0, 0, 0).len();
    let measured_dense_bytes = wcp::serialize(&dense, layout, 1.0, 0, 0).len();
    Ok(CostReport {
        params: layout.total_len(),
        clusters: cfg.trainer.clusters,
        value_bits: width.bits(),
        predicted_bits,
        header_bytes: wcp::HEADER_BYTES,
        measured_wcp_bytes,
        measured_dense_bytes,
        measured_ratio: measured_wcp_bytes as f64 / measured_dense_bytes as f64,
    })
}
