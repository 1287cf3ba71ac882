//! Standalone invariant checks for one configuration.

use serde::Serialize;

use crate::config::{EvictionPolicy, ExperimentConfig, InitMode, Method};
use crate::data;
use crate::error::Result;
use crate::experiment::cost_report;
use crate::pushsum::MIN_MASS;
use crate::sim::{self, MASS_TOLERANCE};
use crate::trainer::reg_gradient_check;
use crate::wcp::{self, ValueWidth, HEADER_BYTES};

/// Cap on the events of the secondary runs so the suite stays quick.
const SHORT_RUN_EVENTS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

/// Runs every check against `cfg` (the method is forced to pushcen).
/// Invariant violations become failing checks; other errors are returned.
pub fn verify(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let cfg = ExperimentConfig { method: Method::Pushcen, ..cfg.clone() };
    let mut short = cfg.clone();
    short.schedule.events = short.schedule.events.min(SHORT_RUN_EVENTS);

    Ok(vec![conservation(&cfg)?, average_preservation(&short)?, codec(&cfg)?, gradient(&cfg)?, determinism(&short)?])
}

fn invariant_failure(name: &'static str, result: Result<Check>) -> Result<Check> {
    match result {
        Err(e) if e.is_invariant() => Ok(Check::new(name, false, e.to_string())),
        other => other,
    }
}

fn conservation(cfg: &ExperimentConfig) -> Result<Check> {
    let name = "mass conservation";
    invariant_failure(
        name,
        sim::run(cfg).map(|log| {
            let s = &log.summary;
            let pass = s.max_mass_drift <= MASS_TOLERANCE
                && s.min_mass >= MIN_MASS
                && s.perturbation_violations == 0
                && s.contraction_checks == s.local_steps;
            Check::new(
                name,
                pass,
                format!(
                    "{} activations, max mass drift {:.2e}, min mass {:.2e}, {} perturbation violations, staleness max {}",
                    s.activations, s.max_mass_drift, s.min_mass, s.perturbation_violations, s.staleness.max
                ),
            )
        }),
    )
}

fn average_preservation(cfg: &ExperimentConfig) -> Result<Check> {
    let name = "average preservation";
    let mut c = cfg.clone();
    c.protocol.compression = false;
    c.protocol.training = false;
    c.protocol.dense_bits = ValueWidth::B64;
    c.protocol.init = InitMode::PerClient;
    c.protocol.eviction = EvictionPolicy::Merge;
    c.schedule.delayed_fraction = 0.0;
    let shards = data::generate(&c.resolved().data)?;
    let mut initial = None;
    let mut worst = 0.0f64;
    let result = sim::run_observed(&c, &shards, &mut |p| {
        let w = &p.reference.model;
        match &initial {
            None => initial = Some(w.clone()),
            Some(w0) => {
                let dev = w.sub(w0).map(|d| d.norm() / w0.norm()).unwrap_or(f64::INFINITY);
                worst = worst.max(dev);
            }
        }
    });
    invariant_failure(
        name,
        result.map(|log| {
            Check::new(
                name,
                worst <= 1e-10,
                format!("max relative drift of the reference model {worst:.2e} over {} activations", log.summary.activations),
            )
        }),
    )
}

fn codec(cfg: &ExperimentConfig) -> Result<Check> {
    let report = cost_report(cfg)?;
    let predicted = report.predicted_bits.wcp.div_ceil(8) as usize + HEADER_BYTES;
    let layers = cfg.model.build(&cfg.data)?.layout().layers().len();
    let gap = report.measured_wcp_bytes.abs_diff(predicted);

    let r = cfg.resolved();
    let objective = r.model.build(&r.data)?;
    let layout = objective.layout();
    let mut w = objective.init_model(&mut crate::rng::stream(r.seed, &[crate::rng::tag::INIT]));
    let enc = wcp::wcp_encode(&mut w, &r.trainer.wcp(), None, r.seed)?;
    let body = wcp::MessageBody::Centroid(enc.payload);
    let bytes = wcp::serialize(&body, layout, 0.25, 3, 17);
    let back = wcp::deserialize(&bytes, layout)?;
    let round_trip = back.body == body && back.mass == 0.25 && back.sender == 3 && back.gen_event == 17;
    let decoded_matches = back.body.decode(layout)?.values() == w.values();

    Ok(Check::new(
        "codec",
        round_trip && decoded_matches && gap <= layers,
        format!(
            "{} bytes per push vs {predicted} predicted (gap {gap}), ratio {:.4}, round trip {}, reconstruction {}",
            report.measured_wcp_bytes,
            report.measured_ratio,
            if round_trip { "exact" } else { "differs" },
            if decoded_matches { "exact" } else { "differs" }
        ),
    ))
}

fn gradient(cfg: &ExperimentConfig) -> Result<Check> {
    let r = cfg.resolved();
    let objective = r.model.build(&r.data)?;
    let mut rng = crate::rng::stream(r.seed, &[crate::rng::tag::INIT]);
    let w = objective.init_model(&mut rng);
    let anchor = objective.init_model(&mut rng);
    let mut spec = r.data;
    spec.clients = 1;
    let shard = data::generate(&spec)?.remove(0);
    let lambda = if r.trainer.lambda > 0.0 { r.trainer.lambda } else { 0.1 };
    let deviation = reg_gradient_check(objective.as_ref(), &w, &anchor, lambda, &shard.train)?;
    Ok(Check::new(
        "regularized gradient",
        deviation <= 1e-6,
        format!("max deviation from central differences {deviation:.2e} at lambda {lambda}"),
    ))
}

fn determinism(cfg: &ExperimentConfig) -> Result<Check> {
    let name = "determinism";
    invariant_failure(
        name,
        sim::run(cfg).and_then(|a| {
            let b = sim::run(cfg)?;
            let same = a.to_csv()? == b.to_csv()?;
            Ok(Check::new(name, same, format!("two runs of {} activations gave {} metrics", a.summary.activations, if same { "identical" } else { "different" })))
        }),
    )
}
