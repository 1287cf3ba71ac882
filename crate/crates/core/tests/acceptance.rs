//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! to stderr (uncaptured) before asserting, so a full `cargo test` run shows
//! the whole report.
//!
//! The tests take a shared lock so wall-clock limits are measured without
//! competing simulations.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pushcen::buffer::{BufferConfig, Buffered, EvictionCause, MessageBuffer};
use pushcen::config::{EvictionPolicy, ExperimentConfig, InitMode, Method};
use pushcen::data::{self, Samples, Targets};
use pushcen::experiment::{ablation_report, Variant};
use pushcen::params::{LayerLayout, LayerSpec, ParamVector, PruneMask};
use pushcen::sim::schedule::ActivationMode;
use pushcen::sim::topology::TopologySpec;
use pushcen::sim::{self, MetricsLog};
use pushcen::trainer::{self, LeastSquares, Mlp, Objective, Softmax, TrainerConfig};
use pushcen::wcp::{self, comm_cost_bits, lloyd, MessageBody, ValueWidth, WcpConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Horizon of the multi-seed comparisons, in expected activations.
const COMPARISON_EVENTS: u64 = 5_000;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
}

struct DefaultRun {
    log: MetricsLog,
    elapsed: Duration,
}

/// The 20-client default configuration, shared by the conservation checks.
fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.data.clients, 20);
        assert_eq!(cfg.schedule.events, 10_000);
        let start = Instant::now();
        let log = sim::run(&cfg).expect("default run");
        DefaultRun { log, elapsed: start.elapsed() }
    })
}

#[test]
fn mass_is_conserved_over_the_default_run() {
    let _g = serial();
    let run = default_run();
    let s = &run.log.summary;
    let worst_row = run.log.rows.iter().map(|r| r.y_tot_drift).fold(0.0, f64::max);
    let drift = s.max_mass_drift.max(worst_row);
    let secs = run.elapsed.as_secs_f64();
    let pass = drift <= 1e-10 && secs < 30.0;
    report(
        "mass conservation",
        pass,
        &format!(
            "max |Y_tot + destroyed - N|/N = {drift:.2e} (limit 1e-10), {} activations, min mass {:.2e}, {secs:.1} s (limit 30 s)",
            s.activations, s.min_mass
        ),
    );
    assert!(pass);
}

#[test]
fn numerator_perturbation_stays_within_bound() {
    let _g = serial();
    let s = &default_run().log.summary;
    let pass = s.perturbation_violations == 0 && s.broadcasts > 0 && s.max_perturbation_ratio <= 1.0;
    report(
        "numerator perturbation",
        pass,
        &format!(
            "{} violations over {} broadcasts, largest measured/bound ratio {:.6}",
            s.perturbation_violations, s.broadcasts, s.max_perturbation_ratio
        ),
    );
    assert!(pass);
}

fn lossless_gossip(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.protocol.compression = false;
    cfg.protocol.training = false;
    cfg.protocol.dense_bits = ValueWidth::B64;
    cfg.protocol.init = InitMode::PerClient;
    cfg.protocol.eviction = EvictionPolicy::Merge;
    cfg.schedule.delayed_fraction = 0.0;
    cfg
}

#[test]
fn reference_average_is_preserved_without_compression_or_training() {
    let _g = serial();
    let cfg = lossless_gossip(ExperimentConfig::default());
    let shards = data::generate(&cfg.resolved().data).unwrap();
    let mut initial: Option<ParamVector> = None;
    let mut worst = 0.0f64;
    let mut probes = 0u64;
    let log = sim::run_observed(&cfg, &shards, &mut |p| {
        let w = &p.reference.model;
        match &initial {
            None => initial = Some(w.clone()),
            Some(w0) => worst = worst.max(w.sub(w0).unwrap().norm() / w0.norm()),
        }
        probes += 1;
    })
    .unwrap();
    let pass = worst <= 1e-10 && log.summary.activations >= 9_000;
    report(
        "average preservation",
        pass,
        &format!(
            "max |wbar_t - wbar_0|/|wbar_0| = {worst:.2e} (limit 1e-10) over {} activations",
            log.summary.activations
        ),
    );
    assert!(pass);
    assert_eq!(probes, log.summary.activations + 1);
}

#[test]
fn consensus_error_contracts_on_a_fixed_digraph() {
    let _g = serial();
    const N: u64 = 10;
    let mut cfg = lossless_gossip(ExperimentConfig::default());
    cfg.data.clients = N as usize;
    cfg.topology = TopologySpec::ring_with_chords(N as u32, &[(0, 5), (3, 8)]);
    cfg.schedule.activation = ActivationMode::RoundRobin;
    cfg.schedule.events = 50 * N;
    cfg.schedule.delay_fraction = 0.0;
    let shards = data::generate(&cfg.resolved().data).unwrap();
    let mut trace: Vec<f64> = Vec::new();
    sim::run_observed(&cfg, &shards, &mut |p| trace.push(p.reference.consensus_error)).unwrap();

    let e0 = trace[0];
    let after_burn_in = &trace[N as usize..];
    let rises = after_burn_in.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
    let first_below = trace.iter().position(|e| *e < 1e-8 * e0);
    let pass = trace.len() as u64 == 50 * N + 1 && rises == 0 && first_below.is_some();
    report(
        "consensus contraction",
        pass,
        &format!(
            "E_con_0 = {e0:.3e}, {rises} increases after {N} activations, below 1e-8*E_con_0 at activation {:?} (limit {}), final ratio {:.2e}",
            first_below,
            50 * N,
            trace.last().unwrap() / e0
        ),
    );
    assert!(pass);
}

#[test]
fn per_push_size_follows_the_cost_model() {
    let _g = serial();
    let layout = Arc::new(LayerLayout::single("weight", 10_000, true).unwrap());
    let cost = comm_cost_bits(&layout, 32, ValueWidth::B32).unwrap();
    let predicted_bytes = cost.wcp as f64 / 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sizes = Vec::new();
    for seed in 0..5u64 {
        let values: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let mut w = ParamVector::from_values(Arc::clone(&layout), values).unwrap();
        let enc = wcp::wcp_encode(&mut w, &WcpConfig::default(), None, seed).unwrap();
        let bytes = wcp::serialize(&MessageBody::Centroid(enc.payload), &layout, 0.5, 1, seed);
        sizes.push(bytes.len());
    }
    let gap = sizes.iter().map(|b| (*b as f64 - predicted_bytes).abs()).fold(0.0, f64::max);
    let ratio = sizes[0] as f64 * 8.0 / cost.full as f64;
    let pass = gap <= 64.0 && ratio <= 0.20 && sizes.iter().all(|s| *s == sizes[0]);
    report(
        "compression ratio",
        pass,
        &format!(
            "push = {} bytes, model = {predicted_bytes} bytes (gap {gap} <= 64), measured ratio {ratio:.4} <= 0.20",
            sizes[0]
        ),
    );
    assert!(pass);
}

fn random_layout(rng: &mut ChaCha8Rng) -> Arc<LayerLayout> {
    let layers = (0..rng.random_range(1..4))
        .map(|l| LayerSpec {
            name: format!("layer{l}"),
            len: rng.random_range(1..60),
            compressible: rng.random_bool(0.6),
        })
        .collect();
    Arc::new(LayerLayout::new(layers).unwrap())
}

/// Smallest zero-anchored k-means distortion over every labelling of the
/// points. Label 0 is centred at zero, the others at their mean.
fn brute_force_distortion(theta: &[f64], k: usize) -> f64 {
    let n = theta.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut d = 0.0;
        for c in 0..k {
            let members: Vec<f64> = theta.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(x, _)| *x).collect();
            if members.is_empty() {
                continue;
            }
            let centre = if c == 0 { 0.0 } else { members.iter().sum::<f64>() / members.len() as f64 };
            d += members.iter().map(|x| (x - centre) * (x - centre)).sum::<f64>();
        }
        best = best.min(d);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn encode_distortion(theta: &[f64], k: usize, seed: u64) -> (f64, Vec<f64>) {
    let layout = Arc::new(LayerLayout::single("w", theta.len(), true).unwrap());
    let mut w = ParamVector::from_values(layout, theta.to_vec()).unwrap();
    let cfg = WcpConfig { k, t_max: 20, width: ValueWidth::B64 };
    let enc = wcp::wcp_encode(&mut w, &cfg, None, seed).unwrap();
    let d = theta.iter().zip(w.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    (d, enc.payload.tables.layer(0).to_vec())
}

#[test]
fn codec_round_trips_and_clustering_matches_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut round_trips = 0;
    for i in 0..1000u64 {
        let layout = random_layout(&mut rng);
        let width = [ValueWidth::B16, ValueWidth::B32, ValueWidth::B64][rng.random_range(0..3)];
        let values: Vec<f64> = (0..layout.total_len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut w = ParamVector::from_values(Arc::clone(&layout), values).unwrap();
        let body = if rng.random_bool(0.2) {
            MessageBody::Dense(wcp::DensePayload::from_model(&w, width))
        } else {
            let k = rng.random_range(2..40);
            let enc = wcp::wcp_encode(&mut w, &WcpConfig { k, t_max: 20, width }, None, i).unwrap();
            MessageBody::Centroid(enc.payload)
        };
        let mass = rng.random_range(1e-9..4.0);
        let sender = rng.random::<u32>();
        let gen_event = rng.random::<u64>();
        let bytes = wcp::serialize(&body, &layout, mass, sender, gen_event);
        let back = wcp::deserialize(&bytes, &layout).unwrap();
        if back.body == body && back.mass == mass && back.sender == sender && back.gen_event == gen_event {
            round_trips += 1;
        }
    }

    let mut monotone = 0;
    for _ in 0..100 {
        let n = rng.random_range(5..300);
        let theta: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let k = rng.random_range(2..12);
        let mut init: Vec<f64> = (0..k).map(|_| theta[rng.random_range(0..n)]).collect();
        init[0] = 0.0;
        let out = lloyd(&theta, init, 20).unwrap();
        if out.trace.windows(2).all(|p| p[1] <= p[0]) && out.centroids[0] == 0.0 {
            monotone += 1;
        }
    }

    let mut worst_ratio = 1.0f64;
    for trial in 0..200u64 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=3);
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = brute_force_distortion(&theta, k);
        let (got, _) = encode_distortion(&theta, k, trial);
        let ratio = if oracle > 0.0 { got / oracle } else if got <= 1e-12 { 1.0 } else { f64::INFINITY };
        worst_ratio = worst_ratio.max(ratio);
    }

    let example = [0.1, 0.12, -0.5, -0.48, 0.0];
    let oracle = brute_force_distortion(&example, 3);
    let (got, table) = encode_distortion(&example, 3, 0);
    let exact = (got - oracle).abs() <= 1e-9
        && (table[1] - (-0.49)).abs() <= 1e-12
        && (table[2] - 0.11).abs() <= 1e-12;

    let pass = round_trips == 1000 && monotone == 100 && worst_ratio <= 1.05 && exact;
    report(
        "codec correctness",
        pass,
        &format!(
            "{round_trips}/1000 round trips, {monotone}/100 monotone Lloyd traces, worst distortion/oracle {worst_ratio:.6} (limit 1.05), seeded example centroids {table:?}"
        ),
    );
    assert!(pass);
}

#[derive(Debug, Clone)]
struct Msg {
    sender: u32,
    serial: u32,
}

impl Buffered for Msg {
    fn sender(&self) -> u32 {
        self.sender
    }
    fn mass(&self) -> f64 {
        1.0
    }
}

#[test]
fn buffer_semantics_hold_on_random_sequences() {
    let _g = serial();
    let mut runner = TestRunner::new(ProptestConfig { cases: 100_000, failure_persistence: None, ..ProptestConfig::default() });
    let strategy = (1usize..10, any::<bool>(), proptest::collection::vec(0u32..8, 0..40));
    let result = runner.run(&strategy, |(capacity, dedup, senders)| {
        let mut buf = MessageBuffer::new(BufferConfig { capacity, dedup });
        // Reference model of the buffer contents as serial numbers.
        let mut model: VecDeque<Msg> = VecDeque::new();
        for (serial, sender) in senders.into_iter().enumerate() {
            let msg = Msg { sender, serial: serial as u32 };
            let evicted = buf.insert(msg.clone(), serial as u64).unwrap();
            let mut expected: Vec<(u32, EvictionCause)> = Vec::new();
            if dedup {
                if let Some(pos) = model.iter().position(|m| m.sender == sender) {
                    expected.push((model.remove(pos).unwrap().serial, EvictionCause::Superseded));
                }
            }
            model.push_back(msg);
            while model.len() > capacity {
                expected.push((model.pop_front().unwrap().serial, EvictionCause::Overflow));
            }
            let got: Vec<(u32, EvictionCause)> = evicted.iter().map(|e| (e.entry.msg.serial, e.cause)).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(buf.len() <= capacity);
            let live: Vec<u32> = buf.iter().map(|e| e.msg.serial).collect();
            let want: Vec<u32> = model.iter().map(|m| m.serial).collect();
            prop_assert_eq!(live, want);
            if dedup {
                let mut senders: Vec<u32> = buf.iter().map(|e| e.msg.sender).collect();
                let before = senders.len();
                senders.sort_unstable();
                senders.dedup();
                prop_assert_eq!(senders.len(), before);
            }
        }
        Ok(())
    });
    let pass = result.is_ok();
    report(
        "buffer semantics",
        pass,
        &match &result {
            Ok(()) => "sender uniqueness, capacity bound and FIFO eviction hold on 100000 random sequences".to_string(),
            Err(e) => format!("{e}"),
        },
    );
    assert!(pass);
}

fn random_regression(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Samples {
    let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Samples::new(dim, features, Targets::Values(targets)).unwrap()
}

fn random_classes(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Samples {
    let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
    Samples::new(dim, features, Targets::Classes { num_classes: classes, labels }).unwrap()
}

#[test]
fn local_trainer_bounds_and_gradients_hold() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut updates_ok = 0;
    let mut steps = 0;
    let mut contraction_steps = 0;
    let mut worst_contraction = 0.0f64;
    let mut worst_drift = 0.0f64;
    for trial in 0..100u64 {
        let dim = rng.random_range(1..8);
        let objective = LeastSquares::new(dim).unwrap();
        let rows = rng.random_range(4..40);
        let data = random_regression(&mut rng, rows, dim);
        let layout = Arc::clone(objective.layout());
        let w0: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let anchor: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda: f64 = rng.random_range(0.01..2.0);
        let lr = rng.random_range(0.001..(0.5 / lambda).min(0.2));
        let cfg = TrainerConfig {
            lr,
            lambda,
            epochs: rng.random_range(1..4),
            batch_size: rng.random_range(1..10),
            ..TrainerConfig::default()
        };
        let mut w = ParamVector::from_values(Arc::clone(&layout), w0).unwrap();
        let anchor = ParamVector::from_values(Arc::clone(&layout), anchor).unwrap();
        let mask = PruneMask::all(layout, true);
        if let Ok(c) = trainer::run_epochs(&objective, &data, &mut w, &mask, Some(&anchor), &cfg, trial) {
            if c.contraction_checked == c.steps && c.drift_sq <= c.drift_bound * (1.0 + 1e-9) {
                updates_ok += 1;
            }
            steps += c.steps;
            contraction_steps += c.contraction_checked;
            worst_contraction = worst_contraction.max(c.max_contraction_ratio);
            worst_drift = worst_drift.max(c.drift_sq / c.drift_bound);
        }
    }

    let mut worst_grad = 0.0f64;
    let families: Vec<(Box<dyn Objective>, Samples)> = vec![
        (Box::new(LeastSquares::new(5).unwrap()), random_regression(&mut rng, 30, 5)),
        (Box::new(Softmax::new(5, 4).unwrap()), random_classes(&mut rng, 30, 5, 4)),
        (Box::new(Mlp::new(5, 6, 4).unwrap()), random_classes(&mut rng, 30, 5, 4)),
    ];
    for (objective, data) in &families {
        let w = objective.init_model(&mut rng);
        let mut anchor = w.clone();
        anchor.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        worst_grad = worst_grad.max(trainer::reg_gradient_check(objective.as_ref(), &w, &anchor, 0.1, data).unwrap());
    }

    let pass = updates_ok == 100 && worst_grad <= 1e-6;
    report(
        "local trainer checks",
        pass,
        &format!(
            "{updates_ok}/100 updates within bounds ({steps} steps, {contraction_steps} contraction checks, worst contraction ratio {worst_contraction:.4}, worst drift ratio {worst_drift:.4}), max gradient deviation {worst_grad:.2e} (limit 1e-6)"
        ),
    );
    assert!(pass);
}

/// `(client, running max accuracy)` for every delayed client of one run.
type DelayedMaxima = Vec<(u32, Option<f64>)>;

struct Comparison {
    /// `final_mean_acc` per method, per seed.
    acc: Vec<(Method, Vec<f64>)>,
    bytes: Vec<(Method, u64)>,
    /// Per seed: `(client, running max)` under pushcen and independent.
    delayed: Vec<(DelayedMaxima, DelayedMaxima)>,
    elapsed: Duration,
}

fn comparison() -> &'static Comparison {
    static RUN: OnceLock<Comparison> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let mut acc = Vec::new();
        let mut bytes = Vec::new();
        let mut delayed_by_method = Vec::new();
        for method in Method::ALL {
            let mut accs = Vec::new();
            let mut total = 0;
            let mut delayed = Vec::new();
            for seed in SEEDS {
                let mut cfg = ExperimentConfig { method, seed, ..ExperimentConfig::default() };
                cfg.data.alpha = 0.1;
                cfg.schedule.events = COMPARISON_EVENTS;
                let log = sim::run(&cfg).expect("comparison run");
                accs.push(log.summary.final_mean_acc);
                total += log.summary.cum_bytes;
                delayed.push(log.summary.delayed.iter().map(|d| (d.client, d.running_max_acc)).collect::<Vec<_>>());
            }
            acc.push((method, accs));
            bytes.push((method, total));
            delayed_by_method.push((method, delayed));
        }
        let take = |m: Method| delayed_by_method.iter().find(|(x, _)| *x == m).unwrap().1.clone();
        let delayed = take(Method::Pushcen).into_iter().zip(take(Method::Independent)).collect();
        Comparison { acc, bytes, delayed, elapsed: start.elapsed() }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn pushcen_beats_independent_at_a_fraction_of_the_traffic() {
    let _g = serial();
    let c = comparison();
    let acc = |m: Method| mean(&c.acc.iter().find(|(x, _)| *x == m).unwrap().1);
    let bytes = |m: Method| c.bytes.iter().find(|(x, _)| *x == m).unwrap().1;
    let (push, dfed, ind) = (acc(Method::Pushcen), acc(Method::AsyncDfedavg), acc(Method::Independent));
    let traffic = bytes(Method::Pushcen) as f64 / bytes(Method::AsyncDfedavg) as f64;
    let secs = c.elapsed.as_secs_f64();
    let pass = push - ind >= 0.05 && (dfed - push) <= 0.03 && traffic <= 0.25 && secs < 300.0;
    report(
        "end-to-end comparison",
        pass,
        &format!(
            "alpha 0.1, 5 seeds: pushcen {push:.4}, async-dfedavg {dfed:.4}, independent {ind:.4} (gain {:+.4} >= 0.05, gap to async-dfedavg {:+.4} <= 0.03), traffic ratio {traffic:.4} <= 0.25, {secs:.0} s (limit 300 s)",
            push - ind,
            dfed - push
        ),
    );
    assert!(pass);
}

#[test]
fn delayed_clients_gain_from_collaboration() {
    let _g = serial();
    let c = comparison();
    let mut winning_seeds = 0;
    let mut lines = Vec::new();
    for (seed, (push, ind)) in SEEDS.iter().zip(&c.delayed) {
        let all_win = !push.is_empty()
            && push.iter().zip(ind).all(|((cp, ap), (ci, ai))| {
                cp == ci && matches!((ap, ai), (Some(p), Some(i)) if p > i)
            });
        winning_seeds += usize::from(all_win);
        let pairs: Vec<String> = push
            .iter()
            .zip(ind)
            .map(|((c, p), (_, i))| format!("c{c} {:.2}/{:.2}", p.unwrap_or(f64::NAN), i.unwrap_or(f64::NAN)))
            .collect();
        lines.push(format!("seed {seed}: {}", pairs.join(" ")));
    }
    let mean_max = |pick: fn(&(DelayedMaxima, DelayedMaxima)) -> &DelayedMaxima| {
        let v: Vec<f64> = c.delayed.iter().flat_map(|p| pick(p).iter().filter_map(|(_, a)| *a)).collect();
        mean(&v)
    };
    let pass = winning_seeds >= 4;
    report(
        "delayed clients",
        pass,
        &format!(
            "every delayed client ahead in {winning_seeds}/5 seeds (need 4); mean running max pushcen {:.4} vs independent {:.4}; per client pushcen/independent: {}",
            mean_max(|p| &p.0),
            mean_max(|p| &p.1),
            lines.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn both_protocol_components_contribute() {
    let _g = serial();
    let mut base = ExperimentConfig::default();
    base.data.alpha = 0.4;
    base.schedule.events = COMPARISON_EVENTS;
    let report_rows = ablation_report(&base, &SEEDS, None).unwrap();
    let get = |v: Variant| report_rows.rows.iter().find(|r| r.variant == v).unwrap().mean_acc;
    let (full, no_reg, no_buffer) = (get(Variant::Full), get(Variant::NoReg), get(Variant::NoBuffer));
    let accs = |v: Variant| &report_rows.rows.iter().find(|r| r.variant == v).unwrap().accs;
    let seeds_ahead = |v: Variant| accs(Variant::Full).iter().zip(accs(v)).filter(|(f, a)| f >= a).count();
    let pass = full >= no_reg && full >= no_buffer;
    report(
        "ablation direction",
        pass,
        &format!(
            "alpha 0.4, 5 seeds: full {full:.4}, no_reg {no_reg:.4} (full ahead in {}/5 seeds), no_buffer {no_buffer:.4} (full ahead in {}/5 seeds)",
            seeds_ahead(Variant::NoReg),
            seeds_ahead(Variant::NoBuffer)
        ),
    );
    assert!(pass);
}

#[test]
fn runs_are_byte_for_byte_reproducible() {
    let _g = serial();
    let mut identical = 0;
    let mut total = 0;
    for method in Method::ALL {
        for seed in [7u64, 8] {
            let mut cfg = ExperimentConfig { method, seed, ..ExperimentConfig::default() };
            cfg.schedule.events = 800;
            let a = sim::run(&cfg).unwrap().to_csv().unwrap();
            let b = sim::run(&cfg).unwrap().to_csv().unwrap();
            total += 1;
            identical += usize::from(a == b && !a.is_empty());
        }
    }
    let pass = identical == total;
    report("determinism", pass, &format!("{identical}/{total} config+seed pairs gave byte-identical metrics CSVs"));
    assert!(pass);
}
