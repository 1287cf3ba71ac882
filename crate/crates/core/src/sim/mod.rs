//! Deterministic event-driven simulation of asynchronous gossip training.
//!
//! The global event index counts activations: a message generated at
//! activation `κ` and aggregated at activation `t` has staleness `t − κ`.

pub mod events;
mod metrics;
pub mod schedule;
pub mod topology;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::buffer::{EvictionCause, MessageBuffer};
use crate::config::{EvictionPolicy, ExperimentConfig, InitMode, Method};
use crate::data::{self, ClientShard};
use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector};
use crate::pushsum::{self, DecodedMessage, PushSumState, Reference, SystemLedger, MIN_MASS};
use crate::rng::{mix_seed, stream, tag};
use crate::trainer::{self, Objective};
use crate::wcp::{self, DensePayload, MessageBody};

use events::{EventKind, EventQueue, Packet};
use schedule::{exp_interval, ActivationMode, Plan};
use topology::Topology;

pub use metrics::{
    enforce_staleness, staleness_report, write_manifest, DelayedClient, Manifest, MetricsLog, MetricsRow,
    RunSummary, StalenessReport,
};

/// Largest tolerated relative drift of total mass (plus destroyed mass).
pub const MASS_TOLERANCE: f64 = 1e-10;

struct Client {
    online: bool,
    delayed: bool,
    join_time: f64,
    state: PushSumState,
    buffer: MessageBuffer<DecodedMessage>,
    best_acc: Option<f64>,
    rng: ChaCha8Rng,
}

/// Generates the data for `cfg` and runs it.
pub fn run(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    let resolved = cfg.resolved();
    let shards = data::generate(&resolved.data)?;
    run_with_shards(cfg, &shards)
}

pub fn run_with_shards(cfg: &ExperimentConfig, shards: &[ClientShard]) -> Result<MetricsLog> {
    Engine::new(cfg, shards, None)?.run()
}

/// What an observer sees before the first event and after every activation.
#[derive(Debug)]
pub struct Probe<'p> {
    /// Activations so far; 0 for the initial probe.
    pub activation: u64,
    pub time: f64,
    /// De-biased reference and consensus error over the online clients. For
    /// methods without push-sum every client counts with unit mass.
    pub reference: &'p Reference,
    pub online: usize,
}

/// Like [`run_with_shards`], calling `observer` with a [`Probe`] at the start
/// and after every activation.
pub fn run_observed(
    cfg: &ExperimentConfig,
    shards: &[ClientShard],
    observer: &mut dyn FnMut(&Probe<'_>),
) -> Result<MetricsLog> {
    Engine::new(cfg, shards, Some(observer))?.run()
}

pub fn plan_for(cfg: &ExperimentConfig) -> Result<Plan> {
    let r = cfg.resolved();
    Plan::new(&r.schedule, r.data.clients, r.seed)
}

struct Engine<'a> {
    cfg: ExperimentConfig,
    objective: Box<dyn Objective>,
    layout: Arc<LayerLayout>,
    shards: &'a [ClientShard],
    topology: Topology,
    plan: Plan,
    queue: EventQueue,
    clients: Vec<Client>,
    ledger: SystemLedger,
    initial_models: Vec<ParamVector>,
    neighbor_rng: ChaCha8Rng,
    delay_rng: ChaCha8Rng,
    next_msg_id: u64,
    staleness: Vec<u64>,
    rows: Vec<MetricsRow>,
    summary: RunSummary,
    now: f64,
    observer: Option<&'a mut dyn FnMut(&Probe<'_>)>,
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &ExperimentConfig,
        shards: &'a [ClientShard],
        observer: Option<&'a mut dyn FnMut(&Probe<'_>)>,
    ) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let n = cfg.data.clients;
        if shards.len() != n {
            return Err(Error::Config(format!("{} shards for {n} clients", shards.len())));
        }
        let objective = cfg.model.build(&cfg.data)?;
        let layout = Arc::clone(objective.layout());
        let topology = Topology::new(&cfg.topology, n)?;
        let plan = Plan::new(&cfg.schedule, n, cfg.seed)?;

        let initial_models: Vec<ParamVector> = match cfg.protocol.init {
            InitMode::Shared => {
                let w = objective.init_model(&mut stream(cfg.seed, &[tag::INIT]));
                vec![w; n]
            }
            InitMode::PerClient => {
                (0..n).map(|c| objective.init_model(&mut stream(cfg.seed, &[tag::INIT, c as u64]))).collect()
            }
        };

        let mut summary = RunSummary { min_mass: f64::INFINITY, ..RunSummary::default() };
        let smoothness = objective.smoothness(&shards[0].train);
        if let Some(msg) = cfg.trainer.stepsize_warning(smoothness) {
            log::warn!("{msg}");
            summary.stepsize_warning = Some(msg);
        }

        let clients = (0..n)
            .map(|c| {
                let join = plan.join_time(c as u32);
                Client {
                    online: join.is_none(),
                    delayed: join.is_some(),
                    join_time: join.unwrap_or(0.0),
                    state: PushSumState::new(initial_models[c].clone(), cfg.trainer.clusters),
                    buffer: MessageBuffer::new(cfg.buffer),
                    best_acc: None,
                    rng: stream(cfg.seed, &[tag::SCHEDULE, c as u64]),
                }
            })
            .collect();

        Ok(Self {
            neighbor_rng: stream(cfg.seed, &[tag::NEIGHBORS]),
            delay_rng: stream(cfg.seed, &[tag::DELAY]),
            objective,
            layout,
            shards,
            topology,
            plan,
            queue: EventQueue::new(),
            clients,
            ledger: SystemLedger::new(),
            initial_models,
            next_msg_id: 0,
            staleness: Vec::new(),
            rows: Vec::new(),
            summary,
            now: 0.0,
            observer,
            cfg,
        })
    }

    fn pushsum(&self) -> bool {
        self.cfg.method == Method::Pushcen
    }

    fn run(mut self) -> Result<MetricsLog> {
        for c in 0..self.clients.len() {
            if self.clients[c].online {
                if self.pushsum() {
                    self.ledger.register_node(1.0);
                }
                self.schedule_activation(c as u32, 0.0);
            } else {
                self.queue.push(self.clients[c].join_time, EventKind::Join(c as u32));
            }
        }
        let ticks = self.cfg.schedule.eval_ticks;
        for k in 1..=ticks {
            self.queue.push(self.plan.tick_time(k, ticks), EventKind::EvalTick(k));
        }
        self.observe()?;

        while let Some(event) = self.queue.pop() {
            if event.time > self.plan.horizon {
                break;
            }
            self.now = event.time;
            let index = self.summary.activations;
            let is_activation = matches!(event.kind, EventKind::Activation(_));
            let outcome = match event.kind {
                EventKind::Join(c) => self.on_join(c),
                EventKind::Delivery(p) => self.on_delivery(p),
                EventKind::Activation(c) => self.on_activation(c),
                EventKind::EvalTick(k) => self.on_tick(k),
            };
            outcome.map_err(|e| e.at_event(index, event.time))?;
            if is_activation {
                self.observe().map_err(|e| e.at_event(index, event.time))?;
            }
        }
        self.finish()
    }

    fn schedule_activation(&mut self, c: u32, after: f64) {
        let next = match self.cfg.schedule.activation {
            ActivationMode::Poisson => {
                let client = &mut self.clients[c as usize];
                after + exp_interval(self.plan.rates[c as usize], &mut client.rng)
            }
            ActivationMode::RoundRobin => {
                // Slots (c + 1 + kN)·Δ belong to client c.
                let n = self.clients.len() as f64;
                let period = n * self.plan.slot;
                let first = (c as f64 + 1.0) * self.plan.slot;
                let mut k = (((after - first) / period).floor() + 1.0).max(0.0);
                // Rounding in the division can land on the current slot.
                while first + k * period <= after {
                    k += 1.0;
                }
                first + k * period
            }
        };
        if next <= self.plan.horizon {
            self.queue.push(next, EventKind::Activation(c));
        }
    }

    fn online_mask(&self) -> Vec<bool> {
        self.clients.iter().map(|c| c.online).collect()
    }

    fn on_join(&mut self, c: u32) -> Result<()> {
        let k = self.cfg.trainer.clusters;
        let client = &mut self.clients[c as usize];
        client.online = true;
        client.state = PushSumState::new(self.initial_models[c as usize].clone(), k);
        client.buffer = MessageBuffer::new(self.cfg.buffer);
        if self.pushsum() {
            self.ledger.register_node(1.0);
        }
        self.schedule_activation(c, self.now);
        Ok(())
    }

    fn on_delivery(&mut self, packet: Packet) -> Result<()> {
        let dest = packet.dest as usize;
        if !self.clients[dest].online {
            return Err(Error::Invariant(format!("delivery {} to offline client {dest}", packet.id)));
        }
        self.summary.deliveries += 1;
        let msg = DecodedMessage { id: packet.id, ..(*packet.decoded).clone() };
        let pushsum = self.pushsum();
        let policy = self.cfg.protocol.eviction;
        let event_index = self.summary.activations;
        let client = &mut self.clients[dest];
        let evicted = client.buffer.insert(msg, event_index)?;
        for ev in evicted {
            match ev.cause {
                EvictionCause::Superseded => self.summary.superseded += 1,
                EvictionCause::Overflow => self.summary.overflowed += 1,
            }
            if !pushsum {
                continue;
            }
            let old = ev.entry.msg;
            match (policy, ev.cause) {
                (EvictionPolicy::Drop, _) => {
                    self.ledger.destroy(old.id)?;
                }
                (EvictionPolicy::Merge, EvictionCause::Superseded) => {
                    let newest = client.buffer.newest_mut().expect("the new message was just inserted");
                    pushsum::merge_messages(&old, &mut newest.msg)?;
                    self.ledger.merge(old.id, newest.msg.id, Arc::clone(&newest.msg.model))?;
                }
                (EvictionPolicy::Reassign, EvictionCause::Superseded) => {
                    let newest = client.buffer.newest_mut().expect("the new message was just inserted");
                    newest.msg.mass += old.mass;
                    self.ledger.merge(old.id, newest.msg.id, Arc::clone(&newest.msg.model))?;
                }
                (EvictionPolicy::Reassign, EvictionCause::Overflow) => {
                    client.state.mass += self.ledger.consume(old.id)?;
                }
                (EvictionPolicy::Merge, EvictionCause::Overflow) => {
                    self.staleness.push(event_index - old.gen_event);
                    self.summary.aggregated_messages += 1;
                    pushsum::aggregate(&mut client.state, std::slice::from_ref(&old))?;
                    self.ledger.consume(old.id)?;
                }
            }
        }
        Ok(())
    }

    fn on_activation(&mut self, c: u32) -> Result<()> {
        self.summary.activations += 1;
        let t = self.summary.activations;
        let ci = c as usize;
        let method = self.cfg.method;
        let pushsum = self.pushsum();
        let seed = mix_seed(self.cfg.seed, &[tag::TRAIN, c as u64, t]);
        let trainer_cfg = self.cfg.trainer;
        let protocol = self.cfg.protocol;

        let msgs: Vec<DecodedMessage> = self.clients[ci].buffer.drain().into_iter().map(|e| e.msg).collect();
        for m in &msgs {
            self.staleness.push(t - m.gen_event);
        }
        self.summary.aggregated_messages += msgs.len() as u64;
        {
            let state = &mut self.clients[ci].state;
            match method {
                Method::Pushcen => {
                    pushsum::aggregate(state, &msgs)?;
                    for m in &msgs {
                        self.ledger.consume(m.id)?;
                    }
                }
                Method::AsyncDfedavg => pushsum::uniform_average(&mut state.model, &msgs)?,
                Method::Independent => {}
            }
        }
        drop(msgs);

        let shard = &self.shards[ci];
        let state = &mut self.clients[ci].state;
        let compress = pushsum && protocol.compression;
        let payload = if compress {
            let encoded = if protocol.training {
                let out = trainer::local_update(state, self.objective.as_ref(), &shard.train, &trainer_cfg, seed)?;
                record_checks(&mut self.summary, &out.checks);
                out.encoded
            } else {
                let wcp_seed = mix_seed(seed, &[tag::WCP, 1]);
                let enc = wcp::wcp_encode(&mut state.model, &trainer_cfg.wcp(), Some(&state.dictionary), wcp_seed)?;
                state.mask = enc.mask.clone();
                enc
            };
            Some(MessageBody::Centroid(encoded.payload))
        } else {
            if protocol.training {
                let checks = trainer::plain_update(&mut state.model, self.objective.as_ref(), &shard.train, &trainer_cfg, seed)?;
                record_checks(&mut self.summary, &checks);
            }
            (method != Method::Independent)
                .then(|| MessageBody::Dense(DensePayload::from_model(&state.model, protocol.dense_bits)))
        };

        let dests = match payload {
            Some(_) if self.cfg.topology.communicates() => {
                let online = self.online_mask();
                self.topology.sample_out_neighbors(c, &online, &mut self.neighbor_rng)
            }
            _ => Vec::new(),
        };
        if let (Some(body), false) = (payload, dests.is_empty()) {
            self.broadcast(c, t, body, &dests)?;
        }

        if pushsum {
            let mass = self.clients[ci].state.mass;
            self.summary.min_mass = self.summary.min_mass.min(mass);
            if mass < MIN_MASS {
                return Err(Error::Invariant(format!("client {c} mass {mass:e} fell below {MIN_MASS:e}")));
            }
            let drift = self.mass_drift();
            self.summary.max_mass_drift = self.summary.max_mass_drift.max(drift);
            if drift > MASS_TOLERANCE {
                return Err(Error::Invariant(format!("total mass drifted by {drift:e}")));
            }
        }
        self.schedule_activation(c, self.now);
        Ok(())
    }

    fn broadcast(&mut self, c: u32, t: u64, body: MessageBody, dests: &[u32]) -> Result<()> {
        let ci = c as usize;
        let ids: Vec<u64> = (0..dests.len() as u64).map(|k| self.next_msg_id + k).collect();
        self.next_msg_id += dests.len() as u64;
        let before = self.clients[ci].state.mass;
        let share = if self.pushsum() { pushsum::split_mass(&mut self.clients[ci].state, dests.len()).1 } else { 1.0 };
        let bytes: Arc<[u8]> = Arc::from(wcp::serialize(&body, &self.layout, share, c, t));
        let wire = wcp::deserialize(&bytes, &self.layout)?;
        let decoded = Arc::new(DecodedMessage {
            id: ids[0],
            sender: wire.sender,
            mass: wire.mass,
            gen_event: wire.gen_event,
            model: Arc::new(wire.body.decode(&self.layout)?),
            tables: wire.body.tables().cloned().map(Arc::new),
        });
        if self.pushsum() {
            let state = &self.clients[ci].state;
            self.ledger.record_broadcast(before, state.mass, share, &ids, &decoded.model, &state.model)?;
        }
        let size = bytes.len() as u64;
        if self.summary.broadcasts == 0 {
            self.summary.min_push_bytes = size;
        }
        self.summary.min_push_bytes = self.summary.min_push_bytes.min(size);
        self.summary.max_push_bytes = self.summary.max_push_bytes.max(size);
        self.summary.broadcasts += 1;
        for (id, dest) in ids.into_iter().zip(dests) {
            self.summary.cum_bytes += size;
            let delay = if self.plan.mean_delay > 0.0 {
                exp_interval(1.0 / self.plan.mean_delay, &mut self.delay_rng)
            } else {
                0.0
            };
            let arrival = self.now + delay;
            if arrival <= self.plan.horizon {
                let packet = Packet { id, dest: *dest, bytes: Arc::clone(&bytes), decoded: Arc::clone(&decoded) };
                self.queue.push(arrival, EventKind::Delivery(packet));
            }
        }
        Ok(())
    }

    fn online_masses(&self) -> Vec<f64> {
        self.clients.iter().filter(|c| c.online).map(|c| c.state.mass).collect()
    }

    fn mass_drift(&self) -> f64 {
        if self.ledger.expected_mass() == 0.0 {
            return 0.0;
        }
        self.ledger.mass_drift(self.online_masses())
    }

    fn on_tick(&mut self, _k: usize) -> Result<()> {
        let mut accs = Vec::new();
        let mut loss_sum = 0.0;
        for (c, client) in self.clients.iter_mut().enumerate() {
            if !client.online {
                continue;
            }
            let (loss, acc) = data::local_eval(self.objective.as_ref(), &client.state.model, &self.shards[c])?;
            loss_sum += loss;
            accs.push((c as u32, acc));
            if client.delayed {
                client.best_acc = Some(client.best_acc.map_or(acc, |b| b.max(acc)));
            }
        }
        let online = accs.len();
        let reference = self.reference()?;
        let mut wbar_loss = 0.0;
        for (c, client) in self.clients.iter().enumerate() {
            if client.online {
                wbar_loss += data::local_eval(self.objective.as_ref(), &reference.model, &self.shards[c])?.0;
            }
        }
        let mean_acc = accs.iter().map(|(_, a)| a).sum::<f64>() / online as f64;
        self.rows.push(MetricsRow {
            time: self.now,
            mean_acc,
            mean_loss: loss_sum / online as f64,
            e_con: reference.consensus_error,
            y_tot_drift: self.mass_drift(),
            destroyed_mass: self.ledger.destroyed_mass(),
            cum_bytes: self.summary.cum_bytes,
            max_staleness: self.staleness.iter().copied().max().unwrap_or(0),
            online,
            activations: self.summary.activations,
            y_tot: reference.total_mass,
            wbar_loss: wbar_loss / online as f64,
        });
        self.summary.final_client_acc = accs;
        Ok(())
    }

    fn reference(&self) -> Result<Reference> {
        let pushsum = self.pushsum();
        let nodes = self
            .clients
            .iter()
            .filter(|c| c.online)
            .map(|c| (if pushsum { c.state.mass } else { 1.0 }, &c.state.model));
        if pushsum {
            self.ledger.reference(nodes)
        } else {
            SystemLedger::new().reference(nodes)
        }
    }

    fn observe(&mut self) -> Result<()> {
        if self.observer.is_none() {
            return Ok(());
        }
        let reference = self.reference()?;
        let probe = Probe {
            activation: self.summary.activations,
            time: self.now,
            reference: &reference,
            online: self.clients.iter().filter(|c| c.online).count(),
        };
        if let Some(observer) = self.observer.as_mut() {
            observer(&probe);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<MetricsLog> {
        let s = &mut self.summary;
        if s.broadcasts > 0 && s.min_push_bytes == s.max_push_bytes {
            s.per_push_bytes = Some(s.min_push_bytes);
        }
        if s.min_mass == f64::INFINITY {
            s.min_mass = 0.0;
        }
        s.destroyed_mass = self.ledger.destroyed_mass();
        s.merged_mass = self.ledger.merged_mass();
        s.max_perturbation_ratio = self.ledger.max_perturbation_ratio();
        s.perturbation_violations = self.ledger.perturbation_violations();
        if let Some(last) = self.rows.last() {
            s.final_mean_acc = last.mean_acc;
        }
        let accs: Vec<f64> = s.final_client_acc.iter().map(|(_, a)| *a).collect();
        s.final_acc_sd = population_sd(&accs);
        s.delayed = self
            .clients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.delayed)
            .map(|(i, c)| DelayedClient { client: i as u32, join_time: c.join_time, running_max_acc: c.best_acc })
            .collect();
        s.staleness = staleness_report(&self.staleness);
        enforce_staleness(&s.staleness, self.cfg.schedule.staleness_cap)?;
        Ok(MetricsLog { rows: self.rows, staleness: self.staleness, summary: self.summary })
    }
}

fn record_checks(summary: &mut RunSummary, checks: &trainer::StepChecks) {
    summary.local_steps += checks.steps as u64;
    summary.contraction_checks += checks.contraction_checked as u64;
    summary.max_contraction_ratio = summary.max_contraction_ratio.max(checks.max_contraction_ratio);
    if checks.drift_bound > 0.0 {
        summary.max_drift_ratio = summary.max_drift_ratio.max(checks.drift_sq / checks.drift_bound);
    }
}

pub fn population_sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}
