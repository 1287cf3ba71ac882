//! Activation rates, delivery delays, delayed joins and the run horizon.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMode {
    /// Each client fires after exponential intervals at its own rate.
    Poisson,
    /// Clients fire one at a time in id order at a fixed cadence.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub activation: ActivationMode,
    /// Expected number of activations; sets the horizon.
    pub events: u64,
    /// Mean activations per client per unit of pseudo-time.
    pub base_rate: f64,
    /// Per-client rates are `base_rate` times a log-uniform factor in
    /// `[rate_min, rate_max]`.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Mean delivery delay as a fraction of the mean activation interval
    /// `1/base_rate`; zero delivers instantly.
    pub delay_fraction: f64,
    pub eval_ticks: usize,
    pub delayed_fraction: f64,
    /// Delayed clients join uniformly in `[0, join_window·T_end)`.
    pub join_window: f64,
    /// When set, aggregating a message older than this many activations is
    /// an error.
    pub staleness_cap: Option<u64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            activation: ActivationMode::Poisson,
            events: 10_000,
            base_rate: 1.0,
            rate_min: 0.5,
            rate_max: 2.0,
            delay_fraction: 0.1,
            eval_ticks: 60,
            delayed_fraction: 0.10,
            join_window: 0.5,
            staleness_cap: None,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return fail("base activation rate must be positive");
        }
        if !(self.rate_min > 0.0 && self.rate_min <= self.rate_max && self.rate_max.is_finite()) {
            return fail("rate factors need 0 < min ≤ max");
        }
        if !(self.delay_fraction >= 0.0 && self.delay_fraction.is_finite()) {
            return fail("delays must be non-negative");
        }
        if self.eval_ticks == 0 {
            return fail("at least one evaluation tick is required");
        }
        if !(0.0..1.0).contains(&self.delayed_fraction) {
            return fail("delayed fraction must lie in [0, 1)");
        }
        if !(self.join_window > 0.0 && self.join_window <= 1.0) {
            return fail("join window must lie in (0, 1]");
        }
        Ok(())
    }
}

/// The random but seed-fixed parts of a schedule. They depend only on the
/// seed and the client count, so every method sees the same rates, delayed
/// clients and join times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    pub rates: Vec<f64>,
    pub horizon: f64,
    /// Spacing of round-robin slots.
    pub slot: f64,
    /// `(client, join time)`, sorted by client.
    pub delayed: Vec<(u32, f64)>,
    pub mean_delay: f64,
}

impl Plan {
    pub fn new(spec: &ScheduleSpec, n: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, &[tag::SCHEDULE]);
        let (lo, hi) = (spec.rate_min.ln(), spec.rate_max.ln());
        let rates: Vec<f64> = (0..n)
            .map(|_| spec.base_rate * if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() })
            .collect();
        let slot = 1.0 / (spec.base_rate * n as f64);
        let horizon = match spec.activation {
            ActivationMode::Poisson => spec.events as f64 / rates.iter().sum::<f64>(),
            ActivationMode::RoundRobin => spec.events as f64 * slot,
        };
        let n_delayed = (spec.delayed_fraction * n as f64).round() as usize;
        if n_delayed >= n {
            return Err(Error::Config("every client would be delayed".into()));
        }
        let mut delayed: Vec<(u32, f64)> = index::sample(&mut rng, n, n_delayed)
            .into_iter()
            .map(|c| (c as u32, 0.0))
            .collect();
        delayed.sort_unstable_by_key(|d| d.0);
        for d in &mut delayed {
            d.1 = rng.random::<f64>() * spec.join_window * horizon;
        }
        Ok(Self { rates, horizon, slot, delayed, mean_delay: spec.delay_fraction / spec.base_rate })
    }

    pub fn join_time(&self, client: u32) -> Option<f64> {
        self.delayed.iter().find(|(c, _)| *c == client).map(|(_, t)| *t)
    }

    /// Time of the `k`-th evaluation tick, `k = 1..=ticks`.
    pub fn tick_time(&self, k: usize, ticks: usize) -> f64 {
        self.horizon * k as f64 / ticks as f64
    }
}

/// Exponential waiting time at `rate`.
pub fn exp_interval<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    Exp::new(rate).expect("rate validated positive").sample(rng)
}
