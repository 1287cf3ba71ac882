//! Centroid-compressed, push-sum de-biased asynchronous gossip learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`params`]: flat parameter vectors with a layer layout.
//! * [`wcp`]: weight clustering pruning, the wire format and its cost model.
//! * [`pushsum`]: push-sum aggregation, mass splitting and the system ledger.
//! * [`buffer`]: the sender-deduplicated bounded message buffer.
//! * [`trainer`]: objectives and the anchored local update.
//! * [`data`]: synthetic non-IID client shards.
//! * [`sim`]: the deterministic event-driven simulator.
//! * [`config`]: the TOML run configuration.
//! * [`experiment`]: experiment matrices and ablations.
//! * [`verify`]: standalone invariant checks for one configuration.

pub mod buffer;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod params;
pub mod pushsum;
pub mod rng;
pub mod sim;
pub mod trainer;
pub mod verify;
pub mod wcp;

pub use error::{Error, Result};
