//! Sender-deduplicated, capacity-bounded FIFO of incoming messages.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that can sit in a [`MessageBuffer`].
pub trait Buffered {
    fn sender(&self) -> u32;
    fn mass(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Capacity `L`; 0 means unbounded.
    pub capacity: usize,
    /// Keep only the newest message per sender.
    pub dedup: bool,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self { capacity: 16, dedup: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionCause {
    /// Replaced by a newer message from the same sender.
    Superseded,
    /// Dropped as the oldest entry of a full buffer.
    Overflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<M> {
    pub msg: M,
    pub arrival_event: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evicted<M> {
    pub entry: Entry<M>,
    pub cause: EvictionCause,
}

#[derive(Debug, Clone)]
pub struct MessageBuffer<M> {
    cfg: BufferConfig,
    entries: VecDeque<Entry<M>>,
}

impl<M: Buffered> MessageBuffer<M> {
    pub fn new(cfg: BufferConfig) -> Self {
        Self { cfg, entries: VecDeque::new() }
    }

    pub fn config(&self) -> BufferConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry<M>> {
        self.entries.iter()
    }

    /// Inserts `msg` at the tail. Returns whatever had to leave the buffer,
    /// the superseded same-sender entry first, then overflow drops oldest
    /// first.
    pub fn insert(&mut self, msg: M, arrival_event: u64) -> Result<Vec<Evicted<M>>> {
        let mass = msg.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Protocol(format!(
                "message from sender {} carries mass {mass}",
                msg.sender()
            )));
        }
        let mut evicted = Vec::new();
        if self.cfg.dedup {
            if let Some(pos) = self.entries.iter().position(|e| e.msg.sender() == msg.sender()) {
                let entry = self.entries.remove(pos).expect("position is in range");
                evicted.push(Evicted { entry, cause: EvictionCause::Superseded });
            }
        }
        self.entries.push_back(Entry { msg, arrival_event });
        if self.cfg.capacity > 0 {
            while self.entries.len() > self.cfg.capacity {
                let entry = self.entries.pop_front().expect("buffer is non-empty");
                evicted.push(Evicted { entry, cause: EvictionCause::Overflow });
            }
        }
        Ok(evicted)
    }

    /// The most recently inserted entry.
    pub fn newest_mut(&mut self) -> Option<&mut Entry<M>> {
        self.entries.back_mut()
    }

    /// Removes and returns every entry in arrival order.
    pub fn drain(&mut self) -> Vec<Entry<M>> {
        self.entries.drain(..).collect()
    }
}
