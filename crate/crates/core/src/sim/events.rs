//! Time-ordered event queue with deterministic tie-breaking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::pushsum::DecodedMessage;

/// A message on its way to one receiver. `bytes` is what travels; every
/// recipient of one broadcast shares `decoded`, the result of parsing those
/// bytes once at send time.
#[derive(Debug, Clone)]
pub struct Packet {
    pub id: u64,
    pub dest: u32,
    pub bytes: Arc<[u8]>,
    pub decoded: Arc<DecodedMessage>,
}

#[derive(Debug, Clone)]
pub enum EventKind {
    Join(u32),
    Delivery(Packet),
    Activation(u32),
    EvalTick(usize),
}

impl EventKind {
    /// Order among events at the same instant.
    pub fn rank(&self) -> u8 {
        match self {
            EventKind::Join(_) => 0,
            EventKind::Delivery(_) => 1,
            EventKind::Activation(_) => 2,
            EventKind::EvalTick(_) => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.rank(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so that the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, ra, sa) = self.key();
        let (tb, rb, sb) = other.key();
        tb.total_cmp(&ta).then(rb.cmp(&ra)).then(sb.cmp(&sa))
    }
}

/// Pops events by `(time, kind rank, insertion sequence)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite() && time >= 0.0);
        self.heap.push(Event { time, seq: self.next_seq, kind });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(e: &Event) -> String {
        match &e.kind {
            EventKind::Join(c) => format!("join{c}"),
            EventKind::Delivery(p) => format!("deliver{}", p.id),
            EventKind::Activation(c) => format!("act{c}"),
            EventKind::EvalTick(k) => format!("tick{k}"),
        }
    }

    #[test]
    fn orders_by_time_then_rank_then_insertion() {
        let mut q = EventQueue::new();
        q.push(1.0, EventKind::EvalTick(0));
        q.push(1.0, EventKind::Activation(3));
        q.push(1.0, EventKind::Activation(1));
        q.push(0.5, EventKind::EvalTick(9));
        let layout = Arc::new(crate::params::LayerLayout::single("w", 1, true).unwrap());
        let decoded = Arc::new(DecodedMessage {
            id: 7,
            sender: 0,
            mass: 1.0,
            gen_event: 0,
            model: Arc::new(crate::params::ParamVector::zeros(layout)),
            tables: None,
        });
        q.push(1.0, EventKind::Delivery(Packet { id: 7, dest: 0, bytes: Arc::from(vec![]), decoded }));
        q.push(1.0, EventKind::Join(2));
        let order: Vec<String> = std::iter::from_fn(|| q.pop()).map(|e| tag(&e)).collect();
        assert_eq!(order, ["tick9", "join2", "deliver7", "act3", "act1", "tick0"]);
    }
}
