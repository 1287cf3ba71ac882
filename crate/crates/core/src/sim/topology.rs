//! Who a client pushes to.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    /// Each push goes to `fanout` online peers drawn without replacement.
    RandomGossip { fanout: usize },
    /// Client `i` pushes to `i + 1 mod N`.
    Ring,
    /// Explicit directed edges `(from, to)`.
    FixedDirected { edges: Vec<(u32, u32)> },
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::RandomGossip { fanout: 10 }
    }
}

impl TopologySpec {
    /// A ring `i → i+1` plus the given extra directed edges.
    pub fn ring_with_chords(n: u32, chords: &[(u32, u32)]) -> Self {
        let mut edges: Vec<(u32, u32)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        edges.extend_from_slice(chords);
        TopologySpec::FixedDirected { edges }
    }

    /// Whether any push can ever leave a client.
    pub fn communicates(&self) -> bool {
        match self {
            TopologySpec::RandomGossip { fanout } => *fanout > 0,
            TopologySpec::Ring => true,
            TopologySpec::FixedDirected { edges } => !edges.is_empty(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Topology {
    Gossip { n: usize, fanout: usize },
    Fixed { out: Vec<Vec<u32>> },
}

impl Topology {
    pub fn new(spec: &TopologySpec, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("topology needs at least one client".into()));
        }
        match spec {
            TopologySpec::RandomGossip { fanout } => {
                if *fanout > n - 1 {
                    return Err(Error::Config(format!("fanout {fanout} exceeds N−1 = {}", n - 1)));
                }
                Ok(Topology::Gossip { n, fanout: *fanout })
            }
            TopologySpec::Ring => Self::fixed(n, (0..n as u32).map(|i| (i, (i + 1) % n as u32)).collect()),
            TopologySpec::FixedDirected { edges } => Self::fixed(n, edges.clone()),
        }
    }

    fn fixed(n: usize, edges: Vec<(u32, u32)>) -> Result<Self> {
        let mut out = vec![Vec::new(); n];
        for (a, b) in edges {
            if a as usize >= n || b as usize >= n {
                return Err(Error::Config(format!("edge ({a}, {b}) outside {n} clients")));
            }
            if a == b {
                return Err(Error::Config(format!("self loop at {a}")));
            }
            if !out[a as usize].contains(&b) {
                out[a as usize].push(b);
            }
        }
        for list in &mut out {
            list.sort_unstable();
        }
        if n > 1 && !strongly_connected(&out) {
            return Err(Error::Config("fixed directed graph is not strongly connected".into()));
        }
        Ok(Topology::Fixed { out })
    }

    /// Out-neighbours for one push from `client`, restricted to online
    /// clients. Random gossip samples `fanout` distinct peers, or every
    /// online peer when fewer are available.
    pub fn sample_out_neighbors<R: Rng + ?Sized>(&self, client: u32, online: &[bool], rng: &mut R) -> Vec<u32> {
        match self {
            Topology::Gossip { n, fanout } => {
                let candidates: Vec<u32> =
                    (0..*n as u32).filter(|j| *j != client && online[*j as usize]).collect();
                if candidates.len() <= *fanout {
                    return candidates;
                }
                let mut picked: Vec<u32> =
                    index::sample(rng, candidates.len(), *fanout).into_iter().map(|k| candidates[k]).collect();
                picked.sort_unstable();
                picked
            }
            Topology::Fixed { out } => out[client as usize].iter().copied().filter(|j| online[*j as usize]).collect(),
        }
    }
}

fn reaches_all(adj: &[Vec<u32>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0u32]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v as usize] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                queue.push_back(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn strongly_connected(out: &[Vec<u32>]) -> bool {
    let mut rev = vec![Vec::new(); out.len()];
    for (a, list) in out.iter().enumerate() {
        for &b in list {
            rev[b as usize].push(a as u32);
        }
    }
    reaches_all(out) && reaches_all(&rev)
}
