use serde::Serialize;

use crate::error::Result;
use crate::params::LayerLayout;
use crate::wcp::{validate_k, ValueWidth};

/// ⌈log₂ K⌉ for K ≥ 2.
pub fn index_bits(k: usize) -> u32 {
    debug_assert!(k >= 2);
    usize::BITS - (k - 1).leading_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCost {
    /// Dense transmission of every layer at `B` bits.
    pub full: u64,
    /// Centroid form: `(K−1)·B + d·⌈log₂K⌉` per compressible layer plus
    /// `d·B` per uncompressed layer.
    pub wcp: u64,
    pub ratio: f64,
}

pub fn comm_cost_bits(layout: &LayerLayout, k: usize, width: ValueWidth) -> Result<CommCost> {
    validate_k(k)?;
    let b = u64::from(width.bits());
    let idx = u64::from(index_bits(k));
    let mut full = 0u64;
    let mut wcp = 0u64;
    for layer in layout.layers() {
        let d = layer.len as u64;
        full += d * b;
        wcp += if layer.compressible { (k as u64 - 1) * b + d * idx } else { d * b };
    }
    Ok(CommCost { full, wcp, ratio: wcp as f64 / full as f64 })
}
