//! Flat parameter vectors with a named-layer layout.
//!
//! Every vector carries its [`LayerLayout`] and every binary operation checks
//! that both operands agree on it, so a topology or model mismatch fails at
//! the first arithmetic step instead of silently mixing unrelated tensors.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub len: usize,
    /// Compressible layers are WCP-encoded; the rest travel as raw values.
    pub compressible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerLayout {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl LayerLayout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("layout needs at least one layer".into()));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for (i, layer) in layers.iter().enumerate() {
            if layer.len == 0 {
                return Err(Error::Config(format!("layer `{}` has zero length", layer.name)));
            }
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::Config(format!("duplicate layer name `{}`", layer.name)));
            }
            offsets.push(total);
            total += layer.len;
        }
        Ok(Self { layers, offsets, total })
    }

    /// Builds a layout from tensor shapes. Tensors with two or more
    /// dimensions are compressible; vectors (biases) are not.
    pub fn from_shapes(shapes: &[(&str, &[usize])]) -> Result<Self> {
        let layers = shapes
            .iter()
            .map(|(name, shape)| LayerSpec {
                name: (*name).to_string(),
                len: shape.iter().product(),
                compressible: shape.len() >= 2,
            })
            .collect();
        Self::new(layers)
    }

    /// A single layer of `len` entries.
    pub fn single(name: &str, len: usize, compressible: bool) -> Result<Self> {
        Self::new(vec![LayerSpec { name: name.to_string(), len, compressible }])
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn range(&self, layer: usize) -> Range<usize> {
        let start = self.offsets[layer];
        start..start + self.layers[layer].len
    }

    /// Indices (into `layers()`) of compressible layers, in layout order.
    pub fn compressible(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| l.compressible).map(|(i, _)| i)
    }

    pub fn uncompressed(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| !l.compressible).map(|(i, _)| i)
    }

    pub fn num_compressible(&self) -> usize {
        self.compressible().count()
    }

    /// Stable 32-bit fingerprint carried in message headers.
    pub fn fingerprint(&self) -> u32 {
        // FNV-1a over names, lengths and flags.
        let mut h: u32 = 0x811c_9dc5;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u32::from(b);
                h = h.wrapping_mul(0x0100_0193);
            }
        };
        for l in &self.layers {
            feed(l.name.as_bytes());
            feed(&(l.len as u64).to_le_bytes());
            feed(&[u8::from(l.compressible)]);
        }
        h
    }
}

fn check_same(a: &LayerLayout, b: &LayerLayout, what: &str) -> Result<()> {
    if std::ptr::eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch(format!(
            "{what}: {} entries vs {} entries",
            a.total_len(),
            b.total_len()
        )))
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(Error::NonFinite(format!("{what}: entry {k} is {}", values[k]))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<LayerLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        check_finite(&values, "from_values")?;
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place updates by the single owner. Callers are
    /// expected to keep entries finite; see [`ParamVector::ensure_finite`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.range(layer)]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.range(layer);
        &mut self.values[r]
    }

    pub fn same_layout(&self, other: &ParamVector) -> Result<()> {
        check_same(&self.layout, &other.layout, "param vectors")
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.values, what)
    }

    /// `a·x + y`, leaving both inputs untouched.
    pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        x.same_layout(y)?;
        let values: Vec<f64> =
            x.values.iter().zip(&y.values).map(|(xi, yi)| a * xi + yi).collect();
        check_finite(&values, "axpy")?;
        Ok(ParamVector { layout: Arc::clone(&y.layout), values })
    }

    /// In-place `self += a·x`.
    pub fn add_scaled(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.same_layout(x)?;
        for (s, xi) in self.values.iter_mut().zip(&x.values) {
            *s += a * xi;
        }
        check_finite(&self.values, "add_scaled")
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        Self::axpy(-1.0, other, self)
    }

    pub fn apply_mask(&self, mask: &PruneMask) -> Result<ParamVector> {
        let mut out = self.clone();
        out.apply_mask_in_place(mask)?;
        Ok(out)
    }

    pub fn apply_mask_in_place(&mut self, mask: &PruneMask) -> Result<()> {
        check_same(&self.layout, &mask.layout, "mask")?;
        for (v, keep) in self.values.iter_mut().zip(&mask.bits) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(())
    }

    pub fn l2_dist_sq(&self, other: &ParamVector) -> Result<f64> {
        self.same_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Free-function forms mirroring the operation names used in the docs.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    ParamVector::axpy(a, x, y)
}

pub fn apply_mask(w: &ParamVector, m: &PruneMask) -> Result<ParamVector> {
    w.apply_mask(m)
}

pub fn l2_dist_sq(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.l2_dist_sq(y)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layout: Arc<LayerLayout>,
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn all(layout: Arc<LayerLayout>, keep: bool) -> Self {
        let bits = vec![keep; layout.total_len()];
        Self { layout, bits }
    }

    pub fn from_bits(layout: Arc<LayerLayout>, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "mask has {} bits, layout {}",
                bits.len(),
                layout.total_len()
            )));
        }
        Ok(Self { layout, bits })
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [bool] {
        let r = self.layout.range(layer);
        &mut self.bits[r]
    }

    pub fn count_kept(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}
