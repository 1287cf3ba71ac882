//! Versioned little-endian wire format for gossip messages.
//!
//! ```text
//! offset size field
//!      0    4 magic "PCWM"
//!      4    1 version (1)
//!      5    1 body kind (0 = centroid, 1 = dense)
//!      6    1 value width B in bits (16 | 32 | 64)
//!      7    4 K (u32, 0 for dense bodies)
//!     11    4 sender id (u32)
//!     15    8 generation event index (u64)
//!     23    8 push-sum mass share (f64)
//!     31    2 layer count (u16)
//!     33    4 layout fingerprint (u32)
//!     37      bit-packed body, LSB first, zero-padded to a whole byte
//! ```
//!
//! A centroid body holds, for each compressible layer in layout order, the
//! `K−1` nonzero centroids at `B` bits followed by the layer's assignments
//! at `⌈log₂K⌉` bits each, then every uncompressed layer at `B` bits per
//! value. A dense body is every value at `B` bits.

use std::sync::Arc;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector};
use crate::wcp::{
    index_bits, wcp_decode, AssignmentMap, BitReader, BitWriter, CentroidPayload, CentroidTable,
    DensePayload, ValueWidth,
};

pub const MAGIC: [u8; 4] = *b"PCWM";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 37;

const KIND_CENTROID: u8 = 0;
const KIND_DENSE: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Centroid(CentroidPayload),
    Dense(DensePayload),
}

impl MessageBody {
    pub fn decode(&self, layout: &Arc<LayerLayout>) -> Result<ParamVector> {
        match self {
            MessageBody::Centroid(p) => wcp_decode(p, layout),
            MessageBody::Dense(p) => p.decode(layout),
        }
    }

    pub fn tables(&self) -> Option<&CentroidTable> {
        match self {
            MessageBody::Centroid(p) => Some(&p.tables),
            MessageBody::Dense(_) => None,
        }
    }

    fn width(&self) -> ValueWidth {
        match self {
            MessageBody::Centroid(p) => p.width,
            MessageBody::Dense(p) => p.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub body: MessageBody,
    pub mass: f64,
    pub sender: u32,
    pub gen_event: u64,
}

pub fn serialize(body: &MessageBody, layout: &LayerLayout, mass: f64, sender: u32, gen_event: u64) -> Vec<u8> {
    let width = body.width();
    let b = width.bits();
    let mut header = [0u8; HEADER_BYTES];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = WIRE_VERSION;
    header[6] = b as u8;
    LittleEndian::write_u32(&mut header[11..15], sender);
    LittleEndian::write_u64(&mut header[15..23], gen_event);
    LittleEndian::write_f64(&mut header[23..31], mass);
    LittleEndian::write_u16(&mut header[31..33], layout.layers().len() as u16);
    LittleEndian::write_u32(&mut header[33..37], layout.fingerprint());

    let body_bytes = match body {
        MessageBody::Centroid(p) => {
            header[5] = KIND_CENTROID;
            LittleEndian::write_u32(&mut header[7..11], p.k() as u32);
            let idx = index_bits(p.k());
            let mut w = BitWriter::default();
            for (table, assign) in p.tables.layers().iter().zip(p.assignments.layers()) {
                for v in &table[1..] {
                    w.write(width.to_raw(*v), b);
                }
                for a in assign {
                    w.write(u64::from(*a), idx);
                }
            }
            for raw in &p.uncompressed {
                for v in raw {
                    w.write(width.to_raw(*v), b);
                }
            }
            w.finish()
        }
        MessageBody::Dense(p) => {
            header[5] = KIND_DENSE;
            let mut w = BitWriter::with_capacity_bits(p.values.len() * b as usize);
            for v in &p.values {
                w.write(width.to_raw(*v), b);
            }
            w.finish()
        }
    };
    let mut out = Vec::with_capacity(HEADER_BYTES + body_bytes.len());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body_bytes);
    out
}

pub fn deserialize(bytes: &[u8], layout: &LayerLayout) -> Result<WireMessage> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::CorruptPayload(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::CorruptPayload("bad magic".into()));
    }
    if bytes[4] != WIRE_VERSION {
        return Err(Error::CorruptPayload(format!("unsupported wire version {}", bytes[4])));
    }
    let width = ValueWidth::try_from(u32::from(bytes[6]))
        .map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let b = width.bits();
    let k = LittleEndian::read_u32(&bytes[7..11]) as usize;
    let sender = LittleEndian::read_u32(&bytes[11..15]);
    let gen_event = LittleEndian::read_u64(&bytes[15..23]);
    let mass = LittleEndian::read_f64(&bytes[23..31]);
    let layer_count = LittleEndian::read_u16(&bytes[31..33]) as usize;
    let fingerprint = LittleEndian::read_u32(&bytes[33..37]);
    if layer_count != layout.layers().len() || fingerprint != layout.fingerprint() {
        return Err(Error::LayoutMismatch(format!(
            "message built for a different layout ({layer_count} layers, fingerprint {fingerprint:#010x})"
        )));
    }
    let mut r = BitReader::new(&bytes[HEADER_BYTES..]);
    let body = match bytes[5] {
        KIND_CENTROID => {
            if !(2..=crate::wcp::MAX_CLUSTERS).contains(&k) {
                return Err(Error::CorruptPayload(format!("K={k} out of range")));
            }
            let idx = index_bits(k);
            let mut tables = Vec::with_capacity(layout.num_compressible());
            let mut assigns = Vec::with_capacity(layout.num_compressible());
            for l in layout.compressible() {
                let mut table = Vec::with_capacity(k);
                table.push(0.0);
                for _ in 1..k {
                    table.push(width.value_from_raw(r.read(b)?));
                }
                let n = layout.layers()[l].len;
                let mut assign = Vec::with_capacity(n);
                for _ in 0..n {
                    let a = r.read(idx)? as usize;
                    if a >= k {
                        return Err(Error::CorruptPayload(format!("index {a} ≥ K={k}")));
                    }
                    assign.push(a as u16);
                }
                tables.push(table);
                assigns.push(assign);
            }
            let mut uncompressed = Vec::new();
            for l in layout.uncompressed() {
                let n = layout.layers()[l].len;
                let mut raw = Vec::with_capacity(n);
                for _ in 0..n {
                    raw.push(width.value_from_raw(r.read(b)?));
                }
                uncompressed.push(raw);
            }
            MessageBody::Centroid(CentroidPayload {
                width,
                tables: CentroidTable::from_layers(k, tables)
                    .map_err(|e| Error::CorruptPayload(e.to_string()))?,
                assignments: AssignmentMap::from_layers(assigns),
                uncompressed,
            })
        }
        KIND_DENSE => {
            let n = layout.total_len();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(width.value_from_raw(r.read(b)?));
            }
            MessageBody::Dense(DensePayload { width, values })
        }
        other => return Err(Error::CorruptPayload(format!("unknown body kind {other}"))),
    };
    if r.bits_consumed().div_ceil(8) != bytes.len() - HEADER_BYTES {
        return Err(Error::CorruptPayload("trailing bytes after body".into()));
    }
    Ok(WireMessage { body, mass, sender, gen_event })
}
