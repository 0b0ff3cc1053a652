//! Sequence-value assignment and fixed-width index key construction.
//!
//! Keys are `tid | svq | zv` packed most-significant-first into a `u64`, so
//! integer order equals lexicographic order on the three fields. The
//! baseline layout simply has a zero-width sequence field.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::policy::CompatibilityTable;
use crate::zcurve::ZValue;
use crate::UserId;

/// Per-user sequence values produced by [`assign_sequence_values`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceValueMap {
    values: HashMap<UserId, f64>,
    /// Users that opened a new group, in assignment order.
    anchors: Vec<UserId>,
    /// anchor through which each non-anchor user was assigned
    via: HashMap<UserId, UserId>,
    pub sv0: f64,
    pub delta: f64,
}

impl SequenceValueMap {
    pub fn get(&self, u: UserId) -> Option<f64> {
        self.values.get(&u).copied()
    }

    pub fn require(&self, u: UserId) -> Result<f64> {
        self.get(u).ok_or(Error::NoSequenceValue(u))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn anchors(&self) -> &[UserId] {
        &self.anchors
    }

    /// Anchor that assigned `u`, or `None` when `u` is itself an anchor.
    pub fn anchor_of(&self, u: UserId) -> Option<UserId> {
        self.via.get(&u).copied()
    }

    pub fn max_value(&self) -> f64 {
        self.values.values().copied().fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, f64)> + '_ {
        self.values.iter().map(|(&u, &v)| (u, v))
    }
}

/// Orders users by descending number of related users (ties by ascending
/// id), then walks the list: every still-unassigned user becomes an anchor
/// `delta` above the previous anchor (the first gets `sv0`), and each of its
/// unassigned related users lands at `SV(anchor) + (1 - C)`.
pub fn assign_sequence_values(users: &[UserId], compat: &CompatibilityTable, sv0: f64, delta: f64) -> SequenceValueMap {
    assert!(sv0 > 1.0 && delta > 1.0, "sv0 and delta must exceed 1");
    let mut order: Vec<(usize, UserId)> = users.iter().map(|&u| (compat.related_users(u).len(), u)).collect();
    order.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut values: HashMap<UserId, f64> = HashMap::with_capacity(users.len());
    let mut anchors = Vec::new();
    let mut via = HashMap::new();
    let mut prev_anchor: Option<f64> = None;
    for &(_, u) in &order {
        if values.contains_key(&u) {
            continue;
        }
        let sv = prev_anchor.map_or(sv0, |p| p + delta);
        values.insert(u, sv);
        anchors.push(u);
        prev_anchor = Some(sv);
        for &m in compat.related_users(u) {
            if let std::collections::hash_map::Entry::Vacant(e) = values.entry(m) {
                e.insert(sv + (1.0 - compat.get(u, m)));
                via.insert(m, u);
            }
        }
    }
    SequenceValueMap { values, anchors, via, sv0, delta }
}

/// Bit widths of the key fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyLayout {
    pub tid_bits: u32,
    pub sv_bits: u32,
    /// Fractional bits of the fixed-point sequence value.
    pub frac_bits: u32,
    pub z_bits: u32,
}

pub const DEFAULT_FRAC_BITS: u32 = 8;

fn bits_for(max: u64) -> u32 {
    (64 - max.leading_zeros()).max(1)
}

impl KeyLayout {
    /// Layout for policy-embedded keys able to hold sequence values up to `max_sv`.
    pub fn peb(partitions: u32, max_sv: f64, frac_bits: u32, z_bits: u32) -> Result<Self> {
        let tid_bits = bits_for(partitions.saturating_sub(1) as u64);
        let scaled = (max_sv * (1u64 << frac_bits) as f64).round();
        if !scaled.is_finite() || scaled < 0.0 || scaled >= 2f64.powi(63) {
            return Err(Error::BadSequenceValue(max_sv));
        }
        let sv_bits = bits_for(scaled as u64);
        let layout = Self { tid_bits, sv_bits, frac_bits, z_bits };
        layout.check_width()?;
        Ok(layout)
    }

    /// Layout for baseline keys: partition followed by the Z-value.
    pub fn bx(partitions: u32, z_bits: u32) -> Result<Self> {
        let layout = Self { tid_bits: bits_for(partitions.saturating_sub(1) as u64), sv_bits: 0, frac_bits: 0, z_bits };
        layout.check_width()?;
        Ok(layout)
    }

    fn check_width(&self) -> Result<()> {
        let total = self.tid_bits + self.sv_bits + self.z_bits;
        if total > 64 {
            return Err(Error::FieldOverflow { field: "key", value: total as u64, bits: 64 });
        }
        Ok(())
    }

    pub fn total_bits(&self) -> u32 {
        self.tid_bits + self.sv_bits + self.z_bits
    }

    /// Fixed-point form `round(sv * 2^frac_bits)`.
    pub fn quantize_sv(&self, sv: f64) -> Result<u64> {
        let scaled = (sv * (1u64 << self.frac_bits) as f64).round();
        if !scaled.is_finite() || scaled < 0.0 {
            return Err(Error::BadSequenceValue(sv));
        }
        let q = scaled as u64;
        if self.sv_bits < 64 && q >> self.sv_bits != 0 {
            return Err(Error::FieldOverflow { field: "sv", value: q, bits: self.sv_bits });
        }
        Ok(q)
    }

    fn check(field: &'static str, value: u64, bits: u32) -> Result<()> {
        if bits < 64 && value >> bits != 0 {
            return Err(Error::FieldOverflow { field, value, bits });
        }
        Ok(())
    }

    /// Concatenates already-quantized fields.
    pub fn compose(&self, tid: u32, svq: u64, zv: ZValue) -> Result<u64> {
        Self::check("tid", tid as u64, self.tid_bits)?;
        Self::check("sv", svq, self.sv_bits)?;
        Self::check("zv", zv, self.z_bits)?;
        Ok(self.compose_unchecked(tid, svq, zv))
    }

    #[inline]
    pub fn compose_unchecked(&self, tid: u32, svq: u64, zv: ZValue) -> u64 {
        ((tid as u64) << (self.sv_bits + self.z_bits)) | (svq << self.z_bits) | zv
    }

    pub fn peb_key(&self, tid: u32, sv: f64, zv: ZValue) -> Result<u64> {
        self.compose(tid, self.quantize_sv(sv)?, zv)
    }

    pub fn bx_key(&self, tid: u32, zv: ZValue) -> Result<u64> {
        self.compose(tid, 0, zv)
    }

    /// Inverse of [`KeyLayout::compose`]: `(tid, svq, zv)`.
    #[inline]
    pub fn split(&self, key: u64) -> (u32, u64, ZValue) {
        let z_mask = if self.z_bits == 64 { u64::MAX } else { (1u64 << self.z_bits) - 1 };
        let sv_mask = (1u64 << self.sv_bits) - 1;
        let tid = (key >> (self.sv_bits + self.z_bits)) as u32;
        (tid, (key >> self.z_bits) & sv_mask, key & z_mask)
    }

    pub fn z_max(&self) -> ZValue {
        (1u64 << self.z_bits) - 1
    }
}
