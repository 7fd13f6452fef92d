//! Space-filling-curve serialization of 3-D grid cells.
//!
//! Z-order keys interleave bits with `x` in the lowest position of each
//! triple. Hilbert keys use Skilling's transpose construction (axes are
//! converted to a Gray-coded transposed index, then interleaved with the
//! first axis most significant). The transposed variants rotate axes
//! `(x, y, z) -> (z, x, y)` before encoding with the base curve.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Point;

pub type Cell = [u32; 3];

pub const MAX_BITS: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CurveKind {
    Hilbert,
    HilbertTrans,
    Z,
    ZTrans,
}

impl CurveKind {
    pub const ALL: [CurveKind; 4] = [CurveKind::Hilbert, CurveKind::HilbertTrans, CurveKind::Z, CurveKind::ZTrans];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Hilbert => "hilbert",
            CurveKind::HilbertTrans => "hilbert-trans",
            CurveKind::Z => "z",
            CurveKind::ZTrans => "z-trans",
        }
    }

    fn is_transposed(self) -> bool {
        matches!(self, CurveKind::HilbertTrans | CurveKind::ZTrans)
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "hilbert" => Ok(CurveKind::Hilbert),
            "hilbert-trans" | "trans-hilbert" => Ok(CurveKind::HilbertTrans),
            "z" | "morton" => Ok(CurveKind::Z),
            "z-trans" | "trans-z" => Ok(CurveKind::ZTrans),
            other => Err(Error::invalid(format!("unknown curve kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CurveCode {
    pub key: u64,
    pub bits_per_axis: u32,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!("bits per axis must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

fn check_cell(cell: Cell, bits: u32) -> Result<()> {
    check_bits(bits)?;
    if let Some(&c) = cell.iter().find(|&&c| (c as u64) >> bits != 0) {
        return Err(Error::invalid(format!(
            "cell coordinate {c} overflows a {bits}-bit axis (cell {cell:?})"
        )));
    }
    Ok(())
}

fn check_code(code: CurveCode) -> Result<()> {
    check_bits(code.bits_per_axis)?;
    if code.key >> (3 * code.bits_per_axis) != 0 {
        return Err(Error::invalid(format!(
            "key {} exceeds 3x{} bits",
            code.key, code.bits_per_axis
        )));
    }
    Ok(())
}

/// Spreads the low 21 bits of `v` so bit `i` lands at bit `3i`.
fn spread3(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

fn compact3(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | x >> 2) & 0x10c3_0c30_c30c_30c3;
    x = (x | x >> 4) & 0x100f_00f0_0f00_f00f;
    x = (x | x >> 8) & 0x001f_0000_ff00_00ff;
    x = (x | x >> 16) & 0x001f_0000_0000_ffff;
    x = (x | x >> 32) & 0x1f_ffff;
    x as u32
}

pub fn z_encode(cell: Cell, bits: u32) -> Result<CurveCode> {
    check_cell(cell, bits)?;
    Ok(CurveCode {
        key: spread3(cell[0]) | spread3(cell[1]) << 1 | spread3(cell[2]) << 2,
        bits_per_axis: bits,
    })
}

pub fn z_decode(code: CurveCode) -> Result<Cell> {
    check_code(code)?;
    Ok([compact3(code.key), compact3(code.key >> 1), compact3(code.key >> 2)])
}

fn axes_to_transpose(x: &mut Cell, bits: u32) {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
}

fn transpose_to_axes(x: &mut Cell, bits: u32) {
    let n = 2u32 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

pub fn hilbert_encode(cell: Cell, bits: u32) -> Result<CurveCode> {
    check_cell(cell, bits)?;
    let mut x = cell;
    axes_to_transpose(&mut x, bits);
    let mut key = 0u64;
    for level in (0..bits).rev() {
        for v in x {
            key = key << 1 | ((v >> level) & 1) as u64;
        }
    }
    Ok(CurveCode {
        key,
        bits_per_axis: bits,
    })
}

pub fn hilbert_decode(code: CurveCode) -> Result<Cell> {
    check_code(code)?;
    let bits = code.bits_per_axis;
    let mut x = [0u32; 3];
    for level in 0..bits {
        for (i, v) in x.iter_mut().enumerate() {
            let bit = (code.key >> (3 * level + (2 - i as u32))) & 1;
            *v |= (bit as u32) << level;
        }
    }
    transpose_to_axes(&mut x, bits);
    Ok(x)
}

/// Cyclic axis rotation `(x, y, z) -> (z, x, y)`.
pub fn transpose_variant(cell: Cell) -> Cell {
    [cell[2], cell[0], cell[1]]
}

fn untranspose(cell: Cell) -> Cell {
    [cell[1], cell[2], cell[0]]
}

pub fn encode(kind: CurveKind, cell: Cell, bits: u32) -> Result<CurveCode> {
    let c = if kind.is_transposed() { transpose_variant(cell) } else { cell };
    match kind {
        CurveKind::Hilbert | CurveKind::HilbertTrans => hilbert_encode(c, bits),
        CurveKind::Z | CurveKind::ZTrans => z_encode(c, bits),
    }
}

pub fn decode(kind: CurveKind, code: CurveCode) -> Result<Cell> {
    let c = match kind {
        CurveKind::Hilbert | CurveKind::HilbertTrans => hilbert_decode(code)?,
        CurveKind::Z | CurveKind::ZTrans => z_decode(code)?,
    };
    Ok(if kind.is_transposed() { untranspose(c) } else { c })
}

/// Grid cell of a normalized point at `bits` per axis (floor, top clamped).
pub fn quantize(p: &Point, bits: u32) -> Cell {
    let side = (1u64 << bits) as f64;
    let max = (1u32 << bits) - 1;
    p.map(|c| ((c * side).floor().max(0.0) as u64).min(max as u64) as u32)
}

/// Order in which points are visited along a curve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializationOrder {
    pub kind: CurveKind,
    /// `permutation[s]` is the input index at sequence position `s`.
    pub permutation: Vec<usize>,
    pub codes: Vec<CurveCode>,
}

impl SerializationOrder {
    /// `inverse[i]` is the sequence position of input index `i`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (s, &i) in self.permutation.iter().enumerate() {
            inv[i] = s;
        }
        inv
    }
}

/// Sorts normalized points along a curve; points sharing a cell keep their
/// input order.
pub fn serialize_points(coords: &[Point], kind: CurveKind, bits: u32) -> Result<SerializationOrder> {
    check_bits(bits)?;
    if let Some(i) = coords
        .iter()
        .position(|p| p.iter().any(|v| !(0.0..=1.0).contains(v)))
    {
        return Err(Error::invalid(format!("serialize_points: point {i} is outside the unit cube")));
    }
    let keys = coords
        .iter()
        .map(|p| encode(kind, quantize(p, bits), bits))
        .collect::<Result<Vec<_>>>()?;
    let mut permutation: Vec<usize> = (0..coords.len()).collect();
    permutation.sort_by_key(|&i| (keys[i].key, i));
    let codes = permutation.iter().map(|&i| keys[i]).collect();
    Ok(SerializationOrder {
        kind,
        permutation,
        codes,
    })
}
