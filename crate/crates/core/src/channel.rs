//! Dual-rate packet coding of `{condition, bank index}` and a seeded
//! binary-symmetric channel.
//!
//! Packet layout before coding, all fields most-significant-bit first:
//!
//! ```text
//! version:4  (bit 3 = run-length flag, bits 0..3 = format 1)
//! K-1:4
//! H:16  W:16  N:32
//! condition length in bits:32
//! condition bits
//! index bits (ceil(log2 N))
//! ```
//!
//! Header and condition go through the strong code, the index through the
//! weak code. A packed packet is the coded bit string padded with zeros to a
//! whole number of bytes.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::semantics::{SemanticCondition, MAX_CLASSES};

pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_BITS: usize = 104;
const RLE_FLAG: u8 = 0b1000;
const LABEL_BITS: usize = 4;

/// Bit-level repetition code. `Repetition(1)` is the same as `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    None,
    /// Each bit sent `n` times (odd `n`), decoded by majority vote.
    Repetition(usize),
}

impl Code {
    pub fn factor(&self) -> usize {
        match *self {
            Code::None => 1,
            Code::Repetition(n) => n,
        }
    }

    /// Errors per group that majority decoding always corrects.
    pub fn correctable(&self) -> usize {
        (self.factor() - 1) / 2
    }

    fn validate(&self) -> Result<()> {
        let n = self.factor();
        if n == 0 || n.is_multiple_of(2) {
            return Err(Error::config(format!(
                "repetition factor must be odd and positive, got {n}"
            )));
        }
        Ok(())
    }

    fn encode(&self, bits: &[bool], out: &mut Vec<bool>) {
        let n = self.factor();
        for &b in bits {
            out.extend(std::iter::repeat_n(b, n));
        }
    }

    /// Majority-decodes `coded`, returning the bits and the number of groups
    /// that were not unanimous.
    fn decode(&self, coded: &[bool]) -> (Vec<bool>, usize) {
        let n = self.factor();
        let mut repaired = 0;
        let bits = coded
            .chunks_exact(n)
            .map(|g| {
                let ones = g.iter().filter(|&&b| b).count();
                if ones != 0 && ones != n {
                    repaired += 1;
                }
                2 * ones > n
            })
            .collect();
        (bits, repaired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub strong: Code,
    pub weak: Code,
    /// Run-length code segmentation rows instead of 4 bits per pixel.
    pub run_length: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            strong: Code::Repetition(5),
            weak: Code::None,
            run_length: false,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        self.strong.validate()?;
        self.weak.validate()
    }
}

/// `ceil(log2 n)`; zero for `n <= 1`.
pub fn index_bits(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Bits needed for a run length in `1..=width`, stored minus one.
fn run_bits(width: usize) -> usize {
    index_bits(width)
}

#[derive(Default)]
struct BitWriter {
    bits: Vec<bool>,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: usize) {
        for i in (0..width).rev() {
            self.bits.push((value >> i) & 1 == 1);
        }
    }
}

struct BitReader<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bits: &'a [bool]) -> Self {
        BitReader { bits, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bits.len() - self.pos
    }

    fn read(&mut self, width: usize) -> Option<u64> {
        if self.remaining() < width {
            return None;
        }
        let v = self.bits[self.pos..self.pos + width]
            .iter()
            .fold(0u64, |acc, &b| (acc << 1) | b as u64);
        self.pos += width;
        Some(v)
    }
}

fn serialize_condition(m: &SemanticCondition, run_length: bool) -> Vec<bool> {
    let mut w = BitWriter::default();
    let (h, width) = (m.height(), m.width());
    let seg = m.segmentation();
    if run_length {
        let rb = run_bits(width);
        for row in seg.chunks_exact(width).take(h) {
            let mut start = 0;
            while start < width {
                let label = row[start];
                let mut end = start + 1;
                while end < width && row[end] == label {
                    end += 1;
                }
                w.push(label as u64, LABEL_BITS);
                w.push((end - start - 1) as u64, rb);
                start = end;
            }
        }
    } else {
        for &l in seg {
            w.push(l as u64, LABEL_BITS);
        }
    }
    for &e in m.edges() {
        w.push(e as u64, 1);
    }
    w.bits
}

/// Uncoded size of the serialized condition.
pub fn condition_bits(m: &SemanticCondition, run_length: bool) -> usize {
    if run_length {
        serialize_condition(m, true).len()
    } else {
        m.height() * m.width() * (LABEL_BITS + 1)
    }
}

fn coded_index_len(n: usize, config: &CodecConfig) -> usize {
    index_bits(n) * config.weak.factor()
}

/// Coded packet bits, unpadded.
pub fn encode_packet(
    m: &SemanticCondition,
    index: usize,
    n: usize,
    config: &CodecConfig,
) -> Result<Vec<bool>> {
    config.validate()?;
    if n == 0 || n > u32::MAX as usize {
        return Err(Error::config(format!("bank size {n} not encodable")));
    }
    if index >= n {
        return Err(Error::OutOfRange {
            what: "bank index",
            value: index as u64,
            range: format!("0..{n}"),
        });
    }
    let k = m.num_classes();
    if k > MAX_CLASSES {
        return Err(Error::config(format!("class count {k} exceeds {MAX_CLASSES}")));
    }
    if m.height() > u16::MAX as usize || m.width() > u16::MAX as usize {
        return Err(Error::config("condition dimensions exceed 16-bit header fields"));
    }
    let cond = serialize_condition(m, config.run_length);
    let version = FORMAT_VERSION | if config.run_length { RLE_FLAG } else { 0 };

    let mut plain = BitWriter::default();
    plain.push(version as u64, 4);
    plain.push((k - 1) as u64, 4);
    plain.push(m.height() as u64, 16);
    plain.push(m.width() as u64, 16);
    plain.push(n as u64, 32);
    plain.push(cond.len() as u64, 32);
    plain.bits.extend_from_slice(&cond);

    let mut idx = BitWriter::default();
    idx.push(index as u64, index_bits(n));

    let mut out = Vec::with_capacity(
        plain.bits.len() * config.strong.factor() + coded_index_len(n, config),
    );
    config.strong.encode(&plain.bits, &mut out);
    config.weak.encode(&idx.bits, &mut out);
    Ok(out)
}

/// Where the weak-coded index sits inside an unpadded coded packet of
/// `total` bits.
pub fn index_region(total: usize, n: usize, config: &CodecConfig) -> Range<usize> {
    let len = coded_index_len(n, config).min(total);
    total - len..total
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeDiagnostics {
    /// Strong-code groups that disagreed internally and were majority-voted.
    pub strong_groups_repaired: usize,
    pub weak_groups_repaired: usize,
    /// Decoded labels ≥ K, replaced by K−1.
    pub labels_clamped: usize,
    /// Raw index field was ≥ N and got reduced modulo N.
    pub index_wrapped: bool,
    /// Bits after the index field (byte padding).
    pub padding_bits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPacket {
    pub condition: SemanticCondition,
    pub index: usize,
    pub bank_size: usize,
    pub run_length: bool,
    pub diagnostics: DecodeDiagnostics,
}

fn lost(msg: impl Into<String>) -> Error {
    Error::PacketLost(msg.into())
}

struct Header {
    run_length: bool,
    k: usize,
    h: usize,
    w: usize,
    n: usize,
    cond_len: usize,
}

fn parse_header(bits: &[bool]) -> Result<Header> {
    let mut r = BitReader::new(bits);
    let mut field = |w| r.read(w).expect("header length checked");
    let version = field(4) as u8;
    let k = field(4) as usize + 1;
    let h = field(16) as usize;
    let w = field(16) as usize;
    let n = field(32) as usize;
    let cond_len = field(32) as usize;
    if version & !RLE_FLAG != FORMAT_VERSION {
        return Err(lost(format!("unknown format version {}", version & !RLE_FLAG)));
    }
    if h == 0 || w == 0 {
        return Err(lost(format!("empty condition {h}x{w}")));
    }
    if n == 0 {
        return Err(lost("bank size 0"));
    }
    Ok(Header {
        run_length: version & RLE_FLAG != 0,
        k,
        h,
        w,
        n,
        cond_len,
    })
}

fn parse_condition(
    bits: &[bool],
    hd: &Header,
    diag: &mut DecodeDiagnostics,
) -> Result<SemanticCondition> {
    let plane = hd.h * hd.w;
    let mut r = BitReader::new(bits);
    let mut clamp = |l: u64| -> u8 {
        if l as usize >= hd.k {
            diag.labels_clamped += 1;
            (hd.k - 1) as u8
        } else {
            l as u8
        }
    };
    let mut seg = Vec::with_capacity(plane);
    if hd.run_length {
        let rb = run_bits(hd.w);
        for y in 0..hd.h {
            let mut filled = 0;
            while filled < hd.w {
                let (label, run) = match (r.read(LABEL_BITS), r.read(rb)) {
                    (Some(l), Some(n)) => (l, n as usize + 1),
                    _ => return Err(lost(format!("run-length row {y} truncated"))),
                };
                if filled + run > hd.w {
                    return Err(lost(format!("run-length row {y} overflows width {}", hd.w)));
                }
                let l = clamp(label);
                seg.extend(std::iter::repeat_n(l, run));
                filled += run;
            }
        }
    } else {
        for _ in 0..plane {
            let l = r.read(LABEL_BITS).expect("condition length checked");
            seg.push(clamp(l));
        }
    }
    if r.remaining() != plane {
        return Err(lost(format!(
            "condition length {} inconsistent with {}x{} maps",
            hd.cond_len, hd.h, hd.w
        )));
    }
    let edges = (0..plane)
        .map(|_| r.read(1).expect("remaining checked") as u8)
        .collect();
    SemanticCondition::new(hd.k, hd.h, hd.w, seg, edges)
}

/// Decodes a coded packet, optionally followed by up to 7 padding bits.
pub fn decode_packet(bits: &[bool], config: &CodecConfig) -> Result<DecodedPacket> {
    config.validate()?;
    let sf = config.strong.factor();
    let header_coded = HEADER_BITS * sf;
    if bits.len() < header_coded {
        return Err(lost(format!(
            "{} bits cannot hold the {header_coded}-bit coded header",
            bits.len()
        )));
    }
    let mut diag = DecodeDiagnostics::default();
    let (header, repaired) = config.strong.decode(&bits[..header_coded]);
    diag.strong_groups_repaired += repaired;
    let hd = parse_header(&header)?;

    let plane = hd.h as u64 * hd.w as u64;
    let min_cond = if hd.run_length {
        plane + hd.h as u64 * (LABEL_BITS + run_bits(hd.w)) as u64
    } else {
        plane * (LABEL_BITS as u64 + 1)
    };
    if (hd.cond_len as u64) < min_cond || (!hd.run_length && hd.cond_len as u64 != min_cond) {
        return Err(lost(format!(
            "condition length {} impossible for {}x{} maps",
            hd.cond_len, hd.h, hd.w
        )));
    }
    let cond_coded = hd.cond_len as u64 * sf as u64;
    let idx_coded = coded_index_len(hd.n, config) as u64;
    let needed = header_coded as u64 + cond_coded + idx_coded;
    if (bits.len() as u64) < needed {
        return Err(lost(format!(
            "packet has {} bits, header announces {needed}",
            bits.len()
        )));
    }
    let padding = bits.len() as u64 - needed;
    if padding >= 8 {
        return Err(lost(format!("{padding} bits beyond the announced packet length")));
    }
    diag.padding_bits = padding as usize;

    let cond_end = header_coded + cond_coded as usize;
    let (cond, repaired) = config.strong.decode(&bits[header_coded..cond_end]);
    diag.strong_groups_repaired += repaired;
    let condition = parse_condition(&cond, &hd, &mut diag)?;

    let (idx, repaired) = config.weak.decode(&bits[cond_end..cond_end + idx_coded as usize]);
    diag.weak_groups_repaired += repaired;
    let raw = BitReader::new(&idx).read(idx.len()).unwrap_or(0);
    diag.index_wrapped = raw >= hd.n as u64;
    let index = (raw % hd.n as u64) as usize;

    Ok(DecodedPacket {
        condition,
        index,
        bank_size: hd.n,
        run_length: hd.run_length,
        diagnostics: diag,
    })
}

/// MSB-first packing, zero-padded to a byte boundary.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)))
        })
        .collect()
}

pub fn unpack_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&byte| (0..8).rev().map(move |i| (byte >> i) & 1 == 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    BinarySymmetric,
}

/// Seeded bit-flip channel. Successive transmissions continue the same
/// random stream.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    kind: ChannelKind,
    p: f64,
    seed: u64,
    rng: rng::Rng,
}

impl ChannelModel {
    pub fn binary_symmetric(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&p) {
            return Err(Error::config(format!("crossover probability {p} outside [0, 0.5]")));
        }
        Ok(ChannelModel {
            kind: ChannelKind::BinarySymmetric,
            p,
            seed,
            rng: rng::seeded(rng::derive_seed(seed, rng::stream::CHANNEL, 0)),
        })
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn crossover(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Flips each bit independently with probability `p`.
    pub fn transmit(&mut self, bits: &[bool]) -> Vec<bool> {
        self.transmit_range(bits, 0..bits.len())
    }

    /// Like [`transmit`](Self::transmit) but only bits inside `range` are
    /// exposed to the channel.
    pub fn transmit_range(&mut self, bits: &[bool], range: Range<usize>) -> Vec<bool> {
        let mut out = bits.to_vec();
        let end = range.end.min(bits.len());
        for b in &mut out[range.start.min(end)..end] {
            if self.rng.gen::<f64>() < self.p {
                *b = !*b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadReport {
    /// Sending `x_T` itself as uncoded 32-bit floats.
    pub raw_latent_bits: u64,
    pub header_bits: u64,
    pub condition_bits: u64,
    pub index_bits: u64,
    pub coded_header_condition_bits: u64,
    pub coded_index_bits: u64,
    pub coded_total_bits: u64,
    pub packet_bytes: u64,
}

impl PayloadReport {
    /// How many times larger the raw latent is than the index field.
    pub fn latent_to_index_ratio(&self) -> f64 {
        self.raw_latent_bits as f64 / self.index_bits.max(1) as f64
    }
}

pub fn payload_report(
    m: &SemanticCondition,
    n: usize,
    image_channels: usize,
    config: &CodecConfig,
) -> PayloadReport {
    let d = (image_channels * m.height() * m.width()) as u64;
    let cond = condition_bits(m, config.run_length) as u64;
    let idx = index_bits(n) as u64;
    let coded_hc = (HEADER_BITS as u64 + cond) * config.strong.factor() as u64;
    let coded_idx = idx * config.weak.factor() as u64;
    let total = coded_hc + coded_idx;
    PayloadReport {
        raw_latent_bits: d * 32,
        header_bits: HEADER_BITS as u64,
        condition_bits: cond,
        index_bits: idx,
        coded_header_condition_bits: coded_hc,
        coded_index_bits: coded_idx,
        coded_total_bits: total,
        packet_bytes: total.div_ceil(8),
    }
}
