//! In-flight bit re-layout on the rank PU and the spoofed SPD timing that
//! hides its latency.
//!
//! Host data lands on the bus in address order: a group of `ratio =
//! elem_bits / chip_io_bits` beats carries `chips` whole elements, element
//! `e` occupying stream bits `[e·elem_bits, (e+1)·elem_bits)` where stream bit
//! `s` is bit `s % bus_bits` of beat `s / bus_bits`. Written as-is, every
//! element straddles `ratio` chips.
//!
//! Canonical permutation (per group): output beat `k`, chip lane `c`, lane
//! bit `j` takes input stream bit `c·elem_bits + k·chip_io_bits + j`. Chip `c`
//! therefore receives element `c` in its natural bit order, one
//! `chip_io_bits` slice per column. With `ratio == 1` this is the identity.
//! Host reads of re-laid-out data are never needed (KV is consumed by PIM
//! only), but [`inverse_relayout`] is provided for verification.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::DdrTiming;
use crate::error::RelayoutError;

pub const MAX_RATIO: u32 = 4;

/// One bus-wide beat of a burst.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BurstBeat {
    pub beat_index: u32,
    width: u32,
    words: Vec<u64>,
}

impl BurstBeat {
    pub fn zeros(width: u32, beat_index: u32) -> Self {
        Self { beat_index, width, words: vec![0; (width as usize).div_ceil(64)] }
    }

    /// Builds a beat from little-endian 64-bit words; bits beyond `width` are cleared.
    pub fn from_words(width: u32, beat_index: u32, words: &[u64]) -> Self {
        let mut b = Self::zeros(width, beat_index);
        for (dst, src) in b.words.iter_mut().zip(words) {
            *dst = *src;
        }
        b.mask_tail();
        b
    }

    /// Builds a beat from bytes, byte `i` holding bits `8i..8i+8`.
    pub fn from_bytes(width: u32, beat_index: u32, bytes: &[u8]) -> Self {
        let mut b = Self::zeros(width, beat_index);
        for (i, byte) in bytes.iter().enumerate().take((width as usize).div_ceil(8)) {
            b.words[i / 8] |= (*byte as u64) << (8 * (i % 8));
        }
        b.mask_tail();
        b
    }

    fn mask_tail(&mut self) {
        let rem = self.width % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..(self.width as usize).div_ceil(8))
            .map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8)
            .collect()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, v: bool) {
        let m = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= m;
        } else {
            self.words[i / 64] &= !m;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

/// Validated re-layout geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relayout {
    pub elem_bits: u32,
    pub chip_io_bits: u32,
    pub bus_bits: u32,
}

impl Relayout {
    pub fn new(elem_bits: u32, chip_io_bits: u32, bus_bits: u32) -> Result<Self, RelayoutError> {
        if chip_io_bits == 0 || elem_bits == 0 || !elem_bits.is_multiple_of(chip_io_bits) {
            return Err(RelayoutError::ElementWidth { elem_bits, chip_io_bits });
        }
        let ratio = elem_bits / chip_io_bits;
        if ratio > MAX_RATIO {
            return Err(RelayoutError::Ratio(ratio));
        }
        if bus_bits == 0 || !bus_bits.is_multiple_of(chip_io_bits) {
            return Err(RelayoutError::BeatWidth { expected: chip_io_bits, got: bus_bits });
        }
        Ok(Self { elem_bits, chip_io_bits, bus_bits })
    }

    pub fn ratio(&self) -> u32 {
        self.elem_bits / self.chip_io_bits
    }

    pub fn chips(&self) -> u32 {
        self.bus_bits / self.chip_io_bits
    }

    pub fn group_bits(&self) -> usize {
        (self.ratio() * self.bus_bits) as usize
    }

    /// Input stream bit (within a group) that lands on output stream bit `out`.
    pub fn source_of(&self, out: usize) -> usize {
        let bus = self.bus_bits as usize;
        let io = self.chip_io_bits as usize;
        let (k, b) = (out / bus, out % bus);
        let (c, j) = (b / io, b % io);
        c * self.elem_bits as usize + k * io + j
    }

    /// Output stream bit (within a group) that input stream bit `src` lands on.
    pub fn target_of(&self, src: usize) -> usize {
        let bus = self.bus_bits as usize;
        let io = self.chip_io_bits as usize;
        let elem = self.elem_bits as usize;
        let (c, rest) = (src / elem, src % elem);
        let (k, j) = (rest / io, rest % io);
        k * bus + c * io + j
    }

    /// `perm[out] = src` over one group.
    pub fn permutation(&self) -> Vec<usize> {
        (0..self.group_bits()).map(|o| self.source_of(o)).collect()
    }

    fn check_beats(&self, beats: &[BurstBeat]) -> Result<(), RelayoutError> {
        if let Some(b) = beats.iter().find(|b| b.width != self.bus_bits) {
            return Err(RelayoutError::BeatWidth { expected: self.bus_bits, got: b.width });
        }
        let r = self.ratio() as usize;
        if !beats.len().is_multiple_of(r) {
            return Err(RelayoutError::BeatCount {
                expected: beats.len().div_ceil(r) * r,
                got: beats.len(),
            });
        }
        Ok(())
    }

    fn apply(&self, beats: &[BurstBeat], forward: bool) -> Result<Vec<BurstBeat>, RelayoutError> {
        self.check_beats(beats)?;
        let r = self.ratio() as usize;
        if r == 1 {
            return Ok(beats.to_vec());
        }
        let bus = self.bus_bits as usize;
        let mut out: Vec<BurstBeat> = beats
            .iter()
            .map(|b| BurstBeat::zeros(self.bus_bits, b.beat_index))
            .collect();
        for g in 0..beats.len() / r {
            let base = g * r;
            for o in 0..self.group_bits() {
                let s = if forward { self.source_of(o) } else { self.target_of(o) };
                let v = beats[base + s / bus].bit(s % bus);
                out[base + o / bus].set_bit(o % bus, v);
            }
        }
        Ok(out)
    }

    /// Re-lays out any whole number of groups.
    pub fn forward(&self, beats: &[BurstBeat]) -> Result<Vec<BurstBeat>, RelayoutError> {
        self.apply(beats, true)
    }

    pub fn inverse(&self, beats: &[BurstBeat]) -> Result<Vec<BurstBeat>, RelayoutError> {
        self.apply(beats, false)
    }
}

/// Re-lays out two double-buffered beats. Requires `ratio ∈ {1, 2}`: with
/// ratio 1 each beat is its own group and passes through unchanged.
pub fn relayout_pair(
    beat_a: &BurstBeat,
    beat_b: &BurstBeat,
    elem_bits: u32,
    chip_io_bits: u32,
) -> Result<(BurstBeat, BurstBeat), RelayoutError> {
    if beat_a.width != beat_b.width {
        return Err(RelayoutError::BeatWidth { expected: beat_a.width, got: beat_b.width });
    }
    let r = Relayout::new(elem_bits, chip_io_bits, beat_a.width)?;
    if r.ratio() > 2 {
        return Err(RelayoutError::BeatCount { expected: r.ratio() as usize, got: 2 });
    }
    let mut out = r.forward(&[beat_a.clone(), beat_b.clone()])?;
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok((a, b))
}

/// Re-lays out a burst of `ratio`-beat groups.
pub fn relayout_burst(
    beats: &[BurstBeat],
    elem_bits: u32,
    chip_io_bits: u32,
) -> Result<Vec<BurstBeat>, RelayoutError> {
    let width = beats.first().map_or(chip_io_bits, |b| b.width);
    Relayout::new(elem_bits, chip_io_bits, width)?.forward(beats)
}

pub fn inverse_relayout(
    beats: &[BurstBeat],
    elem_bits: u32,
    chip_io_bits: u32,
) -> Result<Vec<BurstBeat>, RelayoutError> {
    let width = beats.first().map_or(chip_io_bits, |b| b.width);
    Relayout::new(elem_bits, chip_io_bits, width)?.inverse(beats)
}

/// Contents of each chip after a burst is written, one column per beat.
///
/// `provenance[c][p]` is the host stream bit (across the whole burst) that
/// ended up at bit `p` of chip `c`; it is what residency is judged on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipImage {
    pub chip_count: u32,
    pub chip_io_bits: u32,
    pub element_width_bits: u32,
    bits: Vec<Vec<bool>>,
    provenance: Vec<Vec<u32>>,
}

impl ChipImage {
    fn capture(
        beats: &[BurstBeat],
        chip_io_bits: u32,
        elem_bits: u32,
        source: impl Fn(usize) -> usize,
    ) -> Self {
        let bus = beats.first().map_or(chip_io_bits, |b| b.width) as usize;
        let io = chip_io_bits as usize;
        let chips = bus / io;
        let mut bits = vec![Vec::with_capacity(beats.len() * io); chips];
        let mut provenance = vec![Vec::with_capacity(beats.len() * io); chips];
        for (k, beat) in beats.iter().enumerate() {
            for c in 0..chips {
                for j in 0..io {
                    let out = k * bus + c * io + j;
                    bits[c].push(beat.bit(c * io + j));
                    provenance[c].push(source(out) as u32);
                }
            }
        }
        Self {
            chip_count: chips as u32,
            chip_io_bits,
            element_width_bits: elem_bits,
            bits,
            provenance,
        }
    }

    /// Image of a burst written without re-layout.
    pub fn conventional(beats: &[BurstBeat], chip_io_bits: u32, elem_bits: u32) -> Self {
        Self::capture(beats, chip_io_bits, elem_bits, |o| o)
    }

    /// Image of `input` written through the re-layout unit.
    pub fn relayouted(
        input: &[BurstBeat],
        chip_io_bits: u32,
        elem_bits: u32,
    ) -> Result<Self, RelayoutError> {
        let width = input.first().map_or(chip_io_bits, |b| b.width);
        let r = Relayout::new(elem_bits, chip_io_bits, width)?;
        let out = r.forward(input)?;
        let g = r.group_bits();
        Ok(Self::capture(&out, chip_io_bits, elem_bits, |o| (o / g) * g + r.source_of(o % g)))
    }

    pub fn chip_bits(&self, chip: usize) -> &[bool] {
        &self.bits[chip]
    }

    pub fn chip_provenance(&self, chip: usize) -> &[u32] {
        &self.provenance[chip]
    }

    /// Per-chip byte arrays (bit `p` of a chip → byte `p/8`, bit `p%8`).
    pub fn chip_bytes(&self, chip: usize) -> Vec<u8> {
        let bits = &self.bits[chip];
        let mut out = vec![0u8; bits.len().div_ceil(8)];
        for (p, &b) in bits.iter().enumerate() {
            if b {
                out[p / 8] |= 1 << (p % 8);
            }
        }
        out
    }

    pub fn total_bits(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }
}

/// An element whose bits are not contiguous within a single chip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidencyViolation {
    pub element: u32,
    pub chips_touched: Vec<u32>,
}

/// Empty iff every element's bits sit contiguously, in order, in one chip.
pub fn chip_residency_check(img: &ChipImage) -> Vec<ResidencyViolation> {
    use alloc::collections::BTreeMap;
    let elem = img.element_width_bits.max(1);
    // element -> (chips touched, (chip, position) per element bit)
    let mut seen: BTreeMap<u32, (Vec<u32>, Vec<(u32, usize)>)> = BTreeMap::new();
    for (c, prov) in img.provenance.iter().enumerate() {
        for (p, &src) in prov.iter().enumerate() {
            let e = seen.entry(src / elem).or_insert_with(|| (Vec::new(), vec![(u32::MAX, 0); elem as usize]));
            if !e.0.contains(&(c as u32)) {
                e.0.push(c as u32);
            }
            e.1[(src % elem) as usize] = (c as u32, p);
        }
    }
    let mut out = Vec::new();
    for (element, (chips, pos)) in seen {
        let contiguous = chips.len() == 1
            && pos.windows(2).all(|w| w[0].0 != u32::MAX && w[1].1 == w[0].1 + 1)
            && pos.last().is_some_and(|p| p.0 != u32::MAX);
        if !contiguous {
            out.push(ResidencyViolation { element, chips_touched: chips });
        }
    }
    out
}

/// SPD values the host reads versus what the DIMM actually needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpoofedSpd {
    pub reported_twl: u32,
    pub actual_twl: u32,
    pub reported_twr: u32,
    pub actual_twr: u32,
}

impl SpoofedSpd {
    pub fn relayout_cycles(&self) -> u32 {
        self.actual_twl - self.reported_twl
    }
}

pub fn spoofed_timing(actual: &DdrTiming, relayout_cycles: u32) -> Result<SpoofedSpd, RelayoutError> {
    if relayout_cycles >= actual.wl {
        return Err(RelayoutError::SpoofUnderflow { relayout: relayout_cycles, wl: actual.wl });
    }
    Ok(SpoofedSpd {
        reported_twl: actual.wl - relayout_cycles,
        actual_twl: actual.wl,
        reported_twr: actual.wr + relayout_cycles,
        actual_twr: actual.wr,
    })
}

/// Cycle stamps of one write burst issued at `issue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteTiming {
    /// First beat driven by the host.
    pub bus_start: u64,
    /// First beat presented to the DRAM chips.
    pub array_start: u64,
    /// Last beat written into the chips.
    pub complete: u64,
    /// Earliest PRE the host will issue to the bank.
    pub earliest_pre: u64,
}

/// Times a write as the host schedules it from the SPD it reads. With
/// `spd = None` the DIMM has no re-layout unit and reports actual timings.
pub fn timed_write(issue: u64, actual: &DdrTiming, spd: Option<&SpoofedSpd>) -> WriteTiming {
    let bl = actual.bl as u64;
    let (wl_rep, wr_rep, delay) = match spd {
        Some(s) => (s.reported_twl as u64, s.reported_twr as u64, s.relayout_cycles() as u64),
        None => (actual.wl as u64, actual.wr as u64, 0),
    };
    let bus_start = issue + wl_rep;
    let array_start = bus_start + delay;
    let complete = array_start + bl;
    WriteTiming { bus_start, array_start, complete, earliest_pre: bus_start + bl + wr_rep }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_beats(n: usize) -> Vec<BurstBeat> {
        (0..n)
            .map(|k| BurstBeat::from_words(64, k as u32, &[0x0123_4567_89ab_cdefu64.rotate_left(k as u32 * 8)]))
            .collect()
    }

    #[test]
    fn fp16_on_x8_pair_is_resident() {
        let beats = seq_beats(2);
        let img = ChipImage::relayouted(&beats, 8, 16).unwrap();
        assert!(chip_residency_check(&img).is_empty());
        assert_eq!(img.total_bits(), 128);
    }

    #[test]
    fn conventional_fp16_violates_every_element() {
        let beats = seq_beats(2);
        let img = ChipImage::conventional(&beats, 8, 16);
        let v = chip_residency_check(&img);
        assert_eq!(v.len(), 8);
        assert!(v.iter().all(|x| x.chips_touched.len() == 2));
    }

    #[test]
    fn chip_holds_whole_element() {
        // element e = 0xE0E0 + e in host order
        let mut bytes = Vec::new();
        for e in 0..8u16 {
            bytes.extend_from_slice(&(0xa000 + e).to_le_bytes());
        }
        let a = BurstBeat::from_bytes(64, 0, &bytes[..8]);
        let b = BurstBeat::from_bytes(64, 1, &bytes[8..]);
        let (x, y) = relayout_pair(&a, &b, 16, 8).unwrap();
        let (xb, yb) = (x.to_bytes(), y.to_bytes());
        for c in 0..8 {
            assert_eq!(u16::from_le_bytes([xb[c], yb[c]]), 0xa000 + c as u16);
        }
    }

    #[test]
    fn ratio_one_is_identity() {
        let beats = seq_beats(2);
        let (a, b) = relayout_pair(&beats[0], &beats[1], 8, 8).unwrap();
        assert_eq!((a, b), (beats[0].clone(), beats[1].clone()));
        assert!(chip_residency_check(&ChipImage::conventional(&beats, 8, 8)).is_empty());
    }

    #[test]
    fn zeros_stay_zero() {
        let z = BurstBeat::zeros(64, 0);
        let (a, b) = relayout_pair(&z, &z, 16, 8).unwrap();
        assert_eq!(a.count_ones() + b.count_ones(), 0);
    }

    #[test]
    fn forward_is_not_an_involution() {
        let beats = seq_beats(2);
        let once = relayout_burst(&beats, 16, 8).unwrap();
        let twice = relayout_burst(&once, 16, 8).unwrap();
        assert_ne!(twice, beats);
        assert_eq!(inverse_relayout(&once, 16, 8).unwrap(), beats);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert_eq!(Relayout::new(12, 8, 64), Err(RelayoutError::ElementWidth { elem_bits: 12, chip_io_bits: 8 }));
        assert_eq!(Relayout::new(64, 8, 64), Err(RelayoutError::Ratio(8)));
        let a = BurstBeat::zeros(64, 0);
        let b = BurstBeat::zeros(32, 1);
        assert!(matches!(relayout_pair(&a, &b, 16, 8), Err(RelayoutError::BeatWidth { .. })));
        assert!(matches!(relayout_burst(&seq_beats(3), 16, 8), Err(RelayoutError::BeatCount { .. })));
    }

    #[test]
    fn single_chip_always_resident() {
        let beats: Vec<_> = (0..4).map(|k| BurstBeat::from_words(8, k, &[0x5a])).collect();
        assert!(chip_residency_check(&ChipImage::conventional(&beats, 8, 32)).is_empty());
        assert!(chip_residency_check(&ChipImage::relayouted(&beats, 8, 32).unwrap()).is_empty());
    }

    #[test]
    fn spoof_values() {
        let d = DdrTiming::ddr4_3200();
        let s = spoofed_timing(&d, 1).unwrap();
        assert_eq!((s.reported_twl, s.reported_twr), (15, 25));
        let s0 = spoofed_timing(&d, 0).unwrap();
        assert_eq!((s0.reported_twl, s0.reported_twr), (16, 24));
        assert_eq!(
            spoofed_timing(&d, 16),
            Err(RelayoutError::SpoofUnderflow { relayout: 16, wl: 16 })
        );
    }

    #[test]
    fn relayout_adds_no_write_latency() {
        let d = DdrTiming::ddr4_3200();
        let s = spoofed_timing(&d, 1).unwrap();
        let plain = timed_write(100, &d, None);
        let spoof = timed_write(100, &d, Some(&s));
        assert_eq!(plain.complete, spoof.complete);
        assert_eq!(plain.earliest_pre, spoof.earliest_pre);
        assert_eq!(spoof.bus_start + 1, spoof.array_start);
    }
}
