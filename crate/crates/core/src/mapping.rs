//! Physical placement of K and V vectors.
//!
//! * Layers of a request rotate over ranksets, heads of a layer over channels.
//! * K: token `t` of a head goes to logic bank `t % banks`; its slice on every
//!   chip is `bursts_per_token` column-contiguous bursts at the same
//!   (row, col) on all chips.
//! * V: the token's per-chip slice is cut into one-burst segments spread over
//!   `v_spread` banks. Banks form `banks / v_spread` sets; token `t` uses set
//!   `t % sets`, so tokens `t` and `t + sets` put segment `i` at the same bank,
//!   one slot apart.
//!
//! Each admitted request receives, per (rankset, channel), a contiguous run of
//! rows holding one K area and one V area per (layer, head) it owns there.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{HwTopology, LlmModel, BANK_READ_BYTES};
use crate::error::MappingError;

/// Rankset holding `layer` of `request_id`; the request id staggers the start.
pub fn rankset_for_layer(request_id: u64, layer: u32, topo: &HwTopology) -> u32 {
    let r = topo.ranksets() as u64;
    ((request_id % r + layer as u64) % r) as u32
}

pub fn channel_for_head(head: u32, topo: &HwTopology) -> u32 {
    head % topo.channels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChipSel {
    /// Same offsets on every chip of the rank (logic-bank access).
    All,
    One(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BankAddress {
    pub rankset: u32,
    pub channel: u32,
    /// Rank index within the channel; equals the rankset index.
    pub rank: u32,
    pub chip: ChipSel,
    pub bank: u32,
    pub row: u32,
    /// Column offset in 64-bit bursts.
    pub col_offset: u32,
}

/// `bursts` consecutive bursts starting at `addr` (per chip).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressSpan {
    pub addr: BankAddress,
    pub bursts: u32,
}

/// Geometry every placement computation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingGeometry {
    pub ranksets: u32,
    pub channels: u32,
    pub banks: u32,
    pub chips: u32,
    pub layers: u32,
    pub heads: u32,
    /// Bursts per chip per row.
    pub row_bursts: u32,
    pub rows_per_bank: u32,
    /// Bursts per chip per token of one head.
    pub bursts_per_token: u32,
    pub v_spread: u32,
    /// K+V bytes of one token of one (layer, head).
    pub head_token_bytes: u64,
}

impl MappingGeometry {
    pub fn new(topo: &HwTopology, m: &LlmModel, v_spread: u32) -> Result<Self, MappingError> {
        let per_chip = m.head_dim() as u64 * m.precision_bytes as u64;
        let burst = topo.chips_per_rank as u64 * BANK_READ_BYTES;
        if !per_chip.is_multiple_of(burst) {
            return Err(MappingError::BurstAlignment { bytes: per_chip / topo.chips_per_rank as u64 });
        }
        let bursts_per_token = (per_chip / burst) as u32;
        let banks = topo.banks_per_rank();
        if !v_spread.is_power_of_two() || v_spread > banks || !bursts_per_token.is_multiple_of(v_spread) {
            return Err(MappingError::VSpread(v_spread));
        }
        Ok(Self {
            ranksets: topo.ranksets(),
            channels: topo.channels,
            banks,
            chips: topo.chips_per_rank,
            layers: m.layers,
            heads: m.heads,
            row_bursts: (topo.row_bytes_per_chip as u64 / BANK_READ_BYTES) as u32,
            rows_per_bank: topo.rows_per_bank,
            bursts_per_token,
            v_spread,
            head_token_bytes: 2 * per_chip,
        })
    }

    pub fn v_sets(&self) -> u32 {
        self.banks / self.v_spread
    }

    /// Bursts each V bank receives per token.
    pub fn v_bursts_per_bank(&self) -> u32 {
        self.bursts_per_token / self.v_spread
    }

    pub fn k_tokens_per_row(&self) -> u32 {
        self.row_bursts / self.bursts_per_token
    }

    pub fn v_slots_per_row(&self) -> u32 {
        self.row_bursts / self.v_bursts_per_bank()
    }

    pub fn k_rows(&self, tokens: u64) -> u32 {
        let slots = tokens.div_ceil(self.banks as u64);
        slots.div_ceil(self.k_tokens_per_row() as u64) as u32
    }

    pub fn v_rows(&self, tokens: u64) -> u32 {
        let slots = tokens.div_ceil(self.v_sets() as u64);
        slots.div_ceil(self.v_slots_per_row() as u64) as u32
    }

    /// Layers of a request that land on `rankset` (independent of stagger up
    /// to a rotation).
    pub fn layers_on(&self, request_id: u64, rankset: u32) -> u32 {
        let r = self.ranksets;
        let first = (rankset + r - (request_id % r as u64) as u32) % r;
        if first >= self.layers {
            0
        } else {
            (self.layers - first).div_ceil(r)
        }
    }

    pub fn heads_on(&self, channel: u32) -> u32 {
        if channel >= self.heads {
            0
        } else {
            (self.heads - channel).div_ceil(self.channels)
        }
    }
}

/// Rows reserved for one (layer, head) of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvRegion {
    pub rankset: u32,
    pub channel: u32,
    pub k_base_row: u32,
    pub v_base_row: u32,
    /// Token capacity of the region.
    pub capacity: u64,
}

/// Address of token `token`'s K slice inside `region`.
pub fn place_k_vector(token: u64, g: &MappingGeometry, region: &KvRegion) -> Result<AddressSpan, MappingError> {
    if token >= region.capacity {
        return Err(MappingError::CapacityExceeded { token, capacity: region.capacity });
    }
    let bank = (token % g.banks as u64) as u32;
    let slot = token / g.banks as u64;
    let per_row = g.k_tokens_per_row() as u64;
    Ok(AddressSpan {
        addr: BankAddress {
            rankset: region.rankset,
            channel: region.channel,
            rank: region.rankset,
            chip: ChipSel::All,
            bank,
            row: region.k_base_row + (slot / per_row) as u32,
            col_offset: (slot % per_row) as u32 * g.bursts_per_token,
        },
        bursts: g.bursts_per_token,
    })
}

/// Addresses of token `token`'s V segments (one burst each, per chip), in
/// segment order.
pub fn place_v_vector(token: u64, g: &MappingGeometry, region: &KvRegion) -> Result<Vec<AddressSpan>, MappingError> {
    if token >= region.capacity {
        return Err(MappingError::CapacityExceeded { token, capacity: region.capacity });
    }
    let sets = g.v_sets() as u64;
    let set = (token % sets) as u32;
    let slot = token / sets;
    let per_row = g.v_slots_per_row() as u64;
    let row = region.v_base_row + (slot / per_row) as u32;
    let base_col = (slot % per_row) as u32 * g.v_bursts_per_bank();
    Ok((0..g.bursts_per_token)
        .map(|i| AddressSpan {
            addr: BankAddress {
                rankset: region.rankset,
                channel: region.channel,
                rank: region.rankset,
                chip: ChipSel::All,
                bank: set * g.v_spread + i % g.v_spread,
                row,
                col_offset: base_col + i / g.v_spread,
            },
            bursts: 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RequestRows {
    capacity: u64,
    tokens: u64,
    /// Base row per (rankset·channels + channel); `None` when nothing lands there.
    base: Vec<Option<u32>>,
}

/// First-fit row allocator for one (rankset, channel).
#[derive(Debug, Clone, PartialEq, Eq)]
struct RowPool {
    free: Vec<(u32, u32)>,
}

impl RowPool {
    fn new(rows: u32) -> Self {
        Self { free: vec![(0, rows)] }
    }

    fn alloc(&mut self, n: u32) -> Option<u32> {
        if n == 0 {
            return Some(0);
        }
        let i = self.free.iter().position(|&(_, len)| len >= n)?;
        let (start, len) = self.free[i];
        if len == n {
            self.free.remove(i);
        } else {
            self.free[i] = (start + n, len - n);
        }
        Some(start)
    }

    fn release(&mut self, start: u32, n: u32) {
        if n == 0 {
            return;
        }
        let i = self.free.partition_point(|&(s, _)| s < start);
        self.free.insert(i, (start, n));
        if i + 1 < self.free.len() && self.free[i].0 + self.free[i].1 == self.free[i + 1].0 {
            self.free[i].1 += self.free[i + 1].1;
            self.free.remove(i + 1);
        }
        if i > 0 && self.free[i - 1].0 + self.free[i - 1].1 == self.free[i].0 {
            self.free[i - 1].1 += self.free[i].1;
            self.free.remove(i);
        }
    }

    fn free_rows(&self) -> u64 {
        self.free.iter().map(|&(_, l)| l as u64).sum()
    }
}

/// Placement registry: row reservations of every live request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvPlacement {
    geom: MappingGeometry,
    requests: BTreeMap<u64, RequestRows>,
    pools: Vec<RowPool>,
}

impl KvPlacement {
    pub fn new(topo: &HwTopology, m: &LlmModel, v_spread: u32) -> Result<Self, MappingError> {
        let geom = MappingGeometry::new(topo, m, v_spread)?;
        let pools = (0..geom.ranksets * geom.channels).map(|_| RowPool::new(geom.rows_per_bank)).collect();
        Ok(Self { geom, requests: BTreeMap::new(), pools })
    }

    pub fn geometry(&self) -> &MappingGeometry {
        &self.geom
    }

    fn rows_per_head_layer(&self, capacity: u64) -> u32 {
        self.geom.k_rows(capacity) + self.geom.v_rows(capacity)
    }

    /// Reserves rows for `capacity` tokens of `request`. All-or-nothing.
    pub fn admit(&mut self, request: u64, capacity: u64) -> Result<(), MappingError> {
        let g = self.geom;
        let per = self.rows_per_head_layer(capacity);
        let mut base = vec![None; (g.ranksets * g.channels) as usize];
        for s in 0..g.ranksets {
            for c in 0..g.channels {
                let n = g.layers_on(request, s) * g.heads_on(c) * per;
                if n == 0 {
                    continue;
                }
                let idx = (s * g.channels + c) as usize;
                match self.pools[idx].alloc(n) {
                    Some(row) => base[idx] = Some(row),
                    None => {
                        self.release_rows(request, &base, per);
                        return Err(MappingError::OutOfRows { rankset: s, channel: c });
                    }
                }
            }
        }
        if let Some(old) = self.requests.insert(request, RequestRows { capacity, tokens: 0, base }) {
            // re-admission replaces the old reservation
            let per_old = self.rows_per_head_layer(old.capacity);
            self.release_rows(request, &old.base, per_old);
        }
        Ok(())
    }

    fn release_rows(&mut self, request: u64, base: &[Option<u32>], per: u32) {
        let g = self.geom;
        for (idx, b) in base.iter().enumerate() {
            if let Some(row) = b {
                let (s, c) = (idx as u32 / g.channels, idx as u32 % g.channels);
                self.pools[idx].release(*row, g.layers_on(request, s) * g.heads_on(c) * per);
            }
        }
    }

    pub fn release(&mut self, request: u64) {
        if let Some(r) = self.requests.remove(&request) {
            let per = self.rows_per_head_layer(r.capacity);
            self.release_rows(request, &r.base, per);
        }
    }

    /// Records `n` more tokens for `request` (all layers and heads).
    pub fn append_tokens(&mut self, request: u64, n: u64) -> Result<u64, MappingError> {
        let r = self.requests.get_mut(&request).ok_or(MappingError::MissingRequest(request))?;
        if r.tokens + n > r.capacity {
            return Err(MappingError::CapacityExceeded { token: r.tokens + n - 1, capacity: r.capacity });
        }
        r.tokens += n;
        Ok(r.tokens)
    }

    pub fn tokens(&self, request: u64) -> Option<u64> {
        self.requests.get(&request).map(|r| r.tokens)
    }

    pub fn contains(&self, request: u64) -> bool {
        self.requests.contains_key(&request)
    }

    pub fn requests(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.requests.iter().map(|(&id, r)| (id, r.tokens))
    }

    pub fn free_rows(&self, rankset: u32, channel: u32) -> u64 {
        self.pools[(rankset * self.geom.channels + channel) as usize].free_rows()
    }

    /// Region of (request, layer, head).
    pub fn region(&self, request: u64, layer: u32, head: u32) -> Result<KvRegion, MappingError> {
        let g = &self.geom;
        let r = self.requests.get(&request).ok_or(MappingError::MissingRequest(request))?;
        let s = (((request % g.ranksets as u64) + layer as u64) % g.ranksets as u64) as u32;
        let c = head % g.channels;
        let base = r.base[(s * g.channels + c) as usize].ok_or(MappingError::MissingRequest(request))?;
        let slot = (layer / g.ranksets) * g.heads_on(c) + head / g.channels;
        let k_rows = g.k_rows(r.capacity);
        let k_base_row = base + slot * (k_rows + g.v_rows(r.capacity));
        Ok(KvRegion { rankset: s, channel: c, k_base_row, v_base_row: k_base_row + k_rows, capacity: r.capacity })
    }

    pub fn k_span(&self, request: u64, layer: u32, head: u32, token: u64) -> Result<AddressSpan, MappingError> {
        place_k_vector(token, &self.geom, &self.region(request, layer, head)?)
    }

    pub fn v_spans(&self, request: u64, layer: u32, head: u32, token: u64) -> Result<Vec<AddressSpan>, MappingError> {
        place_v_vector(token, &self.geom, &self.region(request, layer, head)?)
    }
}

/// Byte and token histograms over the stored tokens of a placement.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementStats {
    pub rankset_bytes: Vec<u64>,
    /// Token-layer-head entries per rankset.
    pub rankset_tokens: Vec<u64>,
    /// `[rankset][channel]`.
    pub channel_bytes: Vec<Vec<u64>>,
    /// Per logic bank index, summed over ranks.
    pub bank_bytes: Vec<u64>,
    /// K tokens per logic bank index.
    pub bank_tokens: Vec<u64>,
    /// Channels that hold no head at all.
    pub idle_channels: Vec<u32>,
    /// max − min of `rankset_bytes`.
    pub imbalance_bytes: u64,
}

pub fn placement_stats(p: &KvPlacement) -> PlacementStats {
    let g = p.geometry();
    let (rs, ch, nb) = (g.ranksets as usize, g.channels as usize, g.banks as usize);
    let mut st = PlacementStats {
        rankset_bytes: vec![0; rs],
        rankset_tokens: vec![0; rs],
        channel_bytes: vec![vec![0; ch]; rs],
        bank_bytes: vec![0; nb],
        bank_tokens: vec![0; nb],
        idle_channels: (0..g.channels).filter(|&c| g.heads_on(c) == 0).collect(),
        imbalance_bytes: 0,
    };
    let half = g.head_token_bytes / 2;
    let v_share = half / g.v_spread as u64;
    for (id, n) in p.requests() {
        if n == 0 {
            continue;
        }
        // tokens landing on each K bank / V set
        let k_per_bank: Vec<u64> = (0..g.banks as u64).map(|b| n / g.banks as u64 + u64::from(b < n % g.banks as u64)).collect();
        let sets = g.v_sets() as u64;
        let v_per_set: Vec<u64> = (0..sets).map(|s| n / sets + u64::from(s < n % sets)).collect();
        for s in 0..g.ranksets {
            let layers = g.layers_on(id, s) as u64;
            for c in 0..g.channels {
                let hl = layers * g.heads_on(c) as u64;
                let bytes = hl * n * g.head_token_bytes;
                st.rankset_bytes[s as usize] += bytes;
                st.rankset_tokens[s as usize] += hl * n;
                st.channel_bytes[s as usize][c as usize] += bytes;
                for b in 0..g.banks {
                    let set = (b / g.v_spread) as usize;
                    st.bank_bytes[b as usize] += hl * (k_per_bank[b as usize] * half + v_per_set[set] * v_share);
                    st.bank_tokens[b as usize] += hl * k_per_bank[b as usize];
                }
            }
        }
    }
    let max = st.rankset_bytes.iter().copied().max().unwrap_or(0);
    let min = st.rankset_bytes.iter().copied().min().unwrap_or(0);
    st.imbalance_bytes = max - min;
    st
}

/// One row of a placement dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementRecord {
    pub request: u64,
    pub layer: u32,
    pub head: u32,
    pub token: u64,
    pub kind: KvKind,
    pub segment: u32,
    pub span: AddressSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvKind {
    K,
    V,
}

/// Every K and V span of `request`'s stored tokens, in (layer, head, token) order.
pub fn placement_records(p: &KvPlacement, request: u64) -> Result<Vec<PlacementRecord>, MappingError> {
    let g = p.geometry();
    let n = p.tokens(request).ok_or(MappingError::MissingRequest(request))?;
    let mut out = Vec::new();
    for layer in 0..g.layers {
        for head in 0..g.heads {
            let region = p.region(request, layer, head)?;
            for token in 0..n {
                let k = place_k_vector(token, g, &region)?;
                out.push(PlacementRecord { request, layer, head, token, kind: KvKind::K, segment: 0, span: k });
                for (i, v) in place_v_vector(token, g, &region)?.into_iter().enumerate() {
                    out.push(PlacementRecord { request, layer, head, token, kind: KvKind::V, segment: i as u32, span: v });
                }
            }
        }
    }
    Ok(out)
}
