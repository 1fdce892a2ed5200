//! Deterministic flash translation layer simulator.
//!
//! Logical space is split into regions of one flash block each. Pages are
//! mapped individually through a direct map (logical page to physical page)
//! with an inverse map for reclamation. Writes land in per-region log blocks;
//! at most `write_cache_blocks` logs are open at once and the least recently
//! written one is evicted when another region needs a log. An evicted log
//! leaves its region spread over several blocks and the region must be merged
//! back into a single block, which costs one page copy per valid page plus the
//! erases of the emptied blocks. With `GcMode::Deferred` those merges are
//! queued and drained in the background while the host is idle or reading.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_request, BlockDevice, Snapshot};
use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;
const SNAPSHOT_MAGIC: &[u8; 8] = b"FPSIMST\0";
const SNAPSHOT_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcMode {
    Synchronous,
    /// Merges are queued and drained at `drain_rate` merges per second of
    /// idle or read time.
    Deferred {
        drain_rate: f64,
    },
}

/// How a log block accepts pages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogOrder {
    /// Any page of the region may be appended in any order.
    #[default]
    AnyOrder,
    /// Page k of the region must sit at offset k of its log block. Writing
    /// behind the log's write pointer closes the log, copying the rest of the
    /// region into it.
    InOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimProfile {
    pub name: String,
    /// Logical capacity in bytes; a multiple of the flash block size.
    pub capacity: u64,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
    #[serde(default = "default_pages_per_block")]
    pub pages_per_block: u64,
    pub read_page_us: u64,
    pub program_page_us: u64,
    pub erase_block_us: u64,
    pub controller_overhead_us: u64,
    /// Mapping unit; defaults to the page size.
    #[serde(default)]
    pub map_granularity: Option<u64>,
    pub write_cache_blocks: u64,
    pub free_block_pool: u64,
    pub gc_mode: GcMode,
    #[serde(default)]
    pub log_order: LogOrder,
    /// Queued merges run back to back when a write finds no free block.
    #[serde(default = "default_gc_batch")]
    pub gc_batch: u64,
    /// Extra latency of a read while merges are queued.
    #[serde(default)]
    pub gc_read_penalty_us: u64,
    /// Relative amplitude of uniform multiplicative latency noise.
    #[serde(default)]
    pub latency_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_page_size() -> u64 {
    2048
}

fn default_pages_per_block() -> u64 {
    64
}

fn default_gc_batch() -> u64 {
    1
}

impl SimProfile {
    /// High-end SSD: short start-up absorbed by a free-block pool, random
    /// writes an order of magnitude above sequential ones, and background
    /// reclamation that lingers for a few seconds after a random-write run.
    pub fn highend_ssd() -> Self {
        SimProfile {
            name: "highend-ssd".into(),
            capacity: 1 << 30,
            page_size: 2048,
            pages_per_block: 256,
            read_page_us: 8,
            program_page_us: 12,
            erase_block_us: 2000,
            controller_overhead_us: 100,
            map_granularity: None,
            write_cache_blocks: 4,
            free_block_pool: 125,
            gc_mode: GcMode::Deferred { drain_rate: 38.0 },
            log_order: LogOrder::AnyOrder,
            gc_batch: 32,
            gc_read_penalty_us: 570,
            latency_noise: 0.0,
            seed: 0x5eed,
        }
    }

    /// Low-end USB key: no start-up phase, a sequential-write period of one
    /// 4 MB flash block and random writes two orders of magnitude slower than
    /// sequential ones.
    pub fn lowend_usb() -> Self {
        SimProfile {
            name: "lowend-usb".into(),
            capacity: 1 << 30,
            page_size: 2048,
            pages_per_block: 2048,
            read_page_us: 25,
            program_page_us: 60,
            erase_block_us: 3000,
            controller_overhead_us: 1500,
            map_granularity: None,
            write_cache_blocks: 4,
            free_block_pool: 0,
            gc_mode: GcMode::Synchronous,
            log_order: LogOrder::InOrder,
            gc_batch: 1,
            gc_read_penalty_us: 0,
            latency_noise: 0.0,
            seed: 0x5eed,
        }
    }

    pub fn bundled() -> Vec<SimProfile> {
        vec![Self::highend_ssd(), Self::lowend_usb()]
    }

    pub fn by_name(name: &str) -> Option<SimProfile> {
        Self::bundled().into_iter().find(|p| p.name == name)
    }

    /// Loads a profile from a JSON file, or a bundled profile by name.
    pub fn load(spec: &str) -> Result<SimProfile> {
        if let Some(p) = Self::by_name(spec) {
            return Ok(p);
        }
        let text = std::fs::read_to_string(Path::new(spec))?;
        let p: SimProfile = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn block_size(&self) -> u64 {
        self.page_size * self.pages_per_block
    }

    pub fn granularity(&self) -> u64 {
        self.map_granularity.unwrap_or(self.page_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("profile {}: {m}", self.name)));
        if self.page_size == 0 || !self.page_size.is_multiple_of(crate::SECTOR) {
            return bad(format!("page_size {} is not a positive multiple of 512", self.page_size));
        }
        if self.pages_per_block == 0 || self.pages_per_block >= NONE as u64 {
            return bad(format!("pages_per_block {} out of range", self.pages_per_block));
        }
        let block = self.block_size();
        if self.capacity == 0 || !self.capacity.is_multiple_of(block) {
            return bad(format!("capacity {} is not a positive multiple of the block size {block}", self.capacity));
        }
        let g = self.granularity();
        if g == 0 || !g.is_multiple_of(self.page_size) || !block.is_multiple_of(g) {
            return bad(format!("map_granularity {g} must be a page multiple dividing the block"));
        }
        if self.read_page_us == 0
            || self.program_page_us == 0
            || self.erase_block_us == 0
            || self.controller_overhead_us == 0
        {
            return bad("all durations must be positive".into());
        }
        if self.write_cache_blocks == 0 {
            return bad("write_cache_blocks must be at least 1".into());
        }
        if self.gc_batch == 0 {
            return bad("gc_batch must be at least 1".into());
        }
        if let GcMode::Deferred { drain_rate } = self.gc_mode {
            if !(drain_rate.is_finite() && drain_rate > 0.0) {
                return bad(format!("drain_rate {drain_rate} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.latency_noise) {
            return bad(format!("latency_noise {} must be in [0, 1)", self.latency_noise));
        }
        let pages = (self.capacity / self.page_size) as u128;
        let phys = self.physical_blocks() as u128 * self.pages_per_block as u128;
        if pages >= NONE as u128 || phys >= NONE as u128 {
            return bad("device too large for 32-bit page addressing".into());
        }
        Ok(())
    }

    fn regions(&self) -> u64 {
        self.capacity / self.block_size()
    }

    /// Data blocks, log blocks, the initial free pool and one spare used
    /// while reclaiming.
    pub fn physical_blocks(&self) -> u64 {
        self.regions() + self.write_cache_blocks + self.free_block_pool + 1
    }

    /// Stable fingerprint binding snapshots to the profile that made them.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("profile serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCounters {
    /// Pages written on behalf of the host, including read-modify-write fill.
    pub host_pages: u64,
    /// Pages moved by merges, compactions and log closes.
    pub copied_pages: u64,
    pub programmed_pages: u64,
    pub erases: u64,
    pub merges: u64,
    pub background_merges: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Free,
    Open,
    Sealed,
    /// Emptied by host overwrites, waiting for a background erase.
    Dirty,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    state: BlockState,
    owner: u32,
    write_ptr: u32,
    valid: u32,
    erases: u32,
}

impl Block {
    const FREE: Block = Block { state: BlockState::Free, owner: NONE, write_ptr: 0, valid: 0, erases: 0 };
}

#[derive(Clone)]
pub struct FtlSimulator {
    profile: SimProfile,
    fingerprint: u64,
    ppb: u64,
    gran_pages: u64,
    drain_interval_us: u64,
    blocks: Vec<Block>,
    direct: Vec<u32>,
    inverse: Vec<u32>,
    free: VecDeque<u32>,
    open_log: Vec<u32>,
    sealed: Vec<u32>,
    queued: Vec<bool>,
    lru: VecDeque<u32>,
    pending: VecDeque<u32>,
    dirty: VecDeque<u32>,
    // Set while host pages are programmed, so emptied blocks wait for GC.
    defer_erase: bool,
    clock_us: u64,
    credit_us: u64,
    rng: ChaCha8Rng,
    counters: SimCounters,
    // Cost of the operation in progress.
    acc: u64,
}

impl FtlSimulator {
    pub fn new(profile: SimProfile) -> Result<Self> {
        profile.validate()?;
        let regions = profile.regions() as usize;
        let phys = profile.physical_blocks() as usize;
        let ppb = profile.pages_per_block;
        let drain_interval_us = match profile.gc_mode {
            GcMode::Deferred { drain_rate } => (1e6 / drain_rate).round().max(1.0) as u64,
            GcMode::Synchronous => 0,
        };
        Ok(FtlSimulator {
            fingerprint: profile.fingerprint(),
            ppb,
            gran_pages: profile.granularity() / profile.page_size,
            drain_interval_us,
            blocks: vec![Block::FREE; phys],
            direct: vec![NONE; regions * ppb as usize],
            inverse: vec![NONE; phys * ppb as usize],
            free: (0..phys as u32).collect(),
            open_log: vec![NONE; regions],
            sealed: vec![0; regions],
            queued: vec![false; regions],
            lru: VecDeque::new(),
            pending: VecDeque::new(),
            dirty: VecDeque::new(),
            defer_erase: false,
            clock_us: 0,
            credit_us: 0,
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            counters: SimCounters::default(),
            acc: 0,
            profile,
        })
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    pub fn counters(&self) -> SimCounters {
        self.counters
    }

    pub fn pending_merges(&self) -> usize {
        self.pending.len()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn open_logs(&self) -> usize {
        self.lru.len()
    }

    pub fn physical_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn erase_counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.blocks.iter().map(|b| b.erases)
    }

    /// Full scan of the mapping structures.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let ppb = self.ppb as usize;
        let mut valid = vec![0u32; self.blocks.len()];
        for (lp, &pp) in self.direct.iter().enumerate() {
            if pp == NONE {
                continue;
            }
            if self.inverse[pp as usize] != lp as u32 {
                return Err(format!("logical page {lp} maps to {pp} whose inverse disagrees"));
            }
            let b = pp as usize / ppb;
            if self.blocks[b].state == BlockState::Free {
                return Err(format!("logical page {lp} lives in free block {b}"));
            }
            if self.blocks[b].owner as usize != lp / ppb {
                return Err(format!("logical page {lp} lives in block {b} of another region"));
            }
            valid[b] += 1;
        }
        for (pp, &lp) in self.inverse.iter().enumerate() {
            if lp != NONE && self.direct[lp as usize] != pp as u32 {
                return Err(format!("physical page {pp} claims logical page {lp}"));
            }
        }
        let mut sealed = vec![0u32; self.sealed.len()];
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.valid != valid[b] {
                return Err(format!("block {b} counts {} valid pages, map has {}", blk.valid, valid[b]));
            }
            match blk.state {
                BlockState::Free if blk.write_ptr != 0 || blk.owner != NONE => {
                    return Err(format!("free block {b} is not clean"));
                }
                BlockState::Sealed => {
                    if blk.valid == 0 {
                        return Err(format!("sealed block {b} holds no valid page"));
                    }
                    sealed[blk.owner as usize] += 1;
                }
                BlockState::Dirty if blk.valid != 0 || !self.dirty.contains(&(b as u32)) => {
                    return Err(format!("dirty block {b} is not awaiting erase"));
                }
                BlockState::Open if self.open_log[blk.owner as usize] != b as u32 => {
                    return Err(format!("open block {b} is not its region's log"));
                }
                _ => {}
            }
        }
        if sealed != self.sealed {
            return Err("per-region sealed counts drifted".into());
        }
        let dirty_count = self.blocks.iter().filter(|b| b.state == BlockState::Dirty).count();
        if dirty_count != self.dirty.len() {
            return Err(format!("{dirty_count} dirty blocks but dirty list has {}", self.dirty.len()));
        }
        let free_count = self.blocks.iter().filter(|b| b.state == BlockState::Free).count();
        if free_count != self.free.len() {
            return Err(format!("{free_count} free blocks but free list has {}", self.free.len()));
        }
        let open = self.open_log.iter().filter(|&&b| b != NONE).count();
        if open != self.lru.len() || self.lru.len() as u64 > self.profile.write_cache_blocks {
            return Err("open logs and LRU disagree".into());
        }
        Ok(())
    }

    fn take_free(&mut self) -> u32 {
        self.free.pop_front().expect("simulator ran out of free blocks")
    }

    /// Runs queued merges until the free list holds more than one block per
    /// unused log slot plus the block reserved for merging.
    fn ensure_free(&mut self) {
        let spare = self.profile.write_cache_blocks as usize - self.lru.len() + 1;
        while self.free.len() <= spare {
            if let Some(b) = self.dirty.pop_front() {
                self.erase(b);
                continue;
            }
            if self.pending.is_empty() {
                break;
            }
            for _ in 0..self.profile.gc_batch {
                let Some(r) = self.pending.pop_front() else { break };
                self.queued[r as usize] = false;
                self.merge(r);
            }
        }
    }

    fn erase(&mut self, b: u32) {
        let blk = &mut self.blocks[b as usize];
        debug_assert_eq!(blk.valid, 0);
        if blk.state == BlockState::Sealed {
            self.sealed[blk.owner as usize] -= 1;
        }
        let erases = blk.erases + 1;
        *blk = Block { erases, ..Block::FREE };
        self.free.push_back(b);
        self.counters.erases += 1;
        self.acc += self.profile.erase_block_us;
    }

    fn seal(&mut self, b: u32) {
        let blk = &mut self.blocks[b as usize];
        blk.state = BlockState::Sealed;
        self.sealed[blk.owner as usize] += 1;
        if blk.valid == 0 {
            self.erase(b);
        }
    }

    fn invalidate(&mut self, pp: u32) {
        self.inverse[pp as usize] = NONE;
        let b = (pp as u64 / self.ppb) as u32;
        let blk = &mut self.blocks[b as usize];
        blk.valid -= 1;
        if blk.valid == 0 && blk.state == BlockState::Sealed {
            if self.defer_erase && self.drain_interval_us > 0 {
                self.sealed[blk.owner as usize] -= 1;
                *blk = Block { state: BlockState::Dirty, owner: blk.owner, erases: blk.erases, ..Block::FREE };
                self.dirty.push_back(b);
            } else {
                self.erase(b);
            }
        }
    }

    /// Erases the blocks of region `r` that are waiting for GC, as a switch
    /// merge does.
    fn erase_dirty_of(&mut self, r: u32) {
        let mine: Vec<u32> = self.dirty.iter().copied().filter(|&b| self.blocks[b as usize].owner == r).collect();
        if mine.is_empty() {
            return;
        }
        self.dirty.retain(|&b| self.blocks[b as usize].owner != r);
        for b in mine {
            self.erase(b);
        }
    }

    fn program_host(&mut self, b: u32, slot: u64, lp: u64) {
        self.defer_erase = true;
        self.program(b, slot, lp);
        self.defer_erase = false;
    }

    fn program(&mut self, b: u32, slot: u64, lp: u64) {
        let old = self.direct[lp as usize];
        if old != NONE {
            self.invalidate(old);
        }
        let pp = (b as u64 * self.ppb + slot) as u32;
        debug_assert_eq!(self.inverse[pp as usize], NONE);
        self.direct[lp as usize] = pp;
        self.inverse[pp as usize] = lp as u32;
        self.blocks[b as usize].valid += 1;
        self.counters.programmed_pages += 1;
        self.acc += self.profile.program_page_us;
    }

    fn copy(&mut self, b: u32, slot: u64, lp: u64) {
        self.counters.copied_pages += 1;
        self.acc += self.profile.read_page_us;
        self.program(b, slot, lp);
    }

    fn lru_remove(&mut self, r: u32) {
        if let Some(i) = self.lru.iter().position(|&x| x == r) {
            self.lru.remove(i);
        }
    }

    fn lru_touch(&mut self, r: u32) {
        if self.lru.back() != Some(&r) {
            self.lru_remove(r);
            self.lru.push_back(r);
        }
    }

    fn open_new_log(&mut self, r: u32) -> u32 {
        if self.lru.len() as u64 >= self.profile.write_cache_blocks {
            let victim = self.lru.pop_front().expect("cache is not empty");
            self.close_log(victim);
        }
        self.ensure_free();
        let b = self.take_free();
        self.blocks[b as usize] = Block { state: BlockState::Open, owner: r, ..self.blocks[b as usize] };
        self.open_log[r as usize] = b;
        self.lru.push_back(r);
        b
    }

    /// Retires the open log of region `r`, which must already be out of the LRU.
    fn close_log(&mut self, r: u32) {
        let b = std::mem::replace(&mut self.open_log[r as usize], NONE);
        match self.profile.log_order {
            LogOrder::AnyOrder => {
                self.seal(b);
                self.need_merge(r);
            }
            LogOrder::InOrder => {
                let base = r as u64 * self.ppb;
                let wp = self.blocks[b as usize].write_ptr as u64;
                for slot in wp..self.ppb {
                    if self.direct[(base + slot) as usize] != NONE {
                        self.copy(b, slot, base + slot);
                    }
                }
                self.blocks[b as usize].write_ptr = self.ppb as u32;
                self.seal(b);
            }
        }
    }

    fn need_merge(&mut self, r: u32) {
        if self.sealed[r as usize] <= 1 {
            return;
        }
        match self.profile.gc_mode {
            GcMode::Synchronous => self.merge(r),
            GcMode::Deferred { .. } => {
                if !self.queued[r as usize] {
                    self.queued[r as usize] = true;
                    self.pending.push_back(r);
                }
            }
        }
    }

    /// Gathers every valid page of `r` held in sealed blocks into one block.
    fn merge(&mut self, r: u32) {
        if self.sealed[r as usize] <= 1 {
            return;
        }
        let nb = self.take_free();
        self.blocks[nb as usize] = Block { state: BlockState::Open, owner: r, ..self.blocks[nb as usize] };
        let base = r as u64 * self.ppb;
        let mut wp = 0;
        for lp in base..base + self.ppb {
            let pp = self.direct[lp as usize];
            if pp == NONE {
                continue;
            }
            let src = (pp as u64 / self.ppb) as usize;
            if self.blocks[src].state != BlockState::Sealed {
                continue;
            }
            let slot = match self.profile.log_order {
                LogOrder::AnyOrder => wp,
                LogOrder::InOrder => lp - base,
            };
            self.copy(nb, slot, lp);
            wp += 1;
        }
        self.blocks[nb as usize].write_ptr = self.ppb as u32;
        self.seal(nb);
        self.counters.merges += 1;
    }

    /// Handles a log that has just received its last page.
    fn log_full(&mut self, r: u32) {
        let b = std::mem::replace(&mut self.open_log[r as usize], NONE);
        self.lru_remove(r);
        let valid = self.blocks[b as usize].valid as u64;
        if valid == self.ppb {
            // The log holds the whole region: the old blocks are already empty.
            self.seal(b);
            self.erase_dirty_of(r);
        } else if valid * 2 <= self.ppb {
            // Mostly overwritten in place: compact into a fresh log.
            let nb = self.take_free();
            self.blocks[nb as usize] = Block { state: BlockState::Open, owner: r, ..self.blocks[nb as usize] };
            let mut wp = 0;
            for slot in 0..self.ppb {
                let lp = self.inverse[(b as u64 * self.ppb + slot) as usize];
                if lp != NONE {
                    self.copy(nb, wp, lp as u64);
                    wp += 1;
                }
            }
            self.blocks[nb as usize].write_ptr = wp as u32;
            self.erase(b);
            self.open_log[r as usize] = nb;
            self.lru.push_back(r);
        } else {
            self.seal(b);
            self.need_merge(r);
        }
    }

    fn write_region_any(&mut self, r: u32, a: u64, end: u64) {
        for lp in a..end {
            let mut b = self.open_log[r as usize];
            if b == NONE {
                b = self.open_new_log(r);
            }
            let slot = self.blocks[b as usize].write_ptr as u64;
            self.program_host(b, slot, lp);
            self.blocks[b as usize].write_ptr += 1;
            if slot + 1 == self.ppb {
                self.log_full(r);
            }
        }
        if self.open_log[r as usize] != NONE {
            self.lru_touch(r);
        }
    }

    fn write_region_in_order(&mut self, r: u32, a: u64, end: u64) {
        let base = r as u64 * self.ppb;
        let mut b = self.open_log[r as usize];
        if b != NONE && a - base < self.blocks[b as usize].write_ptr as u64 {
            self.lru_remove(r);
            self.close_log(r);
            b = NONE;
        }
        if b == NONE {
            b = self.open_new_log(r);
        }
        let wp = self.blocks[b as usize].write_ptr as u64;
        for slot in wp..a - base {
            if self.direct[(base + slot) as usize] != NONE {
                self.copy(b, slot, base + slot);
            }
        }
        for lp in a..end {
            self.program_host(b, lp - base, lp);
        }
        self.blocks[b as usize].write_ptr = (end - base) as u32;
        if end - base == self.ppb {
            self.open_log[r as usize] = NONE;
            self.lru_remove(r);
            self.seal(b);
            self.erase_dirty_of(r);
        } else {
            self.lru_touch(r);
        }
    }

    fn write_pages(&mut self, lba: u64, size: u64) {
        let ps = self.profile.page_size;
        let g = self.gran_pages;
        let first = lba / ps / g * g;
        let end = ((lba + size - 1) / ps / g + 1) * g;
        for lp in first..end {
            let covered = lba <= lp * ps && lba + size >= (lp + 1) * ps;
            if !covered && self.direct[lp as usize] != NONE {
                self.acc += self.profile.read_page_us;
            }
        }
        self.counters.host_pages += end - first;
        let mut lp = first;
        while lp < end {
            let r = lp / self.ppb;
            let stop = end.min((r + 1) * self.ppb);
            match self.profile.log_order {
                LogOrder::AnyOrder => self.write_region_any(r as u32, lp, stop),
                LogOrder::InOrder => self.write_region_in_order(r as u32, lp, stop),
            }
            lp = stop;
        }
    }

    /// Advances the clock; queued merges drain when `drain` is set.
    fn elapse(&mut self, us: u64, drain: bool) -> u64 {
        self.clock_us += us;
        if !drain || self.drain_interval_us == 0 {
            return 0;
        }
        let saved = self.acc;
        while let Some(b) = self.dirty.pop_front() {
            self.erase(b);
        }
        self.acc = saved;
        if self.pending.is_empty() {
            self.credit_us = 0;
            return 0;
        }
        self.credit_us += us;
        let mut done = 0;
        while self.credit_us >= self.drain_interval_us {
            let Some(r) = self.pending.pop_front() else { break };
            self.queued[r as usize] = false;
            self.credit_us -= self.drain_interval_us;
            let saved = self.acc;
            self.merge(r);
            self.acc = saved;
            self.counters.background_merges += 1;
            done += 1;
        }
        if self.pending.is_empty() {
            self.credit_us = 0;
        }
        done
    }

    fn finish(&mut self) -> u64 {
        let base = std::mem::take(&mut self.acc).max(1);
        if self.profile.latency_noise == 0.0 {
            return base;
        }
        let n = self.profile.latency_noise;
        let f = 1.0 + self.rng.gen_range(-n..=n);
        ((base as f64 * f).round() as u64).max(1)
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(16 * self.blocks.len() + 4 * (self.direct.len() + self.inverse.len()));
        w.extend_from_slice(SNAPSHOT_MAGIC);
        put32(&mut w, SNAPSHOT_VERSION);
        put64(&mut w, self.fingerprint);
        put64(&mut w, self.clock_us);
        put64(&mut w, self.credit_us);
        let pos = self.rng.get_word_pos();
        put64(&mut w, pos as u64);
        put64(&mut w, (pos >> 64) as u64);
        let c = &self.counters;
        for v in [c.host_pages, c.copied_pages, c.programmed_pages, c.erases, c.merges, c.background_merges] {
            put64(&mut w, v);
        }
        put64(&mut w, self.blocks.len() as u64);
        for b in &self.blocks {
            w.push(match b.state {
                BlockState::Free => 0,
                BlockState::Open => 1,
                BlockState::Sealed => 2,
                BlockState::Dirty => 3,
            });
            put32(&mut w, b.owner);
            put32(&mut w, b.write_ptr);
            put32(&mut w, b.valid);
            put32(&mut w, b.erases);
        }
        for list in [&self.direct, &self.inverse, &self.open_log] {
            put64(&mut w, list.len() as u64);
            list.iter().for_each(|&v| put32(&mut w, v));
        }
        for q in [&self.free, &self.lru, &self.pending, &self.dirty] {
            put64(&mut w, q.len() as u64);
            q.iter().for_each(|&v| put32(&mut w, v));
        }
        w
    }

    fn decode(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not a simulator snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("snapshot version {version}, expected {SNAPSHOT_VERSION}")));
        }
        let fp = r.u64()?;
        if fp != self.fingerprint {
            return Err(Error::Snapshot(format!(
                "snapshot taken with a different profile version ({fp:016x} vs {:016x})",
                self.fingerprint
            )));
        }
        let clock_us = r.u64()?;
        let credit_us = r.u64()?;
        let pos = r.u64()? as u128 | (r.u64()? as u128) << 64;
        let counters = SimCounters {
            host_pages: r.u64()?,
            copied_pages: r.u64()?,
            programmed_pages: r.u64()?,
            erases: r.u64()?,
            merges: r.u64()?,
            background_merges: r.u64()?,
        };
        let n = r.len(self.blocks.len())?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let state = match r.take(1)?[0] {
                0 => BlockState::Free,
                1 => BlockState::Open,
                2 => BlockState::Sealed,
                3 => BlockState::Dirty,
                s => return Err(Error::Snapshot(format!("bad block state {s}"))),
            };
            blocks.push(Block { state, owner: r.u32()?, write_ptr: r.u32()?, valid: r.u32()?, erases: r.u32()? });
        }
        let direct = r.list(self.direct.len())?;
        let inverse = r.list(self.inverse.len())?;
        let open_log = r.list(self.open_log.len())?;
        let free = r.queue()?;
        let lru = r.queue()?;
        let pending = r.queue()?;
        let dirty = r.queue()?;
        if r.pos != bytes.len() {
            return Err(Error::Snapshot("trailing bytes in snapshot".into()));
        }
        let mut sealed = vec![0u32; self.sealed.len()];
        for b in blocks.iter().filter(|b| b.state == BlockState::Sealed) {
            let Some(s) = sealed.get_mut(b.owner as usize) else {
                return Err(Error::Snapshot("block owner out of range".into()));
            };
            *s += 1;
        }
        let mut queued = vec![false; self.queued.len()];
        for &p in &pending {
            let Some(q) = queued.get_mut(p as usize) else {
                return Err(Error::Snapshot("pending region out of range".into()));
            };
            *q = true;
        }
        self.clock_us = clock_us;
        self.credit_us = credit_us;
        self.rng = ChaCha8Rng::seed_from_u64(self.profile.seed);
        self.rng.set_word_pos(pos);
        self.counters = counters;
        self.blocks = blocks;
        self.direct = direct;
        self.inverse = inverse;
        self.open_log = open_log;
        self.free = free;
        self.lru = lru;
        self.pending = pending;
        self.dirty = dirty;
        self.sealed = sealed;
        self.queued = queued;
        self.check_consistency().map_err(Error::Snapshot)
    }
}

fn put32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Snapshot("truncated snapshot".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, expected: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Snapshot(format!("geometry mismatch: {n} entries, expected {expected}")));
        }
        Ok(n)
    }

    fn list(&mut self, expected: usize) -> Result<Vec<u32>> {
        let n = self.len(expected)?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn queue(&mut self) -> Result<VecDeque<u32>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 4 {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

impl BlockDevice for FtlSimulator {
    fn id(&self) -> String {
        self.profile.name.clone()
    }

    fn capacity(&self) -> u64 {
        self.profile.capacity
    }

    fn read(&mut self, lba: u64, size: u64) -> Result<u64> {
        check_request(self.profile.capacity, lba, size)?;
        let p = &self.profile;
        self.acc = p.controller_overhead_us + size.div_ceil(p.page_size) * p.read_page_us;
        if !self.pending.is_empty() {
            self.acc += p.gc_read_penalty_us;
        }
        let rt = self.finish();
        self.elapse(rt, true);
        Ok(rt)
    }

    fn write(&mut self, lba: u64, data: &[u8]) -> Result<u64> {
        let size = data.len() as u64;
        check_request(self.profile.capacity, lba, size)?;
        self.acc = self.profile.controller_overhead_us;
        self.write_pages(lba, size);
        let rt = self.finish();
        self.elapse(rt, false);
        Ok(rt)
    }

    fn now_us(&self) -> u64 {
        self.clock_us
    }

    fn idle(&mut self, us: u64) -> u64 {
        self.elapse(us, true)
    }

    fn is_simulated(&self) -> bool {
        true
    }

    fn snapshot(&self) -> Result<Snapshot> {
        Ok(Snapshot { bytes: self.encode() })
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        self.decode(&snapshot.bytes)
    }
}
