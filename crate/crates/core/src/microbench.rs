//! The nine micro-benchmarks and their expansion into experiments.
//!
//! Each micro-benchmark varies exactly one parameter over a fixed range and
//! applies the sweep to one or more of the four baseline patterns
//! (sequential/random reads and writes). Everything else stays at the suite
//! baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{Location, MixSpec, Mode, ParallelSpec, PatternSpec, Timing};
use crate::{seed, SECTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Micro {
    Granularity,
    Alignment,
    Locality,
    Partitioning,
    Order,
    Parallelism,
    Mix,
    Pause,
    Bursts,
}

impl Micro {
    pub const ALL: [Micro; 9] = [
        Micro::Granularity,
        Micro::Alignment,
        Micro::Locality,
        Micro::Partitioning,
        Micro::Order,
        Micro::Parallelism,
        Micro::Mix,
        Micro::Pause,
        Micro::Bursts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Micro::Granularity => "granularity",
            Micro::Alignment => "alignment",
            Micro::Locality => "locality",
            Micro::Partitioning => "partitioning",
            Micro::Order => "order",
            Micro::Parallelism => "parallelism",
            Micro::Mix => "mix",
            Micro::Pause => "pause",
            Micro::Bursts => "bursts",
        }
    }

    /// Name of the parameter the micro-benchmark varies.
    pub fn parameter(self) -> &'static str {
        match self {
            Micro::Granularity => "io_size",
            Micro::Alignment => "io_shift",
            Micro::Locality => "target_size",
            Micro::Partitioning => "partitions",
            Micro::Order => "incr",
            Micro::Parallelism => "parallel_degree",
            Micro::Mix => "ratio",
            Micro::Pause => "pause_us",
            Micro::Bursts => "burst",
        }
    }
}

impl fmt::Display for Micro {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Micro {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Micro::ALL.into_iter().find(|m| m.name() == lower).ok_or_else(|| Error::UnknownMicro(s.to_string()))
    }
}

/// The four baseline patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    SR,
    RR,
    SW,
    RW,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::SR, Baseline::RR, Baseline::SW, Baseline::RW];

    /// The six unordered pairs used by the Mix micro-benchmark.
    pub const PAIRS: [(Baseline, Baseline); 6] = [
        (Baseline::SR, Baseline::RR),
        (Baseline::SR, Baseline::SW),
        (Baseline::SR, Baseline::RW),
        (Baseline::RR, Baseline::SW),
        (Baseline::RR, Baseline::RW),
        (Baseline::SW, Baseline::RW),
    ];

    pub fn location(self) -> Location {
        match self {
            Baseline::SR | Baseline::SW => Location::Sequential,
            Baseline::RR | Baseline::RW => Location::Random,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Baseline::SR | Baseline::RR => Mode::Read,
            Baseline::SW | Baseline::RW => Mode::Write,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Baseline::SR => "SR",
            Baseline::RR => "RR",
            Baseline::SW => "SW",
            Baseline::RW => "RW",
        }
    }

    pub fn of(location: Location, mode: Mode) -> Option<Baseline> {
        match (location, mode) {
            (Location::Sequential, Mode::Read) => Some(Baseline::SR),
            (Location::Random, Mode::Read) => Some(Baseline::RR),
            (Location::Sequential, Mode::Write) => Some(Baseline::SW),
            (Location::Random, Mode::Write) => Some(Baseline::RW),
            _ => None,
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown baseline pattern {s:?}")))
    }
}

/// What an experiment runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Basic(PatternSpec),
    Mix(MixSpec),
    Parallel(ParallelSpec),
}

impl Workload {
    pub fn patterns(&self) -> Vec<&PatternSpec> {
        match self {
            Workload::Basic(p) => vec![p],
            Workload::Mix(m) => vec![&m.first, &m.second],
            Workload::Parallel(p) => vec![&p.base],
        }
    }

    fn patterns_mut(&mut self) -> Vec<&mut PatternSpec> {
        match self {
            Workload::Basic(p) => vec![p],
            Workload::Mix(m) => vec![&mut m.first, &mut m.second],
            Workload::Parallel(p) => vec![&mut p.base],
        }
    }

    /// True if any component writes without random placement; such
    /// experiments need target space that no earlier write has touched.
    pub fn has_sequential_write(&self) -> bool {
        self.patterns().iter().any(|p| p.mode == Mode::Write && !p.location.is_random())
    }

    /// First byte of the address range the workload touches.
    pub fn offset(&self) -> u64 {
        self.patterns()[0].target_offset
    }

    /// Length of the address range the workload touches.
    pub fn span(&self) -> u64 {
        self.patterns().iter().map(|p| p.target_size + p.io_shift).sum()
    }

    /// Moves the workload so that its range starts at `offset`; mix
    /// components are laid out back to back.
    pub fn place_at(&mut self, offset: u64) {
        let mut at = offset;
        for p in self.patterns_mut() {
            p.target_offset = at;
            at += p.target_size + p.io_shift;
        }
    }

    /// Total number of IOs across components.
    pub fn io_count(&self) -> u64 {
        match self {
            Workload::Basic(p) => p.io_count,
            Workload::Mix(m) => m.len(),
            Workload::Parallel(p) => p.base.io_count,
        }
    }

    pub fn max_io_size(&self) -> u64 {
        self.patterns().iter().map(|p| p.io_size).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Workload::Basic(p) => p.validate(),
            Workload::Mix(m) => m.validate(),
            Workload::Parallel(p) => p.validate(),
        }
    }
}

/// One experiment: a reference pattern run `repetitions` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// `<micro>/<baseline>/<parameter>=<value>`, also the artifact directory.
    pub id: String,
    pub micro: Micro,
    /// Baseline label, or `A+B` for mixes.
    pub baseline: String,
    pub parameter: String,
    pub value: i64,
    pub workload: Workload,
    /// Leading IOs left out of the statistics. For mixes this counts
    /// interleaved IOs; for parallel runs it applies to each worker.
    pub io_ignore: u64,
    pub repetitions: u32,
}

impl ExperimentSpec {
    fn new(micro: Micro, baseline: String, value: i64, mut workload: Workload, cfg: &SuiteConfig) -> Self {
        let id = format!("{}/{}/{}={}", micro.name(), baseline, micro.parameter(), value);
        let s = seed::derive(cfg.seed, seed::hash_str(&id));
        for (k, p) in workload.patterns_mut().into_iter().enumerate() {
            p.seed = seed::derive(s, k as u64);
        }
        workload.place_at(cfg.base_target_offset);
        ExperimentSpec {
            id,
            micro,
            baseline,
            parameter: micro.parameter().to_string(),
            value,
            workload,
            io_ignore: 0,
            repetitions: cfg.repetitions,
        }
    }

    /// One line for dry-run listings.
    pub fn describe(&self) -> String {
        format!(
            "{:<13} {:<6} {}={:<10} offset={:<12} io_count={}",
            self.micro.name(),
            self.baseline,
            self.parameter,
            self.value,
            self.workload.offset(),
            self.workload.io_count()
        )
    }
}

/// Shared baseline values for a whole suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub base_io_size: u64,
    pub base_target_size: u64,
    pub base_target_offset: u64,
    pub io_count: BTreeMap<Baseline, u64>,
    pub io_ignore: BTreeMap<Baseline, u64>,
    pub seed: u64,
    pub repetitions: u32,
    /// Non-power-of-two IO sizes added to the Granularity sweep.
    pub extra_io_sizes: Vec<u64>,
    /// Pause between bursts in the Bursts sweep.
    pub burst_pause_us: u64,
    /// Upper bound on any target size, typically the device capacity.
    pub max_target_size: Option<u64>,
    /// Micro-benchmarks to expand; all of them when empty.
    pub micros: Vec<Micro>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            base_io_size: 32 * 1024,
            base_target_size: 128 << 20,
            base_target_offset: 0,
            io_count: [(Baseline::SR, 1024), (Baseline::RR, 1024), (Baseline::SW, 1024), (Baseline::RW, 5120)]
                .into_iter()
                .collect(),
            io_ignore: BTreeMap::new(),
            seed: 0,
            repetitions: 3,
            extra_io_sizes: vec![1536, 3072, 5120, 49152],
            burst_pause_us: 100_000,
            max_target_size: None,
            micros: Vec::new(),
        }
    }
}

impl SuiteConfig {
    pub fn count(&self, b: Baseline) -> u64 {
        self.io_count.get(&b).copied().unwrap_or(1024)
    }

    pub fn ignore(&self, b: Baseline) -> u64 {
        self.io_ignore.get(&b).copied().unwrap_or(0)
    }

    fn cap(&self) -> u64 {
        self.max_target_size.unwrap_or(u64::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.base_io_size < SECTOR || !self.base_io_size.is_multiple_of(SECTOR) {
            return bad(format!("base_io_size {} is not a positive multiple of 512", self.base_io_size));
        }
        if self.base_target_size < self.base_io_size || !self.base_target_size.is_multiple_of(self.base_io_size) {
            return bad(format!(
                "base_target_size {} is not a multiple of base_io_size {}",
                self.base_target_size, self.base_io_size
            ));
        }
        if !self.base_target_offset.is_multiple_of(SECTOR) {
            return bad(format!("base_target_offset {} is not sector aligned", self.base_target_offset));
        }
        if self.base_target_size > self.cap() {
            return bad(format!("base_target_size {} exceeds max_target_size", self.base_target_size));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        for b in Baseline::ALL {
            if self.count(b) == 0 {
                return bad(format!("io_count for {b} must be positive"));
            }
            if self.ignore(b) >= self.count(b) {
                return bad(format!("io_ignore for {b} must be below its io_count"));
            }
        }
        for &s in &self.extra_io_sizes {
            if s < SECTOR || s % SECTOR != 0 || s > self.base_target_size {
                return bad(format!("extra IO size {s} is not a usable multiple of 512"));
            }
        }
        Ok(())
    }

    fn micros(&self) -> Vec<Micro> {
        if self.micros.is_empty() {
            Micro::ALL.to_vec()
        } else {
            self.micros.clone()
        }
    }

    fn basic(&self, b: Baseline) -> PatternSpec {
        let mut p =
            PatternSpec::baseline(b.location(), b.mode(), self.base_io_size, self.base_target_size, self.count(b));
        p.io_ignore = self.ignore(b);
        p
    }
}

fn pow2(lo: u32, hi: u32) -> impl Iterator<Item = u64> {
    (lo..=hi).map(|k| 1u64 << k)
}

/// IO shifts probed by the Alignment sweep: the aligned control, then
/// 512 B doubling up to the IO size, reduced modulo the IO size.
pub fn alignment_shifts(io_size: u64) -> Vec<u64> {
    let mut v: Vec<u64> = std::iter::once(0)
        .chain(pow2(0, 63).map_while(|k| k.checked_mul(SECTOR)).take_while(|&s| s <= io_size).map(|s| s % io_size))
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Expands one micro-benchmark.
pub fn expand(micro: Micro, cfg: &SuiteConfig) -> Result<Vec<ExperimentSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut push = |baseline: String, value: i64, w: Workload| {
        out.push(ExperimentSpec::new(micro, baseline, value, w, cfg));
    };
    match micro {
        Micro::Granularity => {
            let mut sizes: Vec<u64> = pow2(0, 9).map(|k| k * SECTOR).collect();
            sizes.extend(&cfg.extra_io_sizes);
            sizes.sort_unstable();
            sizes.dedup();
            for b in Baseline::ALL {
                for &size in &sizes {
                    let mut p = cfg.basic(b);
                    p.io_size = size;
                    // Keep the target an exact number of IOs.
                    p.target_size = (cfg.base_target_size / size).max(1) * size;
                    if p.target_size > cfg.cap() {
                        continue;
                    }
                    push(b.label().into(), size as i64, Workload::Basic(p));
                }
            }
        }
        Micro::Alignment => {
            for b in Baseline::ALL {
                for shift in alignment_shifts(cfg.base_io_size) {
                    let mut p = cfg.basic(b);
                    p.io_shift = shift;
                    push(b.label().into(), shift as i64, Workload::Basic(p));
                }
            }
        }
        Micro::Locality => {
            for b in Baseline::ALL {
                let hi = if b.location().is_random() { 16 } else { 8 };
                for k in pow2(0, hi) {
                    let Some(size) = k.checked_mul(cfg.base_io_size).filter(|&s| s <= cfg.cap()) else {
                        continue;
                    };
                    let mut p = cfg.basic(b);
                    p.target_size = size;
                    push(b.label().into(), size as i64, Workload::Basic(p));
                }
            }
        }
        Micro::Partitioning => {
            for b in [Baseline::SR, Baseline::SW] {
                for parts in pow2(0, 8) {
                    let ps = cfg.base_target_size / parts;
                    if ps < cfg.base_io_size || !ps.is_multiple_of(cfg.base_io_size) {
                        continue;
                    }
                    let mut p = cfg.basic(b);
                    p.location = Location::Partitioned { partitions: parts };
                    push(b.label().into(), parts as i64, Workload::Basic(p));
                }
            }
        }
        Micro::Order => {
            let incrs: Vec<i64> = [-1, 0].into_iter().chain(pow2(0, 8).map(|k| k as i64)).collect();
            for b in [Baseline::SR, Baseline::SW] {
                for &incr in &incrs {
                    let mut p = cfg.basic(b);
                    p.location = Location::Ordered { incr };
                    let stride = incr.unsigned_abs().max(1) * p.io_size;
                    let needed = stride.saturating_mul(p.io_count);
                    p.target_size = needed.max(cfg.base_target_size).min(cfg.cap()) / p.io_size * p.io_size;
                    // Large strides on small devices run fewer IOs instead of wrapping.
                    p.io_count = p.io_count.min(p.target_size / stride).max(1);
                    push(b.label().into(), incr, Workload::Basic(p));
                }
            }
        }
        Micro::Parallelism => {
            for b in Baseline::ALL {
                for degree in pow2(0, 4) {
                    let base = cfg.basic(b);
                    push(
                        b.label().into(),
                        degree as i64,
                        Workload::Parallel(ParallelSpec { base, parallel_degree: degree }),
                    );
                }
            }
        }
        Micro::Mix => {
            for (a, b) in Baseline::PAIRS {
                for ratio in pow2(0, 6) {
                    let total = cfg.count(a).max(cfg.count(b));
                    let mut second = cfg.basic(b);
                    second.io_count = (total / (ratio + 1)).max(1);
                    second.io_ignore = 0;
                    let mut first = cfg.basic(a);
                    first.io_count = ratio * second.io_count;
                    first.io_ignore = 0;
                    let label = format!("{}+{}", a.label(), b.label());
                    push(label, ratio as i64, Workload::Mix(MixSpec { first, second, ratio }));
                }
            }
        }
        Micro::Pause => {
            for b in Baseline::ALL {
                for k in pow2(0, 8) {
                    let mut p = cfg.basic(b);
                    p.timing = Timing::Pause { pause_us: k * 100 };
                    push(b.label().into(), (k * 100) as i64, Workload::Basic(p));
                }
            }
        }
        Micro::Bursts => {
            for b in Baseline::ALL {
                for k in pow2(0, 6) {
                    let mut p = cfg.basic(b);
                    p.timing = Timing::Burst { pause_us: cfg.burst_pause_us, burst_count: k * 10 };
                    push(b.label().into(), (k * 10) as i64, Workload::Basic(p));
                }
            }
        }
    }
    for e in &mut out {
        e.io_ignore = match &e.workload {
            Workload::Basic(p) => p.io_ignore,
            Workload::Parallel(p) => p.base.io_ignore.div_ceil(p.parallel_degree),
            Workload::Mix(_) => 0,
        };
        e.workload.validate()?;
    }
    Ok(out)
}

/// Expands every micro-benchmark selected in `cfg`, in canonical order.
pub fn expand_suite(cfg: &SuiteConfig) -> Result<Vec<ExperimentSpec>> {
    let mut out = Vec::new();
    for m in cfg.micros() {
        out.extend(expand(m, cfg)?);
    }
    Ok(out)
}

/// An experiment with its place in the plan's sequence of state epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub experiment: ExperimentSpec,
    /// Experiments in different epochs are separated by a state reset.
    pub epoch: u32,
}

/// Gives every sequential-write experiment its own, never reused, target
/// range. When the device is used up, a new epoch starts at
/// `base_offset` again. Other experiments stay at `base_offset`, in epoch 0.
pub fn assign_target_offsets(
    experiments: Vec<ExperimentSpec>,
    capacity: u64,
    base_offset: u64,
) -> Result<Vec<Placement>> {
    let usable = capacity.saturating_sub(base_offset);
    let mut cursor = base_offset;
    let mut epoch = 0;
    let mut out = Vec::with_capacity(experiments.len());
    for mut e in experiments {
        let span = e.workload.span();
        if span > usable {
            return Err(Error::Capacity(e.id));
        }
        if !e.workload.has_sequential_write() {
            e.workload.place_at(base_offset);
            out.push(Placement { experiment: e, epoch: 0 });
            continue;
        }
        if cursor + span > capacity {
            epoch += 1;
            cursor = base_offset;
        }
        e.workload.place_at(cursor);
        cursor += span;
        out.push(Placement { experiment: e, epoch });
    }
    Ok(out)
}
