//! Device state enforcement, two-phase calibration, pause calibration and
//! benchmark plans.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{detect_startup, estimate_period};
use crate::device::BlockDevice;
use crate::error::{Error, Result};
use crate::microbench::{Baseline, ExperimentSpec, Placement, SuiteConfig, Workload};
use crate::pattern::{Location, Mode, PatternSpec};
use crate::runner::{self, RunContext};
use crate::{seed, SCHEMA_VERSION, SECTOR};

/// Largest write issued while enforcing the random state.
pub const FORMAT_MAX_IO: u64 = 131_072;

/// Lower bound of the inter-run pause.
pub const MIN_PAUSE_US: u64 = 1_000_000;

/// One bit per sector, set once the sector has been written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    sectors: u64,
    words: Vec<u64>,
    covered: u64,
}

impl Coverage {
    pub fn new(capacity: u64) -> Self {
        let sectors = capacity / SECTOR;
        Coverage { sectors, words: vec![0; sectors.div_ceil(64) as usize], covered: 0 }
    }

    pub fn sectors(&self) -> u64 {
        self.sectors
    }

    pub fn covered(&self) -> u64 {
        self.covered
    }

    pub fn fraction(&self) -> f64 {
        if self.sectors == 0 {
            1.0
        } else {
            self.covered as f64 / self.sectors as f64
        }
    }

    pub fn is_complete(&self) -> bool {
        self.covered == self.sectors
    }

    pub fn is_set(&self, sector: u64) -> bool {
        self.words[(sector / 64) as usize] >> (sector % 64) & 1 == 1
    }

    /// Marks the sectors touched by a write of `size` bytes at byte `lba`.
    pub fn mark(&mut self, lba: u64, size: u64) {
        let first = lba / SECTOR;
        let end = (lba + size).div_ceil(SECTOR).min(self.sectors);
        let mut s = first;
        while s < end {
            let w = (s / 64) as usize;
            let lo = s % 64;
            let hi = (end - (s - lo)).min(64);
            let mask = if hi - lo == 64 { u64::MAX } else { ((1u64 << (hi - lo)) - 1) << lo };
            self.covered += (mask & !self.words[w]).count_ones() as u64;
            self.words[w] |= mask;
            s += hi - lo;
        }
    }

    /// First unwritten sector at or after `from`.
    pub fn first_uncovered(&self, from: u64) -> Option<u64> {
        let mut w = (from / 64) as usize;
        let mut mask = !0u64 << (from % 64);
        while w < self.words.len() {
            let free = !self.words[w] & mask;
            if free != 0 {
                let s = w as u64 * 64 + free.trailing_zeros() as u64;
                return (s < self.sectors).then_some(s);
            }
            w += 1;
            mask = !0;
        }
        None
    }

    fn to_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.sectors.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        let sectors = u64::from_le_bytes(b.get(..8)?.try_into().ok()?);
        let n = sectors.div_ceil(64) as usize;
        let body = b.get(8..8 + n * 8)?;
        let words: Vec<u64> = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        let covered = words.iter().map(|w| w.count_ones() as u64).sum();
        (b.len() == 8 + n * 8).then_some(Coverage { sectors, words, covered })
    }
}

/// Tuning of the random-state enforcement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatOptions {
    /// Bytes written at random locations, as a multiple of the capacity,
    /// before the remaining holes are filled in address order.
    pub random_passes: f64,
}

impl Default for FormatOptions {
    fn default() -> Self {
        FormatOptions { random_passes: 2.0 }
    }
}

/// Resumable progress of a state enforcement.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatProgress {
    pub seed: u64,
    pub capacity: u64,
    pub next_io: u64,
    pub bytes_written: u64,
    pub elapsed_us: u64,
    pub coverage: Coverage,
}

const FORMAT_MAGIC: &[u8; 8] = b"FPFMT\0\0\x01";

impl FormatProgress {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FORMAT_MAGIC.to_vec();
        for v in [self.seed, self.capacity, self.next_io, self.bytes_written, self.elapsed_us] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.coverage.to_bytes(&mut out);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = || Error::Snapshot("corrupt format journal".into());
        if b.get(..8) != Some(FORMAT_MAGIC.as_slice()) {
            return Err(bad());
        }
        let word = |i: usize| -> Result<u64> {
            Ok(u64::from_le_bytes(b.get(8 + i * 8..16 + i * 8).ok_or_else(bad)?.try_into().unwrap()))
        };
        let coverage = Coverage::from_bytes(&b[48.min(b.len())..]).ok_or_else(bad)?;
        Ok(FormatProgress {
            seed: word(0)?,
            capacity: word(1)?,
            next_io: word(2)?,
            bytes_written: word(3)?,
            elapsed_us: word(4)?,
            coverage,
        })
    }
}

/// Writes the whole device with random IOs of random size, in resumable
/// steps.
pub struct Formatter {
    opts: FormatOptions,
    progress: FormatProgress,
    payload: Vec<u8>,
    hint: u64,
}

impl Formatter {
    pub fn new(capacity: u64, seed: u64, opts: FormatOptions) -> Self {
        let progress = FormatProgress {
            seed,
            capacity,
            next_io: 0,
            bytes_written: 0,
            elapsed_us: 0,
            coverage: Coverage::new(capacity),
        };
        Self::resume(progress, opts)
    }

    pub fn resume(progress: FormatProgress, opts: FormatOptions) -> Self {
        let mut payload = vec![0u8; FORMAT_MAX_IO as usize];
        ChaCha8Rng::seed_from_u64(seed::derive(progress.seed, 0xf0)).fill_bytes(&mut payload);
        Formatter { opts, progress, payload, hint: 0 }
    }

    pub fn progress(&self) -> &FormatProgress {
        &self.progress
    }

    pub fn is_complete(&self) -> bool {
        self.progress.coverage.is_complete()
    }

    fn in_random_phase(&self) -> bool {
        (self.progress.bytes_written as f64) < self.opts.random_passes * self.progress.capacity as f64
    }

    /// Estimated time to completion, from the mean write time so far.
    pub fn eta_us(&self) -> Option<u64> {
        let p = &self.progress;
        if p.next_io == 0 {
            return None;
        }
        let per_byte = p.elapsed_us as f64 / p.bytes_written.max(1) as f64;
        let random_left = (self.opts.random_passes * p.capacity as f64 - p.bytes_written as f64).max(0.0);
        let holes = (p.coverage.sectors() - p.coverage.covered()) as f64 * SECTOR as f64;
        let holes_after = if random_left > 0.0 { holes * (-random_left / p.capacity as f64).exp() } else { holes };
        Some((per_byte * (random_left + holes_after)) as u64)
    }

    /// Issues up to `budget` writes. Returns true once every sector is covered.
    pub fn step(&mut self, dev: &mut dyn BlockDevice, budget: u64) -> Result<bool> {
        let sectors = self.progress.coverage.sectors();
        for _ in 0..budget {
            if self.is_complete() {
                break;
            }
            let i = self.progress.next_io;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.progress.seed, i));
            let max = (FORMAT_MAX_IO / SECTOR).min(sectors);
            let size = rng.gen_range(1..=max) * SECTOR;
            let top = sectors * SECTOR - size;
            let lba = if self.in_random_phase() {
                rng.gen_range(0..=top / SECTOR) * SECTOR
            } else {
                let s = self.progress.coverage.first_uncovered(self.hint).expect("incomplete coverage has a hole");
                self.hint = s;
                (s * SECTOR).min(top)
            };
            let rt = dev.write(lba, &self.payload[..size as usize]).map_err(|e| {
                let source = match e {
                    Error::Io(io) => Error::DeviceIo { index: i, source: io },
                    other => other,
                };
                Error::FormatAborted { coverage: self.progress.coverage.fraction(), source: Box::new(source) }
            })?;
            self.progress.coverage.mark(lba, size);
            self.progress.next_io += 1;
            self.progress.bytes_written += size;
            self.progress.elapsed_us += rt;
        }
        Ok(self.is_complete())
    }
}

/// Brings the device to the random state. Returns the device time spent.
pub fn enforce_random_state(dev: &mut dyn BlockDevice, seed: u64) -> Result<u64> {
    let mut f = Formatter::new(dev.capacity(), seed, FormatOptions::default());
    while !f.step(dev, 1 << 16)? {}
    Ok(f.progress().elapsed_us)
}

/// Calibrated behavior of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub schema_version: u32,
    pub device: String,
    pub startup: BTreeMap<Baseline, u64>,
    pub period: BTreeMap<Baseline, u64>,
    pub io_count_recommendation: BTreeMap<Baseline, u64>,
    pub inter_run_pause_us: u64,
    /// Measured duration of the write-induced slowdown of later reads.
    pub lingering_us: u64,
    pub affected_reads: u64,
    /// Calibration steps that fell back to defaults.
    pub flags: Vec<String>,
}

impl DeviceProfile {
    /// A profile with no start-up phase, period 1 and the minimum pause.
    pub fn ideal(device: impl Into<String>, cfg: &SuiteConfig) -> Self {
        DeviceProfile {
            schema_version: SCHEMA_VERSION,
            device: device.into(),
            startup: Baseline::ALL.iter().map(|&b| (b, 0)).collect(),
            period: Baseline::ALL.iter().map(|&b| (b, 1)).collect(),
            io_count_recommendation: Baseline::ALL.iter().map(|&b| (b, cfg.count(b))).collect(),
            inter_run_pause_us: MIN_PAUSE_US,
            lingering_us: 0,
            affected_reads: 0,
            flags: Vec::new(),
        }
    }

    pub fn startup_of(&self, b: Baseline) -> u64 {
        self.startup.get(&b).copied().unwrap_or(0)
    }

    pub fn apply_pause(&mut self, p: &PauseCalibration) {
        self.inter_run_pause_us = p.pause_us;
        self.lingering_us = p.lingering_us;
        self.affected_reads = p.affected;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        if self.period.values().any(|&p| p == 0) {
            return Err(Error::InvalidSpec("period must be at least 1".into()));
        }
        if self.inter_run_pause_us < self.lingering_us {
            return Err(Error::InvalidSpec("pause is shorter than the measured lingering".into()));
        }
        Ok(())
    }
}

/// Tuning of the start-up and period calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    /// IOs per baseline run; `None` means ten times the largest IOCount.
    pub long_io_count: Option<u64>,
    /// Idle time before each calibration run.
    pub settle_us: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { long_io_count: None, settle_us: 10_000_000 }
    }
}

impl CalibrationOptions {
    pub fn long_count(&self, cfg: &SuiteConfig) -> u64 {
        self.long_io_count.unwrap_or_else(|| 10 * Baseline::ALL.iter().map(|&b| cfg.count(b)).max().unwrap_or(0))
    }
}

fn calibration_pattern(cfg: &SuiteConfig, b: Baseline, count: u64, tag: &str) -> PatternSpec {
    let mut p = PatternSpec::baseline(b.location(), b.mode(), cfg.base_io_size, cfg.base_target_size, count);
    p.target_offset = cfg.base_target_offset;
    p.seed = seed::derive(cfg.seed, seed::hash_str(&format!("{tag}/{}", b.label())));
    p
}

fn run_pattern(dev: &mut dyn BlockDevice, p: PatternSpec, id: &str) -> Result<Vec<u64>> {
    let streams = runner::streams(&Workload::Basic(p.clone()))?;
    let ctx = RunContext { experiment_id: id.to_string(), run_index: 0, seed: seed::derive(p.seed, 1) };
    let trace = runner::execute_run(dev, &streams, &ctx)?;
    trace.check()?;
    Ok(trace.response_times())
}

/// Result of the two-phase calibration, with the traces it was derived from.
#[derive(Debug, Clone)]
pub struct PhaseCalibration {
    pub profile: DeviceProfile,
    pub traces: BTreeMap<Baseline, Vec<u64>>,
}

/// Runs each baseline with a long IOCount and derives start-up, period and
/// a recommended IOCount per baseline.
pub fn calibrate_phases(
    dev: &mut dyn BlockDevice,
    cfg: &SuiteConfig,
    opts: &CalibrationOptions,
) -> Result<PhaseCalibration> {
    let n = opts.long_count(cfg);
    let mut profile = DeviceProfile::ideal(dev.id(), cfg);
    let mut traces = BTreeMap::new();
    for b in Baseline::ALL {
        dev.idle(opts.settle_us);
        let rts = run_pattern(dev, calibration_pattern(cfg, b, n, "calibrate"), &format!("calibrate/{}", b.label()))?;
        let (startup, period) = phases_of(&rts, b, cfg, &mut profile.flags);
        profile.startup.insert(b, startup);
        profile.period.insert(b, period);
        profile.io_count_recommendation.insert(b, startup + (20 * period).max(cfg.count(b)));
        traces.insert(b, rts);
    }
    Ok(PhaseCalibration { profile, traces })
}

/// Start-up and period of one calibration trace, falling back to the
/// configured defaults when the detectors do not converge.
pub fn phases_of(rts: &[u64], b: Baseline, cfg: &SuiteConfig, flags: &mut Vec<String>) -> (u64, u64) {
    let s = detect_startup(rts);
    let startup = if s.inconclusive {
        flags.push(format!("{}: start-up inconclusive, using io_ignore {}", b.label(), cfg.ignore(b)));
        cfg.ignore(b)
    } else {
        s.startup
    };
    let p = estimate_period(&rts[(startup as usize).min(rts.len())..]);
    if p.low_confidence {
        flags.push(format!("{}: no dominant period", b.label()));
    }
    (startup, p.period)
}

/// Tuning of the pause calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PauseOptions {
    pub sr_batch: u64,
    pub rw_batch: u64,
    /// Reads slower than mean + k_sigma standard deviations are affected.
    pub k_sigma: f64,
    /// The second read batch ends after this many unaffected reads in a row.
    pub quiet_window: u64,
    pub max_reads: u64,
    pub settle_us: u64,
}

impl Default for PauseOptions {
    fn default() -> Self {
        PauseOptions {
            sr_batch: 1024,
            rw_batch: 1024,
            k_sigma: 3.0,
            quiet_window: 1024,
            max_reads: 1_000_000,
            settle_us: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PauseCalibration {
    pub sr_mean_us: f64,
    pub sr_stddev_us: f64,
    pub threshold_us: f64,
    pub affected: u64,
    pub lingering_us: u64,
    pub pause_us: u64,
}

/// Counts the reads slower than the threshold and sums their cost.
pub fn affected_reads(rts: &[u64], threshold_us: f64) -> (u64, u64) {
    rts.iter().filter(|&&rt| rt as f64 > threshold_us).fold((0, 0), |(n, s), &rt| (n + 1, s + rt))
}

/// Inter-run pause from the lingering duration: twice as long, and never
/// below one second.
pub fn pause_from_lingering(lingering_us: u64) -> u64 {
    (2 * lingering_us).max(MIN_PAUSE_US)
}

/// Measures how long random writes keep slowing down later sequential reads.
pub fn calibrate_pause(dev: &mut dyn BlockDevice, cfg: &SuiteConfig, opts: &PauseOptions) -> Result<PauseCalibration> {
    dev.idle(opts.settle_us);
    let before = run_pattern(dev, calibration_pattern(cfg, Baseline::SR, opts.sr_batch, "pause"), "pause/SR")?;
    let stats = runner::RunStats::of(&before).ok_or(Error::InvalidSpec("empty read batch".into()))?;
    let threshold_us = stats.mean + opts.k_sigma * stats.stddev;
    run_pattern(dev, calibration_pattern(cfg, Baseline::RW, opts.rw_batch, "pause"), "pause/RW")?;

    let reads = calibration_pattern(cfg, Baseline::SR, opts.max_reads, "pause-after");
    let mut after = Vec::new();
    let mut quiet = 0;
    for i in 0..opts.max_reads {
        let rt = dev.read(reads.lba_at(i)?, reads.io_size).map_err(|e| match e {
            Error::Io(io) => Error::DeviceIo { index: i, source: io },
            other => other,
        })?;
        after.push(rt);
        quiet = if rt as f64 > threshold_us { 0 } else { quiet + 1 };
        if quiet >= opts.quiet_window {
            break;
        }
    }
    let (affected, lingering_us) = affected_reads(&after, threshold_us);
    Ok(PauseCalibration {
        sr_mean_us: stats.mean,
        sr_stddev_us: stats.stddev,
        threshold_us,
        affected,
        lingering_us,
        pause_us: pause_from_lingering(lingering_us),
    })
}

/// One step of a benchmark plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PlanStep {
    /// Bring the device back to the random state.
    StateReset,
    Pause {
        us: u64,
    },
    /// Run `run_index` of `experiments[experiment]`.
    Run {
        experiment: usize,
        run_index: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedExperiment {
    pub spec: ExperimentSpec,
    pub epoch: u32,
}

/// Experiments in execution order, separated by state resets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub schema_version: u32,
    pub capacity: u64,
    pub pause_us: u64,
    pub experiments: Vec<PlannedExperiment>,
    pub steps: Vec<PlanStep>,
}

/// Summary of a successful plan replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanCheck {
    pub resets: u32,
    pub runs: u64,
    /// Largest sequential-write space used in one epoch.
    pub max_epoch_bytes: u64,
}

fn baseline_of(p: &PatternSpec) -> Baseline {
    let loc = if p.location.is_random() { Location::Random } else { Location::Sequential };
    Baseline::of(loc, p.mode).expect("sequential and random cover every mode")
}

fn sequential_write_ranges(w: &Workload) -> Vec<(u64, u64)> {
    w.patterns()
        .into_iter()
        .filter(|p| p.mode == Mode::Write && !p.location.is_random())
        .map(|p| (p.target_offset, p.footprint_end()))
        .collect()
}

/// IOs to ignore so that every component's start-up is skipped. In a mix,
/// component `c` gets only its share of the IOs, so its start-up is scaled
/// up by the inverse of that share.
pub fn scaled_io_ignore(w: &Workload, profile: &DeviceProfile) -> u64 {
    match w {
        Workload::Basic(p) | Workload::Parallel(crate::pattern::ParallelSpec { base: p, .. }) => {
            profile.startup_of(baseline_of(p))
        }
        Workload::Mix(m) => {
            let r = m.ratio;
            let first = (profile.startup_of(baseline_of(&m.first)) * (r + 1)).div_ceil(r);
            let second = profile.startup_of(baseline_of(&m.second)) * (r + 1);
            first.max(second)
        }
    }
}

/// Sets io_ignore from the profile and grows the IOCount when the
/// start-up would leave nothing to measure.
fn apply_startup(e: &mut ExperimentSpec, profile: &DeviceProfile) {
    let ignore = scaled_io_ignore(&e.workload, profile);
    e.io_ignore = ignore;
    match &mut e.workload {
        Workload::Basic(p) => {
            if ignore >= p.io_count {
                p.io_count += ignore;
            }
            p.io_ignore = ignore;
        }
        Workload::Mix(m) => {
            let total = m.len();
            if ignore >= total {
                let second = (ignore + total).div_ceil(m.ratio + 1);
                m.second.io_count = second;
                m.first.io_count = second * m.ratio;
            }
        }
        Workload::Parallel(par) => {
            let d = par.parallel_degree;
            let per = par.base.io_count / d;
            if ignore >= per {
                par.base.io_count = d * (ignore + per.max(1));
            }
            par.base.io_ignore = ignore;
        }
    }
}

/// Orders placed experiments into runs, pauses and state resets.
pub fn build_plan(placements: Vec<Placement>, profile: &DeviceProfile, capacity: u64) -> Result<BenchmarkPlan> {
    let mut plan = BenchmarkPlan {
        schema_version: SCHEMA_VERSION,
        capacity,
        pause_us: profile.inter_run_pause_us,
        experiments: Vec::new(),
        steps: Vec::new(),
    };
    let last_epoch = placements.iter().map(|p| p.epoch).max();
    let mut buckets: Vec<(Vec<ExperimentSpec>, Vec<ExperimentSpec>)> =
        vec![Default::default(); last_epoch.map_or(0, |e| e as usize + 1)];
    for Placement { mut experiment, epoch } in placements {
        if experiment.workload.patterns().iter().any(|p| p.footprint_end() > capacity) {
            return Err(Error::Capacity(experiment.id));
        }
        apply_startup(&mut experiment, profile);
        let b = &mut buckets[epoch as usize];
        if experiment.workload.has_sequential_write() {
            b.1.push(experiment);
        } else {
            b.0.push(experiment);
        }
    }
    for (epoch, (plain, sw)) in buckets.into_iter().enumerate() {
        if epoch > 0 {
            plan.steps.push(PlanStep::StateReset);
        }
        for spec in plain.into_iter().chain(sw) {
            let idx = plan.experiments.len();
            for k in 0..spec.repetitions {
                plan.steps.push(PlanStep::Pause { us: plan.pause_us });
                plan.steps.push(PlanStep::Run { experiment: idx, run_index: k });
            }
            plan.experiments.push(PlannedExperiment { spec, epoch: epoch as u32 });
        }
    }
    Ok(plan)
}

impl BenchmarkPlan {
    pub fn resets(&self) -> u32 {
        self.steps.iter().filter(|s| matches!(s, PlanStep::StateReset)).count() as u32
    }

    /// Replays the plan against a ledger of sequentially written space.
    pub fn verify(&self) -> Result<PlanCheck> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        let mut epoch = 0u32;
        let mut used: Vec<(u64, u64)> = Vec::new();
        let mut started = vec![false; self.experiments.len()];
        let mut check = PlanCheck { resets: 0, runs: 0, max_epoch_bytes: 0 };
        let mut paused = false;
        for (i, step) in self.steps.iter().enumerate() {
            match *step {
                PlanStep::StateReset => {
                    epoch += 1;
                    check.resets += 1;
                    used.clear();
                    paused = false;
                }
                PlanStep::Pause { us } => {
                    if us < self.pause_us {
                        return bad(format!("step {i}: pause {us} us is shorter than {} us", self.pause_us));
                    }
                    paused = true;
                }
                PlanStep::Run { experiment, run_index } => {
                    let Some(e) = self.experiments.get(experiment) else {
                        return bad(format!("step {i}: no experiment {experiment}"));
                    };
                    if !paused {
                        return bad(format!("step {i}: run without a preceding pause"));
                    }
                    paused = false;
                    if run_index >= e.spec.repetitions {
                        return bad(format!("step {i}: run {run_index} of {} repetitions", e.spec.repetitions));
                    }
                    if e.spec.workload.patterns().iter().any(|p| p.footprint_end() > self.capacity) {
                        return Err(Error::Capacity(e.spec.id.clone()));
                    }
                    check.runs += 1;
                    if std::mem::replace(&mut started[experiment], true) {
                        continue;
                    }
                    for (a, b) in sequential_write_ranges(&e.spec.workload) {
                        if e.epoch != epoch {
                            return bad(format!("{} planned for epoch {} runs in {epoch}", e.spec.id, e.epoch));
                        }
                        if let Some(&(c, d)) = used.iter().find(|&&(c, d)| a < d && c < b) {
                            return bad(format!("{}: sequential writes {a}..{b} overlap {c}..{d}", e.spec.id));
                        }
                        used.push((a, b));
                    }
                    let total: u64 = used.iter().map(|(a, b)| b - a).sum();
                    if total > self.capacity {
                        return bad(format!("epoch {epoch} writes {total} bytes sequentially"));
                    }
                    check.max_epoch_bytes = check.max_epoch_bytes.max(total);
                }
            }
        }
        Ok(check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{ConstantDevice, FtlSimulator, GcMode, SimProfile};
    use crate::microbench::{assign_target_offsets, expand_suite, Micro};
    use crate::pattern::MixSpec;
    use proptest::prelude::*;

    /// Records write sizes and locations of an inner device.
    struct Recorder {
        inner: ConstantDevice,
        writes: Vec<(u64, u64)>,
        fail_after: Option<usize>,
    }

    impl BlockDevice for Recorder {
        fn id(&self) -> String {
            "recorder".into()
        }
        fn capacity(&self) -> u64 {
            self.inner.capacity()
        }
        fn read(&mut self, lba: u64, size: u64) -> Result<u64> {
            self.inner.read(lba, size)
        }
        fn write(&mut self, lba: u64, data: &[u8]) -> Result<u64> {
            if self.fail_after.is_some_and(|n| self.writes.len() >= n) {
                return Err(Error::Io(std::io::Error::other("injected")));
            }
            self.writes.push((lba, data.len() as u64));
            self.inner.write(lba, data)
        }
        fn now_us(&self) -> u64 {
            self.inner.now_us()
        }
        fn idle(&mut self, us: u64) -> u64 {
            self.inner.idle(us)
        }
        fn is_simulated(&self) -> bool {
            true
        }
    }

    fn recorder(capacity: u64) -> Recorder {
        Recorder { inner: ConstantDevice::new(capacity, 10, 20), writes: Vec::new(), fail_after: None }
    }

    #[test]
    fn enforcement_covers_every_sector() {
        let mut dev = recorder(64 << 20);
        let mut f = Formatter::new(64 << 20, 7, FormatOptions::default());
        while !f.step(&mut dev, 4096).unwrap() {}
        let mut oracle = vec![false; (64 << 20) / 512];
        for &(lba, size) in &dev.writes {
            assert_eq!(lba % 512, 0);
            assert!(size % 512 == 0 && (512..=131_072).contains(&size));
            for s in lba / 512..(lba + size) / 512 {
                oracle[s as usize] = true;
            }
        }
        assert!(oracle.iter().all(|&x| x));
        assert!(f.progress().coverage.is_complete());
        assert!(dev.writes.iter().map(|w| w.1).sum::<u64>() >= 2 * (64 << 20));
        assert_eq!(f.eta_us(), Some(0));
    }

    #[test]
    fn enforcement_resumes_where_it_stopped() {
        let cap = 8 << 20;
        let mut whole = recorder(cap);
        let elapsed = enforce_random_state(&mut whole, 3).unwrap();

        let mut dev = recorder(cap);
        let mut f = Formatter::new(cap, 3, FormatOptions::default());
        f.step(&mut dev, 100).unwrap();
        let saved = f.progress().to_bytes();
        let mut f = Formatter::resume(FormatProgress::from_bytes(&saved).unwrap(), FormatOptions::default());
        while !f.step(&mut dev, 1000).unwrap() {}
        assert_eq!(dev.writes, whole.writes);
        assert_eq!(f.progress().elapsed_us, elapsed);
        assert!(FormatProgress::from_bytes(&saved[..saved.len() - 1]).is_err());
    }

    #[test]
    fn enforcement_failure_reports_coverage() {
        let mut dev = recorder(8 << 20);
        dev.fail_after = Some(50);
        let err = enforce_random_state(&mut dev, 1).unwrap_err();
        let Error::FormatAborted { coverage, .. } = &err else { panic!("{err}") };
        assert!(*coverage > 0.0 && *coverage < 1.0);
        assert!(err.is_device_error());
    }

    fn small_cfg() -> SuiteConfig {
        SuiteConfig { base_target_size: 8 << 20, ..Default::default() }
    }

    #[test]
    fn ideal_device_calibration() {
        let mut dev = ConstantDevice::new(64 << 20, 100, 300);
        let opts = CalibrationOptions { long_io_count: Some(4096), settle_us: 0 };
        let c = calibrate_phases(&mut dev, &small_cfg(), &opts).unwrap();
        for b in Baseline::ALL {
            assert_eq!(c.profile.startup[&b], 0);
            assert_eq!(c.profile.period[&b], 1);
            assert_eq!(c.profile.io_count_recommendation[&b], small_cfg().count(b));
            assert_eq!(c.traces[&b].len(), 4096);
        }
        let p = calibrate_pause(&mut dev, &small_cfg(), &PauseOptions::default()).unwrap();
        assert_eq!((p.affected, p.pause_us), (0, MIN_PAUSE_US));
        c.profile.validate().unwrap();
    }

    #[test]
    fn affected_rule() {
        let pre = [300u64, 310, 290, 305, 295];
        let s = runner::RunStats::of(&pre).unwrap();
        assert_eq!(affected_reads(&pre, s.mean + 3.0 * s.stddev), (0, 0));
        assert_eq!(affected_reads(&[300, 900, 800, 300], 400.0), (2, 1700));
        assert_eq!(pause_from_lingering(2_500_000), 5_000_000);
        assert_eq!(pause_from_lingering(10), MIN_PAUSE_US);
    }

    fn deferred(drain_rate: f64) -> FtlSimulator {
        let p = SimProfile {
            capacity: 256 << 20,
            free_block_pool: 40,
            gc_mode: GcMode::Deferred { drain_rate },
            ..SimProfile::highend_ssd()
        };
        FtlSimulator::new(p).unwrap()
    }

    #[test]
    fn longer_drain_never_shortens_pause() {
        let cfg = small_cfg();
        let opts = PauseOptions { settle_us: 0, ..Default::default() };
        let mut last = 0;
        for rate in [200.0, 50.0, 10.0] {
            let mut dev = deferred(rate);
            enforce_random_state(&mut dev, 5).unwrap();
            dev.idle(100_000_000);
            let p = calibrate_pause(&mut dev, &cfg, &opts).unwrap();
            assert!(p.affected > 0);
            assert!(p.pause_us >= last, "rate {rate}: {} < {last}", p.pause_us);
            assert!(p.pause_us >= 2 * p.lingering_us);
            last = p.pause_us;
        }
    }

    fn profile_with(startup: &[(Baseline, u64)]) -> DeviceProfile {
        let mut p = DeviceProfile::ideal("t", &SuiteConfig::default());
        p.startup.extend(startup.iter().copied());
        p
    }

    #[test]
    fn empty_plan() {
        let plan = build_plan(Vec::new(), &profile_with(&[]), 1 << 30).unwrap();
        assert!(plan.steps.is_empty() && plan.experiments.is_empty());
        assert_eq!(plan.verify().unwrap().runs, 0);
    }

    #[test]
    fn mix_ignore_scales_with_share() {
        let rr = PatternSpec::baseline(Location::Random, Mode::Read, 32768, 128 << 20, 4096);
        let mut rw = PatternSpec::baseline(Location::Random, Mode::Write, 32768, 128 << 20, 1024);
        rw.target_offset = 128 << 20;
        let m = Workload::Mix(MixSpec { first: rr, second: rw, ratio: 4 });
        let profile = profile_with(&[(Baseline::RW, 128)]);
        assert_eq!(scaled_io_ignore(&m, &profile), 640);
        let profile = profile_with(&[(Baseline::RR, 10)]);
        assert_eq!(scaled_io_ignore(&m, &profile), 13);
    }

    #[test]
    fn mix_grows_when_startup_eats_it() {
        let rr = PatternSpec::baseline(Location::Random, Mode::Read, 32768, 128 << 20, 40);
        let mut rw = PatternSpec::baseline(Location::Random, Mode::Write, 32768, 128 << 20, 10);
        rw.target_offset = 128 << 20;
        let mut e = ExperimentSpec {
            id: "mix/RR+RW/ratio=4".into(),
            micro: Micro::Mix,
            baseline: "RR+RW".into(),
            parameter: "ratio".into(),
            value: 4,
            workload: Workload::Mix(MixSpec { first: rr, second: rw, ratio: 4 }),
            io_ignore: 0,
            repetitions: 1,
        };
        apply_startup(&mut e, &profile_with(&[(Baseline::RW, 128)]));
        assert_eq!(e.io_ignore, 640);
        assert!(e.workload.io_count() >= 640 + 50);
        let Workload::Mix(m) = &e.workload else { unreachable!() };
        assert_eq!(m.first.io_count, 4 * m.second.io_count);
    }

    #[test]
    fn large_device_never_resets() {
        let cfg = SuiteConfig::default();
        let exps = expand_suite(&cfg).unwrap();
        let cap = 32u64 << 30;
        let placed = assign_target_offsets(exps, cap, cfg.base_target_offset).unwrap();
        let plan = build_plan(placed, &profile_with(&[(Baseline::RW, 128)]), cap).unwrap();
        let check = plan.verify().unwrap();
        assert_eq!(check.resets, 0);
        assert!(check.max_epoch_bytes <= cap);

        let small = 1u64 << 30;
        let cfg = SuiteConfig { max_target_size: Some(small), ..cfg };
        let placed = assign_target_offsets(expand_suite(&cfg).unwrap(), small, 0).unwrap();
        let plan = build_plan(placed, &profile_with(&[]), small).unwrap();
        assert!(plan.verify().unwrap().resets > 0);
    }

    #[test]
    fn oversized_experiment_is_rejected() {
        let cfg = SuiteConfig { max_target_size: Some(1 << 30), ..Default::default() };
        let exps = expand_suite(&cfg).unwrap();
        let placed = assign_target_offsets(exps, 1 << 30, 0).unwrap();
        assert!(matches!(build_plan(placed, &profile_with(&[]), 64 << 20), Err(Error::Capacity(_))));
    }

    #[test]
    fn verify_catches_tampering() {
        let cfg = SuiteConfig { micros: vec![Micro::Order], max_target_size: Some(1 << 30), ..Default::default() };
        let placed = assign_target_offsets(expand_suite(&cfg).unwrap(), 1 << 30, 0).unwrap();
        let plan = build_plan(placed, &profile_with(&[]), 1 << 30).unwrap();
        plan.verify().unwrap();

        let mut overlap = plan.clone();
        let sw: Vec<usize> = (0..overlap.experiments.len())
            .filter(|&i| overlap.experiments[i].spec.workload.has_sequential_write())
            .collect();
        let (a, b) = (sw[0], sw[1]);
        overlap.experiments[b].epoch = overlap.experiments[a].epoch;
        let at = overlap.experiments[a].spec.workload.offset();
        overlap.experiments[b].spec.workload.place_at(at);
        assert!(overlap.verify().is_err());

        let mut nopause = plan.clone();
        nopause.steps.retain(|s| !matches!(s, PlanStep::Pause { .. }));
        assert!(nopause.verify().is_err());
    }

    proptest! {
        #[test]
        fn coverage_matches_bool_oracle(writes in proptest::collection::vec((0u64..4000, 1u64..300), 0..60), from in 0u64..4096) {
            let sectors = 4096u64;
            let mut c = Coverage::new(sectors * 512);
            let mut oracle = vec![false; sectors as usize];
            for (s, n) in writes {
                c.mark(s * 512, n * 512);
                for x in s..(s + n).min(sectors) {
                    oracle[x as usize] = true;
                }
            }
            prop_assert_eq!(c.covered(), oracle.iter().filter(|&&x| x).count() as u64);
            let expect = (from..sectors).find(|&x| !oracle[x as usize]);
            prop_assert_eq!(c.first_uncovered(from), expect);
            let mut bytes = Vec::new();
            c.to_bytes(&mut bytes);
            prop_assert_eq!(Coverage::from_bytes(&bytes), Some(c));
        }

        #[test]
        fn run_steps_ignore_at_least_startup(
            sr in 0u64..300, rr in 0u64..300, sw in 0u64..300, rw in 0u64..300,
            pick in proptest::collection::vec(0usize..9, 1..4),
        ) {
            let micros: Vec<Micro> = pick.iter().map(|&i| Micro::ALL[i]).collect();
            let cfg = SuiteConfig { micros, repetitions: 1, max_target_size: Some(1 << 30), ..Default::default() };
            let profile = profile_with(&[(Baseline::SR, sr), (Baseline::RR, rr), (Baseline::SW, sw), (Baseline::RW, rw)]);
            let placed = assign_target_offsets(expand_suite(&cfg).unwrap(), 1 << 30, 0).unwrap();
            let plan = build_plan(placed, &profile, 1 << 30).unwrap();
            plan.verify().unwrap();
            for e in &plan.experiments {
                let w = &e.spec.workload;
                for p in w.patterns() {
                    prop_assert!(e.spec.io_ignore >= profile.startup_of(baseline_of(p)));
                }
                let per_run = match w {
                    Workload::Parallel(par) => par.base.io_count / par.parallel_degree,
                    _ => w.io_count(),
                };
                prop_assert!(per_run > e.spec.io_ignore);
                if matches!(w, Workload::Basic(_)) && e.spec.micro == Micro::Granularity && e.spec.value == 32768 {
                    prop_assert_eq!(e.spec.io_ignore, profile.startup_of(baseline_of(w.patterns()[0])));
                }
            }
        }
    }
}
