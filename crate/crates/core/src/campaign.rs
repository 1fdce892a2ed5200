//! The benchmark pipeline as separate, resumable stages with file hand-offs.
//!
//! Every stage reads and writes artifacts below `<output>/<device>/`:
//!
//! ```text
//! manifests/<stage>.json           tool version, config hash and seed
//! state/checkpoint.json            device state journal (plus simulator snapshots)
//! state/format.json                state enforcement summary
//! profile.json                     calibrated device profile
//! calibration/<baseline>.tsv       calibration traces
//! plan.json                        benchmark plan
//! run.journal                      completed plan steps
//! <micro>/<baseline>/<param>=<value>/run<k>.csv
//! report/{summary.json,table.txt,results.json,plots/<micro>.tsv}
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, build_summary, ExperimentResult, SummaryReport, Thresholds};
use crate::device::{hex, probe_capabilities, BlockDevice, FtlSimulator, RawDevice, SimProfile, Snapshot};
use crate::error::{Error, Result};
use crate::methodology::{
    self, build_plan, BenchmarkPlan, CalibrationOptions, DeviceProfile, FormatOptions, FormatProgress, Formatter,
    PauseOptions, PlanStep,
};
use crate::microbench::{assign_target_offsets, expand_suite, Baseline, Micro, SuiteConfig};
use crate::runner::{self, RunContext, RunStats, Stream, Trace};
use crate::{seed, SCHEMA_VERSION};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which device a campaign measures. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSelector {
    /// Bundled simulator profile name or path to a profile JSON file.
    pub simulator: Option<String>,
    /// Raw block device or file.
    pub raw: Option<PathBuf>,
}

/// Manual replacements for calibrated values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub startup: BTreeMap<Baseline, u64>,
    pub period: BTreeMap<Baseline, u64>,
    pub pause_us: Option<u64>,
}

fn default_dispersion() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> u64 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub device: DeviceSelector,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Relative spread of run means above which an experiment is flagged.
    #[serde(default = "default_dispersion")]
    pub dispersion_threshold: f64,
    #[serde(default)]
    pub format: FormatOptions,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub pause: PauseOptions,
    #[serde(default)]
    pub overrides: Overrides,
    /// Continue from journals left by an earlier invocation.
    #[serde(default = "default_true")]
    pub resume: bool,
    /// Plan steps between simulator checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl CampaignConfig {
    pub fn new(device: DeviceSelector, output: impl Into<PathBuf>) -> Self {
        CampaignConfig {
            device,
            output: output.into(),
            seed: 0,
            suite: SuiteConfig::default(),
            thresholds: Thresholds::default(),
            dispersion_threshold: default_dispersion(),
            format: FormatOptions::default(),
            calibration: CalibrationOptions::default(),
            pause: PauseOptions::default(),
            overrides: Overrides::default(),
            resume: true,
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn simulator(profile: &str, output: impl Into<PathBuf>) -> Self {
        Self::new(DeviceSelector { simulator: Some(profile.into()), raw: None }, output)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.device.simulator, &self.device.raw) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::InvalidSpec("exactly one of device.simulator and device.raw must be set".into())),
        }
        if self.dispersion_threshold.is_nan() || self.dispersion_threshold <= 0.0 {
            return Err(Error::InvalidSpec("dispersion_threshold must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidSpec("checkpoint_every must be positive".into()));
        }
        self.effective_suite().validate()
    }

    /// The suite with the campaign seed applied.
    pub fn effective_suite(&self) -> SuiteConfig {
        SuiteConfig { seed: self.seed, ..self.suite.clone() }
    }

    /// Short hash identifying this exact configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json)[..8])
    }
}

/// Tool version, configuration hash and seed of a finished stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub device: String,
    pub finished_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStage {
    Fresh,
    Formatting,
    Formatted,
    Calibrated,
    Running,
}

/// Device state journal: what the device has been through, and for
/// simulators the snapshot holding that state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub stage: DeviceStage,
    /// Next plan step while running.
    pub step: u64,
    pub serial: u64,
    pub snapshot: Option<String>,
    pub snapshot_digest: Option<String>,
    pub format_progress: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub schema_version: u32,
    pub device: String,
    pub capacity: u64,
    pub writes: u64,
    pub bytes_written: u64,
    pub coverage: f64,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunReport {
    pub steps_executed: u64,
    pub ios: u64,
    pub resumed_at: u64,
}

fn now_secs() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes =
        fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Reads a versioned artifact, rejecting other schema versions before
/// interpreting the rest.
fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: u32,
    }
    let v: Version = read_json(path)?;
    if v.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: v.schema_version, expected: SCHEMA_VERSION });
    }
    read_json(path)
}

/// One campaign: a configuration bound to its output directory.
pub struct Campaign {
    cfg: CampaignConfig,
    device: String,
    dir: PathBuf,
    hash: String,
    step_limit: Option<u64>,
}

impl Campaign {
    pub fn new(cfg: CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        let device = match (&cfg.device.simulator, &cfg.device.raw) {
            (Some(spec), _) => SimProfile::load(spec)?.name,
            (_, Some(path)) => path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::InvalidSpec(format!("{} names no device", path.display())))?,
            _ => unreachable!("validated"),
        };
        let dir = cfg.output.join(&device);
        let hash = cfg.hash();
        Ok(Campaign { cfg, device, dir, hash, step_limit: None })
    }

    /// Stops `format` after `n` checkpoint intervals and `run` after `n`
    /// plan steps, leaving a checkpoint to resume from.
    pub fn with_step_limit(mut self, n: u64) -> Self {
        self.step_limit = Some(n);
        self
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    pub fn device_name(&self) -> &str {
        &self.device
    }

    /// Directory holding every artifact of this campaign.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Trace file of run `k` of experiment `id`.
    pub fn trace_path(&self, id: &str, k: u32) -> PathBuf {
        self.dir.join(id).join(format!("run{k}.csv"))
    }

    fn is_simulated(&self) -> bool {
        self.cfg.device.simulator.is_some()
    }

    fn write_manifest(&self, stage: &str) -> Result<()> {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            stage: stage.into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            device: self.device.clone(),
            finished_at: now_secs(),
        };
        write_json(&self.path(&format!("manifests/{stage}.json")), &m)
    }

    pub fn manifest(&self, stage: &str) -> Result<Manifest> {
        read_json(&self.path(&format!("manifests/{stage}.json")))
    }

    pub fn checkpoint(&self) -> Result<Option<Checkpoint>> {
        let p = self.path("state/checkpoint.json");
        if !p.exists() {
            return Ok(None);
        }
        read_versioned(&p).map(Some)
    }

    fn stage(&self) -> Result<DeviceStage> {
        Ok(self.checkpoint()?.map_or(DeviceStage::Fresh, |c| c.stage))
    }

    /// Opens the device in the state recorded by the last checkpoint.
    /// Writing to a raw device requires `force`.
    pub fn open_device(&self, write: bool, force: bool) -> Result<Box<dyn BlockDevice>> {
        if let Some(spec) = &self.cfg.device.simulator {
            let mut sim = FtlSimulator::new(SimProfile::load(spec)?)?;
            if let Some(cp) = self.checkpoint()? {
                if let (Some(file), Some(digest)) = (&cp.snapshot, &cp.snapshot_digest) {
                    let snap = Snapshot::from_bytes(fs::read(self.path("state").join(file))?);
                    if &snap.digest() != digest {
                        return Err(Error::Snapshot(format!("{file} does not match the checkpoint")));
                    }
                    sim.restore(&snap)?;
                }
            }
            return Ok(Box::new(sim));
        }
        let path = self.cfg.device.raw.as_ref().expect("validated");
        if write && !force {
            return Err(Error::InvalidSpec(format!(
                "refusing to write to {} without --force: its contents will be destroyed",
                path.display()
            )));
        }
        let caps = probe_capabilities(path);
        if !caps.usable() {
            return Err(Error::InvalidSpec(format!(
                "{} does not support direct synchronous IO: {}",
                path.display(),
                caps.notes.join("; ")
            )));
        }
        for n in &caps.notes {
            warn!("{}: {n}", path.display());
        }
        Ok(Box::new(RawDevice::open(path, write)?))
    }

    /// Records the device state, saving a fresh simulator snapshot.
    fn save_checkpoint(
        &self,
        dev: &dyn BlockDevice,
        stage: DeviceStage,
        step: u64,
        progress: Option<&FormatProgress>,
    ) -> Result<()> {
        let old = self.checkpoint()?;
        let serial = old.as_ref().map_or(0, |c| c.serial + 1);
        let state = self.path("state");
        let mut cp = Checkpoint {
            schema_version: SCHEMA_VERSION,
            stage,
            step,
            serial,
            snapshot: None,
            snapshot_digest: None,
            format_progress: None,
        };
        if dev.is_simulated() {
            let snap = dev.snapshot()?;
            let name = format!("sim-{serial}.snapshot");
            write_atomic(&state.join(&name), snap.as_bytes())?;
            cp.snapshot = Some(name);
            cp.snapshot_digest = Some(snap.digest());
        }
        if let Some(p) = progress {
            let name = format!("format-{serial}.progress");
            write_atomic(&state.join(&name), &p.to_bytes())?;
            cp.format_progress = Some(name);
        }
        write_json(&state.join("checkpoint.json"), &cp)?;
        if let Some(old) = old {
            for f in [old.snapshot, old.format_progress].into_iter().flatten() {
                let _ = fs::remove_file(state.join(f));
            }
        }
        Ok(())
    }

    /// Brings the device into the random state, resuming an interrupted run.
    pub fn format(
        &self,
        force: bool,
        mut on_progress: impl FnMut(&FormatProgress, Option<u64>),
    ) -> Result<FormatReport> {
        let report_path = self.path("state/format.json");
        let cp = if self.cfg.resume { self.checkpoint()? } else { None };
        if let Some(c) = &cp {
            if c.stage >= DeviceStage::Formatted && report_path.exists() {
                info!("device already formatted");
                return read_versioned(&report_path);
            }
        }
        let mut dev = self.open_device(true, force)?;
        let cap = dev.capacity();
        let mut f =
            match cp.as_ref().and_then(|c| c.format_progress.as_ref().filter(|_| c.stage == DeviceStage::Formatting)) {
                Some(file) => {
                    let p = FormatProgress::from_bytes(&fs::read(self.path("state").join(file))?)?;
                    if p.capacity != cap || p.seed != self.cfg.seed {
                        return Err(Error::InvalidSpec("format journal belongs to another device or seed".into()));
                    }
                    info!("resuming state enforcement at {:.1}% coverage", p.coverage.fraction() * 100.0);
                    Formatter::resume(p, self.cfg.format)
                }
                None => Formatter::new(cap, self.cfg.seed, self.cfg.format),
            };
        let mut chunks = 0;
        loop {
            let done = f.step(dev.as_mut(), 1 << 14)?;
            on_progress(f.progress(), f.eta_us());
            if done {
                break;
            }
            self.save_checkpoint(dev.as_ref(), DeviceStage::Formatting, 0, Some(f.progress()))?;
            chunks += 1;
            if self.step_limit.is_some_and(|n| chunks >= n) {
                info!("stopping state enforcement at {:.1}% coverage", f.progress().coverage.fraction() * 100.0);
                return Ok(self.format_report(f.progress(), cap));
            }
        }
        self.save_checkpoint(dev.as_ref(), DeviceStage::Formatted, 0, None)?;
        let report = self.format_report(f.progress(), cap);
        write_json(&report_path, &report)?;
        self.write_manifest("format")?;
        Ok(report)
    }

    fn format_report(&self, p: &FormatProgress, cap: u64) -> FormatReport {
        FormatReport {
            schema_version: SCHEMA_VERSION,
            device: self.device.clone(),
            capacity: cap,
            writes: p.next_io,
            bytes_written: p.bytes_written,
            coverage: p.coverage.fraction(),
            elapsed_us: p.elapsed_us,
        }
    }

    fn require(&self, stage: DeviceStage, hint: &str) -> Result<()> {
        if self.stage()? < stage {
            return Err(Error::InvalidSpec(format!("device not ready: run `{hint}` first")));
        }
        Ok(())
    }

    /// Calibrates start-up, period and inter-run pause.
    pub fn calibrate(&self, force: bool) -> Result<DeviceProfile> {
        self.require(DeviceStage::Formatted, "format")?;
        let out = self.path("profile.json");
        if self.cfg.resume && out.exists() && self.stage()? >= DeviceStage::Calibrated {
            info!("device already calibrated");
            return self.profile();
        }
        let suite = self.cfg.effective_suite();
        let mut dev = self.open_device(true, force)?;
        let phases = methodology::calibrate_phases(dev.as_mut(), &suite, &self.cfg.calibration)?;
        let pause = methodology::calibrate_pause(dev.as_mut(), &suite, &self.cfg.pause)?;
        let mut profile = phases.profile;
        profile.device = self.device.clone();
        profile.apply_pause(&pause);
        self.apply_overrides(&mut profile);
        profile.validate()?;
        for (b, rts) in &phases.traces {
            let (meta, series) = analysis::phase_plot(rts, profile.startup_of(*b) as usize);
            let mut buf = Vec::new();
            analysis::write_plot_tsv(&mut buf, &meta, &series)?;
            write_atomic(&self.path(&format!("calibration/{}.tsv", b.label())), &buf)?;
        }
        write_json(&out, &profile)?;
        self.save_checkpoint(dev.as_ref(), DeviceStage::Calibrated, 0, None)?;
        self.write_manifest("calibrate")?;
        Ok(profile)
    }

    fn apply_overrides(&self, p: &mut DeviceProfile) {
        let o = &self.cfg.overrides;
        for (&b, &v) in &o.startup {
            p.startup.insert(b, v);
            p.flags.push(format!("{}: start-up set to {v} by override", b.label()));
        }
        for (&b, &v) in &o.period {
            p.period.insert(b, v.max(1));
            p.flags.push(format!("{}: period set to {v} by override", b.label()));
        }
        if let Some(us) = o.pause_us {
            p.inter_run_pause_us = us.max(p.lingering_us);
            p.flags.push(format!("pause set to {} us by override", p.inter_run_pause_us));
        }
    }

    pub fn profile(&self) -> Result<DeviceProfile> {
        let p: DeviceProfile = read_versioned(&self.path("profile.json"))?;
        p.validate()?;
        Ok(p)
    }

    fn capacity(&self) -> Result<u64> {
        match &self.cfg.device.simulator {
            Some(spec) => Ok(SimProfile::load(spec)?.capacity),
            None => Ok(self.open_device(false, false)?.capacity()),
        }
    }

    /// Expands the suite and orders it into a verified plan.
    pub fn plan(&self) -> Result<BenchmarkPlan> {
        self.require(DeviceStage::Calibrated, "calibrate")?;
        let profile = self.profile()?;
        let capacity = self.capacity()?;
        let mut suite = self.cfg.effective_suite();
        let room = capacity.saturating_sub(suite.base_target_offset);
        suite.max_target_size = Some(suite.max_target_size.map_or(room, |m| m.min(room)));
        let placed = assign_target_offsets(expand_suite(&suite)?, capacity, suite.base_target_offset)?;
        let plan = build_plan(placed, &profile, capacity)?;
        let check = plan.verify()?;
        info!("plan: {} experiments, {} runs, {} state resets", plan.experiments.len(), check.runs, check.resets);
        write_json(&self.path("plan.json"), &plan)?;
        self.write_manifest("plan")?;
        Ok(plan)
    }

    pub fn load_plan(&self) -> Result<BenchmarkPlan> {
        if !self.path("plan.json").exists() {
            return Err(Error::InvalidSpec("no benchmark plan: run `plan` first".into()));
        }
        let plan: BenchmarkPlan = read_versioned(&self.path("plan.json"))?;
        let m = self.manifest("plan")?;
        if m.config_hash != self.hash {
            return Err(Error::InvalidSpec(format!(
                "plan.json was built from configuration {}, not {}; run `plan` again",
                m.config_hash, self.hash
            )));
        }
        plan.verify()?;
        Ok(plan)
    }

    fn journal_len(&self) -> Result<u64> {
        let p = self.path("run.journal");
        if !p.exists() {
            return Ok(0);
        }
        let mut n = 0;
        for line in BufReader::new(File::open(&p)?).lines() {
            let line = line?;
            let i: u64 = line
                .strip_prefix("done ")
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InvalidSpec(format!("corrupt run journal line: {line:?}")))?;
            if i != n {
                return Err(Error::InvalidSpec(format!("run journal skips from step {n} to {i}")));
            }
            n += 1;
        }
        Ok(n)
    }

    /// Executes the plan from the last completed step.
    pub fn run(&self, force: bool) -> Result<RunReport> {
        self.require(DeviceStage::Calibrated, "calibrate")?;
        let plan = self.load_plan()?;
        let journal_path = self.path("run.journal");
        let cp = self.checkpoint()?.expect("required stage implies a checkpoint");
        let start = match (self.cfg.resume, cp.stage == DeviceStage::Running) {
            (false, _) | (true, false) => {
                let _ = fs::remove_file(&journal_path);
                0
            }
            (true, true) if self.is_simulated() => cp.step.min(self.journal_len()?),
            (true, true) => self.journal_len()?,
        };
        let mut report = RunReport { resumed_at: start, ..Default::default() };
        let total = plan.steps.len() as u64;
        if start >= total && cp.stage == DeviceStage::Running {
            info!("plan already complete");
            return Ok(report);
        }
        let mut dev = self.open_device(true, force)?;
        if start > 0 {
            info!("resuming plan at step {start} of {total}");
        }
        // Steps after `start` may have been journaled before a crash; they
        // are redone from the checkpointed state.
        truncate_journal(&journal_path, start)?;
        let mut journal = BufWriter::new(OpenOptions::new().create(true).append(true).open(&journal_path)?);
        let mut streams: BTreeMap<usize, Vec<Stream>> = BTreeMap::new();
        let mut epoch =
            plan.steps[..start as usize].iter().filter(|s| matches!(s, PlanStep::StateReset)).count() as u64;
        let end = self.step_limit.map_or(total, |n| total.min(start + n));
        for i in start..end {
            match &plan.steps[i as usize] {
                PlanStep::StateReset => {
                    epoch += 1;
                    info!("step {i}: state reset {epoch}");
                    let seed = seed::derive(self.cfg.seed, 0x5e5e_0000 + epoch);
                    let mut f = Formatter::new(dev.capacity(), seed, self.cfg.format);
                    while !f.step(dev.as_mut(), 1 << 16)? {}
                }
                PlanStep::Pause { us } => {
                    dev.idle(*us);
                }
                PlanStep::Run { experiment, run_index } => {
                    let spec = &plan.experiments[*experiment].spec;
                    let s = match streams.entry(*experiment) {
                        std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::btree_map::Entry::Vacant(e) => e.insert(runner::streams(&spec.workload)?),
                    };
                    let ctx = RunContext {
                        experiment_id: spec.id.clone(),
                        run_index: *run_index,
                        seed: runner::run_seed(spec, *run_index),
                    };
                    let trace = runner::execute_run(dev.as_mut(), s, &ctx)?;
                    report.ios += trace.records.len() as u64;
                    self.write_trace(&trace)?;
                    trace.check()?;
                    if *run_index + 1 == spec.repetitions {
                        streams.remove(experiment);
                    }
                }
            }
            writeln!(journal, "done {i}")?;
            journal.flush()?;
            report.steps_executed += 1;
            if (i + 1) % self.cfg.checkpoint_every == 0 || i + 1 == end {
                self.save_checkpoint(dev.as_ref(), DeviceStage::Running, i + 1, None)?;
            }
        }
        if total == 0 {
            self.save_checkpoint(dev.as_ref(), DeviceStage::Running, 0, None)?;
        }
        if end < total {
            info!("stopped after step {end} of {total}");
            return Ok(report);
        }
        self.write_manifest("run")?;
        Ok(report)
    }

    fn write_trace(&self, t: &Trace) -> Result<()> {
        let path = self.trace_path(&t.meta.experiment_id, t.meta.run_index);
        let mut buf = Vec::new();
        runner::write_trace_csv(&mut buf, &t.records)?;
        write_atomic(&path, &buf)?;
        write_json(&path.with_extension("json"), &(&t.meta, &t.failure))
    }

    /// Summarizes whatever traces exist; experiments without traces are
    /// left out, which leaves the matching report fields empty.
    pub fn report(&self) -> Result<SummaryReport> {
        let plan = self.load_plan()?;
        let mut results = Vec::new();
        for e in &plan.experiments {
            let spec = &e.spec;
            let mut runs: Vec<RunStats> = Vec::new();
            for k in 0..spec.repetitions {
                let p = self.trace_path(&spec.id, k);
                if !p.exists() {
                    continue;
                }
                let records = runner::read_trace_csv(BufReader::new(File::open(&p)?))?;
                match runner::summarize(&records, spec.io_ignore) {
                    Ok(s) => runs.push(s),
                    Err(err) => warn!("{}: {err}", p.display()),
                }
            }
            let Some(avg) = RunStats::average(&runs) else { continue };
            let means: Vec<f64> = runs.iter().map(|r| r.mean).collect();
            let dispersion = runner::dispersion(&means);
            results.push(ExperimentResult {
                id: spec.id.clone(),
                micro: spec.micro,
                baseline: spec.baseline.clone(),
                parameter: spec.parameter.clone(),
                value: spec.value,
                mean_us: avg.mean,
                stddev_us: avg.stddev,
                run_means_us: means,
                dispersion,
                dispersed: dispersion > self.cfg.dispersion_threshold,
            });
        }
        let io_size = self.cfg.suite.base_io_size;
        let summary = build_summary(&self.device, io_size, &results, self.cfg.thresholds);
        write_json(&self.path("report/summary.json"), &summary)?;
        write_json(&self.path("report/results.json"), &results)?;
        write_atomic(&self.path("report/table.txt"), SummaryReport::table(std::slice::from_ref(&summary)).as_bytes())?;
        for micro in Micro::ALL {
            if !results.iter().any(|r| r.micro == micro) {
                continue;
            }
            let (meta, series) = analysis::sweep_plot(&results, micro, io_size, false);
            let mut buf = Vec::new();
            analysis::write_plot_tsv(&mut buf, &meta, &series)?;
            write_atomic(&self.path(&format!("report/plots/{}.tsv", micro.name())), &buf)?;
        }
        self.write_manifest("report")?;
        Ok(summary)
    }
}

fn truncate_journal(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text.lines().take(keep as usize).map(|l| format!("{l}\n")).collect();
    if kept.len() != text.len() {
        write_atomic(path, kept.as_bytes())?;
    }
    Ok(())
}
