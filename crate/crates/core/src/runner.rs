//! Run execution, traces and run statistics.

use std::io::{Read, Write};
use std::sync::{Arc, Barrier};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::BlockDevice;
use crate::error::{Error, Result};
use crate::microbench::{ExperimentSpec, Workload};
use crate::pattern::{self, gap_before, IoRequest, Mode, PatternSpec, Timing};
use crate::seed;

pub const TRACE_HEADER: [&str; 7] = ["index", "actual_submit_us", "response_time_us", "lba", "size", "mode", "worker"];

/// One executed IO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoRecord {
    pub index: u64,
    pub actual_submit_us: u64,
    pub response_time_us: u64,
    pub lba: u64,
    pub size: u64,
    pub mode: Mode,
    pub worker: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub experiment_id: String,
    pub run_index: u32,
    pub seed: u64,
    pub device_id: String,
    /// Seconds since the Unix epoch when the run started.
    pub wall_clock_start: u64,
    pub warnings: Vec<String>,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub index: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<IoRecord>,
    pub failure: Option<RunFailure>,
}

impl Trace {
    pub fn response_times(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.response_time_us).collect()
    }

    /// Turns a recorded failure into the corresponding error.
    pub fn check(&self) -> Result<()> {
        match &self.failure {
            None => Ok(()),
            Some(f) => Err(Error::DeviceIo { index: f.index, source: std::io::Error::other(f.message.clone()) }),
        }
    }
}

pub fn write_trace_csv<W: Write>(w: W, records: &[IoRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for r in records {
        out.write_record([
            r.index.to_string(),
            r.actual_submit_us.to_string(),
            r.response_time_us.to_string(),
            r.lba.to_string(),
            r.size.to_string(),
            r.mode.as_str().to_string(),
            r.worker.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<IoRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::InvalidSpec(format!("unexpected trace header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<u64> {
            row[i].parse().map_err(|_| Error::InvalidSpec(format!("bad trace field {:?}", &row[i])))
        };
        out.push(IoRecord {
            index: num(0)?,
            actual_submit_us: num(1)?,
            response_time_us: num(2)?,
            lba: num(3)?,
            size: num(4)?,
            mode: row[5].parse()?,
            worker: num(6)? as u32,
        });
    }
    Ok(out)
}

/// Response-time statistics over the kept part of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub count_ignored: u64,
    pub count_kept: u64,
}

impl RunStats {
    pub fn of(rts: &[u64]) -> Option<RunStats> {
        if rts.is_empty() {
            return None;
        }
        let n = rts.len() as f64;
        let mean = rts.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = rts.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        Some(RunStats {
            min: *rts.iter().min().unwrap() as f64,
            max: *rts.iter().max().unwrap() as f64,
            mean,
            stddev: var.sqrt(),
            count_ignored: 0,
            count_kept: rts.len() as u64,
        })
    }

    /// Field-wise average of several runs.
    pub fn average(runs: &[RunStats]) -> Option<RunStats> {
        let first = runs.first()?;
        let n = runs.len() as f64;
        let avg = |f: fn(&RunStats) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Some(RunStats {
            min: avg(|r| r.min),
            max: avg(|r| r.max),
            mean: avg(|r| r.mean),
            stddev: avg(|r| r.stddev),
            count_ignored: first.count_ignored,
            count_kept: first.count_kept,
        })
    }
}

/// Statistics over records whose index is at least `io_ignore`.
pub fn summarize(records: &[IoRecord], io_ignore: u64) -> Result<RunStats> {
    let kept: Vec<u64> = records.iter().filter(|r| r.index >= io_ignore).map(|r| r.response_time_us).collect();
    let mut stats = RunStats::of(&kept).ok_or(Error::EmptySummary { io_ignore, records: records.len() as u64 })?;
    stats.count_ignored = records.len() as u64 - stats.count_kept;
    Ok(stats)
}

/// Running average of `rts[skip..]`; the first `skip` entries are NaN.
pub fn running_average(rts: &[u64], skip: usize) -> Vec<f64> {
    let mut sum = 0.0;
    rts.iter()
        .enumerate()
        .map(|(i, &x)| {
            if i < skip {
                return f64::NAN;
            }
            sum += x as f64;
            sum / (i - skip + 1) as f64
        })
        .collect()
}

/// Relative spread of run means: `(max - min) / min`.
pub fn dispersion(means: &[f64]) -> f64 {
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if means.is_empty() || lo <= 0.0 {
        return 0.0;
    }
    (hi - lo) / lo
}

/// One worker's share of a run.
#[derive(Debug, Clone)]
pub struct Stream {
    pub requests: Vec<IoRequest>,
    pub timing: Timing,
}

/// The per-worker IO streams of a workload.
pub fn streams(workload: &Workload) -> Result<Vec<Stream>> {
    let one = |p: &PatternSpec| -> Result<Stream> {
        Ok(Stream { requests: pattern::generate_schedule(p)?, timing: p.timing })
    };
    match workload {
        Workload::Basic(p) => Ok(vec![one(p)?]),
        Workload::Mix(m) => Ok(vec![Stream { requests: pattern::interleave_mix(m)?, timing: Timing::Consecutive }]),
        Workload::Parallel(par) => pattern::split_parallel(par)?.iter().map(one).collect(),
    }
}

fn payload(run_seed: u64, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(run_seed).fill_bytes(&mut buf);
    buf
}

fn submit(dev: &mut dyn BlockDevice, req: &IoRequest, buf: &[u8]) -> Result<u64> {
    match req.mode {
        Mode::Read => dev.read(req.lba, req.size),
        Mode::Write => dev.write(req.lba, &buf[..req.size as usize]),
    }
}

fn failure(index: u64, e: Error) -> RunFailure {
    RunFailure { index, message: e.to_string() }
}

fn wall_clock() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn clock_warning(dev: &dyn BlockDevice) -> Option<String> {
    if dev.is_simulated() {
        return None;
    }
    let t = std::time::Instant::now();
    let a = dev.now_us();
    let mut b = a;
    while b == a && t.elapsed().as_millis() < 10 {
        b = dev.now_us();
    }
    (b - a > 1).then(|| format!("clock resolution is {} us", b - a))
}

/// Identifies a run in its trace metadata.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub experiment_id: String,
    pub run_index: u32,
    pub seed: u64,
}

/// Executes one run. Device failures stop the run and are reported in
/// `Trace::failure`; the records gathered so far are kept.
pub fn execute_run(dev: &mut dyn BlockDevice, streams: &[Stream], ctx: &RunContext) -> Result<Trace> {
    let mut meta = TraceMeta {
        experiment_id: ctx.experiment_id.clone(),
        run_index: ctx.run_index,
        seed: ctx.seed,
        device_id: dev.id(),
        wall_clock_start: wall_clock(),
        warnings: Vec::new(),
    };
    meta.warnings.extend(clock_warning(dev));
    let max_size = streams.iter().flat_map(|s| &s.requests).map(|r| r.size).max().unwrap_or(0);
    let buf = payload(ctx.seed, max_size as usize);
    let (records, failure) = match streams {
        [] => (Vec::new(), None),
        [one] => {
            let start = dev.now_us();
            run_single(dev, one, &buf, start, 0)
        }
        many if dev.is_simulated() => run_interleaved(dev, many, &buf),
        many => run_threads(dev, many, &buf)?,
    };
    Ok(Trace { meta, records, failure })
}

fn run_single(
    dev: &mut dyn BlockDevice,
    s: &Stream,
    buf: &[u8],
    start: u64,
    worker: u32,
) -> (Vec<IoRecord>, Option<RunFailure>) {
    let mut out = Vec::with_capacity(s.requests.len());
    for (i, req) in s.requests.iter().enumerate() {
        let gap = gap_before(&s.timing, i as u64);
        if gap > 0 {
            dev.idle(gap);
        }
        let at = dev.now_us();
        match submit(dev, req, buf) {
            Ok(rt) => out.push(record(req, at.saturating_sub(start), rt, worker)),
            Err(e) => return (out, Some(failure(req.index, e))),
        }
    }
    (out, None)
}

fn record(req: &IoRequest, at: u64, rt: u64, worker: u32) -> IoRecord {
    IoRecord {
        index: req.index,
        actual_submit_us: at,
        response_time_us: rt.max(1),
        lba: req.lba,
        size: req.size,
        mode: req.mode,
        worker,
    }
}

/// Workers on a simulated device share one timeline. The worker ready
/// earliest goes next (ties to the lower worker id); a worker that becomes
/// ready while the device is busy waits, and the wait counts toward its
/// response time.
fn run_interleaved(dev: &mut dyn BlockDevice, streams: &[Stream], buf: &[u8]) -> (Vec<IoRecord>, Option<RunFailure>) {
    let start = dev.now_us();
    let mut next = vec![0usize; streams.len()];
    let mut ready = vec![start; streams.len()];
    let mut out: Vec<Vec<IoRecord>> = vec![Vec::new(); streams.len()];
    let mut failed = None;
    loop {
        let Some(w) =
            (0..streams.len()).filter(|&w| next[w] < streams[w].requests.len()).min_by_key(|&w| (ready[w], w))
        else {
            break;
        };
        let s = &streams[w];
        let i = next[w];
        let want = ready[w] + if i == 0 { 0 } else { gap_before(&s.timing, i as u64) };
        let now = dev.now_us();
        if want > now {
            dev.idle(want - now);
        }
        let req = &s.requests[i];
        match submit(dev, req, buf) {
            Ok(_) => {
                let done = dev.now_us();
                out[w].push(record(req, want - start, done - want, w as u32));
                ready[w] = done;
                next[w] += 1;
            }
            Err(e) => {
                failed = Some(failure(req.index, e));
                break;
            }
        }
    }
    (out.concat(), failed)
}

fn run_threads(
    dev: &mut dyn BlockDevice,
    streams: &[Stream],
    buf: &[u8],
) -> Result<(Vec<IoRecord>, Option<RunFailure>)> {
    let handles = streams.iter().map(|_| dev.open_worker()).collect::<Result<Vec<_>>>()?;
    let barrier = Arc::new(Barrier::new(streams.len()));
    let start = dev.now_us();
    let results: Vec<(Vec<IoRecord>, Option<RunFailure>)> = std::thread::scope(|scope| {
        let joins: Vec<_> = handles
            .into_iter()
            .zip(streams)
            .enumerate()
            .map(|(w, (mut h, s))| {
                let barrier = Arc::clone(&barrier);
                scope.spawn(move || {
                    barrier.wait();
                    run_single(h.as_mut(), s, buf, start, w as u32)
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().expect("worker panicked")).collect()
    });
    let failure = results.iter().find_map(|(_, f)| f.clone());
    Ok((results.into_iter().flat_map(|(r, _)| r).collect(), failure))
}

/// Everything produced by running one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub traces: Vec<Trace>,
    pub runs: Vec<RunStats>,
    pub average: RunStats,
    pub dispersion: f64,
    pub dispersed: bool,
}

/// Seed of run `k` of an experiment; drives the write payload.
pub fn run_seed(exp: &ExperimentSpec, k: u32) -> u64 {
    seed::derive(exp.workload.patterns()[0].seed, k as u64 + 1)
}

/// Runs all repetitions of an experiment, idling `pause_us` before each.
pub fn execute_experiment(
    dev: &mut dyn BlockDevice,
    exp: &ExperimentSpec,
    pause_us: u64,
    dispersion_threshold: f64,
) -> Result<ExperimentOutcome> {
    let streams = streams(&exp.workload)?;
    let mut traces = Vec::new();
    let mut runs = Vec::new();
    for k in 0..exp.repetitions {
        dev.idle(pause_us);
        let ctx = RunContext { experiment_id: exp.id.clone(), run_index: k, seed: run_seed(exp, k) };
        let trace = execute_run(dev, &streams, &ctx)?;
        trace.check()?;
        runs.push(summarize(&trace.records, exp.io_ignore)?);
        traces.push(trace);
    }
    let average = RunStats::average(&runs).ok_or(Error::InvalidSpec("experiment has no repetitions".into()))?;
    let d = dispersion(&runs.iter().map(|r| r.mean).collect::<Vec<_>>());
    Ok(ExperimentOutcome { traces, runs, average, dispersion: d, dispersed: d > dispersion_threshold })
}
