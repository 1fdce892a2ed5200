//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flashpat::analysis::SummaryReport;
use flashpat::campaign::{Campaign, CampaignConfig};
use flashpat::device::{BlockDevice, ConstantDevice, FtlSimulator, GcMode, SimProfile};
use flashpat::methodology::{
    build_plan, calibrate_pause, calibrate_phases, enforce_random_state, BenchmarkPlan, CalibrationOptions,
    DeviceProfile, PauseOptions, PlanStep,
};
use flashpat::microbench::{assign_target_offsets, expand_suite, Baseline, Micro, SuiteConfig};
use flashpat::pattern::{generate_schedule, next_submit_time};
use flashpat::runner::{self, IoRecord, RunContext, RunStats};
use flashpat::{Location, Mode, PatternSpec, Timing};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

// ---------------------------------------------------------------- criterion 1

/// Direct evaluation of the address formulas.
fn oracle_lba(p: &PatternSpec, i: u64) -> u64 {
    let slots = p.target_size / p.io_size;
    let rel = match p.location {
        Location::Sequential => (i * p.io_size) % p.target_size,
        Location::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(i);
            rng.gen_range(0..slots) * p.io_size
        }
        Location::Ordered { incr } if incr >= 0 => incr as u64 * i * p.io_size,
        Location::Ordered { incr } => p.target_size - p.io_size - incr.unsigned_abs() * i * p.io_size,
        Location::Partitioned { partitions } => {
            let ps = p.target_size / partitions;
            let pi = i % partitions;
            let oi = (i / partitions * p.io_size) % ps;
            pi * ps + oi
        }
    };
    p.target_offset + rel + p.io_shift
}

/// Submit offset of IO `i` when every IO completes instantly.
fn oracle_submit(t: &Timing, i: u64) -> u64 {
    match *t {
        Timing::Consecutive => 0,
        Timing::Pause { pause_us } => i * pause_us,
        Timing::Burst { pause_us, burst_count } => (i / burst_count) * pause_us,
    }
}

fn random_spec(rng: &mut ChaCha8Rng) -> PatternSpec {
    let io_size = 512 * rng.gen_range(1..=256u64);
    let partitions = rng.gen_range(1..=16u64);
    let slots = partitions * rng.gen_range(1..=256u64);
    let mut io_count = rng.gen_range(1..=2048u64);
    let location = match rng.gen_range(0..4) {
        0 => Location::Sequential,
        1 => Location::Random,
        2 => {
            let incr: i64 = rng.gen_range(-4..=4);
            if incr != 0 {
                io_count = io_count.min((slots - 1) / incr.unsigned_abs() + 1);
            }
            Location::Ordered { incr }
        }
        _ => Location::Partitioned { partitions },
    };
    let timing = match rng.gen_range(0..3) {
        0 => Timing::Consecutive,
        1 => Timing::Pause { pause_us: rng.gen_range(0..1_000_000) },
        _ => Timing::Burst { pause_us: rng.gen_range(0..1_000_000), burst_count: rng.gen_range(1..=64) },
    };
    PatternSpec {
        timing,
        location,
        mode: if rng.gen() { Mode::Read } else { Mode::Write },
        io_size,
        io_shift: 512 * rng.gen_range(0..io_size / 512),
        target_offset: 512 * rng.gen_range(0..1u64 << 21),
        target_size: slots * io_size,
        io_count,
        io_ignore: 0,
        seed: rng.gen(),
    }
}

fn sorted_lbas(p: &PatternSpec) -> Vec<u64> {
    let mut v: Vec<u64> = generate_schedule(p).unwrap().iter().map(|r| r.lba).collect();
    v.sort_unstable();
    v
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut ios, mut mismatches, mut multiset_failures) = (0u64, 0u64, 0u64);
    for _ in 0..1000 {
        let p = random_spec(&mut rng);
        let sched = generate_schedule(&p).map_err(|e| format!("{p:?}: {e}"))?;
        for (i, r) in sched.iter().enumerate() {
            let i = i as u64;
            ios += 1;
            if r.index != i
                || r.lba != oracle_lba(&p, i)
                || r.size != p.io_size
                || r.mode != p.mode
                || r.earliest_submit_us != oracle_submit(&p.timing, i)
            {
                mismatches += 1;
            }
        }

        let slots = p.target_size / p.io_size;
        let mut full = p.clone();
        full.location = Location::Sequential;
        full.io_count = slots * rng.gen_range(1..=3);
        let seq = sorted_lbas(&full);
        if let Location::Partitioned { partitions } = p.location {
            let part = PatternSpec { location: Location::Partitioned { partitions }, ..full.clone() };
            multiset_failures += (sorted_lbas(&part) != seq) as u64;
        }
        full.io_count = slots;
        let seq = sorted_lbas(&full);
        for incr in [1, -1] {
            let ord = PatternSpec { location: Location::Ordered { incr }, ..full.clone() };
            multiset_failures += (sorted_lbas(&ord) != seq) as u64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && multiset_failures == 0 && secs < 10.0,
        format!("1000 specs, {ios} IOs, {mismatches} formula mismatches, {multiset_failures} multiset mismatches, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn submit_offsets(p: &PatternSpec) -> Vec<u64> {
    generate_schedule(p).unwrap().iter().map(|r| r.earliest_submit_us).collect()
}

fn executed_offsets(p: &PatternSpec) -> Vec<u64> {
    let mut dev = ConstantDevice::new(1 << 30, 37, 91);
    let streams = runner::streams(&flashpat::microbench::Workload::Basic(p.clone())).unwrap();
    let ctx = RunContext { experiment_id: "identity".into(), run_index: 0, seed: p.seed };
    let t = runner::execute_run(&mut dev, &streams, &ctx).unwrap();
    t.records.iter().map(|r| r.actual_submit_us).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let cases = 500;
    for _ in 0..cases {
        let mut p = random_spec(&mut rng);
        p.target_offset = 0;
        p.io_count = p.io_count.min(256);
        let pause_us = rng.gen_range(0..100_000);
        let burst_count = rng.gen_range(1..=64);
        let with = |t: Timing| PatternSpec { timing: t, ..p.clone() };

        let burst1 = with(Timing::Burst { pause_us, burst_count: 1 });
        let pause = with(Timing::Pause { pause_us });
        let burst0 = with(Timing::Burst { pause_us: 0, burst_count });
        let consecutive = with(Timing::Consecutive);
        violations += (submit_offsets(&burst1) != submit_offsets(&pause)) as u32;
        violations += (submit_offsets(&burst0) != submit_offsets(&consecutive)) as u32;
        violations += (executed_offsets(&burst1) != executed_offsets(&pause)) as u32;
        violations += (executed_offsets(&burst0) != executed_offsets(&consecutive)) as u32;

        for i in 1..64 {
            let (prev, rt) = (rng.gen_range(0..1u64 << 40), rng.gen_range(0..1u64 << 20));
            violations +=
                (next_submit_time(&burst1.timing, i, prev, rt) != next_submit_time(&pause.timing, i, prev, rt)) as u32;
            violations += (next_submit_time(&burst0.timing, i, prev, rt)
                != next_submit_time(&consecutive.timing, i, prev, rt)) as u32;
        }
    }
    check(violations == 0, format!("{cases} random patterns, {violations} violations"))
}

// ---------------------------------------------------------------- criterion 3

fn formatted(profile: SimProfile, seed: u64) -> FtlSimulator {
    let mut dev = FtlSimulator::new(profile).unwrap();
    enforce_random_state(&mut dev, seed).unwrap();
    dev
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let results: Vec<(u64, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = [0u64, 125, 1000]
            .into_iter()
            .map(|pool| {
                s.spawn(move || {
                    let mut dev = formatted(SimProfile { free_block_pool: pool, ..SimProfile::highend_ssd() }, 3);
                    let cal =
                        calibrate_phases(&mut dev, &SuiteConfig::default(), &CalibrationOptions::default()).unwrap();
                    (pool, cal.profile.startup_of(Baseline::RW))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let secs = start.elapsed().as_secs_f64();
    let ok = results.iter().all(|&(pool, got)| within(got as f64, pool as f64, 0.10)) && secs < 60.0;
    let found: Vec<String> = results.iter().map(|(p, g)| format!("pool {p} -> {g}")).collect();
    check(ok, format!("RW start-up {}, {secs:.1} s", found.join(", ")))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let period = |noise: f64| {
        let mut dev = formatted(SimProfile { latency_noise: noise, ..SimProfile::lowend_usb() }, 4);
        let cal = calibrate_phases(&mut dev, &SuiteConfig::default(), &CalibrationOptions::default()).unwrap();
        cal.profile.period[&Baseline::SW]
    };
    let (clean, noisy) = std::thread::scope(|s| {
        let a = s.spawn(|| period(0.0));
        let b = s.spawn(|| period(0.05));
        (a.join().unwrap(), b.join().unwrap())
    });
    check(
        clean == 128 && within(noisy as f64, 128.0, 0.10),
        format!("SW period {clean} noiseless, {noisy} with 5% noise (expected 128)"),
    )
}

// ---------------------------------------------------------------- criterion 5

/// Reclamation time queued by the calibration's random-write batch,
/// measured on a copy of the device.
fn queued_drain_us(dev: &FtlSimulator, opts: &PauseOptions) -> f64 {
    let GcMode::Deferred { drain_rate } = dev.profile().gc_mode else { return 0.0 };
    let mut copy = FtlSimulator::new(dev.profile().clone()).unwrap();
    copy.restore(&dev.snapshot().unwrap()).unwrap();
    let cfg = SuiteConfig::default();
    copy.idle(opts.settle_us);
    let mut sr = PatternSpec::baseline(Location::Sequential, Mode::Read, cfg.base_io_size, cfg.base_target_size, 1);
    sr.io_count = opts.sr_batch;
    let mut rw = PatternSpec::baseline(Location::Random, Mode::Write, cfg.base_io_size, cfg.base_target_size, 1);
    rw.io_count = opts.rw_batch;
    rw.seed = 55;
    for p in [sr, rw] {
        let streams = runner::streams(&flashpat::microbench::Workload::Basic(p)).unwrap();
        let ctx = RunContext { experiment_id: "drain".into(), run_index: 0, seed: 0 };
        runner::execute_run(&mut copy, &streams, &ctx).unwrap();
    }
    copy.pending_merges() as f64 / drain_rate * 1e6
}

fn criterion_5() -> Outcome {
    let opts = PauseOptions::default();
    let cfg = SuiteConfig::default();

    let hp = SimProfile::highend_ssd();
    let mut high = formatted(hp.clone(), 5);
    let drain_us = queued_drain_us(&high, &opts);
    let p = calibrate_pause(&mut high, &cfg, &opts).unwrap();
    // A read during reclamation costs the controller overhead, its page
    // reads and the reclamation penalty.
    let affected_rt =
        (hp.controller_overhead_us + cfg.base_io_size / hp.page_size * hp.read_page_us + hp.gc_read_penalty_us) as f64;
    let expected = 3000.0 * (2.5e6 / 3000.0) / affected_rt;

    let mut low = formatted(SimProfile::lowend_usb(), 5);
    let sync = calibrate_pause(&mut low, &cfg, &opts).unwrap();

    check(
        within(drain_us, 2.5e6, 0.10)
            && within(p.affected as f64, expected, 0.15)
            && p.pause_us >= 2 * p.lingering_us
            && sync.pause_us == 1_000_000,
        format!(
            "deferred: drain {:.2} s, {} affected reads (expected {expected:.0} ±15%), lingering {:.2} s, pause {:.2} s; synchronous: pause {:.2} s",
            drain_us / 1e6,
            p.affected,
            p.lingering_us as f64 / 1e6,
            p.pause_us as f64 / 1e6,
            sync.pause_us as f64 / 1e6
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn synthetic_trace() -> Vec<IoRecord> {
    let rts = (0..512u64).map(|i| if i < 128 || i % 2 == 0 { 400 } else { 27_000 });
    let mut t = 0;
    rts.enumerate()
        .map(|(i, rt)| {
            let r = IoRecord {
                index: i as u64,
                actual_submit_us: t,
                response_time_us: rt,
                lba: i as u64 * 32768,
                size: 32768,
                mode: Mode::Write,
                worker: 0,
            };
            t += rt;
            r
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let trace = synthetic_trace();
    let running = RunStats::of(&[400, 27_000]).unwrap().mean;
    let naive = runner::summarize(&trace, 0).unwrap().mean;
    let skipped = runner::summarize(&trace, 128).unwrap().mean;
    let bias = (running - naive) / running;
    let residual = (skipped - running).abs() / running;
    check(
        (0.20..=0.30).contains(&bias) && residual < 0.02,
        format!(
            "running mean {running:.0} us, io_ignore=0 mean {naive:.0} us ({:.1}% low), io_ignore=128 bias {:.2}%",
            bias * 100.0,
            residual * 100.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Replays a plan: returns (resets, overlapping SW pairs, epochs over capacity).
fn replay(plan: &BenchmarkPlan) -> (u32, u32, u32) {
    let (mut resets, mut overlaps, mut overfull) = (0, 0, 0);
    let mut ranges: Vec<(u64, u64, usize)> = Vec::new();
    let mut close = |ranges: &mut Vec<(u64, u64, usize)>| {
        let used: u64 = ranges.iter().map(|r| r.1 - r.0).sum();
        overfull += (used > plan.capacity) as u32;
        ranges.clear();
    };
    let mut seen = std::collections::BTreeSet::new();
    for step in &plan.steps {
        match step {
            PlanStep::StateReset => {
                resets += 1;
                close(&mut ranges);
                seen.clear();
            }
            PlanStep::Pause { .. } => {}
            PlanStep::Run { experiment, .. } => {
                if !seen.insert(*experiment) {
                    continue;
                }
                for p in plan.experiments[*experiment].spec.workload.patterns() {
                    if p.mode != Mode::Write || p.location.is_random() {
                        continue;
                    }
                    let (a, b) = (p.target_offset, p.footprint_end());
                    overlaps += ranges.iter().filter(|r| a < r.1 && r.0 < b && r.2 != *experiment).count() as u32;
                    ranges.push((a, b, *experiment));
                }
            }
        }
    }
    close(&mut ranges);
    (resets, overlaps, overfull)
}

fn plan_for(cfg: &SuiteConfig, capacity: u64) -> BenchmarkPlan {
    let placed = assign_target_offsets(expand_suite(cfg).unwrap(), capacity, cfg.base_target_offset).unwrap();
    build_plan(placed, &DeviceProfile::ideal("plan", cfg), capacity).unwrap()
}

fn criterion_7() -> Outcome {
    let gb = 1u64 << 30;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut resets, mut overlaps, mut overfull) = (0, 0, 0);
    let trials = 200;
    for _ in 0..trials {
        let mut micros: Vec<Micro> = Micro::ALL.into_iter().filter(|_| rng.gen_bool(0.5)).collect();
        if micros.is_empty() {
            micros.push(Micro::Granularity);
        }
        let cfg = SuiteConfig {
            base_io_size: 1 << rng.gen_range(12..=16),
            base_target_size: 1 << rng.gen_range(24..=28),
            base_target_offset: (1 << 20) * rng.gen_range(0..64),
            io_count: Baseline::ALL.into_iter().map(|b| (b, rng.gen_range(64..=2048))).collect(),
            seed: rng.gen(),
            repetitions: rng.gen_range(1..=3),
            micros,
            max_target_size: Some(1 << 29),
            ..SuiteConfig::default()
        };
        let plan = plan_for(&cfg, gb);
        let (r, o, f) = replay(&plan);
        resets += r;
        overlaps += o;
        overfull += f;
    }
    let big = plan_for(&SuiteConfig::default(), 32 * gb);
    let (big_resets, big_overlaps, _) = replay(&big);
    check(
        overlaps == 0 && overfull == 0 && big_resets == 0 && big_overlaps == 0 && big.resets() == 0,
        format!(
            "{trials} random 1 GB plans: {resets} resets, {overlaps} SW overlaps, {overfull} epochs over capacity; 32 GB default suite: {big_resets} resets"
        ),
    )
}

// ---------------------------------------------------------------- criteria 8 and 9

fn reduced_config(profile: &str, out: &Path) -> CampaignConfig {
    let mut cfg = CampaignConfig::simulator(profile, out);
    cfg.seed = 2008;
    cfg.suite.repetitions = 2;
    cfg.suite.io_count =
        BTreeMap::from([(Baseline::SR, 256), (Baseline::RR, 256), (Baseline::SW, 256), (Baseline::RW, 512)]);
    cfg
}

fn run_campaign(cfg: CampaignConfig) -> (Campaign, SummaryReport) {
    let c = Campaign::new(cfg).unwrap();
    c.format(false, |_, _| {}).unwrap();
    c.calibrate(false).unwrap();
    c.plan().unwrap();
    c.run(false).unwrap();
    let s = c.report().unwrap();
    (c, s)
}

fn criterion_8(root: &Path) -> (Outcome, Campaign) {
    let start = Instant::now();
    let (high, hs) = run_campaign(reduced_config("highend-ssd", &root.join("a")));
    let (_, ls) = run_campaign(reduced_config("lowend-usb", &root.join("a")));
    let secs = start.elapsed().as_secs_f64();
    let (hr, lr) = (hs.rw_sw_ratio().unwrap_or(0.0), ls.rw_sw_ratio().unwrap_or(0.0));
    let (hi, li) = (hs.order.in_place.unwrap_or(f64::NAN), ls.order.in_place.unwrap_or(f64::NAN));
    let ok = hr > 10.0
        && lr > 50.0
        && hs.locality.is_some()
        && ls.locality.is_none()
        && (0.8..=1.25).contains(&hi)
        && li > 10.0
        && secs < 600.0;
    let outcome = check(
        ok,
        format!(
            "RW/SW {hr:.1} high, {lr:.1} low; locality {} high, {} low; in-place {hi:.2} high, {li:.1} low; {secs:.0} s",
            hs.locality.map_or("absent".into(), |a| format!("{} MB", a.bytes >> 20)),
            ls.locality.map_or("absent".into(), |a| format!("{} MB", a.bytes >> 20)),
        ),
    );
    (outcome, high)
}

/// Trace CSVs and report files by path relative to the campaign directory.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if rel.ends_with(".csv") || rel.starts_with("report") {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(root: &Path, first: &Campaign) -> Outcome {
    let (second, _) = run_campaign(reduced_config("highend-ssd", &root.join("b")));
    let (a, b) = (artifacts(first.dir()), artifacts(second.dir()));
    let traces = a.keys().filter(|k| k.ends_with(".csv")).count();
    let differing =
        a.iter().filter(|(k, v)| b.get(*k) != Some(v)).count() + b.keys().filter(|k| !a.contains_key(*k)).count();
    check(
        traces > 0 && a.keys().any(|k| k.starts_with("report")) && differing == 0,
        format!("{} files ({traces} traces) compared, {differing} differ", a.len()),
    )
}

fn main() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
    ];
    let (c8, high) = criterion_8(root.path());
    results.push((8, c8));
    results.push((9, criterion_9(root.path(), &high)));

    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("criterion {n}: PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        results.len() - failed,
        Duration::from_secs_f64(start.elapsed().as_secs_f64())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
