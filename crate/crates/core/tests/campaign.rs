use std::fs;
use std::path::Path;

use flashpat::campaign::{Campaign, CampaignConfig, DeviceSelector, DeviceStage};
use flashpat::device::{GcMode, LogOrder, SimProfile};
use flashpat::methodology::{CalibrationOptions, PauseOptions};
use flashpat::microbench::{Baseline, Micro};
use flashpat::Error;

fn small_profile() -> SimProfile {
    SimProfile {
        name: "small-ssd".into(),
        capacity: 64 << 20,
        page_size: 2048,
        pages_per_block: 64,
        read_page_us: 8,
        program_page_us: 12,
        erase_block_us: 1500,
        controller_overhead_us: 100,
        map_granularity: None,
        write_cache_blocks: 4,
        free_block_pool: 16,
        gc_mode: GcMode::Deferred { drain_rate: 200.0 },
        log_order: LogOrder::AnyOrder,
        gc_batch: 8,
        gc_read_penalty_us: 100,
        latency_noise: 0.02,
        seed: 7,
    }
}

fn config(root: &Path) -> CampaignConfig {
    let profile = root.join("small.json");
    fs::write(&profile, serde_json::to_vec(&small_profile()).unwrap()).unwrap();
    let mut cfg = CampaignConfig::simulator(profile.to_str().unwrap(), root.join("out"));
    cfg.seed = 11;
    cfg.suite.base_target_size = 8 << 20;
    cfg.suite.repetitions = 2;
    cfg.suite.micros = vec![Micro::Granularity, Micro::Order];
    for b in Baseline::ALL {
        cfg.suite.io_count.insert(b, 64);
    }
    cfg.calibration = CalibrationOptions { long_io_count: Some(1024), settle_us: 1_000_000 };
    cfg.pause = PauseOptions { sr_batch: 128, rw_batch: 128, quiet_window: 128, ..PauseOptions::default() };
    cfg.checkpoint_every = 5;
    cfg
}

fn prepare(c: &Campaign) {
    let report = c.format(false, |_, _| {}).unwrap();
    assert_eq!(report.coverage, 1.0);
    c.calibrate(false).unwrap();
    c.plan().unwrap();
}

/// Every trace and report file, keyed by path relative to the device dir.
fn outputs(c: &Campaign) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![c.dir().to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(c.dir()).unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                if rel != "manifests" && rel != "state" {
                    stack.push(p);
                }
            } else if rel.ends_with(".csv") || rel.starts_with("report") {
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let c = Campaign::new(config(tmp.path())).unwrap();
    assert_eq!(c.device_name(), "small-ssd");
    prepare(&c);
    let plan = c.load_plan().unwrap();
    let run = c.run(false).unwrap();
    assert_eq!(run.steps_executed, plan.steps.len() as u64);
    assert!(run.ios > 0);
    let summary = c.report().unwrap();

    for f in ["profile.json", "plan.json", "run.journal", "state/format.json", "state/checkpoint.json"] {
        assert!(c.path(f).exists(), "{f}");
    }
    for stage in ["format", "calibrate", "plan", "run", "report"] {
        let m = c.manifest(stage).unwrap();
        assert_eq!(m.config_hash, c.config().hash());
        assert_eq!(m.seed, 11);
    }
    for b in Baseline::ALL {
        assert!(c.path(&format!("calibration/{}.tsv", b.label())).exists());
    }
    for e in &plan.experiments {
        for k in 0..e.spec.repetitions {
            assert!(c.trace_path(&e.spec.id, k).exists(), "{} run {k}", e.spec.id);
        }
    }
    for f in ["summary.json", "table.txt", "results.json", "plots/granularity.tsv", "plots/order.tsv"] {
        assert!(c.path("report").join(f).exists(), "{f}");
    }
    assert_eq!(c.checkpoint().unwrap().unwrap().stage, DeviceStage::Running);

    for b in ["SR", "RR", "SW", "RW"] {
        assert!(summary.baseline_ms[b].is_some(), "{b}");
    }
    assert!(summary.order.reverse.is_some());
    // Micro-benchmarks left out of the suite yield empty fields.
    assert!(summary.locality.is_none());
    assert!(summary.partitions.is_none());
    assert!(summary.pause_effect_us.is_none());
    assert!(summary.parallel_degradation.values().all(|v| v.is_empty()));
}

#[test]
fn completed_run_is_not_repeated() {
    let tmp = tempfile::tempdir().unwrap();
    let c = Campaign::new(config(tmp.path())).unwrap();
    prepare(&c);
    c.run(false).unwrap();
    let before = outputs(&c);
    let again = c.run(false).unwrap();
    assert_eq!((again.steps_executed, again.ios), (0, 0));
    assert_eq!(outputs(&c), before);
    // Finished stages are idempotent too.
    c.format(false, |_, _| panic!("format ran again")).unwrap();
    c.calibrate(false).unwrap();
}

#[test]
fn interrupted_run_resumes_to_identical_traces() {
    let a = tempfile::tempdir().unwrap();
    let full = Campaign::new(config(a.path())).unwrap();
    prepare(&full);
    full.run(false).unwrap();
    full.report().unwrap();

    let b = tempfile::tempdir().unwrap();
    let c = Campaign::new(config(b.path())).unwrap();
    prepare(&c);
    let first = Campaign::new(config(b.path())).unwrap().with_step_limit(7).run(false).unwrap();
    assert_eq!(first.steps_executed, 7);
    // A step journaled after the last checkpoint is redone.
    let mut journal = fs::read_to_string(c.path("run.journal")).unwrap();
    journal.push_str("done 7\n");
    fs::write(c.path("run.journal"), journal).unwrap();
    let rest = c.run(false).unwrap();
    assert_eq!(rest.resumed_at, 7);
    c.report().unwrap();

    assert_eq!(outputs(&c), outputs(&full));
}

#[test]
fn interrupted_format_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    let mut p = small_profile();
    p.capacity = 1 << 30;
    fs::write(tmp.path().join("small.json"), serde_json::to_vec(&p).unwrap()).unwrap();
    cfg.format.random_passes = 1.0;

    let partial = Campaign::new(cfg.clone()).unwrap().with_step_limit(1).format(false, |_, _| {}).unwrap();
    assert!(partial.coverage < 1.0);
    let c = Campaign::new(cfg).unwrap();
    assert_eq!(c.checkpoint().unwrap().unwrap().stage, DeviceStage::Formatting);
    assert!(c.calibrate(false).is_err());

    let mut resumed_from = None;
    let done = c
        .format(false, |p, _| {
            resumed_from.get_or_insert(p.next_io);
        })
        .unwrap();
    assert!(resumed_from.unwrap() > partial.writes);
    assert_eq!(done.coverage, 1.0);
    assert!(done.writes > partial.writes);
    assert_eq!(c.checkpoint().unwrap().unwrap().stage, DeviceStage::Formatted);
}

#[test]
fn stages_check_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let c = Campaign::new(config(tmp.path())).unwrap();
    assert!(matches!(c.calibrate(false), Err(Error::InvalidSpec(_))));
    prepare(&c);

    let mut other = config(tmp.path());
    other.seed = 12;
    let stale = Campaign::new(other).unwrap();
    assert!(matches!(stale.run(false), Err(Error::InvalidSpec(_))));

    let path = c.path("profile.json");
    let text = fs::read_to_string(&path).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(c.plan(), Err(Error::SchemaVersion { found: 99, .. })));
}

#[test]
fn tampered_snapshot_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let c = Campaign::new(config(tmp.path())).unwrap();
    c.format(false, |_, _| {}).unwrap();
    let cp = c.checkpoint().unwrap().unwrap();
    let snap = c.path("state").join(cp.snapshot.unwrap());
    let mut bytes = fs::read(&snap).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&snap, bytes).unwrap();
    assert!(matches!(c.calibrate(false), Err(Error::Snapshot(_))));
}

#[test]
fn raw_device_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("disk.img");
    fs::write(&img, vec![0xa5u8; 1 << 20]).unwrap();
    let cfg = CampaignConfig::new(DeviceSelector { simulator: None, raw: Some(img.clone()) }, tmp.path().join("out"));
    let c = Campaign::new(cfg).unwrap();
    assert_eq!(c.device_name(), "disk.img");
    let err = c.format(false, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::InvalidSpec(ref m) if m.contains("--force")), "{err}");
    assert!(fs::read(&img).unwrap().iter().all(|&b| b == 0xa5));
}

#[test]
fn config_needs_exactly_one_device() {
    let tmp = tempfile::tempdir().unwrap();
    let none = CampaignConfig::new(DeviceSelector::default(), tmp.path());
    assert!(Campaign::new(none).is_err());
    let both = CampaignConfig::new(
        DeviceSelector { simulator: Some("highend-ssd".into()), raw: Some("/dev/null".into()) },
        tmp.path(),
    );
    assert!(Campaign::new(both).is_err());
}
