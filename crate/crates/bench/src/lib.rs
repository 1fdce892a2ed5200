//! Fixtures shared by the benchmarks.

use flashpat::device::{FtlSimulator, SimProfile};
use flashpat::methodology::enforce_random_state;
use flashpat::microbench::{Baseline, Workload};
use flashpat::runner::{self, RunContext, Trace};
use flashpat::PatternSpec;

pub const IO_SIZE: u64 = 32 * 1024;
pub const TARGET_SIZE: u64 = 128 << 20;

pub fn baseline(b: Baseline, io_count: u64) -> PatternSpec {
    let mut p = PatternSpec::baseline(b.location(), b.mode(), IO_SIZE, TARGET_SIZE, io_count);
    p.seed = 42;
    p
}

/// A bundled simulator profile shrunk to `capacity` bytes, in the random state.
pub fn formatted(name: &str, capacity: u64) -> FtlSimulator {
    let profile = SimProfile { capacity, ..SimProfile::by_name(name).expect("bundled profile") };
    let mut dev = FtlSimulator::new(profile).expect("valid profile");
    enforce_random_state(&mut dev, 1).expect("simulator never fails");
    dev
}

pub fn run(dev: &mut FtlSimulator, p: PatternSpec) -> Trace {
    let streams = runner::streams(&Workload::Basic(p)).expect("valid pattern");
    let ctx = RunContext { experiment_id: "bench".into(), run_index: 0, seed: 0 };
    runner::execute_run(dev, &streams, &ctx).expect("simulator never fails")
}
