//! IO pattern generation.
//!
//! A pattern is a sequence of IOs, each described by its submit time, size,
//! logical address and mode. Addresses come from one of four location
//! functions (sequential, random, ordered, partitioned) evaluated relative to
//! a target space; submit times come from one of three timing functions
//! (consecutive, pause, burst). Everything here is pure: the same spec always
//! yields the same schedule, byte for byte.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::SECTOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Read,
    Write,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Read => "R",
            Mode::Write => "W",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(Mode::Read),
            "W" => Ok(Mode::Write),
            other => Err(Error::InvalidSpec(format!("unknown IO mode {other:?}"))),
        }
    }
}

/// When each IO is submitted relative to the completion of the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Timing {
    Consecutive,
    Pause {
        pause_us: u64,
    },
    /// A pause of `pause_us` between groups of `burst_count` IOs.
    Burst {
        pause_us: u64,
        burst_count: u64,
    },
}

/// Where each IO lands inside the target space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Sequential,
    Random,
    /// Linear stride of `incr` IO sizes per IO; negative strides count down
    /// from the top of the target space.
    Ordered {
        incr: i64,
    },
    /// Round robin over `partitions` equal partitions, sequential inside each.
    Partitioned {
        partitions: u64,
    },
}

impl Location {
    pub fn is_random(self) -> bool {
        matches!(self, Location::Random)
    }
}

/// A fully parameterized IO pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternSpec {
    pub timing: Timing,
    pub location: Location,
    pub mode: Mode,
    pub io_size: u64,
    pub io_shift: u64,
    pub target_offset: u64,
    pub target_size: u64,
    pub io_count: u64,
    pub io_ignore: u64,
    pub seed: u64,
}

/// One scheduled IO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IoRequest {
    pub index: u64,
    /// Lower bound on the submit time, in microseconds from run start.
    pub earliest_submit_us: u64,
    pub lba: u64,
    pub size: u64,
    pub mode: Mode,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidSpec(msg.into()))
}

/// Uniform draw in `[0, n)` for IO `index` of a pattern seeded with `seed`.
///
/// Each index reads its own ChaCha stream, so the value for a given index
/// does not depend on which other indices were evaluated before it.
pub fn random_slot(seed: u64, index: u64, n: u64) -> u64 {
    debug_assert!(n > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen_range(0..n)
}

impl PatternSpec {
    /// A consecutive, sequential, unshifted pattern; the usual starting point.
    pub fn baseline(location: Location, mode: Mode, io_size: u64, target_size: u64, io_count: u64) -> Self {
        PatternSpec {
            timing: Timing::Consecutive,
            location,
            mode,
            io_size,
            io_shift: 0,
            target_offset: 0,
            target_size,
            io_count,
            io_ignore: 0,
            seed: 0,
        }
    }

    /// Checks the invariants that do not depend on the device.
    pub fn validate(&self) -> Result<()> {
        if self.io_size < SECTOR || !self.io_size.is_multiple_of(SECTOR) {
            return invalid(format!("io_size {} is not a positive multiple of 512", self.io_size));
        }
        if !self.io_shift.is_multiple_of(SECTOR) || self.io_shift >= self.io_size {
            return invalid(format!(
                "io_shift {} must be a multiple of 512 below io_size {}",
                self.io_shift, self.io_size
            ));
        }
        if !self.target_offset.is_multiple_of(SECTOR) {
            return invalid(format!("target_offset {} is not sector aligned", self.target_offset));
        }
        if self.target_size < self.io_size || !self.target_size.is_multiple_of(self.io_size) {
            return invalid(format!(
                "target_size {} must be a non-zero multiple of io_size {}",
                self.target_size, self.io_size
            ));
        }
        if self.io_ignore >= self.io_count {
            return invalid(format!("io_ignore {} must be below io_count {}", self.io_ignore, self.io_count));
        }
        match self.timing {
            Timing::Burst { burst_count: 0, .. } => return invalid("burst_count must be at least 1"),
            Timing::Consecutive | Timing::Pause { .. } | Timing::Burst { .. } => {}
        }
        if let Location::Partitioned { partitions } = self.location {
            if partitions == 0 || !self.target_size.is_multiple_of(partitions) {
                return invalid(format!(
                    "target_size {} is not divisible into {} partitions",
                    self.target_size, partitions
                ));
            }
            let ps = self.target_size / partitions;
            if !ps.is_multiple_of(self.io_size) {
                return invalid(format!("partition size {ps} is not a multiple of io_size"));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus containment in a device of `capacity` bytes.
    pub fn validate_for_capacity(&self, capacity: u64) -> Result<()> {
        self.validate()?;
        if self.footprint_end() > capacity {
            return invalid(format!(
                "target space ends at {} beyond device capacity {}",
                self.footprint_end(),
                capacity
            ));
        }
        Ok(())
    }

    /// First byte past the highest address the pattern may touch.
    pub fn footprint_end(&self) -> u64 {
        self.target_offset + self.target_size + self.io_shift
    }

    /// Consecutive timing with sequential or random location.
    pub fn is_baseline(&self) -> bool {
        self.timing == Timing::Consecutive && matches!(self.location, Location::Sequential | Location::Random)
    }

    /// Logical byte address of IO `i`.
    pub fn lba_at(&self, i: u64) -> Result<u64> {
        let size = self.io_size;
        let slots = self.target_size / size;
        let rel = match self.location {
            Location::Sequential => (i % slots) * size,
            Location::Random => random_slot(self.seed, i, slots) * size,
            Location::Ordered { incr } => {
                let step = incr as i128 * i as i128 * size as i128;
                let rel = if incr >= 0 { step } else { (self.target_size - size) as i128 + step };
                if rel < 0 || rel + size as i128 > self.target_size as i128 {
                    return Err(Error::Schedule {
                        index: i,
                        reason: format!("ordered increment {incr} leaves the {}-byte target space", self.target_size),
                    });
                }
                rel as u64
            }
            Location::Partitioned { partitions } => {
                let ps = self.target_size / partitions;
                let p = i % partitions;
                let o = ((i / partitions) * size) % ps;
                p * ps + o
            }
        };
        Ok(self.target_offset + rel + self.io_shift)
    }
}

/// Earliest submit time of IO `i` given the submit time and response time
/// of IO `i - 1`.
pub fn next_submit_time(timing: &Timing, i: u64, prev_submit: u64, prev_rt: u64) -> u64 {
    let done = prev_submit + prev_rt;
    match *timing {
        Timing::Consecutive => done,
        Timing::Pause { pause_us } => done + pause_us,
        Timing::Burst { pause_us, burst_count } => {
            if i.is_multiple_of(burst_count) {
                done + pause_us
            } else {
                done
            }
        }
    }
}

/// Idle gap inserted after the completion of IO `i - 1` and before IO `i`.
pub fn gap_before(timing: &Timing, i: u64) -> u64 {
    if i == 0 {
        0
    } else {
        next_submit_time(timing, i, 0, 0)
    }
}

/// The full schedule of a pattern. Submit times assume zero response time;
/// the runner adds the measured response times at execution.
pub fn generate_schedule(spec: &PatternSpec) -> Result<Vec<IoRequest>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.io_count as usize);
    let mut t = 0;
    for i in 0..spec.io_count {
        if i > 0 {
            t = next_submit_time(&spec.timing, i, t, 0);
        }
        out.push(IoRequest {
            index: i,
            earliest_submit_us: t,
            lba: spec.lba_at(i)?,
            size: spec.io_size,
            mode: spec.mode,
        });
    }
    Ok(out)
}

/// Two baseline patterns interleaved: `ratio` IOs of `first` per IO of `second`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MixSpec {
    pub first: PatternSpec,
    pub second: PatternSpec,
    pub ratio: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.ratio == 0 {
            return invalid("mix ratio must be at least 1");
        }
        if !self.first.is_baseline() || !self.second.is_baseline() {
            return invalid("mixes combine baseline patterns only");
        }
        let a = self.first.target_offset..self.first.footprint_end();
        let b = self.second.target_offset..self.second.footprint_end();
        if a.start < b.end && b.start < a.end {
            return invalid(format!("mix target spaces overlap: {a:?} and {b:?}"));
        }
        Ok(())
    }

    /// Number of IOs in the interleaved schedule.
    pub fn len(&self) -> u64 {
        let (f, s, r) = (self.first.io_count, self.second.io_count, self.ratio);
        let groups = (f / r).min(s);
        // Full groups, then a trailing run of first-pattern IOs.
        groups * (r + 1) + r.min(f - groups * r)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic round-robin interleaving of a mix.
pub fn interleave_mix(mix: &MixSpec) -> Result<Vec<IoRequest>> {
    mix.validate()?;
    let mut out = Vec::with_capacity(mix.len() as usize);
    let (mut i1, mut i2) = (0u64, 0u64);
    loop {
        for _ in 0..mix.ratio {
            if i1 == mix.first.io_count {
                return Ok(out);
            }
            push_req(&mut out, &mix.first, i1)?;
            i1 += 1;
        }
        if i2 == mix.second.io_count {
            return Ok(out);
        }
        push_req(&mut out, &mix.second, i2)?;
        i2 += 1;
    }
}

fn push_req(out: &mut Vec<IoRequest>, spec: &PatternSpec, i: u64) -> Result<()> {
    out.push(IoRequest {
        index: out.len() as u64,
        earliest_submit_us: 0,
        lba: spec.lba_at(i)?,
        size: spec.io_size,
        mode: spec.mode,
    });
    Ok(())
}

/// A baseline pattern replicated over disjoint slices of its target space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelSpec {
    pub base: PatternSpec,
    pub parallel_degree: u64,
}

impl ParallelSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let d = self.parallel_degree;
        if d == 0 {
            return invalid("parallel_degree must be at least 1");
        }
        if !self.base.target_size.is_multiple_of(d) || !(self.base.target_size / d).is_multiple_of(self.base.io_size) {
            return invalid(format!(
                "target_size {} cannot be split into {d} io_size-aligned slices",
                self.base.target_size
            ));
        }
        if self.base.io_count < d {
            return invalid(format!("io_count {} is below parallel_degree {d}", self.base.io_count));
        }
        Ok(())
    }
}

/// One pattern per concurrent worker.
pub fn split_parallel(par: &ParallelSpec) -> Result<Vec<PatternSpec>> {
    par.validate()?;
    let d = par.parallel_degree;
    let slice = par.base.target_size / d;
    let io_count = par.base.io_count / d;
    Ok((0..d)
        .map(|p| {
            let mut spec = par.base.clone();
            spec.target_offset = par.base.target_offset + p * slice;
            spec.target_size = slice;
            spec.io_count = io_count;
            spec.io_ignore = spec.io_ignore.min(io_count - 1);
            if d > 1 {
                spec.seed = seed::derive(par.base.seed, p);
            }
            spec
        })
        .collect())
}

/// Writes a schedule as CSV with header `index,earliest_submit_us,lba,size,mode`.
pub fn write_schedule_csv<W: Write>(w: W, schedule: &[IoRequest]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "earliest_submit_us", "lba", "size", "mode"])?;
    for r in schedule {
        wr.write_record([
            r.index.to_string(),
            r.earliest_submit_us.to_string(),
            r.lba.to_string(),
            r.size.to_string(),
            r.mode.as_str().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
