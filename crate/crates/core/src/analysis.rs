//! Trace analysis: phase detection, sweep summaries and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::microbench::{Baseline, Micro};

/// Longest autocorrelation lag examined by [`estimate_period`].
pub const MAX_LAG: usize = 4096;

const CHANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartupEstimate {
    pub startup: u64,
    /// Set when the series is too short for a trustworthy answer.
    pub inconclusive: bool,
}

/// Length of the cheap prefix of a response-time series, or 0 if no prefix
/// is clearly cheaper than the rest.
///
/// The split point maximizes the between-segment sum of squares over splits
/// in the first half whose prefix is cheaper than the remainder. The prefix
/// only counts as a start-up phase if its mean sits below the remainder's
/// mean by more than both 10% of that mean and three standard deviations of
/// window means (window = max(32, n/50)), scaled to the prefix length, and
/// if at most 1% of the equally long windows of the remainder are as cheap.
pub fn detect_startup(rts: &[u64]) -> StartupEstimate {
    let n = rts.len();
    let w = 32.max(n / 50);
    if n < 2 * w {
        return StartupEstimate { startup: 0, inconclusive: true };
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    for &x in rts {
        prefix.push(prefix.last().unwrap() + x as f64);
    }
    let total = prefix[n];
    let mut best = (0.0, 0usize);
    for s in 1..=n / 2 {
        let m1 = prefix[s] / s as f64;
        let m2 = (total - prefix[s]) / (n - s) as f64;
        if m1 >= m2 {
            continue;
        }
        let b = (s * (n - s)) as f64 / n as f64 * (m2 - m1).powi(2);
        if b > best.0 {
            best = (b, s);
        }
    }
    let s = best.1;
    if s == 0 {
        return StartupEstimate { startup: 0, inconclusive: false };
    }
    let m1 = prefix[s] / s as f64;
    let tail = &rts[s..];
    let m2 = (total - prefix[s]) / tail.len() as f64;
    let means: Vec<f64> = tail.chunks_exact(w).map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / w as f64).collect();
    let sd = stddev(&means);
    let margin = (3.0 * sd * (w as f64 / s as f64).sqrt()).max(0.1 * m2);
    // A prefix the running phase would produce by chance is no start-up.
    let windows = n - 2 * s + 1;
    let as_cheap = (s..=n - s).filter(|&j| prefix[j + s] - prefix[j] <= prefix[s]).count();
    let by_chance = as_cheap as f64 > CHANCE * windows as f64;
    let startup = if m1 < m2 - margin && !by_chance { s as u64 } else { 0 };
    StartupEstimate { startup, inconclusive: false }
}

fn stddev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    pub period: u64,
    /// Set for constant or aperiodic series, where `period` is 1.
    pub low_confidence: bool,
}

/// Normalized autocorrelation of the mean-subtracted series at lags
/// `0..=max_lag`, each lag averaged over its own number of terms.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = xs.iter().sum::<f64>() / n.max(1) as f64;
    let d: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let var = d.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64;
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if var == 0.0 {
                return 0.0;
            }
            let s: f64 = d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum();
            s / (n - k) as f64 / var
        })
        .collect()
}

/// Dominant oscillation period of a running-phase series.
///
/// Skips the autocorrelation's initial lobe, then returns the first local
/// maximum whose correlation reaches 90% of the highest one. When the best
/// correlation is below 0.3, regularly spaced outliers give the period;
/// otherwise the series is treated as aperiodic.
pub fn estimate_period(rts: &[u64]) -> PeriodEstimate {
    let aperiodic = PeriodEstimate { period: 1, low_confidence: true };
    let n = rts.len();
    if n < 4 {
        return aperiodic;
    }
    let xs: Vec<f64> = rts.iter().map(|&x| x as f64).collect();
    let r = autocorrelation(&xs, (n / 3).min(MAX_LAG));
    if r.len() < 3 || r[0] == 0.0 {
        return aperiodic;
    }
    let mut start = 1;
    while start + 1 < r.len() && r[start] > 0.0 && r[start + 1] < r[start] {
        start += 1;
    }
    let Some(peak) = r[start..].iter().copied().reduce(f64::max) else {
        return aperiodic;
    };
    if peak < 0.3 {
        return spike_spacing(rts).map_or(aperiodic, |period| PeriodEstimate { period, low_confidence: false });
    }
    let mut lag = (start..r.len()).find(|&k| r[k] >= 0.9 * peak).unwrap();
    while lag + 1 < r.len() && r[lag + 1] > r[lag] {
        lag += 1;
    }
    PeriodEstimate { period: lag as u64, low_confidence: false }
}

/// Median distance between outliers (above mean + 3 standard deviations),
/// if there are at least four and their spacing varies by under 25%.
fn spike_spacing(rts: &[u64]) -> Option<u64> {
    let xs: Vec<f64> = rts.iter().map(|&x| x as f64).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let cut = m + 3.0 * stddev(&xs);
    let at: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > cut).collect();
    let mut gaps: Vec<f64> = at.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    if gaps.len() < 3 {
        return None;
    }
    let gm = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if stddev(&gaps) > 0.25 * gm {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2].round() as u64)
}

/// Mean response time of one experiment, as needed by the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub id: String,
    pub micro: Micro,
    pub baseline: String,
    pub parameter: String,
    pub value: i64,
    pub mean_us: f64,
    pub stddev_us: f64,
    pub run_means_us: Vec<f64>,
    pub dispersion: f64,
    pub dispersed: bool,
}

/// Thresholds for "no significant degradation".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub locality: f64,
    pub partitions: f64,
    pub pause: f64,
    /// Strides at or above this many bytes count as large increments.
    pub large_incr_bytes: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { locality: 2.0, partitions: 2.0, pause: 1.2, large_incr_bytes: 1 << 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub bytes: u64,
    /// Mean cost at `bytes` relative to sequential writes.
    pub factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionLimit {
    pub partitions: u64,
    pub factor: f64,
}

/// Largest target size whose random-write mean stays within `threshold`
/// times the sequential-write mean. `points` are (target size, mean).
/// Target sizes equal to the IO size are in-place writes and are skipped.
/// Absent when the smallest remaining size already exceeds the threshold.
pub fn locality_area(points: &[(u64, f64)], sw_mean: f64, io_size: u64, threshold: f64) -> Option<Area> {
    let mut pts: Vec<(u64, f64)> = points.iter().copied().filter(|&(t, _)| t > io_size).collect();
    pts.sort_by_key(|p| p.0);
    let &(_, smallest) = pts.first()?;
    if sw_mean <= 0.0 || smallest > threshold * sw_mean {
        return None;
    }
    pts.iter().rev().find(|&&(_, m)| m <= threshold * sw_mean).map(|&(bytes, m)| Area { bytes, factor: m / sw_mean })
}

/// Largest partition count whose mean stays within `threshold` times the
/// sequential-write mean. One partition is sequential writing and always
/// qualifies.
pub fn partition_threshold(points: &[(u64, f64)], sw_mean: f64, threshold: f64) -> Option<PartitionLimit> {
    if sw_mean <= 0.0 {
        return None;
    }
    points
        .iter()
        .filter(|&&(p, m)| p == 1 || m <= threshold * sw_mean)
        .max_by_key(|p| p.0)
        .map(|&(partitions, m)| PartitionLimit { partitions, factor: m / sw_mean })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderRatios {
    pub reverse: Option<f64>,
    pub in_place: Option<f64>,
    pub large_incr: Option<f64>,
}

/// Order sweep costs relative to sequential writes (reverse, in-place) and
/// random writes (strides of at least `large_bytes`). `points` are
/// (incr, mean).
pub fn order_ratios(
    points: &[(i64, f64)],
    sw_mean: f64,
    rw_mean: Option<f64>,
    io_size: u64,
    large_bytes: u64,
) -> OrderRatios {
    let at = |incr: i64| points.iter().find(|p| p.0 == incr).map(|p| p.1);
    let rel = |m: Option<f64>, base: f64| m.filter(|_| base > 0.0).map(|m| m / base);
    let large: Vec<f64> =
        points.iter().filter(|p| p.0 > 0 && p.0 as u64 * io_size >= large_bytes).map(|p| p.1).collect();
    let large_mean = (!large.is_empty()).then(|| large.iter().sum::<f64>() / large.len() as f64);
    OrderRatios {
        reverse: rel(at(-1), sw_mean),
        in_place: rel(at(0), sw_mean),
        large_incr: rw_mean.and_then(|rw| rel(large_mean, rw)),
    }
}

/// Table-3-style characterization of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub schema_version: u32,
    pub device: String,
    pub io_size: u64,
    /// Mean cost of each baseline pattern in milliseconds.
    pub baseline_ms: BTreeMap<String, Option<f64>>,
    /// Smallest pause (µs) at which random writes cost at most
    /// `thresholds.pause` times sequential writes.
    pub pause_effect_us: Option<u64>,
    pub locality: Option<Area>,
    pub partitions: Option<PartitionLimit>,
    pub order: OrderRatios,
    /// Worst shifted/aligned cost ratio per baseline.
    pub alignment_penalty: BTreeMap<String, Option<f64>>,
    /// Worst ratio of mix mean to the ratio-weighted blend of its parts.
    pub mix_deviation: BTreeMap<String, Option<f64>>,
    /// Mean at each parallel degree relative to degree 1.
    pub parallel_degradation: BTreeMap<String, Vec<(u64, f64)>>,
    /// Experiments whose repetitions disagreed beyond the dispersion limit.
    pub dispersed: Vec<String>,
    pub thresholds: Thresholds,
}

struct Index<'a> {
    by_id: BTreeMap<&'a str, &'a ExperimentResult>,
    results: &'a [ExperimentResult],
}

impl<'a> Index<'a> {
    fn new(results: &'a [ExperimentResult]) -> Self {
        Index { by_id: results.iter().map(|r| (r.id.as_str(), r)).collect(), results }
    }

    fn mean(&self, micro: Micro, baseline: &str, value: i64) -> Option<f64> {
        let id = format!("{}/{}/{}={}", micro.name(), baseline, micro.parameter(), value);
        self.by_id.get(id.as_str()).map(|r| r.mean_us)
    }

    fn sweep(&self, micro: Micro, baseline: &str) -> Vec<(i64, f64)> {
        let mut v: Vec<(i64, f64)> = self
            .results
            .iter()
            .filter(|r| r.micro == micro && r.baseline == baseline)
            .map(|r| (r.value, r.mean_us))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    /// Mean of a plain baseline run, taken from whichever micro-benchmark
    /// contains one.
    fn baseline(&self, b: Baseline, io_size: u64) -> Option<f64> {
        let l = b.label();
        self.mean(Micro::Granularity, l, io_size as i64)
            .or_else(|| self.mean(Micro::Alignment, l, 0))
            .or_else(|| self.mean(Micro::Parallelism, l, 1))
    }
}

/// Assembles the summary. Missing micro-benchmarks leave their fields empty.
pub fn build_summary(device: &str, io_size: u64, results: &[ExperimentResult], t: Thresholds) -> SummaryReport {
    let ix = Index::new(results);
    let base: BTreeMap<Baseline, Option<f64>> = Baseline::ALL.iter().map(|&b| (b, ix.baseline(b, io_size))).collect();
    let sw = base[&Baseline::SW];
    let rw = base[&Baseline::RW];

    let pause_effect_us = sw.and_then(|sw| {
        ix.sweep(Micro::Pause, "RW").into_iter().find(|&(_, m)| m <= t.pause * sw).map(|(p, _)| p as u64)
    });
    let unsigned = |v: Vec<(i64, f64)>| v.into_iter().map(|(x, m)| (x as u64, m)).collect::<Vec<_>>();
    let locality = sw.and_then(|sw| locality_area(&unsigned(ix.sweep(Micro::Locality, "RW")), sw, io_size, t.locality));
    let partitions =
        sw.and_then(|sw| partition_threshold(&unsigned(ix.sweep(Micro::Partitioning, "SW")), sw, t.partitions));
    // Large increments are compared with random writes over the widest
    // measured target space.
    let rw_wide = ix.sweep(Micro::Locality, "RW").last().map(|p| p.1).or(rw);
    let order = match sw {
        Some(sw) => order_ratios(&ix.sweep(Micro::Order, "SW"), sw, rw_wide, io_size, t.large_incr_bytes),
        None => OrderRatios::default(),
    };

    let mut alignment_penalty = BTreeMap::new();
    let mut parallel_degradation = BTreeMap::new();
    for b in Baseline::ALL {
        let l = b.label();
        let sweep = ix.sweep(Micro::Alignment, l);
        let aligned = sweep.iter().find(|p| p.0 == 0).map(|p| p.1).filter(|&m| m > 0.0);
        let worst = aligned.and_then(|a| sweep.iter().filter(|p| p.0 != 0).map(|p| p.1 / a).reduce(f64::max));
        alignment_penalty.insert(l.to_string(), worst);
        let par = ix.sweep(Micro::Parallelism, l);
        if let Some(one) = par.iter().find(|p| p.0 == 1).map(|p| p.1).filter(|&m| m > 0.0) {
            parallel_degradation.insert(l.to_string(), par.iter().map(|&(d, m)| (d as u64, m / one)).collect());
        }
    }

    let mut mix_deviation = BTreeMap::new();
    for (a, b) in Baseline::PAIRS {
        let label = format!("{a}+{b}");
        let worst = match (base[&a], base[&b]) {
            (Some(ma), Some(mb)) => ix
                .sweep(Micro::Mix, &label)
                .iter()
                .map(|&(r, m)| {
                    let r = r as f64;
                    m / ((r * ma + mb) / (r + 1.0))
                })
                .reduce(|x, y| if (x - 1.0).abs() >= (y - 1.0).abs() { x } else { y }),
            _ => None,
        };
        mix_deviation.insert(label, worst);
    }

    SummaryReport {
        schema_version: crate::SCHEMA_VERSION,
        device: device.to_string(),
        io_size,
        baseline_ms: base.iter().map(|(b, m)| (b.label().to_string(), m.map(|m| m / 1000.0))).collect(),
        pause_effect_us,
        locality,
        partitions,
        order,
        alignment_penalty,
        mix_deviation,
        parallel_degradation,
        dispersed: results.iter().filter(|r| r.dispersed).map(|r| r.id.clone()).collect(),
        thresholds: t,
    }
}

impl SummaryReport {
    /// RW cost over SW cost.
    pub fn rw_sw_ratio(&self) -> Option<f64> {
        let sw = self.baseline_ms.get("SW").copied().flatten()?;
        let rw = self.baseline_ms.get("RW").copied().flatten()?;
        (sw > 0.0).then(|| rw / sw)
    }

    /// Aligned plain-text rendering with one row per device.
    pub fn table(reports: &[SummaryReport]) -> String {
        let header = [
            "Device",
            "SR",
            "RR",
            "SW",
            "RW",
            "Pause",
            "Locality RW (MB)",
            "Partitions",
            "Reverse",
            "In-Place",
            "Large Incr",
        ];
        let ms = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let factor = |v: f64| if (v - 1.0).abs() < 0.05 { "=".to_string() } else { format!("x{v:.1}") };
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                let b = |k: &str| ms(r.baseline_ms.get(k).copied().flatten());
                vec![
                    r.device.clone(),
                    b("SR"),
                    b("RR"),
                    b("SW"),
                    b("RW"),
                    r.pause_effect_us.map_or("-".into(), |p| format!("{:.1}", p as f64 / 1000.0)),
                    r.locality.map_or("No".into(), |a| format!("{} ({})", fmt_mb(a.bytes), factor(a.factor))),
                    r.partitions.map_or("-".into(), |p| format!("{} ({})", p.partitions, factor(p.factor))),
                    r.order.reverse.map_or("-".into(), factor),
                    r.order.in_place.map_or("-".into(), factor),
                    r.order.large_incr.map_or("-".into(), factor),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &mut dyn Iterator<Item = &str>| {
            let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut header.iter().copied());
        for row in &rows {
            line(&mut row.iter().map(String::as_str));
        }
        out
    }
}

fn fmt_mb(bytes: u64) -> String {
    let mb = bytes as f64 / (1 << 20) as f64;
    if mb >= 1.0 && mb.fract() == 0.0 {
        format!("{mb:.0}")
    } else {
        format!("{mb:.3}")
    }
}

/// Axis names and units of a plot data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotMeta {
    pub kind: String,
    pub x_axis: String,
    pub x_unit: String,
    pub y_axis: String,
    pub y_unit: String,
    pub series: Vec<String>,
}

/// Named (x, y) series.
pub type Series = Vec<(String, Vec<(f64, f64)>)>;

/// Writes series as tab-separated `series x y` rows under a `# axis:` header.
pub fn write_plot_tsv<W: Write>(mut w: W, meta: &PlotMeta, series: &Series) -> Result<()> {
    writeln!(w, "# axis: x={} ({}) y={} ({})", meta.x_axis, meta.x_unit, meta.y_axis, meta.y_unit)?;
    writeln!(w, "series\tx\ty")?;
    for (name, pts) in series {
        for (x, y) in pts {
            writeln!(w, "{name}\t{x}\t{y}")?;
        }
    }
    Ok(())
}

fn sweep_series(results: &[ExperimentResult], micro: Micro, scale: impl Fn(&str) -> Option<f64>) -> Series {
    let mut by: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.micro == micro) {
        if let Some(d) = scale(&r.baseline) {
            by.entry(&r.baseline).or_default().push((r.value as f64, r.mean_us / d));
        }
    }
    by.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k.to_string(), v)
        })
        .collect()
}

/// Mean cost against the swept parameter, one series per baseline. With
/// `relative` set, costs are divided by the sequential-write mean.
pub fn sweep_plot(results: &[ExperimentResult], micro: Micro, io_size: u64, relative: bool) -> (PlotMeta, Series) {
    let sw = Index::new(results).baseline(Baseline::SW, io_size);
    let series = if relative {
        sw.map(|sw| sweep_series(results, micro, |_| Some(sw))).unwrap_or_default()
    } else {
        sweep_series(results, micro, |_| Some(1.0))
    };
    let x_unit = match micro {
        Micro::Granularity | Micro::Alignment | Micro::Locality => "bytes",
        Micro::Pause => "us",
        _ => "count",
    };
    let meta = PlotMeta {
        kind: micro.name().to_string(),
        x_axis: micro.parameter().to_string(),
        x_unit: x_unit.to_string(),
        y_axis: if relative { "relative mean response time".into() } else { "mean response time".into() },
        y_unit: if relative { "x SW".into() } else { "us".into() },
        series: series.iter().map(|s| s.0.clone()).collect(),
    };
    (meta, series)
}

/// Per-IO response times with running averages including and excluding
/// the start-up phase.
pub fn phase_plot(rts: &[u64], startup: usize) -> (PlotMeta, Series) {
    let pts = |v: Vec<f64>| -> Vec<(f64, f64)> {
        v.into_iter().enumerate().filter(|(_, y)| !y.is_nan()).map(|(i, y)| (i as f64, y)).collect()
    };
    let raw: Vec<f64> = rts.iter().map(|&x| x as f64).collect();
    let series = vec![
        ("rt".to_string(), pts(raw)),
        ("avg_with_startup".to_string(), pts(crate::runner::running_average(rts, 0))),
        ("avg_without_startup".to_string(), pts(crate::runner::running_average(rts, startup.min(rts.len())))),
    ];
    let meta = PlotMeta {
        kind: "phases".into(),
        x_axis: "io index".into(),
        x_unit: "count".into(),
        y_axis: "response time".into(),
        y_unit: "us".into(),
        series: series.iter().map(|s| s.0.clone()).collect(),
    };
    (meta, series)
}
