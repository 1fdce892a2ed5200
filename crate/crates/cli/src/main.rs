use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use flashpat::analysis::{detect_startup, estimate_period, SummaryReport};
use flashpat::campaign::{Campaign, CampaignConfig};
use flashpat::device::SimProfile;
use flashpat::methodology::FormatProgress;
use flashpat::runner::{self, RunStats};
use flashpat::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_DEVICE: u8 = 3;

/// Flash device benchmarking with reproducible IO patterns.
#[derive(Parser)]
#[command(name = "flashpat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Stage {
    /// Campaign configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Allow writing to a raw device. Its contents are destroyed.
    #[arg(long)]
    force: bool,
    /// Stop after this many plan steps (or format checkpoints) and keep the
    /// journal for a later invocation.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Bring the device into the random state.
    Format(Stage),
    /// Measure start-up, period and inter-run pause.
    Calibrate(Stage),
    /// Expand the suite into a benchmark plan.
    Plan(Stage),
    /// Execute the plan, resuming from the journal.
    Run(Stage),
    /// Summarize the traces into the report and plot data.
    Report(Stage),
    /// Run every stage in order.
    All(Stage),
    /// Print statistics, start-up and period of one trace file.
    Analyze {
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        io_ignore: u64,
    },
    /// Print a bundled simulator profile as JSON, or list them.
    Profiles { name: Option<String> },
}

fn load_config(path: &Path) -> Result<CampaignConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: CampaignConfig =
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn campaign(stage: &Stage) -> Result<Campaign> {
    let c = Campaign::new(load_config(&stage.config)?)?;
    Ok(match stage.max_steps {
        Some(n) => c.with_step_limit(n),
        None => c,
    })
}

fn human(d: Duration) -> String {
    let s = d.as_secs();
    if s >= 3600 {
        format!("{}h{:02}m", s / 3600, s % 3600 / 60)
    } else if s >= 60 {
        format!("{}m{:02}s", s / 60, s % 60)
    } else {
        format!("{s}s")
    }
}

struct Progress {
    last: Option<Instant>,
}

impl Progress {
    fn show(&mut self, p: &FormatProgress, eta_us: Option<u64>) {
        if self.last.is_some_and(|t| t.elapsed() < Duration::from_millis(500)) {
            return;
        }
        self.last = Some(Instant::now());
        let eta = eta_us.map_or("unknown".into(), |us| human(Duration::from_micros(us)));
        eprint!(
            "\rformat: {:6.2}% covered, {} MB written, ETA {eta}   ",
            p.coverage.fraction() * 100.0,
            p.bytes_written >> 20
        );
        let _ = std::io::stderr().flush();
    }
}

fn format(c: &Campaign, force: bool) -> Result<()> {
    let mut progress = Progress { last: None };
    let r = c.format(force, |p, eta| progress.show(p, eta))?;
    if progress.last.is_some() {
        eprintln!();
    }
    println!(
        "{}: {} writes, {} MB, coverage {:.2}%, device time {}",
        r.device,
        r.writes,
        r.bytes_written >> 20,
        r.coverage * 100.0,
        human(Duration::from_micros(r.elapsed_us))
    );
    Ok(())
}

fn calibrate(c: &Campaign, force: bool) -> Result<()> {
    let p = c.calibrate(force)?;
    for (b, s) in &p.startup {
        println!(
            "{:<3} start-up {:>6}  period {:>6}  io_count {:>7}",
            b.label(),
            s,
            p.period[b],
            p.io_count_recommendation[b]
        );
    }
    println!(
        "pause {:.2} s (lingering {:.2} s over {} reads)",
        p.inter_run_pause_us as f64 / 1e6,
        p.lingering_us as f64 / 1e6,
        p.affected_reads
    );
    for f in &p.flags {
        println!("note: {f}");
    }
    println!("wrote {}", c.path("profile.json").display());
    Ok(())
}

fn plan(c: &Campaign) -> Result<()> {
    let plan = c.plan()?;
    let check = plan.verify()?;
    println!(
        "{} experiments, {} runs, {} state resets, pause {:.2} s",
        plan.experiments.len(),
        check.runs,
        check.resets,
        plan.pause_us as f64 / 1e6
    );
    println!("wrote {}", c.path("plan.json").display());
    Ok(())
}

fn run(c: &Campaign, force: bool) -> Result<()> {
    let r = c.run(force)?;
    let total = c.load_plan()?.steps.len() as u64;
    println!(
        "{} steps executed from step {}, {} IOs; {} of {} steps done",
        r.steps_executed,
        r.resumed_at,
        r.ios,
        r.resumed_at + r.steps_executed,
        total
    );
    Ok(())
}

fn report(c: &Campaign) -> Result<()> {
    let s = c.report()?;
    print!("{}", SummaryReport::table(std::slice::from_ref(&s)));
    if !s.dispersed.is_empty() {
        println!("dispersed: {}", s.dispersed.join(", "));
    }
    println!("wrote {}", c.path("report").display());
    Ok(())
}

fn analyze(path: &Path, io_ignore: u64) -> Result<()> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = runner::read_trace_csv(std::io::BufReader::new(file))?;
    let rts: Vec<u64> = records.iter().map(|r| r.response_time_us).collect();
    let stats = runner::summarize(&records, io_ignore)?;
    let all = RunStats::of(&rts).expect("summarize rejects empty traces");
    let s = detect_startup(&rts);
    let p = estimate_period(&rts[(s.startup as usize).min(rts.len())..]);
    println!("ios        {}", rts.len());
    println!("mean       {:.1} us (io_ignore {io_ignore}), {:.1} us overall", stats.mean, all.mean);
    println!("stddev     {:.1} us", stats.stddev);
    println!("min/max    {:.0} / {:.0} us", stats.min, stats.max);
    println!("start-up   {}{}", s.startup, if s.inconclusive { " (inconclusive)" } else { "" });
    println!("period     {}{}", p.period, if p.low_confidence { " (low confidence)" } else { "" });
    Ok(())
}

fn profiles(name: Option<&str>) -> Result<()> {
    match name {
        None => {
            for p in SimProfile::bundled() {
                println!("{:<12} {} MB", p.name, p.capacity >> 20);
            }
        }
        Some(n) => {
            let p = SimProfile::by_name(n).ok_or_else(|| Error::InvalidSpec(format!("no bundled profile {n:?}")))?;
            println!("{}", serde_json::to_string_pretty(&p)?);
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Format(s) => format(&campaign(s)?, s.force),
        Command::Calibrate(s) => calibrate(&campaign(s)?, s.force),
        Command::Plan(s) => plan(&campaign(s)?),
        Command::Run(s) => run(&campaign(s)?, s.force),
        Command::Report(s) => report(&campaign(s)?),
        Command::All(s) => {
            let c = campaign(s)?;
            info!("campaign {} in {}", c.config().hash(), c.dir().display());
            format(&c, s.force)?;
            calibrate(&c, s.force)?;
            plan(&c)?;
            run(&c, s.force)?;
            report(&c)
        }
        Command::Analyze { trace, io_ignore } => analyze(trace, *io_ignore),
        Command::Profiles { name } => profiles(name.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_FAILURE;
    };
    match e {
        _ if e.is_device_error() => EXIT_DEVICE,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Unsupported(_) => EXIT_FAILURE,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
