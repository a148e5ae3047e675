use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use objslam::eval::{self, write_ate_report, write_per_frame_report, write_sweep};
use objslam::par::Exec;
use objslam::pipeline::{read_records, run, write_records, Mode, RunConfig};
use objslam::scene::builtin::{builtin, builtin_names, builtin_scenarios, occluded_names};
use objslam::scene::Scenario;

#[derive(Parser)]
#[command(
    name = "objslam",
    version,
    about = "Object-level monocular SLAM with tracker feedback on simulated sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sequence and write records plus both reports.
    Run(RunArgs),
    /// Score a record table.
    Eval(EvalArgs),
    /// Inspect, export or check scenarios.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCommand,
    },
    /// Run every mode over a seed range and report medians.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Tuning {
    /// Gate width in standard deviations.
    #[arg(long)]
    alpha: Option<f64>,
    /// Resets allowed before re-recognition.
    #[arg(long)]
    th: Option<usize>,
}

impl Tuning {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(a) = self.alpha {
            cfg.mapper.alpha = a;
        }
        if let Some(t) = self.th {
            cfg.mapper.threshold = t;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = "full")]
    mode: Mode,
    /// Defaults to the scenario's own seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    tuning: Tuning,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Record table written by `run`.
    records: PathBuf,
    /// Sequence name for the report rows; defaults to the file stem.
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Names of the built-in scenarios.
    List,
    /// Print a scenario as JSON.
    Print { scenario: String },
    /// Write every built-in scenario as JSON into a directory.
    Generate {
        #[arg(long, default_value = "scenarios")]
        out: PathBuf,
    },
    /// Check a scenario file.
    Validate { path: PathBuf },
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario name or path; `occluded` for every occluded built-in, `all`
    /// for every built-in.
    #[arg(long, default_value = "occluded")]
    scenario: String,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[command(flatten)]
    tuning: Tuning,
    /// Run jobs one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

type Result<T> = std::result::Result<T, String>;

fn load_scenario(spec: &str) -> Result<Scenario> {
    if builtin_names().contains(&spec) {
        return builtin(spec).map_err(|e| e.to_string());
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(format!(
            "'{spec}' is neither a built-in scenario ({}) nor a file",
            builtin_names().join(", ")
        ));
    }
    let scn = Scenario::read(path).map_err(|e| e.to_string())?;
    scn.validate().map_err(|e| e.to_string())?;
    Ok(scn)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn io_err(e: io::Error) -> String {
    e.to_string()
}

fn write_reports(
    out: &Path,
    sequence: &str,
    mode: Mode,
    records: &[objslam::pipeline::FrameRecord],
) -> Result<eval::PerFrameReport> {
    let pf = eval::per_frame_error(records, eval::LOST_THRESHOLD).map_err(|e| e.to_string())?;
    let ate = eval::ate(records).ok();
    write_per_frame_report(
        &[(sequence.to_string(), mode, pf)],
        create(out, "per_frame.csv")?,
    )
    .map_err(io_err)?;
    write_ate_report(
        &[(sequence.to_string(), mode, ate)],
        create(out, "ate.csv")?,
    )
    .map_err(io_err)?;
    Ok(pf)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let scn = load_scenario(&a.scenario)?;
    let name = scn.name.clone();
    let mut cfg = RunConfig::new(scn, a.mode);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    a.tuning.apply(&mut cfg);
    let records = run(&cfg).map_err(|e| e.to_string())?;
    write_records(&records, create(&a.out, "records.csv")?).map_err(io_err)?;
    let pf = write_reports(&a.out, &name, a.mode, &records)?;
    println!(
        "{name} {} seed {}: {} frames, success {}%, mean {} m, reports in {}",
        a.mode,
        cfg.seed,
        records.len(),
        objslam::table::fmt6(pf.ratio_pct),
        pf.mean_m.map_or_else(|| "nan".into(), objslam::table::fmt6),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = File::open(&a.records).map_err(|e| format!("{}: {e}", a.records.display()))?;
    let records = read_records(BufReader::new(file)).map_err(|e| e.to_string())?;
    let sequence = a.sequence.unwrap_or_else(|| {
        a.records
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    write_reports(&a.out, &sequence, a.mode, &records)?;
    let mut stdout = io::stdout().lock();
    for name in ["per_frame.csv", "ate.csv"] {
        let text = fs::read_to_string(a.out.join(name)).map_err(io_err)?;
        stdout.write_all(text.as_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_scenario(action: ScenarioCommand) -> Result<()> {
    match action {
        ScenarioCommand::List => {
            for n in builtin_names() {
                println!("{n}");
            }
        }
        ScenarioCommand::Print { scenario } => {
            println!(
                "{}",
                load_scenario(&scenario)?
                    .to_json()
                    .map_err(|e| e.to_string())?
            );
        }
        ScenarioCommand::Generate { out } => {
            fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            for scn in builtin_scenarios() {
                let path = out.join(format!("{}.json", scn.name));
                scn.write(&path).map_err(|e| e.to_string())?;
                println!("{}", path.display());
            }
        }
        ScenarioCommand::Validate { path } => {
            let scn = Scenario::read(&path).map_err(|e| e.to_string())?;
            scn.validate().map_err(|e| e.to_string())?;
            println!(
                "{}: ok ({} frames, {} objects)",
                scn.name,
                scn.len(),
                scn.objects.len()
            );
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let scenarios: Vec<Scenario> = match a.scenario.as_str() {
        "occluded" => occluded_names()
            .into_iter()
            .map(load_scenario)
            .collect::<Result<_>>()?,
        "all" => builtin_scenarios(),
        s => vec![load_scenario(s)?],
    };
    let exec = if a.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let mut rows = Vec::new();
    for scn in scenarios {
        let mut base = RunConfig::new(scn, Mode::Full);
        a.tuning.apply(&mut base);
        let (r, _) = eval::sweep(&base, &Mode::ALL, a.seeds, exec).map_err(|e| e.to_string())?;
        rows.extend(r);
    }
    write_sweep(&rows, create(&a.out, "sweep.csv")?).map_err(io_err)?;
    write_sweep(&rows, io::stdout().lock()).map_err(io_err)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Scenario { action } => cmd_scenario(action),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.lines().next().unwrap_or("failed"));
            ExitCode::FAILURE
        }
    }
}
