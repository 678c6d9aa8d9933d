use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use adaptcl::error::{Error, Result};
use adaptcl::harness::checkpoint;
use adaptcl::harness::{emit_report, load_run_dir, run_experiment, ExperimentConfig};
use adaptcl::inference::DEFAULT_BEAM;
use adaptcl::methods::select_weight_decay;
use adaptcl::metrics::{levenshtein, EvalMode};
use adaptcl::model::HybridModel;
use adaptcl::taskgen::{generate_task, interference_suite, load_manifest, write_task, TaskSpec};

#[derive(Parser)]
#[command(name = "adaptcl", version, about = "Continual learning with task-specific adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task datasets into OUT/task_<t>/.
    GenTasks { spec_file: PathBuf, out: PathBuf },
    /// Train and evaluate a task sequence, resuming a partial run.
    Train {
        config: PathBuf,
        /// Output directory; overrides the config's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a manifest with a checkpoint and print per-utterance results.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "task_label")]
        mode: EvalMode,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
    },
    /// Build one table from finished run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Print the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Choose the weight-decay exponent on the first task of a config.
    SelectWd {
        config: PathBuf,
        /// Candidate exponents, largest first.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true,
              default_value = "-1,-2,-3,-4,-5,-6,-7,-8")]
        candidates: Vec<f64>,
        /// Allowed relative WER increase.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
}

/// Contents of a `gen-tasks` spec file.
#[derive(Deserialize)]
#[serde(untagged)]
enum TaskSource {
    Specs(Vec<TaskSpec>),
    Suite { interference_suite: SuiteArgs },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteArgs {
    num_tasks: usize,
    #[serde(default)]
    seed: u64,
}

fn gen_tasks(spec_file: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_file).map_err(|e| Error::io(spec_file, e))?;
    let source: TaskSource =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_file.display())))?;
    let specs = match source {
        TaskSource::Specs(s) => s,
        TaskSource::Suite { interference_suite: a } => interference_suite(a.num_tasks, a.seed)?,
    };
    for spec in &specs {
        let ds = generate_task(spec)?;
        let dir = out.join(format!("task_{}", spec.task_id));
        write_task(&ds, &dir)?;
        println!("task {} -> {} ({})", spec.task_id, dir.display(), spec.hash());
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn eval(ckpt: &Path, manifest: &Path, mode: EvalMode, beam: usize) -> Result<()> {
    let (_, model, store) = checkpoint::load(ckpt)?;
    let manifest = load_manifest(manifest)?;
    let decoder = store.decoder(&model).with_beam(beam);
    if mode != EvalMode::TaskLabel && !decoder.has_banks() {
        return Err(Error::Config(format!("{mode} needs a checkpoint with adapter banks")));
    }
    let mut stdout = std::io::stdout().lock();
    let (mut edits, mut words) = (0, 0);
    for i in 0..manifest.len() {
        let u = manifest.utterance(i)?;
        let (h, task) = decoder.decode_mode(&u.frames, mode, u.task_id)?;
        let e = levenshtein(&u.tokens, &h.tokens);
        edits += e;
        words += u.tokens.len();
        let task = task.map_or_else(|| "-".to_string(), |t| t.to_string());
        let _ = writeln!(
            stdout,
            "{}\ttask={task}\tref={:?}\thyp={:?}\tedits={e}\tscore={:.4}",
            u.id, u.tokens, h.tokens, h.score
        );
    }
    if words > 0 {
        let _ = writeln!(
            stdout,
            "WER {:.2} over {} utterances ({mode})",
            100.0 * edits as f64 / words as f64,
            manifest.len()
        );
    }
    Ok(())
}

fn report(dirs: &[PathBuf], json: bool) -> Result<()> {
    let mut runs = vec![];
    for d in dirs {
        runs.extend(load_run_dir(d)?);
    }
    let r = emit_report(&runs)?;
    if json {
        print!("{}", r.to_json()?);
    } else {
        print!("{}", r.to_text());
    }
    Ok(())
}

fn select_wd(config: &Path, candidates: &[f64], tolerance: f64) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate()?;
    let spec = &cfg.tasks[0];
    let data = match &cfg.data_dir {
        Some(dir) => adaptcl::taskgen::load_task_for(&dir.join(format!("task_{}", spec.task_id)), spec)?,
        None => generate_task(spec)?,
    };
    let model = HybridModel::new(cfg.model.clone())?;
    let sel = select_weight_decay(&model, &data.train, &data.dev, candidates, tolerance, &cfg.policy)?;
    println!("{}", serde_json::to_string_pretty(&sel)?);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenTasks { spec_file, out } => gen_tasks(&spec_file, &out),
        Command::Train { config, out } => train(&config, out),
        Command::Eval {
            checkpoint,
            manifest,
            mode,
            beam,
        } => eval(&checkpoint, &manifest, mode, beam),
        Command::Report { run_dirs, json } => report(&run_dirs, json),
        Command::SelectWd {
            config,
            candidates,
            tolerance,
        } => select_wd(&config, &candidates, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
