use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use invdriver::checks::{run_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use invdriver::eval::{
    emit_plots, evaluate_files, render_report, run_ablation, train_and_evaluate, train_on_scenes,
    AblationMatrix,
};
use invdriver::query::ModelConfig;
use invdriver::scene::{
    generate_scenes, read_dataset, validate_scene, write_dataset, SceneGenConfig,
};
use invdriver::train::{write_history_csv, TrainConfig};
use invdriver::Error;

#[derive(Parser)]
#[command(
    name = "invdriver",
    version,
    about = "Vectorized driving transformer with intra-instance masked attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (JSON Lines).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// SceneGenConfig as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a loss-history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON with optional `model` (ModelConfig) and `train` (TrainConfig).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; the text report and the manifest go next to it.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Train and evaluate every arm of an ablation matrix.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// AblationMatrix as JSON.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of the operations, a decoder layer
    /// and the full model loss.
    Gradcheck {
        /// Relative tolerance of the full model loss.
        #[arg(long, default_value_t = MODEL_TOLERANCE)]
        tolerance: f64,
        /// Relative tolerance of the operations and the decoder layer.
        #[arg(long, default_value_t = OP_TOLERANCE)]
        op_tolerance: f64,
        /// Random cases per operation.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Render predictions of the first scenes as SVG.
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
    },
}

enum Failure {
    Error(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> invdriver::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> invdriver::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> invdriver::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> invdriver::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `dir/stem.suffix` for a file `dir/stem.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn gen_data(seed: u64, count: usize, out: &Path, config: Option<&Path>) -> Outcome {
    let cfg: SceneGenConfig = config.map(read_json).transpose()?.unwrap_or_default();
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Input("--count must be at least 1".into()).into());
    }
    let scenes = generate_scenes(seed..seed + count as u64, &cfg);
    for s in &scenes {
        validate_scene(s, &cfg)?;
    }
    write_dataset(out, &cfg, &scenes)?;
    println!(
        "wrote {count} scenes (seeds {seed}..{}) to {}",
        seed + count as u64,
        out.display()
    );
    Ok(())
}

fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Outcome {
    let file: TrainFile = config.map(read_json).transpose()?.unwrap_or_default();
    let model = file.model.unwrap_or_else(ModelConfig::toy);
    let mut train = file.train.unwrap_or_default();
    train.epochs = epochs.unwrap_or(train.epochs);
    train.learning_rate = lr.unwrap_or(train.learning_rate);
    train.seed = seed.unwrap_or(train.seed);
    train.validate()?;
    model.validate()?;
    let (scene_cfg, scenes) = read_dataset(data)?;

    let start = Instant::now();
    let trainer = train_on_scenes(model, train, &scenes, &scene_cfg, Some(out), |r| {
        eprintln!(
            "epoch {:>4}  total {:.4}  map {:.4}  prediction {:.4}  planning {:.4}  [{:.0}s]",
            r.epoch,
            r.total,
            r.terms.map(),
            r.terms.prediction(),
            r.terms.planning(),
            start.elapsed().as_secs_f64()
        );
    })?;
    let history = sibling(out, "history.csv");
    write_history_csv(&history, &trainer.history)?;
    println!("checkpoint: {}", out.display());
    println!("history: {}", history.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, report_path: Option<&Path>, plots: Option<&Path>) -> Outcome {
    let (report, manifest, trainer) = evaluate_files(ckpt, data)?;
    let text = render_report(&report);
    print!("{text}");
    println!(
        "speed: {:.2} {}",
        manifest.scenes_per_second, manifest.fps_note
    );
    if let Some(path) = report_path {
        write_json(path, &report)?;
        write_text(&sibling(path, "txt"), &text)?;
        write_json(&sibling(path, "manifest.json"), &manifest)?;
    }
    if let Some(dir) = plots {
        let (scene_cfg, scenes) = read_dataset(data)?;
        let written = emit_plots(&trainer.model, &scenes, &scene_cfg, dir, scenes.len())?;
        println!("plots: {} files in {}", written.len(), dir.display());
    }
    Ok(())
}

fn ablate(data: &Path, matrix_path: &Path, out: &Path) -> Outcome {
    let matrix: AblationMatrix = read_json(matrix_path)?;
    matrix.model.validate()?;
    matrix.train.validate()?;
    if matrix.specs.is_empty() {
        return Err(Error::Input("the matrix has no arms".into()).into());
    }
    let (scene_cfg, scenes) = read_dataset(data)?;
    let eval_set = match &matrix.eval_data {
        Some(path) => {
            let (cfg, eval_scenes) = read_dataset(path)?;
            if cfg != scene_cfg {
                return Err(Error::Mismatch(
                    "evaluation and training datasets use different scene configs".into(),
                )
                .into());
            }
            eval_scenes
        }
        None => scenes.clone(),
    };
    create_dir(out)?;
    let table = run_ablation(&matrix.specs, |spec| {
        eprintln!("arm {}", spec.name);
        let ckpt = out.join(format!("{}.ckpt", spec.name));
        train_and_evaluate(&matrix, spec, &scenes, &eval_set, &scene_cfg, Some(&ckpt))
    });
    let text = table.render();
    print!("{text}");
    write_json(&out.join("table.json"), &table)?;
    write_text(&out.join("table.txt"), &text)?;
    Ok(())
}

fn gradcheck(tolerance: f64, op_tolerance: f64, seeds: u64) -> Outcome {
    for (name, t) in [("--tolerance", tolerance), ("--op-tolerance", op_tolerance)] {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("{name} must be positive")).into());
        }
    }
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let entries = run_suite(seeds, op_tolerance, tolerance)?;
    println!(
        "{:<16}{:>14}{:>12}{:>14}  verdict",
        "check", "max rel err", "tolerance", "over floor"
    );
    for e in &entries {
        println!(
            "{:<16}{:>14.3e}{:>12.0e}{:>14}  {}",
            e.name,
            e.max_rel_error,
            e.tolerance,
            e.unexplained,
            if e.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed).collect();
    if failed.is_empty() {
        println!("all {} checks passed", entries.len());
        return Ok(());
    }
    println!("{} of {} checks failed", failed.len(), entries.len());
    if failed.iter().all(|e| e.unexplained == 0) {
        println!("every failing element is within the finite-difference rounding floor");
    }
    Err(Failure::Gradcheck)
}

fn plot(ckpt: &Path, data: &Path, out: &Path, count: usize) -> Outcome {
    let trainer = invdriver::train::Trainer::<f64>::load(ckpt)?;
    let (scene_cfg, scenes) = read_dataset(data)?;
    invdriver::eval::check_compatible(&trainer.model.cfg, &scene_cfg)?;
    let written = emit_plots(&trainer.model, &scenes, &scene_cfg, out, count)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            config,
        } => gen_data(seed, count, &out, config.as_deref()),
        Command::Train {
            data,
            out,
            config,
            epochs,
            lr,
            seed,
        } => train(&data, &out, config.as_deref(), epochs, lr, seed),
        Command::Eval {
            ckpt,
            data,
            report,
            plots,
        } => eval(&ckpt, &data, report.as_deref(), plots.as_deref()),
        Command::Ablate { data, matrix, out } => ablate(&data, &matrix, &out),
        Command::Gradcheck {
            tolerance,
            op_tolerance,
            seeds,
        } => gradcheck(tolerance, op_tolerance, seeds),
        Command::Plot {
            ckpt,
            data,
            out,
            scenes,
        } => plot(&ckpt, &data, &out, scenes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gradcheck) => ExitCode::from(3),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
