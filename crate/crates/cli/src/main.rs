use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use digest_core::config::{ExperimentConfig, Scale};
use digest_core::data::{generate_dataset, Dataset, MANIFEST};
use digest_core::evaluation::{ablation_text, emit_report, DiceTable};
use digest_core::network::checkpoint;
use digest_core::pipeline::{
    deterministic_from_env, run_ablation, run_evaluation, run_student, run_teacher, student_path, teacher_path,
    StudentVariant, DETERMINISTIC_ENV,
};
use digest_core::{DigestError, Result};
use log::info;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

/// Missing-modality brain tumour segmentation by teacher-student transfer.
///
/// Settings are layered: scale preset, then --config, then --set overrides,
/// then --seed. Commands overwrite files of the same name in --out.
#[derive(Debug, Parser)]
#[command(name = "digest", version, after_help = after_help())]
struct Cli {
    /// TOML file mirroring the experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    /// Sets the training, network and data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-key override such as `train.epochs=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!("Set {DETERMINISTIC_ENV}=1 for sequential, bit-reproducible evaluation.")
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic phantom dataset with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of cases; validation and test shares scale with it.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Trains the complete-input teacher.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the student on masked inputs against a frozen teacher.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from fresh weights instead of the teacher's.
        #[arg(long)]
        no_copy_init: bool,
        /// Train with Dice only.
        #[arg(long)]
        no_ds_loss: bool,
    },
    /// Scores a checkpoint on the test split under all 15 modality subsets.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the three-configuration component ablation end to end.
    Ablate {
        /// Dataset directory; generated from the configuration if missing.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse this teacher instead of pretraining one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Prints the tables of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(cli.scale.into(), cli.config.as_deref(), &cli.overrides)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn open_data(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::open(dir, (cfg.data.val_cases, cfg.data.test_cases), cfg.data.seed)
}

fn print_table(title: &str, table: &DiceTable) {
    println!("{title}\n{}", table.to_text());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let deterministic = deterministic_from_env();
    match &cli.command {
        Command::GenData { out, cases } => {
            let spec = cases.map_or(cfg.data.clone(), |n| cfg.data.with_cases(n));
            let m = generate_dataset(out, &spec)?;
            println!(
                "wrote {} cases to {} ({} train, {} val, {} test)",
                spec.cases,
                out.display(),
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
        }
        Command::PretrainTeacher { data, out } => {
            let ds = open_data(data, &cfg)?;
            let outcome = run_teacher(&ds, &cfg, Some(out))?;
            println!(
                "teacher: best validation Dice {:.4} at epoch {}; wrote {}",
                outcome.best_val,
                outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
                teacher_path(out).display()
            );
        }
        Command::TrainStudent {
            data,
            teacher,
            out,
            no_copy_init,
            no_ds_loss,
        } => {
            let ds = open_data(data, &cfg)?;
            let teacher = checkpoint::load(teacher)?.network;
            let variant = StudentVariant {
                copy_init: !no_copy_init,
                ds_loss: !no_ds_loss,
            };
            let outcome = run_student(&ds, &teacher, &cfg, variant, Some(out))?;
            println!(
                "student: best validation Dice {:.4} at epoch {}; wrote {}",
                outcome.best_val,
                outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
                student_path(out).display()
            );
        }
        Command::Evaluate { data, model, out } => {
            let ds = open_data(data, &cfg)?;
            let net = checkpoint::load(model)?.network;
            let table = run_evaluation(&ds, &net, &cfg, deterministic, Some(out))?;
            print_table("Dice on the test split", &table);
        }
        Command::Ablate { data, out, teacher } => {
            let data_dir = data.clone().unwrap_or_else(|| out.join("data"));
            if !data_dir.join(MANIFEST).exists() {
                info!("generating dataset in {}", data_dir.display());
                generate_dataset(&data_dir, &cfg.data)?;
            }
            let ds = open_data(&data_dir, &cfg)?;
            let teacher = teacher.as_deref().map(checkpoint::load).transpose()?.map(|c| c.network);
            let entries = run_ablation(&ds, &cfg, teacher, deterministic, Some(out))?;
            println!("{}", ablation_text(&entries));
        }
        Command::Report { run } => {
            let csv = run.join("dice.csv");
            let text = std::fs::read_to_string(&csv).map_err(|e| DigestError::io(&csv, e))?;
            let table = DiceTable::parse_csv(&text)?;
            print_table(&format!("{}", csv.display()), &table);
            let ablation = run.join("ablation.csv");
            if ablation.exists() {
                let text = std::fs::read_to_string(&ablation).map_err(|e| DigestError::io(&ablation, e))?;
                println!("{text}");
            }
            emit_report(&table, None, run)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
