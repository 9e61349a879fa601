use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skypart::audit::{grad_audit, AUDIT_TOLERANCE};
use skypart::checkpoint;
use skypart::config::RunConfig;
use skypart::dataset::{read_bundle, write_bundle};
use skypart::eval::{evaluate, metric_records, records_to_json, records_to_text, weather_table, Direction};
use skypart::head::Branches;
use skypart::run::{ablate, ablation_table, generate, load_model, n_train_classes, train};
use skypart::train::Ablation;
use skypart::weather::WeatherCondition;
use skypart::SkyError;

#[derive(Parser)]
#[command(name = "skypart", version, about = "Part-prototype drone/satellite retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, gallery and query splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write model.skck, ema.skck, config.cfg and loss_log.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-pass clean retrieval metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "d2s")]
        direction: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to config.cfg beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// All ten weather conditions in both directions.
    WeatherEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Loss-group gradients against central differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full run plus one run per ablation flag.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated flags; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
        /// Read this bundle instead of generating one from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Io(String),
    GradCheck,
}

impl From<SkyError> for Failure {
    fn from(e: SkyError) -> Self {
        match e {
            SkyError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

fn eval_config(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig, Failure> {
    if !ckpt.is_file() {
        return Err(Failure::Io(format!("checkpoint {} not found", ckpt.display())));
    }
    match explicit {
        Some(p) => load_config(Some(p)),
        None => {
            let beside = ckpt.with_file_name("config.cfg");
            load_config(beside.is_file().then_some(beside.as_path()))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = generate(&cfg)?;
            write_bundle(&out, &bundle)?;
            println!(
                "wrote {} train, {} gallery, {} query pairs to {}",
                bundle.train.len(),
                bundle.gallery.len(),
                bundle.query.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = read_bundle(&data)?;
            fs::create_dir_all(&out)?;
            let mut log = fs::File::create(out.join("loss_log.jsonl"))?;
            let trainer = train(&cfg, &bundle, |r| {
                writeln!(log, "{}", r.to_json_line())?;
                Ok(())
            })?;
            checkpoint::save(&out.join("model.skck"), &trainer.store)?;
            checkpoint::save(&out.join("ema.skck"), &trainer.ema)?;
            fs::write(out.join("config.cfg"), cfg.to_text())?;
            println!("trained {} steps; artifacts in {}", trainer.step(), out.display());
        }
        Command::Eval { ckpt, data, direction, out, config } => {
            let direction = Direction::parse(&direction).map_err(|e| Failure::Usage(e.to_string()))?;
            let cfg = eval_config(&ckpt, config.as_deref())?;
            let bundle = read_bundle(&data)?;
            let (model, store) = load_model(&cfg, n_train_classes(&bundle), &ckpt)?;
            let branches = cfg.train.ablation.branches();
            let m = evaluate(
                &model,
                &store,
                &bundle.gallery,
                &bundle.query,
                direction,
                WeatherCondition::Normal,
                cfg.eval.seed,
                branches,
            )?;
            let records = metric_records("desk", direction, WeatherCondition::Normal.tag(), &m);
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.txt"), records_to_text(&records))?;
            fs::write(out.join("metrics.json"), records_to_json(&records))?;
            print!("{}", records_to_text(&records));
        }
        Command::WeatherEval { ckpt, data, out, config } => {
            let cfg = eval_config(&ckpt, config.as_deref())?;
            let bundle = read_bundle(&data)?;
            let (model, store) = load_model(&cfg, n_train_classes(&bundle), &ckpt)?;
            if cfg.train.ablation.branches() != Branches::ALL {
                return Err(Failure::Usage("weather-eval expects a full-branch model".into()));
            }
            let table =
                weather_table(&model, &store, &bundle.gallery, &bundle.query, &WeatherCondition::ALL, cfg.eval.seed)?;
            let mut records = Vec::new();
            for row in &table.rows {
                records.extend(metric_records("desk", row.direction, &row.condition, &row.metrics));
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("weather.csv"), table.to_csv())?;
            fs::write(out.join("weather.txt"), records_to_text(&records))?;
            fs::write(out.join("weather.json"), records_to_json(&records))?;
            print!("{}", table.to_csv());
        }
        Command::GradCheck { config } => {
            let cfg = load_config(config.as_deref())?;
            let results = grad_audit(cfg.model_config(), cfg.train.seed)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<14} max_rel_error={:.3e} coords={} {verdict}", r.group, r.max_rel_error, r.coords);
                ok &= r.passed();
            }
            if !ok {
                eprintln!("gradient audit exceeded {AUDIT_TOLERANCE:e}");
                return Err(Failure::GradCheck);
            }
        }
        Command::Ablate { config, flags, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let flags = if flags.is_empty() { Ablation::FLAGS.iter().map(|s| s.to_string()).collect() } else { flags };
            for f in &flags {
                Ablation::only(f).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            let bundle = match data {
                Some(d) => read_bundle(&d)?,
                None => generate(&cfg)?,
            };
            let rows = ablate(&cfg, &bundle, &flags)?;
            let table = ablation_table(&rows)?;
            if let Some(o) = out {
                fs::create_dir_all(&o)?;
                fs::write(o.join("ablation.csv"), &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::GradCheck) => ExitCode::from(3),
    }
}
