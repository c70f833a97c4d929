use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ifss_bench::config::ExperimentConfig;
use ifss_bench::experiment::{
    ablation_run, experiment_taxonomy, repeat_schedule, repeat_seed, run_experiment, run_experiment_with_model, run_sessions, train_base_model, AblationAxis, AblationTraining,
};
use ifss_bench::formats::{model_from_str, model_to_string, pool_to_string, write_mask, write_pnm, write_traces};
use ifss_bench::taxonomy::render_sample;
use ifss_bench::{BenchError, Result};

#[derive(Parser)]
#[command(name = "ifss", version, about = "Incremental few-shot segmentation on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Embeddings,
    Strategy,
    Iterations,
}

#[derive(Subcommand)]
enum Command {
    /// Render the taxonomy and first-repeat schedule of a config to a directory.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model on the first repeat's base session.
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full incremental experiment and write the CSV report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start every repeat from this trained model instead of training.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the first repeat's final memory pool here.
        #[arg(long)]
        pool_out: Option<PathBuf>,
        /// Write the first repeat's strategy traces here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Sweep one ablation axis and write a comparison table.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train one model per repeat across all settings instead of one per setting.
        #[arg(long)]
        shared: bool,
    },
    /// Run every finite-difference gradient check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let tax = experiment_taxonomy(cfg)?;
    let schedule = repeat_schedule(cfg, &tax, 0)?;
    fs::create_dir_all(out)?;
    let mut classes = csv::Writer::from_writer(create(&out.join("taxonomy.csv"))?);
    classes.write_record(["class_id", "group", "hue", "freq_lo", "freq_hi", "corners", "area_lo", "area_hi"])?;
    for c in &tax.classes {
        classes.write_record([
            c.class_id.0.to_string(),
            c.group.to_string(),
            format!("{:.4}", c.hue),
            format!("{:.4}", c.freq_band.0),
            format!("{:.4}", c.freq_band.1),
            c.corners.to_string(),
            c.area_range.0.to_string(),
            c.area_range.1.to_string(),
        ])?;
    }
    classes.flush()?;
    let mut manifest = csv::Writer::from_writer(create(&out.join("manifest.csv"))?);
    manifest.write_record(["session", "role", "class_id", "seed", "image", "mask"])?;
    for (si, session) in schedule.sessions.iter().enumerate() {
        for (role, refs) in [("support", &session.support), ("query", &session.query)] {
            for r in refs {
                let stem = format!("c{}_{:016x}", r.class_id.0, r.seed);
                let (image, mask) = (format!("samples/{stem}.ppm"), format!("samples/{stem}.mask.pgm"));
                if !out.join(&image).exists() {
                    let class = tax.class(r.class_id).expect("schedule classes come from the taxonomy");
                    let sample = render_sample(class, r.seed)?;
                    write_pnm(create(&out.join(&image))?, &sample.image)?;
                    write_mask(create(&out.join(&mask))?, &sample.mask)?;
                }
                manifest.write_record([si.to_string(), role.into(), r.class_id.0.to_string(), r.seed.to_string(), image, mask])?;
            }
        }
    }
    manifest.flush()?;
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out } => gen(&load_config(config.as_deref())?, &out),
        Command::TrainBase { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let tax = experiment_taxonomy(&cfg)?;
            let schedule = repeat_schedule(&cfg, &tax, 0)?;
            let (model, log) = train_base_model(&cfg, &tax, &schedule, repeat_seed(&cfg, 0))?;
            use std::io::Write;
            create(&out)?.write_all(model_to_string(&model, &cfg.model_config()).as_bytes())?;
            if let Some(last) = log.epoch_losses.last() {
                eprintln!("final epoch loss {last:.5}");
            }
            Ok(())
        }
        Command::Run {
            config,
            out,
            model,
            pool_out,
            trace_out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = match &model {
                Some(path) => {
                    let (m, _) = model_from_str(&fs::read_to_string(path)?)?;
                    run_experiment_with_model(&cfg, &m)?
                }
                None => run_experiment(&cfg)?,
            };
            report.write_csv(create(&out)?)?;
            if let Some(path) = trace_out {
                write_traces(create(&path)?, &report.runs[0].traces)?;
            }
            if let Some(path) = pool_out {
                // The report keeps scores, not pools, so the first repeat is replayed.
                let tax = experiment_taxonomy(&cfg)?;
                let schedule = repeat_schedule(&cfg, &tax, 0)?;
                let m = match &model {
                    Some(p) => model_from_str(&fs::read_to_string(p)?)?.0,
                    None => train_base_model(&cfg, &tax, &schedule, repeat_seed(&cfg, 0))?.0,
                };
                let (learner, _, _) = run_sessions(&cfg, &tax, &schedule, m, 1)?;
                use std::io::Write;
                create(&path)?.write_all(pool_to_string(learner.pool()).as_bytes())?;
            }
            let s = report.summary();
            let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            eprintln!("final session mIoU: base {} new {} mean {}", show(s.base_miou), show(s.new_miou), show(s.mean_miou));
            Ok(())
        }
        Command::Ablate { axis, config, out, shared } => {
            let cfg = load_config(config.as_deref())?;
            let axis = match axis {
                Axis::Embeddings => AblationAxis::Embeddings,
                Axis::Strategy => AblationAxis::Strategy,
                Axis::Iterations => AblationAxis::Iterations,
            };
            ablation_run(&cfg, axis, if shared { AblationTraining::Shared } else { AblationTraining::PerSetting })?.write_csv(create(&out)?)
        }
        Command::Gradcheck { seed } => {
            let reports = ifss_core::gradsuite::run_all(seed).map_err(|source| BenchError::Core {
                context: "gradient checks".into(),
                source,
            })?;
            let mut failed = false;
            for r in &reports {
                println!("{:<10} {} instances  max rel error {:.3e}  {}", r.name, r.instances, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
                failed |= !r.passed();
            }
            if failed {
                return Err(BenchError::Numeric("analytic and numeric gradients disagree".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
