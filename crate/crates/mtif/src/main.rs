use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mtif::checkpoint;
use mtif::config_file::{load_config, RunConfig};
use mtif::dataset::{build_manifest, scan, Split};
use mtif::descriptions::{load_description_cache, read_embeddings};
use mtif::enrich_dir::enrich_dir;
use mtif::evaluate::{evaluate_dir, write_csv, write_json};
use mtif::infer::fuse_files;
use mtif::trainer::{load_pairs, new_state, train, TrainOptions};
use mtif_core::{Config, Task, VeMode};

#[derive(Parser)]
#[command(name = "mtif", version, about = "Text-guided image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Mef,
    Mff,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mef => Task::Mef,
            TaskArg::Mff => Task::Mff,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Saliency,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Crop every pair into enriched variants and write a window manifest.
    Enrich {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        crop_size: usize,
        #[arg(long, value_enum, default_value = "saliency")]
        mode: ModeArg,
        #[arg(long, default_value_t = 5)]
        variants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate description caches and embedding containers.
    Describe {
        #[arg(long)]
        pairs_dir: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Fail on the first invalid pair instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Fuse one pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runtime config that must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Embedding container for the precomputed text encoder.
        #[arg(long)]
        emb: Option<PathBuf>,
    },
    /// Score fused images against their source pairs.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write a JSON report next to the CSV.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        strict: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Enrich {
            input_dir,
            out_dir,
            crop_size,
            mode,
            variants,
            seed,
        } => {
            let mut cfg = Config::desk(Task::Mef);
            cfg.crop_size = crop_size;
            cfg.variants = variants;
            cfg.seed = seed;
            cfg.ablation.ve_mode = match mode {
                ModeArg::Saliency => VeMode::Saliency,
                ModeArg::Random => VeMode::Random,
            };
            let m = enrich_dir(&input_dir, &out_dir, &cfg)?;
            println!("enriched {} pairs into {}", m.pairs.len(), out_dir.display());
        }
        Command::Describe { pairs_dir, check } => {
            if !check {
                bail!("descriptions are produced offline; pass --check to validate the caches");
            }
            let (manifest, report) = scan(&pairs_dir, Task::Mef, Split::Train, false, true)?;
            let mut bad = report.issues.len();
            for (id, msg) in &report.issues {
                println!("FAIL {id}: {msg}");
            }
            for e in &manifest.entries {
                let checked = load_description_cache(&e.text)
                    .and_then(|_| e.embeddings.as_deref().map(read_embeddings).transpose().map(|_| ()));
                match checked {
                    Ok(()) => println!("ok   {}", e.id),
                    Err(err) => {
                        bad += 1;
                        println!("FAIL {}: {err}", e.id);
                    }
                }
            }
            if bad > 0 {
                bail!("{bad} pair(s) failed validation");
            }
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            max_steps,
            strict,
        } => {
            let cfg = load_config(&config)?;
            let state = match &resume {
                Some(p) => checkpoint::load_compatible(p, &cfg)?,
                None => new_state(cfg.clone())?,
            };
            let (manifest, _) = build_manifest(&data, cfg.model.task, Split::Train, strict)?;
            if manifest.is_empty() {
                bail!("no training pairs under {}", data.display());
            }
            let pairs = load_pairs(&manifest, &cfg)?;
            let validation = if data.join(Split::Test.dir_name()).is_dir() {
                let (m, _) = build_manifest(&data, cfg.model.task, Split::Test, false)?;
                load_pairs(&m, &cfg)?
            } else {
                Vec::new()
            };
            let mut opts = TrainOptions::new(&out);
            opts.max_steps = max_steps;
            let state = train(state, &pairs, &validation, &opts)?;
            println!(
                "trained {} steps, final loss {:.6}",
                state.progress.step,
                state.progress.loss_history.last().map_or(f64::NAN, |l| l.total)
            );
        }
        Command::Fuse {
            ckpt,
            a,
            b,
            text,
            out,
            config,
            emb,
        } => {
            let runtime: Option<RunConfig> = config.as_deref().map(load_config).transpose()?;
            fuse_files(&ckpt, &a, &b, &text, emb.as_deref(), &out, runtime.as_ref())
                .with_context(|| format!("fusing {} and {}", a.display(), b.display()))?;
        }
        Command::Eval {
            fused,
            data,
            report,
            json,
            strict,
        } => {
            let (manifest, _) = build_manifest(&data, Task::Mef, Split::Test, strict)?;
            let r = evaluate_dir(&fused, &manifest, strict)?;
            write_csv(&report, &r)?;
            if json {
                write_json(&report.with_extension("json"), &r)?;
            }
            println!("scored {} images, {} missing", r.rows.len(), r.missing.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
