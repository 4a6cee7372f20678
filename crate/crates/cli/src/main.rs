//! `elip`: command-line driver for the re-ranking pipeline.
//!
//! Every command prints one JSON status line on stdout and exits with 0 on
//! success, 1 on usage or config errors, 2 on data or format errors and 3
//! on numeric failures.

mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elip_core::encoders::Variant;
use elip_core::io::write_json;
use elip_core::objectives::Conditioning;
use elip_core::retrieval::{AttentionMode, CurveKind};
use elip_core::{Error, Result};
use serde_json::{json, Value};

use commands::AttnText;
use config::{seed_from_env, RunConfig, RESOLVED_CONFIG};

#[derive(Parser, Debug)]
#[command(
    name = "elip",
    version,
    about = "Text-guided visual prompt re-ranking on toy dual encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed. Takes precedence over ELIP_SEED and the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    benchmark: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Gallery index written by embed-gallery.
    #[arg(long, global = true)]
    gallery: Option<PathBuf>,
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    #[arg(long, global = true)]
    rankings: Option<PathBuf>,
    #[arg(long, global = true)]
    tokenizer: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the planted synthetic dataset, benchmark and tokenizer.
    GenSynth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        signal_strength: Option<f64>,
    },
    /// Write a freshly initialized model checkpoint.
    InitModel {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Embed every dataset image with the frozen encoder.
    EmbedGallery,
    /// Build hard-negative batches from frozen similarities.
    CurateMine {
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        unique_category: bool,
    },
    /// Keep the most learnable batches of a plan.
    CurateSelect {
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train the mapping network (and optionally the ITM head).
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        conditioning: Option<Conditioning>,
        #[arg(long)]
        finetune_itm: bool,
        #[arg(long)]
        jest_fraction: Option<f64>,
        #[arg(long)]
        subset_fraction: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Stage-1 ranking of the gallery for every benchmark query.
    Rank,
    /// Re-score the top-k stage-1 candidates under query prompts.
    Rerank {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        itm_sigmoid: bool,
    },
    /// Recall@k and mAP of a ranking file.
    Eval {
        /// Comma-separated cut-offs.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Recall top-k or precision-recall curve.
    Curve {
        #[arg(long)]
        kind: Option<CurveKind>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Patch attention map for one record.
    Attn {
        #[arg(long)]
        record: String,
        /// Benchmark query whose text conditions the map; defaults to the record's caption.
        #[arg(long, conflicts_with = "no_prompts")]
        query: Option<String>,
        /// Plain frozen encoder, no prompts.
        #[arg(long)]
        no_prompts: bool,
        #[arg(long)]
        mode: Option<AttentionMode>,
    },
    /// Forward FLOPs of one image encoding with and without prompts.
    Flops {
        /// Prompt count override.
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Build the occluded-category benchmark of a dataset.
    BenchOccluded,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::InitModel { .. } => "init-model",
            Command::EmbedGallery => "embed-gallery",
            Command::CurateMine { .. } => "curate-mine",
            Command::CurateSelect { .. } => "curate-select",
            Command::Train { .. } => "train",
            Command::Rank => "rank",
            Command::Rerank { .. } => "rerank",
            Command::Eval { .. } => "eval",
            Command::Curve { .. } => "curve",
            Command::Attn { .. } => "attn",
            Command::Flops { .. } => "flops",
            Command::BenchOccluded => "bench-occluded",
        }
    }

    /// Folds command flags into the configuration.
    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        match self {
            Command::GenSynth {
                n,
                clusters,
                signal_strength,
            } => {
                set(&mut cfg.synth.n, n);
                set(&mut cfg.synth.clusters, clusters);
                set(&mut cfg.synth.signal_strength, signal_strength);
            }
            Command::InitModel { variant } => set(&mut cfg.train.variant, variant),
            Command::CurateMine {
                batch_size,
                unique_category,
            } => {
                set(&mut cfg.batch_size, batch_size);
                cfg.unique_category |= unique_category;
            }
            Command::CurateSelect { fraction } => set(&mut cfg.select_fraction, fraction),
            Command::Train {
                variant,
                steps,
                lr,
                conditioning,
                finetune_itm,
                jest_fraction,
                subset_fraction,
                checkpoint_every,
            } => {
                let t = &mut cfg.train;
                set(&mut t.variant, variant);
                set(&mut t.steps, steps);
                if lr.is_some() {
                    t.lr = *lr;
                }
                set(&mut t.conditioning, conditioning);
                t.finetune_itm |= finetune_itm;
                if jest_fraction.is_some() {
                    t.jest_fraction = *jest_fraction;
                }
                set(&mut t.subset_fraction, subset_fraction);
                set(&mut t.checkpoint_every, checkpoint_every);
            }
            Command::Rerank { k, itm_sigmoid } => {
                set(&mut cfg.rerank_k, k);
                cfg.itm_sigmoid |= itm_sigmoid;
            }
            Command::Eval { ks } => set(&mut cfg.ks, ks),
            Command::Curve { kind, ks } => {
                set(&mut cfg.curve_kind, kind);
                set(&mut cfg.curve_ks, ks);
            }
            Command::Attn { mode, .. } => set(&mut cfg.attn_mode, mode),
            Command::Flops { prompts } => set(&mut cfg.dims.prompts, prompts),
            Command::EmbedGallery | Command::Rank | Command::BenchOccluded => {}
        }
    }
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = seed_from_env()? {
        cfg.seed = seed;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.dataset, &common.dataset),
        (&mut p.benchmark, &common.benchmark),
        (&mut p.model, &common.model),
        (&mut p.gallery, &common.gallery),
        (&mut p.plan, &common.plan),
        (&mut p.rankings, &common.rankings),
        (&mut p.tokenizer, &common.tokenizer),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: &Command, cfg: &RunConfig, out: &Path) -> Result<Value> {
    match command {
        Command::GenSynth { .. } => commands::gen_synth(cfg, out),
        Command::InitModel { .. } => commands::init_model(cfg, out),
        Command::EmbedGallery => commands::embed(cfg, out),
        Command::CurateMine { .. } => commands::curate_mine(cfg, out),
        Command::CurateSelect { .. } => commands::curate_select(cfg, out),
        Command::Train { .. } => commands::train(cfg, out),
        Command::Rank => commands::rank(cfg, out),
        Command::Rerank { .. } => commands::rerank_cmd(cfg, out),
        Command::Eval { .. } => commands::eval(cfg, out),
        Command::Curve { .. } => commands::curve_cmd(cfg, out),
        Command::Attn {
            record,
            query,
            no_prompts,
            ..
        } => {
            let text = match (query, no_prompts) {
                (Some(q), _) => AttnText::Query(q),
                (None, true) => AttnText::None,
                (None, false) => AttnText::Own,
            };
            commands::attn(cfg, out, record, text)
        }
        Command::Flops { .. } => commands::flops(cfg, out),
        Command::BenchOccluded => commands::bench_occluded(cfg, out),
    }
}

fn status(value: Value) {
    let _ = writeln!(std::io::stdout(), "{value}");
}

fn fail(command: &str, seed: Option<u64>, e: &Error) -> ExitCode {
    eprintln!("elip {command}: {e}");
    let code = e.exit_code();
    status(json!({ "command": command, "status": "error", "code": code, "seed": seed, "error": e.to_string() }));
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            status(json!({ "status": "error", "code": 1, "error": e.kind().to_string() }));
            return ExitCode::from(1);
        }
    };
    let name = cli.command.name();
    let cfg = match resolve(&cli.common, &cli.command) {
        Ok(cfg) => cfg,
        Err(e) => return fail(name, None, &e),
    };
    let out = cfg.out.clone();
    let result = write_json(&out.join(RESOLVED_CONFIG), &cfg).and_then(|_| dispatch(&cli.command, &cfg, &out));
    match result {
        Ok(summary) => {
            let mut line = json!({
                "command": name,
                "status": "ok",
                "seed": cfg.seed,
                "out": out.display().to_string(),
            });
            if let (Value::Object(line), Value::Object(extra)) = (&mut line, summary) {
                line.extend(extra);
            }
            status(line);
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, Some(cfg.seed), &e),
    }
}
