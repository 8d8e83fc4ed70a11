use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use thinkrec::config::{ExpertMode, PipelineConfig};
use thinkrec::pipeline;
use thinkrec::synthetic::{write_bundle, SyntheticConfig};

#[derive(Parser)]
#[command(name = "thinkrec", version, about = "Reasoning-augmented recommendation with a tiny LoRA language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file.
    #[arg(short, long, default_value = "thinkrec.toml")]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `experts.n_groups`.
    #[arg(long)]
    n_groups: Option<usize>,
    /// Overrides `gate.tau`.
    #[arg(long)]
    tau: Option<f64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.reasons.seed = seed;
            cfg.collab.seed = seed;
            cfg.lm.seed = seed;
            cfg.mix.seed = seed;
            cfg.experts.seed = seed;
            cfg.experts.cluster_seed = seed;
            cfg.projector.seed = seed;
        }
        if let Some(n) = self.n_groups {
            cfg.experts.n_groups = n;
        }
        if let Some(t) = self.tau {
            cfg.gate.tau = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter, extract keywords and split the rating data.
    Prepare(Common),
    /// Synthesize reasoning traces for sampled training windows.
    Synth(Common),
    /// Train the matrix-factorization model.
    TrainCollab(Common),
    /// Train the global adapter on text-only prompts.
    TrainGlobal(Common),
    /// Group users by collaborative embedding.
    Cluster(Common),
    /// Fine-tune one expert adapter per group.
    TrainExperts(Common),
    /// Train the collaborative-embedding projector.
    TrainProjector(Common),
    /// Run every training stage in order.
    Run(Common),
    /// Score the test split and write the metric report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// global, single, fused or auto.
        #[arg(long, default_value = "auto")]
        mode: ExpertMode,
    },
    /// Full / no-think / no-experts / neither comparison.
    Ablate(Common),
    /// Score one user/item pair (raw ids) and explain it.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: u64,
        #[arg(long)]
        item: u64,
        #[arg(long, default_value = "auto")]
        mode: ExpertMode,
    },
    /// Write the bundled planted-group dataset and a matching config.
    GenSynthetic {
        #[arg(long, default_value = "synthetic")]
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let r = pipeline::stage_prepare(&c.load()?)?;
            println!(
                "users {}  items {}  interactions {}  (train {}, valid {}, test {})",
                r.users, r.items, r.interactions, r.train, r.valid, r.test
            );
        }
        Command::Synth(c) => {
            let corpus = pipeline::stage_synth(&c.load()?)?;
            println!("{} reasons, {} skipped", corpus.records.len(), corpus.skipped.len());
        }
        Command::TrainCollab(c) => {
            let losses = pipeline::stage_collab(&c.load()?)?;
            println!("final objective {:.6}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainGlobal(c) => println!("global.trkc {}", pipeline::stage_global(&c.load()?)?),
        Command::Cluster(c) => {
            let cl = pipeline::stage_cluster(&c.load()?)?;
            for g in 0..cl.groups.group_count() {
                println!("group {g}: {} users", cl.groups.members(g).len());
            }
        }
        Command::TrainExperts(c) => println!("{} experts trained", pipeline::stage_experts(&c.load()?)?),
        Command::TrainProjector(c) => println!("projector.trkc {}", pipeline::stage_projector(&c.load()?)?),
        Command::Run(c) => pipeline::run_all(&c.load()?)?,
        Command::Evaluate { common, mode } => {
            let cfg = common.load()?;
            let out = pipeline::evaluate(&cfg, mode)?;
            pipeline::write_evaluation(&cfg, mode, &out)?;
            print!("{}", out.report.to_table());
        }
        Command::Ablate(c) => print!("{}", pipeline::format_ablation(&pipeline::ablate(&c.load()?)?)),
        Command::Infer { common, user, item, mode } => {
            let r = pipeline::infer(&common.load()?, user, item, mode)?;
            println!("score {:.4}  route {}\n{}", r.score, r.decision, r.answer);
        }
        Command::GenSynthetic { dir, seed, users, items, groups } => {
            let cfg = SyntheticConfig { seed, users, items, groups, ..Default::default() };
            let path = write_bundle(&dir, &cfg).with_context(|| format!("writing {}", dir.display()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<thinkrec::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
