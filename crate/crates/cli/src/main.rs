use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oel::config::{BackendKind, ConfigError, OelConfig};
use oel::distill::Mode;
use oel::harness::ablation::{run_ablation, AblationKind};
use oel::harness::plot::{line_chart, Series};
use oel::harness::{accumulation_curve, eval_pass_rate, heldout_maps};
use oel::knowledge::read_knowledge_set;
use oel::orchestrator::{self as orch, RunLayout};
use oel::policy::pretrain;
use oel::textgames::{generate_map_in_split, render_board, Game, MapSplit};
use oel::trajectory::{load_all, write_all, Trajectory};

#[derive(Parser)]
#[command(name = "oel", version, about = "Online experiential learning on text games")]
#[command(after_long_help = defaults_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file; missing keys take the defaults listed below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `rounds`.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Override `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `game` (frozen_lake or sokoban).
    #[arg(long, global = true)]
    game: Option<Game>,
    /// Consolidation mode for `distill`: on-policy or the off-policy baseline.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::On)]
    mode: ModeArg,
    /// Override `backend.kind`.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override `run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Toy,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    RawVsKnowledge,
    SelfVsOther,
    OnVsOffPolicy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate solvable maps and print them or write them as NDJSON.
    GenMaps {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// User side of one round: collect trajectories with the previous checkpoint.
    Collect {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Server stage 1: accumulate knowledge from the round's trajectories.
    Extract {
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Also write pass rate vs accumulation step as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Server stage 2: consolidate the round's knowledge into the weights.
    Distill {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Run (or resume) every round.
    Loop {
        /// Also write pass rate per round as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Held-out pass rate of a checkpoint, optionally with knowledge in context.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Knowledge directory (`run/{r}/server/knowledge`) to use in context.
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// One-round ablation table.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationArg,
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain (or load from cache) the toy base model.
    Pretrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn defaults_help() -> String {
    format!("Config defaults:\n\n{}", OelConfig::default().to_toml())
}

fn load_config(g: &Global) -> Result<OelConfig, ConfigError> {
    let mut cfg = match &g.config {
        Some(path) => OelConfig::load(path)?,
        None => OelConfig::default(),
    };
    if let Some(r) = g.rounds {
        cfg.rounds = r;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(game) = g.game {
        cfg.game = game;
    }
    if let Some(b) = g.backend {
        cfg.backend.kind = match b {
            BackendArg::Toy => BackendKind::Toy,
            BackendArg::Remote => BackendKind::Remote,
        };
    }
    if let Some(dir) = &g.run_dir {
        cfg.run_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mode(g: &Global) -> Mode {
    match g.mode {
        ModeArg::On => Mode::OnPolicy,
        ModeArg::Off => Mode::OffPolicy,
    }
}

fn ensure_base(cfg: &OelConfig) -> Result<()> {
    if cfg.backend.kind == BackendKind::Toy && !RunLayout::new(&cfg.run_dir).checkpoint(0).exists() {
        let path = orch::init_base(cfg)?;
        eprintln!("wrote base checkpoint {}", path.display());
    }
    Ok(())
}

fn first_round(round: usize) -> Result<()> {
    if round == 0 {
        bail!("rounds start at 1");
    }
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().context("configuring worker threads")?;
    }
    let layout = RunLayout::new(&cfg.run_dir);
    match cli.command {
        Command::GenMaps { count, split, out } => {
            let (split, base) = match split {
                SplitArg::Train => (MapSplit::Train, cfg.seed),
                SplitArg::Heldout => (MapSplit::HeldOut, oel::harness::EVAL_MAP_SEED_BASE),
            };
            let maps = if split == MapSplit::HeldOut {
                heldout_maps(cfg.game, count)
            } else {
                (0..count as u64).map(|i| generate_map_in_split(cfg.game, base + i, split)).collect::<Result<_, _>>()?
            };
            match out {
                Some(path) => {
                    write_all(&path, &maps)?;
                    println!("wrote {} maps to {}", maps.len(), path.display());
                }
                None => {
                    for m in &maps {
                        println!("{}\n{}\n", m.map_id, render_board(m, m.player_start, m.box_start));
                    }
                }
            }
        }
        Command::Collect { round } => {
            first_round(round)?;
            if round == 1 {
                ensure_base(&cfg)?;
            }
            for path in orch::run_user_side(round, &cfg)? {
                let n = load_all::<Trajectory>(&path)?.len();
                println!("{n} trajectories -> {}", path.display());
            }
        }
        Command::Extract { round, plot } => {
            first_round(round)?;
            let student = orch::load_student(&cfg, &layout.checkpoint(round - 1))?;
            let set = orch::run_extraction(round, &cfg, &student)?;
            for e in &set.entries {
                println!("seed {}: {} tokens", e.seed, e.token_count);
            }
            println!("knowledge -> {}", layout.knowledge_dir(round).display());
            if let Some(svg) = plot {
                let trajs: Vec<Trajectory> = load_all(&layout.trajectories(round, orch::Role::Extract, cfg.game))?;
                let ecfg = cfg.extraction_config();
                let n = ecfg.n.min(trajs.len());
                let steps: Vec<usize> = (1..=n).collect();
                let extractor: Box<dyn oel::policy::Policy> = match cfg.extraction.extractor {
                    oel::config::ExtractorKind::Scripted => {
                        Box::new(oel::knowledge::scripted::ScriptedExtractor::new())
                    }
                    oel::config::ExtractorKind::SelfModel => Box::new(student.frozen_copy()),
                };
                let curve =
                    accumulation_curve(&student, &trajs[..n], extractor.as_ref(), &ecfg, &cfg.eval_spec(), &steps)?;
                let series =
                    Series { label: "in-context".into(), points: curve.iter().map(|&(i, r)| (i as f64, r)).collect() };
                std::fs::write(
                    &svg,
                    line_chart("Pass rate vs accumulation step", "trajectories accumulated", "pass rate", &[series]),
                )?;
                println!("plot -> {}", svg.display());
            }
        }
        Command::Distill { round } => {
            first_round(round)?;
            let student = orch::load_student(&cfg, &layout.checkpoint(round - 1))?;
            let set = read_knowledge_set(&layout.knowledge_dir(round), round)?;
            let (ckpt, stats) = orch::run_consolidation(round, &cfg, &student, &set, mode(&cli.global))?;
            for s in &stats {
                println!("step {:>3}  kl {:.5}  tokens {:>5}  len {:.2}", s.step, s.mean_kl, s.tokens, s.mean_resp_len);
            }
            println!("checkpoint -> {}", ckpt.display());
        }
        Command::Loop { plot } => {
            orch::run_loop(&cfg, |m| {
                let ic = m.in_context_pass_rate.map(|x| format!("  in-context {}", pct(x))).unwrap_or_default();
                println!(
                    "round {}  pass rate {}{ic}  response tokens {:.2}",
                    m.round,
                    pct(m.pass_rate),
                    m.mean_response_tokens
                );
            })?;
            let curve = orch::pass_rate_curve(&cfg)?;
            println!("pass rate by round: {}", curve.iter().map(|&x| pct(x)).collect::<Vec<_>>().join(" -> "));
            if let Some(svg) = plot {
                let series = Series {
                    label: "consolidated".into(),
                    points: curve.iter().enumerate().map(|(i, &r)| (i as f64, r)).collect(),
                };
                std::fs::write(&svg, line_chart("Held-out pass rate by round", "round", "pass rate", &[series]))?;
                println!("plot -> {}", svg.display());
            }
        }
        Command::Eval { checkpoint, knowledge } => {
            let policy = orch::load_student(&cfg, &checkpoint)?;
            let set = match &knowledge {
                Some(dir) => Some(read_dir_knowledge(dir)?),
                None => None,
            };
            let report = eval_pass_rate(&policy, set.as_ref().map(|s| s.entries.as_slice()), &cfg.eval_spec());
            println!(
                "pass rate {} ({}/{})  response tokens {:.2}",
                pct(report.pass_rate),
                report.wins,
                report.episodes,
                report.mean_response_tokens
            );
            println!("{}", serde_json::to_string(&report.per_seed)?);
        }
        Command::Ablate { kind, out } => {
            let kind = match kind {
                AblationArg::RawVsKnowledge => AblationKind::RawVsKnowledge,
                AblationArg::SelfVsOther => AblationKind::SelfVsOther,
                AblationArg::OnVsOffPolicy => AblationKind::OnVsOffPolicy,
            };
            let table = run_ablation(kind, &cfg)?;
            print!("{}", table.to_markdown());
            if let Some(path) = out {
                std::fs::write(&path, table.to_csv())?;
            }
        }
        Command::Pretrain { out } => {
            let model = orch::base_model(&cfg)?;
            let path = out.unwrap_or_else(|| pretrain::cache_path(&cfg.toy.cache_dir, &cfg.pretrain_config()));
            model.save(&path)?;
            println!("base model -> {}", path.display());
        }
    }
    Ok(())
}

/// Reads every `{seed}.json` entry from a knowledge directory.
fn read_dir_knowledge(dir: &Path) -> Result<oel::knowledge::KnowledgeSet> {
    let round = dir
        .parent()
        .and_then(Path::parent)
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    Ok(read_knowledge_set(dir, round)?)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("OEL_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
