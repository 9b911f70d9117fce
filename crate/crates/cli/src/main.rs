use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use arkg_core::pipeline::{Outcome, Pipeline, PipelineConfig, Stage};
use arkg_core::synth::{World, WorldConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arkg", version, about = "Knowledge-graph aware aspect sentiment pipeline")]
struct Cli {
    /// Pipeline config (`key = value` lines); relative paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Records a deterministic run in the manifests.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the N-Triples KG and keep its largest connected component.
    Ingest,
    /// Louvain clustering of the KG.
    Cluster,
    /// Weighted graph between clusters.
    ClusterGraph,
    /// Unsupervised GraphSAGE over the cluster graph.
    EmbedClusters,
    /// Aspect subgraph, its embeddings and the two-level entity table.
    EmbedSubgraph,
    /// Text-only baseline and static heads.
    TrainStatic,
    /// Head and subgraph encoder trained end to end.
    TrainJoint,
    /// Disambiguation audit and retraining on the corrected table.
    Idd,
    /// Concept, subgraph and mode explanations of the final model.
    Explain,
    /// Test-set metrics for every model.
    Evaluate,
    /// Paper-style tables from the evaluation artifacts.
    Report,
    /// Every enabled stage in order, reusing up-to-date ones.
    Run {
        /// Rerun every stage even when its manifest still matches.
        #[arg(long)]
        fresh: bool,
    },
    /// Write a synthetic KG, dataset and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        communities: usize,
        #[arg(long, default_value_t = 66)]
        community_size: usize,
        #[arg(long, default_value_t = 40)]
        aspects_per_community: usize,
        #[arg(long, default_value_t = 0.0)]
        corrupted: f64,
        #[arg(long, default_value_t = 0.0)]
        unk: f64,
        #[arg(long, default_value_t = 0)]
        topic_words: usize,
        #[arg(long, default_value_t = 5)]
        filler_words: usize,
        #[arg(long, default_value_t = 0.3)]
        text_signal: f64,
    },
    /// Print the effective config.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

/// Config for a freshly synthesised directory, paths relative to it. The
/// learning rates and epochs are the toy-scale ones of the bundled fixture.
fn synth_config(seed: u64) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig {
        seed,
        ..Default::default()
    };
    for (k, v) in [
        ("paths.kg", "kg.nt"),
        ("paths.train", "train.jsonl"),
        ("paths.test", "test.jsonl"),
        ("paths.entity_map", "entity_map.tsv"),
        ("paths.categories", "categories.tsv"),
        ("paths.out", "out"),
        ("text.dim", "128"),
        ("sage.lr", "0.001"),
        ("sage.epochs", "5"),
        ("alsc.lr", "0.01"),
        ("alsc.epochs", "20"),
    ] {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Ingest => Stage::Ingest,
        Command::Cluster => Stage::Cluster,
        Command::ClusterGraph => Stage::ClusterGraph,
        Command::EmbedClusters => Stage::EmbedClusters,
        Command::EmbedSubgraph => Stage::EmbedSubgraph,
        Command::TrainStatic => Stage::TrainStatic,
        Command::TrainJoint => Stage::TrainJoint,
        Command::Idd => Stage::Idd,
        Command::Explain => Stage::Explain,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        out,
        communities,
        community_size,
        aspects_per_community,
        corrupted,
        unk,
        topic_words,
        filler_words,
        text_signal,
    } = &cli.command
    {
        let wc = WorldConfig {
            communities: *communities,
            community_size: *community_size,
            aspects_per_community: *aspects_per_community,
            corrupted: *corrupted,
            unk: *unk,
            topic_words: *topic_words,
            filler_words: *filler_words,
            text_signal: *text_signal,
            seed: cli.seed.unwrap_or(0),
            ..WorldConfig::default()
        };
        let world = World::generate(&wc)?;
        world.write_dir(out)?;
        let conf = out.join("pipeline.conf");
        std::fs::write(&conf, synth_config(wc.seed)?.to_text())
            .with_context(|| format!("writing {}", conf.display()))?;
        println!(
            "wrote {} nodes, {} train and {} test instances and pipeline.conf to {}",
            world.kg.node_count(),
            world.train.len(),
            world.test.len(),
            out.display()
        );
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg)?;
    match stage_of(&cli.command) {
        Some(stage) => {
            pipeline.run_stage(stage)?;
            println!("{stage}: done");
            if stage == Stage::Report {
                let p = pipeline.out_dir().join("report/report.txt");
                print!(
                    "{}",
                    std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?
                );
            }
        }
        None => {
            let Command::Run { fresh } = cli.command else {
                unreachable!("handled above")
            };
            for (stage, outcome) in pipeline.run(!fresh)? {
                let what = match outcome {
                    Outcome::Ran => "ran",
                    Outcome::Reused => "up to date",
                    Outcome::Disabled => "disabled",
                };
                println!("{stage}: {what}");
            }
            println!("artifacts in {}", pipeline.out_dir().display());
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
            ExitCode::FAILURE
        }
    }
}
