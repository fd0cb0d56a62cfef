use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nid_core::datasets::SbmConfig;
use nid_core::io;
use nid_cli::commands::{self, GraphInput};
use nid_cli::config::{RunConfig, SEED_ENV};
use nid_cli::record::{error_record, Record};

#[derive(Parser)]
#[command(name = "nid", version, about = "Compact discrete node identifiers for graphs")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long = "L")]
    layers: Option<usize>,
    #[arg(long = "M")]
    levels: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        push("objective", self.objective.clone());
        push("encoder", self.encoder.clone());
        push("L", self.layers.map(|v| v.to_string()));
        push("M", self.levels.map(|v| v.to_string()));
        push("K", self.k.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        out
    }
}

#[derive(Subcommand)]
enum SynthKind {
    /// Stochastic block model with Gaussian class features.
    Sbm {
        #[arg(long, value_delimiter = ',', default_value = "100,100,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 16)]
        feat_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labeled collection of star and path graphs (0 = star).
    StarsPaths {
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic stand-in with Cora's size, classes and homophily.
    Citation {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph or graph collection.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Convert a LINQS `.content`/`.cites` pair to the text graph format.
    ImportLinqs {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder with per-layer residual quantization.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Directory of graphs with labels.txt, for graph-level training.
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Per-epoch log; defaults to the model path with `.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write IDs here.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Write the node IDs of a graph (or a directory of graphs).
    ExportIds {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Node classification from IDs alone.
    EvalNode {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Link prediction from IDs alone.
    EvalLink {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Graph classification from pooled IDs.
    EvalGraph {
        /// Directory written by export-ids for a graph collection.
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// k-means over one-hot IDs, scored against labels when present.
    Cluster {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Hamming nearest neighbors of a node.
    Retrieve {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        query: usize,
        /// Graph for the 1-hop edit distance comparison.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Number of random queries for the edit distance comparison.
        #[arg(long, default_value_t = 100)]
        ged_queries: usize,
    },
    /// Inference latency and storage of the ID path against the encoder.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
}

fn emit(records: impl IntoIterator<Item = Record>) {
    for r in records {
        println!("{r}");
    }
}

fn maybe_save_head(head: &nid_core::downstream::MlpHead, path: Option<&Path>, meta: &str) -> Result<()> {
    if let Some(p) = path {
        io::save_head(head, meta, p).with_context(|| format!("writing head {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Command::Train { flags, .. } = &cli.command {
        overrides.extend(flags.pairs());
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_ref(), &overrides, std::env::var(SEED_ENV).ok())?;
    eprintln!("{}", cfg.echo());

    match cli.command {
        Command::Synth { kind } => match kind {
            SynthKind::Sbm { sizes, p_in, p_out, feat_dim, out } => {
                let sbm = SbmConfig {
                    feat_dim,
                    ..SbmConfig::new(sizes, p_in, p_out, cfg.seed())
                };
                emit(commands::synth_sbm(&sbm, &out)?);
            }
            SynthKind::StarsPaths { count, nodes, out } => {
                emit(commands::synth_stars_paths(count, nodes, cfg.seed(), &out)?)
            }
            SynthKind::Citation { out } => emit(commands::synth_citation(cfg.seed(), &out)?),
        },
        Command::ImportLinqs { dir, name, out } => emit(commands::import_linqs(&dir, &name, &out)?),
        Command::Train { graph, graphs, model, log, ids, .. } => {
            cfg.train.validate()?;
            let input = GraphInput::load(&cfg, graph.as_deref(), graphs.as_deref())?;
            let out = commands::train(&cfg, &input)?;
            io::save_model(&out.trained.model, &out.manifest, &model)
                .with_context(|| format!("writing model {}", model.display()))?;
            let log_path = log.unwrap_or_else(|| model.with_extension("log"));
            std::fs::write(&log_path, commands::format_log(&out.trained.log))
                .with_context(|| format!("writing log {}", log_path.display()))?;
            let mut records = out.records;
            if let Some(ids) = ids {
                let tables = commands::export_ids(&out.trained.model, &out.manifest, &input)?;
                records.extend(commands::write_ids(&tables, &ids, matches!(input, GraphInput::Set(..)))?);
            }
            emit(records);
        }
        Command::ExportIds { model, graph, graphs, out } => {
            let (m, manifest) = io::load_model(&model).with_context(|| format!("reading model {}", model.display()))?;
            let input = GraphInput::load(&cfg, graph.as_deref(), graphs.as_deref())?;
            let tables = commands::export_ids(&m, &manifest, &input)?;
            emit(commands::write_ids(&tables, &out, matches!(input, GraphInput::Set(..)))?);
        }
        Command::EvalNode { ids, graph, head } => {
            let tbl = io::load_ids(&ids)?;
            let g = commands::read_graph(&cfg, &graph)?;
            let (h, rec) = commands::eval_node(&cfg, &tbl, &g)?;
            maybe_save_head(&h, head.as_deref(), "task=node")?;
            emit([rec]);
        }
        Command::EvalLink { ids, graph, head } => {
            let tbl = io::load_ids(&ids)?;
            let g = commands::read_graph(&cfg, &graph)?;
            let (h, rec) = commands::eval_link(&cfg, &tbl, &g)?;
            maybe_save_head(&h, head.as_deref(), "task=link")?;
            emit([rec]);
        }
        Command::EvalGraph { ids, graphs, head } => {
            let (_, labels) = commands::load_graph_set(&graphs)?;
            let tables = commands::load_id_set(&ids, labels.len())?;
            let (h, rec) = commands::eval_graph(&cfg, &tables, &labels)?;
            maybe_save_head(&h, head.as_deref(), "task=graph")?;
            emit([rec]);
        }
        Command::Cluster { ids, graph } => {
            let tbl = io::load_ids(&ids)?;
            let g = graph.map(|p| commands::read_graph(&cfg, &p)).transpose()?;
            emit([commands::cluster(&cfg, &tbl, g.as_ref())?]);
        }
        Command::Retrieve { ids, query, graph, ged_queries } => {
            let tbl = io::load_ids(&ids)?;
            emit(commands::retrieve(&cfg, &tbl, query)?);
            if let Some(p) = graph {
                let g = commands::read_graph(&cfg, &p)?;
                emit([commands::ged_analysis(&cfg, &tbl, &g, ged_queries)?]);
            }
        }
        Command::Bench { model, ids, head, graph } => {
            let (m, _) = io::load_model(&model)?;
            let tbl = io::load_ids(&ids)?;
            let (h, meta) = io::load_head(&head)?;
            if !meta.lines().any(|l| l == "task=node") {
                bail!("bench needs a node-classification head");
            }
            let g = commands::read_graph(&cfg, &graph)?;
            emit([commands::bench(&cfg, &m, &tbl, &h, &g)?]);
        }
    }
    Ok(())
}

fn error_code(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<nid_core::Error>())
        .map_or("error", nid_core::Error::kind)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            println!("{}", error_record("usage", &anyhow::anyhow!(first.to_string())));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", error_record(error_code(&e), &e));
            ExitCode::FAILURE
        }
    }
}
