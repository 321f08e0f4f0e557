//! `tagcl`: generate planted graphs, train, evaluate, verify and sweep.
//!
//! Settings resolve in order: built-in defaults, `--config FILE`, each
//! `--set key=value`, `--seed`, then subcommand flags. Exit codes are 0 on
//! success, 1 for usage errors, 2 for validation failures and 3 for
//! numerical failures (including a failed `verify`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tagcl::config::RunConfig;
use tagcl::datagen::{generate_planted_tag, write_dataset};
use tagcl::eval::ProbeMode;
use tagcl::experiment::{
    eval_link_run, eval_node_run, link_report_text, probe_report_text, sweep, sweep_csv, train_run,
    Ablation, GraphSource, RunDir,
};
use tagcl::graph::TextAttributedGraph;
use tagcl::verify::{self, Suite, VerifyOptions};
use tagcl::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(
    name = "tagcl",
    version,
    about = "Hierarchical spectral contrastive learning on text-attributed graphs"
)]
struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-partition graph and its `.meta` sidecar.
    Gen(GenArgs),
    /// Train an encoder into a fresh run directory.
    Train {
        #[arg(long)]
        graph: PathBuf,
        /// none, tc, nc, sc, tnc, nsc or hfc.
        #[arg(long, default_value = "none")]
        ablate: String,
    },
    /// Evaluate a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// link or node.
        #[arg(long, default_value = "link")]
        task: String,
        /// transductive or inductive (node task only).
        #[arg(long, default_value = "transductive")]
        mode: String,
    },
    /// Run numerical self-checks.
    Verify {
        /// spectral, ppr, gradients, lemma1, metrics or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// HFC rates for the lemma1 suite, comma separated.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Train and evaluate once per (value, seed); writes sweep.csv.
    Sweep {
        /// Any config key, or `ablate`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Fixed graph; by default a planted graph is generated per seed.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    communities: Option<String>,
    #[arg(long)]
    p_in: Option<String>,
    #[arg(long)]
    p_out: Option<String>,
    #[arg(long)]
    tokens_per_node: Option<String>,
    #[arg(long)]
    vocab_per_community: Option<String>,
    #[arg(long)]
    shared_vocab_size: Option<String>,
    #[arg(long)]
    shared_fraction: Option<String>,
}

impl GenArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 8] {
        [
            ("nodes", &self.nodes),
            ("communities", &self.communities),
            ("p_in", &self.p_in),
            ("p_out", &self.p_out),
            ("tokens_per_node", &self.tokens_per_node),
            ("vocab_per_community", &self.vocab_per_community),
            ("shared_vocab_size", &self.shared_vocab_size),
            ("shared_fraction", &self.shared_fraction),
        ]
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Gen(args) = &cli.command {
        for (k, v) in args.overrides() {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| usage("this command needs --out"))
}

/// Runs the command; `Ok(false)` means a verification did not pass.
fn execute(cli: &Cli) -> Result<bool, Error> {
    let cfg = resolve(cli)?;
    let say = |s: &str| {
        if !cli.quiet {
            print!("{s}");
        }
    };
    match &cli.command {
        Command::Gen(_) => {
            let out = require_out(cli)?;
            let gen = cfg.gen_config();
            let g = generate_planted_tag(&gen)?;
            write_dataset(&g, &gen, out)?;
            say(&format!(
                "wrote {} ({} nodes, {} edges)\n",
                out.display(),
                g.node_count(),
                g.edge_count()
            ));
        }
        Command::Train { graph, ablate } => {
            let out = require_out(cli)?;
            let ablation = Ablation::parse(ablate)?;
            let s = train_run(graph, &cfg, ablation, out)?;
            let h = &s.outcome.history;
            say(&format!(
                "run={}\nablation={}\nepochs={}\nbest_epoch={}\nbest_val_p1={}\n",
                out.display(),
                ablation.name(),
                h.stopped_epoch,
                h.best_epoch,
                h.best_p1()
            ));
        }
        Command::Eval { run, task, mode } => {
            let dir = RunDir::new(run);
            let text = match task.as_str() {
                "link" => link_report_text(&eval_link_run(&dir)?),
                "node" => {
                    let mode = ProbeMode::parse(mode).ok_or_else(|| {
                        usage(format!(
                            "unknown --mode `{mode}`; expected transductive or inductive"
                        ))
                    })?;
                    probe_report_text(&eval_node_run(&dir, mode)?)
                }
                other => {
                    return Err(usage(format!(
                        "unknown --task `{other}`; expected link or node"
                    )))
                }
            };
            if let Some(out) = &cli.out {
                std::fs::write(out, &text)?;
            }
            say(&text);
        }
        Command::Verify { suite, alpha, k } => {
            let suite = Suite::parse(suite).ok_or_else(|| {
                usage(format!(
                    "unknown --suite `{suite}`; expected spectral, ppr, gradients, lemma1, metrics or all"
                ))
            })?;
            let mut opts = VerifyOptions {
                seed: cfg.seed,
                k: *k,
                ..VerifyOptions::default()
            };
            if !alpha.is_empty() {
                opts.alphas = alpha.clone();
            }
            let reports = verify::run(suite, &opts)?;
            let text = verify::report_text(&reports);
            if let Some(out) = &cli.out {
                std::fs::write(out, &text)?;
            }
            say(&text);
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::Sweep {
            param,
            values,
            seeds,
            graph,
        } => {
            let out = require_out(cli)?;
            if out.exists() && std::fs::read_dir(out)?.next().is_some() {
                return Err(usage(format!(
                    "output directory {} is not empty; use a fresh directory",
                    out.display()
                )));
            }
            let fixed = graph
                .as_deref()
                .map(TextAttributedGraph::load)
                .transpose()?;
            let source = fixed
                .as_ref()
                .map_or(GraphSource::Generated, GraphSource::Fixed);
            let rows = sweep(source, &cfg, param, values, *seeds, |r| {
                if !cli.quiet {
                    eprintln!(
                        "{}={} seed={} p_at_1={}",
                        r.param, r.value, r.seed, r.p_at_1
                    );
                }
            })?;
            let csv = sweep_csv(&rows);
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            std::fs::write(out.join("sweep.csv"), &csv)?;
            say(&csv);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(ErrorKind::Numerical.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
