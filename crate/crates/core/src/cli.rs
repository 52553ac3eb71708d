//! Command-line front end.
//!
//! Every command reads the same config (file + `--set` overrides) and writes
//! its outputs under `--out`. Datasets come from `--data` (an embedding CSV
//! holding all splits) or are generated from the `[synth]` table.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::run_ablation;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{ingest_embeddings, synth_generate, write_embeddings, IdentityDataset, Split};
use crate::label_transfer::{
    log_joint_probs, sinkhorn, sinkhorn_log, transport_objective, uniform_polytope, validate_joint,
};
use crate::losses::LinearHead;
use crate::numerics::{read_matrix_csv, write_matrix_csv, Matrix};
use crate::trainer::{adapt, evaluate, pretrain_source, PretrainOutput};

#[derive(Debug, Parser)]
#[command(
    name = "otl",
    version,
    about = "Pseudo-label refinement by optimal transport for domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Embedding CSV with all splits; synthetic data when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and write `dataset.csv`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on the source split; writes `pretrained.ckpt`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Adapt to the target domain; writes `adapted.ckpt`, `metrics.jsonl`,
    /// `losses.jsonl` and `pseudo_labels.csv`.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Start from this pretrained checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print target metrics JSON for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One Sinkhorn solve on matrix CSVs; writes `q.csv` and `q.json`.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Joint probability matrix `P` (K x N, columns summing to 1/N).
        #[arg(long, conflicts_with_all = ["features", "prototypes"], required_unless_present = "features")]
        p: Option<PathBuf>,
        /// Feature matrix (N x D).
        #[arg(long, requires = "prototypes")]
        features: Option<PathBuf>,
        /// Prototype matrix (K x D).
        #[arg(long, requires = "features")]
        prototypes: Option<PathBuf>,
    },
    /// Run the ablation grid; writes `ablation.json` and `ablation.md`.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Pretrain { common, .. }
            | Command::Adapt { common, .. }
            | Command::Eval { common, .. }
            | Command::Refine { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

#[derive(Debug, Serialize)]
struct RefineSidecar {
    iters: usize,
    marginal_err: f64,
    objective: f64,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_data(cfg: &Config, data: &DataArg) -> anyhow::Result<(IdentityDataset, IdentityDataset)> {
    match &data.data {
        Some(path) => {
            let all = ingest_embeddings(path).with_context(|| format!("reading {}", path.display()))?;
            let source = all.subset(Split::Source);
            let target_idx: Vec<usize> = (0..all.len()).filter(|&i| all.splits[i] != Split::Source).collect();
            Ok((source, all.select(&target_idx)))
        }
        None => Ok(synth_generate(&cfg.synth)?),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(items: &[T]) -> anyhow::Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn head_to_csv(head: &LinearHead) -> String {
    let (c, d) = head.weights.shape();
    let mut m = Matrix::zeros(c, d + 1);
    for r in 0..c {
        m.row_mut(r)[..d].copy_from_slice(head.weights.row(r));
        m.row_mut(r)[d] = head.bias[r];
    }
    write_matrix_csv(&m)
}

fn head_from_csv(text: &str) -> anyhow::Result<LinearHead> {
    let m = read_matrix_csv(text)?;
    let (c, d1) = m.shape();
    if d1 < 2 {
        bail!("source head needs at least two columns");
    }
    let weights = m.select_cols(&(0..d1 - 1).collect::<Vec<_>>());
    let bias = m.column(d1 - 1);
    debug_assert_eq!(bias.len(), c);
    Ok(LinearHead { weights, bias })
}

fn head_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("head.csv")
}

fn execute(cmd: &Command) -> anyhow::Result<()> {
    let common = cmd.common();
    let cfg = Config::load(common.config.as_deref(), &common.overrides)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let out = |name: &str| common.out.join(name);
    write(&out("config.toml"), cfg.to_toml()?)?;

    match cmd {
        Command::Synth { .. } => {
            let (source, target) = synth_generate(&cfg.synth)?;
            write_embeddings(&source.concat(&target)?, &out("dataset.csv"))?;
        }
        Command::Pretrain { data, .. } => {
            let (source, _) = load_data(&cfg, data)?;
            let pre = pretrain_source(&source, &cfg.train)?;
            let path = out("pretrained.ckpt");
            Checkpoint {
                encoder: pre.encoder,
                groups: Vec::new(),
            }
            .save(&path)?;
            write(&head_path(&path), head_to_csv(&pre.head))?;
        }
        Command::Adapt { data, checkpoint, .. } => {
            let (source, target) = load_data(&cfg, data)?;
            let pre = match checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                    let head_text = fs::read_to_string(head_path(path))
                        .with_context(|| format!("reading source head next to {}", path.display()))?;
                    Some(PretrainOutput {
                        encoder: ck.encoder,
                        head: head_from_csv(&head_text)?,
                    })
                }
                None => None,
            };
            let (state, history) = adapt(&source, &target, &cfg.train, pre.as_ref())?;
            Checkpoint {
                encoder: state.encoder.clone(),
                groups: state.groups.clone(),
            }
            .save(&out("adapted.ckpt"))?;
            write(&out("metrics.jsonl"), jsonl(&history.epochs)?)?;
            write(&out("losses.jsonl"), jsonl(&history.losses)?)?;
            let mut labels = String::from("sample_index,group_index,label\n");
            for m in 0..state.assignments.len() {
                for (i, l) in state.hard_labels(m).iter().enumerate() {
                    let l = l.map_or(-1, |l| l as i64);
                    labels.push_str(&format!("{i},{m},{l}\n"));
                }
            }
            write(&out("pseudo_labels.csv"), labels)?;
        }
        Command::Eval { data, checkpoint, .. } => {
            let (_, target) = load_data(&cfg, data)?;
            let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let report = evaluate(&ck.encoder, &target, None, cfg.train.seed)?;
            let json = serde_json::to_string(&report)?;
            println!("{json}");
            write(&out("eval.json"), json + "\n")?;
        }
        Command::Refine {
            p,
            features,
            prototypes,
            ..
        } => {
            let read = |path: &Path| -> anyhow::Result<Matrix> {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                read_matrix_csv(&text).with_context(|| format!("parsing {}", path.display()))
            };
            let sk = &cfg.train.sinkhorn;
            let (res, p) = match (p, features, prototypes) {
                (Some(path), _, _) => {
                    let p = read(path)?;
                    validate_joint(&p).context("P must be a joint distribution with columns summing to 1/N")?;
                    (sinkhorn(&p, &uniform_polytope(p.rows(), p.cols()), sk)?, p)
                }
                (None, Some(f), Some(c)) => {
                    let log_p = log_joint_probs(&read(f)?, &read(c)?, cfg.train.tau)?;
                    let res = sinkhorn_log(&log_p, &uniform_polytope(log_p.rows(), log_p.cols()), sk)?;
                    (res, log_p.map(f64::exp))
                }
                _ => bail!("refine needs --p or both --features and --prototypes"),
            };
            if let Err(e) = res.check() {
                log::warn!("{e}");
            }
            write(&out("q.csv"), write_matrix_csv(&res.q))?;
            let sidecar = RefineSidecar {
                iters: res.iters,
                marginal_err: res.marginal_err,
                objective: transport_objective(&res.q, &p, sk.lambda),
            };
            write(&out("q.json"), serde_json::to_string(&sidecar)? + "\n")?;
        }
        Command::Ablate { .. } => {
            let report = run_ablation(&cfg)?;
            write(&out("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            let table = report.table();
            print!("{table}");
            write(&out("ablation.md"), table)?;
        }
    }
    Ok(())
}
