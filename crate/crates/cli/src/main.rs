use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vidgate::checkpoint::{load_selection, load_video, save_selection, save_video};
use vidgate::config::ExperimentConfig;
use vidgate::cost::count_forward;
use vidgate::data::{generate, Dataset};
use vidgate::eval::{
    evaluate, read_summary, sweep_csv, sweep_gamma, write_dump, write_summary, EvalSummary,
};
use vidgate::gating::{build_policy, PolicyContext, RandomKeep};
use vidgate::selection::{build_selection_net, SelectionNet};
use vidgate::trainer::{finetune_with_random, pretrain_classifier, train_adaptive, write_metrics};
use vidgate::video_net::{build_toy_net, VideoNet};

/// Adaptive frame and temporal-convolution gating on synthetic video.
///
/// Settings are resolved in order: built-in defaults, then the TOML file
/// given by --config, then command-line flags. The resolved configuration is
/// written to <output-dir>/config.toml by every command that writes files.
#[derive(Parser)]
#[command(name = "vidgate", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `reward.gamma`
    #[arg(long, global = true)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier on full clips; writes classifier.ckpt
    Pretrain,
    /// Train the selection network, then fine-tune both networks jointly
    Train {
        /// Pretrained classifier; pretrains from scratch when omitted
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Evaluate a gating policy on the test split; writes summary_<policy>.json
    Eval {
        /// Registered policy name: upper, learned or random
        #[arg(long, default_value = "learned")]
        policy: String,
        #[arg(long)]
        classifier: PathBuf,
        /// Selection network, needed by the learned policy
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Eval summary whose mean usage the random policy should match
        #[arg(long)]
        r#match: Option<PathBuf>,
    },
    /// Train and evaluate one adaptive run per gamma; writes sweep.csv
    Sweep {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,1,3")]
        gammas: Vec<f64>,
    },
    /// Print the cost of one forward pass as JSON
    Flops {
        /// Frames kept
        #[arg(long)]
        frames: Option<usize>,
        /// Temporal stage gates, e.g. 1,0,1 (default: all on)
        #[arg(long, value_delimiter = ',')]
        v: Option<Vec<u8>>,
        /// Include the selection network's per-clip cost
        #[arg(long)]
        with_selection: bool,
    },
    /// Write per-clip decisions of the learned policy to dump.jsonl
    DumpPolicy {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        selection: PathBuf,
    },
    /// Reference policies; writes baseline_<kind>.json
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        classifier: PathBuf,
        /// Eval summary whose mean usage the random policies should match
        #[arg(long)]
        r#match: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Upper,
    Random,
    RandomFt,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.to_string_lossy().into_owned();
    }
    if let Some(g) = common.gamma {
        cfg.reward.gamma = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(dir)
}

fn load_classifier(path: &Path, cfg: &ExperimentConfig) -> Result<VideoNet> {
    load_video(path, Some(&cfg.net_spec()?)).with_context(|| format!("loading {}", path.display()))
}

fn load_selector(path: &Path, cfg: &ExperimentConfig) -> Result<SelectionNet> {
    load_selection(path, Some(&cfg.selection_spec()?))
        .with_context(|| format!("loading {}", path.display()))
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(generate(&cfg.dataset, cfg.seed)?)
}

fn target_usage(path: &Option<PathBuf>) -> Result<Option<(f64, f64)>> {
    path.as_ref()
        .map(|p| {
            let s = read_summary(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((s.mean_frames, s.mean_3d))
        })
        .transpose()
}

fn print_summary(s: &EvalSummary) {
    println!(
        "{}: accuracy {:.4}, mean FLOPs {:.0}, mean frames {:.3}, mean 3D stages {:.3}",
        s.policy, s.accuracy, s.mean_flops, s.mean_frames, s.mean_3d
    );
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Pretrain => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let mut f = build_toy_net(cfg.net_spec()?, cfg.seed)?;
            let metrics = pretrain_classifier(&mut f, &data.train, &cfg.train)?;
            write_metrics(&out.join("pretrain_metrics.jsonl"), &metrics)?;
            save_video(&out.join("classifier.ckpt"), &f)?;
            println!("wrote {}", out.join("classifier.ckpt").display());
        }
        Command::Train { classifier } => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let f = match classifier {
                Some(p) => load_classifier(&p, &cfg)?,
                None => {
                    let mut f = build_toy_net(cfg.net_spec()?, cfg.seed)?;
                    let m = pretrain_classifier(&mut f, &data.train, &cfg.train)?;
                    write_metrics(&out.join("pretrain_metrics.jsonl"), &m)?;
                    save_video(&out.join("classifier.ckpt"), &f)?;
                    f
                }
            };
            let sel = build_selection_net(cfg.selection_spec()?, cfg.seed)?;
            let run = train_adaptive(&f, sel, &data.train, &cfg.train, &cfg.reward)?;
            write_metrics(&out.join("metrics.jsonl"), &run.metrics)?;
            save_selection(&out.join("selection_stage1.ckpt"), &run.selection_stage1)?;
            save_selection(&out.join("selection.ckpt"), &run.selection)?;
            save_video(&out.join("classifier_joint.ckpt"), &run.classifier)?;
            println!(
                "wrote selection.ckpt and classifier_joint.ckpt to {}",
                out.display()
            );
        }
        Command::Eval {
            policy,
            classifier,
            selection,
            r#match,
        } => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let f = load_classifier(&classifier, &cfg)?;
            let ctx = PolicyContext {
                frames: cfg.dataset.frames,
                stages: f.num_temporal(),
                selection: selection.map(|p| load_selector(&p, &cfg)).transpose()?,
                target_usage: target_usage(&r#match)?,
                seed: cfg.seed,
            };
            let p = build_policy(&policy, ctx)?;
            let (summary, _) = evaluate(p.as_ref(), &f, &data.test, &cfg.reward)?;
            write_summary(&out.join(format!("summary_{policy}.json")), &summary)?;
            print_summary(&summary);
        }
        Command::Sweep { classifier, gammas } => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let f = load_classifier(&classifier, &cfg)?;
            let rows = sweep_gamma(
                &gammas,
                &f,
                &cfg.selection_spec()?,
                &data,
                &cfg.train,
                &cfg.reward,
            )?;
            let csv = sweep_csv(&rows);
            fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Flops {
            frames,
            v,
            with_selection,
        } => {
            let spec = cfg.net_spec()?;
            let k = spec.num_temporal();
            let v: Vec<bool> = match v {
                Some(bits) => bits.iter().map(|&b| b != 0).collect(),
                None => vec![true; k],
            };
            if v.len() != k {
                bail!("--v needs {k} gates, got {}", v.len());
            }
            let mut report = count_forward(&spec, frames.unwrap_or(cfg.dataset.frames), &v)?;
            if with_selection {
                report = report.with_selection(&cfg.selection_spec()?);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::DumpPolicy {
            classifier,
            selection,
        } => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let f = load_classifier(&classifier, &cfg)?;
            let ctx = PolicyContext {
                frames: cfg.dataset.frames,
                stages: f.num_temporal(),
                selection: Some(load_selector(&selection, &cfg)?),
                ..PolicyContext::default()
            };
            let p = build_policy("learned", ctx)?;
            let (_, records) = evaluate(p.as_ref(), &f, &data.test, &cfg.reward)?;
            write_dump(&out.join("dump.jsonl"), &records)?;
            println!(
                "wrote {} records to {}",
                records.len(),
                out.join("dump.jsonl").display()
            );
        }
        Command::Baseline {
            kind,
            classifier,
            r#match,
        } => {
            let out = prepare_output(&cfg)?;
            let data = dataset(&cfg)?;
            let mut f = load_classifier(&classifier, &cfg)?;
            let (frames, stages) = (cfg.dataset.frames, f.num_temporal());
            let usage =
                || target_usage(&r#match)?.context("random baselines need --match <eval summary>");
            let (name, summary) = match kind {
                BaselineKind::Upper => {
                    let p = build_policy(
                        "upper",
                        PolicyContext {
                            frames,
                            stages,
                            ..Default::default()
                        },
                    )?;
                    (
                        "upper",
                        evaluate(p.as_ref(), &f, &data.test, &cfg.reward)?.0,
                    )
                }
                BaselineKind::Random => {
                    let (tf, ts) = usage()?;
                    let p = RandomKeep::matching(frames, stages, tf, ts, cfg.seed)?;
                    ("random", evaluate(&p, &f, &data.test, &cfg.reward)?.0)
                }
                BaselineKind::RandomFt => {
                    let (tf, ts) = usage()?;
                    let p = RandomKeep::matching(frames, stages, tf, ts, cfg.seed)?;
                    let m = finetune_with_random(&mut f, &p, &data.train, &cfg.train)?;
                    write_metrics(&out.join("metrics_random_ft.jsonl"), &m)?;
                    save_video(&out.join("classifier_random_ft.ckpt"), &f)?;
                    let mut s = evaluate(&p, &f, &data.test, &cfg.reward)?.0;
                    s.policy = "random_ft".into();
                    ("random_ft", s)
                }
            };
            write_summary(&out.join(format!("baseline_{name}.json")), &summary)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
