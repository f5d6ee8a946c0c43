use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ovd_distill::alignment::Stage;
use ovd_distill::checkpoint::Checkpoint;
use ovd_distill::error::{Error, Result};
use ovd_distill::eval::{read_csv, AblationRow, ABLATION_FILE, ATTENTION_FILE};
use ovd_distill::pipeline::{checkpoint_path, run_ablation_grid, summarize_ablation, RunManifest, Session, TrainConfig};
use ovd_distill::world::{generate_corpus, write_dataset, World};

/// Toy open-vocabulary detection with a distilling fusion teacher.
///
/// Any subcommand accepts `--key value` pairs that override the config
/// file, e.g. `--fusion.top_k 10 --seed 3`.
#[derive(Parser)]
#[command(name = "ovd-distill", version)]
struct Cli {
    /// TOML config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus into `data_dir`.
    GenerateData {
        #[arg(last = true)]
        overrides: Vec<String>,
    },
    /// Train one stage; stage 2 starts from the stage-1 checkpoint.
    Train {
        #[arg(long)]
        stage: String,
        /// Continue from this stage's last epoch-boundary checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(last = true)]
        overrides: Vec<String>,
    },
    /// Score a checkpoint and write plot data under `output_dir/eval`.
    Evaluate {
        #[arg(long)]
        stage: Option<String>,
        #[arg(last = true)]
        overrides: Vec<String>,
    },
    /// Run the ablation grid over the given seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(last = true)]
        overrides: Vec<String>,
    },
    /// Dump teacher attention rows for held-out captions.
    DiagnoseAttention {
        #[arg(long)]
        stage: Option<String>,
        #[arg(last = true)]
        overrides: Vec<String>,
    },
}

/// Flags clap itself understands, and whether each takes a value.
const KNOWN_FLAGS: &[(&str, bool)] = &[("config", true), ("stage", true), ("seeds", true), ("resume", false), ("help", false), ("version", false)];

/// Moves every unknown `--key value` pair behind a `--` separator so that
/// overrides and regular flags may be interleaved freely.
fn split_overrides(args: Vec<String>) -> Vec<String> {
    let mut front = Vec::new();
    let mut extra = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--" {
            extra.extend(it.by_ref());
            break;
        }
        let Some(body) = a.strip_prefix("--") else {
            front.push(a);
            continue;
        };
        let name = body.split_once('=').map_or(body, |(k, _)| k);
        match KNOWN_FLAGS.iter().find(|(k, _)| *k == name) {
            Some((_, takes_value)) => {
                let inline = body.contains('=');
                front.push(a);
                if *takes_value && !inline {
                    front.extend(it.next());
                }
            }
            None => {
                let inline = body.contains('=');
                extra.push(a);
                if !inline {
                    extra.extend(it.next());
                }
            }
        }
    }
    if !extra.is_empty() {
        front.push("--".into());
        front.extend(extra);
    }
    front
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(k) = it.next() {
        let key = k.strip_prefix("--").ok_or_else(|| Error::config(format!("expected --key, found {k:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| Error::config(format!("--{key} needs a value")))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&parse_overrides(overrides)?)?;
    Ok(cfg)
}

fn latest_checkpoint(dir: &Path, stage: Option<&str>) -> Result<Checkpoint> {
    let stages = match stage {
        Some(s) => vec![s.parse::<Stage>()?],
        None => vec![Stage::Stage2, Stage::Stage1, Stage::Baseline],
    };
    for s in stages {
        let p = checkpoint_path(dir, s);
        if p.exists() {
            return Checkpoint::load(&p);
        }
    }
    Err(Error::config(format!("no checkpoint in {}", dir.display())))
}

fn train(cfg: TrainConfig, stage: Stage, resume: bool) -> Result<()> {
    let session = Session::load(cfg)?;
    let dir = session.cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::load_or_new(&dir, &session.hash)?;
    let own = checkpoint_path(&dir, stage);
    let start = if resume && own.exists() {
        Some(Checkpoint::load(&own)?)
    } else if stage == Stage::Stage2 {
        let p = checkpoint_path(&dir, Stage::Stage1);
        Some(Checkpoint::load(&p).map_err(|e| Error::config(format!("stage 2 needs {}: {e}", p.display())))?)
    } else {
        None
    };
    let epochs = match stage {
        Stage::Baseline => session.cfg.baseline_epochs,
        Stage::Stage1 => session.cfg.stage1_epochs,
        Stage::Stage2 => session.cfg.stage2_epochs,
    };
    let log_file = fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
    let mut log = BufWriter::new(log_file);
    let mut save = |ck: &Checkpoint| ck.save(&own);
    let outcome = session.train_with_hook(stage, epochs, start.as_ref(), Some(&mut log), &mut save)?;
    log.flush()?;
    outcome.checkpoint.save(&own)?;
    manifest.stage = stage.to_string();
    manifest.epoch = outcome.checkpoint.epoch;
    manifest.history.extend(outcome.history);
    manifest.checkpoint = Some(own);
    manifest.save(&dir)?;
    eprintln!("trained stage {stage}: {} epochs total, {} steps", outcome.checkpoint.epoch, outcome.checkpoint.step);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::GenerateData { overrides } => {
            let cfg = load_config(cfg_path, &overrides)?;
            let world = World::new(cfg.world.clone(), cfg.grammar()?)?;
            let corpus = generate_corpus(&world, &cfg.corpus)?;
            write_dataset(&cfg.data_dir, &corpus)?;
            eprintln!(
                "wrote {} detection, {} caption, {} eval samples to {}",
                corpus.detection.len(),
                corpus.captions.len(),
                corpus.eval.len(),
                cfg.data_dir.display()
            );
        }
        Command::Train { stage, resume, overrides } => {
            let cfg = load_config(cfg_path, &overrides)?;
            train(cfg, stage.parse()?, resume)?;
        }
        Command::Evaluate { stage, overrides } => {
            let cfg = load_config(cfg_path, &overrides)?;
            let session = Session::load(cfg)?;
            let dir = session.cfg.output_dir.clone();
            let ck = latest_checkpoint(&dir, stage.as_deref())?;
            if ck.config_hash != session.hash {
                return Err(Error::config("checkpoint was trained with a different model config"));
            }
            let eval = session.evaluate(&ck.params)?;
            let ablation_path = dir.join(ABLATION_FILE);
            let ablation: Vec<AblationRow> = if ablation_path.exists() { read_csv(&ablation_path)? } else { Vec::new() };
            eval.write(&dir.join("eval"), &ablation)?;
            let mut manifest = RunManifest::load_or_new(&dir, &session.hash)?;
            manifest.evaluations.push(eval.report.clone());
            manifest.save(&dir)?;
            println!("{}", serde_json::to_string(&eval.report).expect("report serializes"));
        }
        Command::Ablate { seeds, overrides } => {
            let cfg = load_config(cfg_path, &overrides)?;
            cfg.validate()?;
            let corpus = ovd_distill::world::read_dataset(&cfg.data_dir)?;
            let rows = run_ablation_grid(&cfg, &corpus, &seeds)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let mut w = csv::Writer::from_path(cfg.output_dir.join(ABLATION_FILE)).map_err(|e| Error::config(e.to_string()))?;
            for r in &rows {
                w.serialize(r).map_err(|e| Error::config(e.to_string()))?;
            }
            w.flush()?;
            for (name, novel, base, all) in summarize_ablation(&rows) {
                println!("{}", serde_json::json!({"row": name, "novel": novel, "base": base, "all": all}));
            }
        }
        Command::DiagnoseAttention { stage, overrides } => {
            let cfg = load_config(cfg_path, &overrides)?;
            let session = Session::load(cfg)?;
            let dir = session.cfg.output_dir.clone();
            let ck = latest_checkpoint(&dir, stage.as_deref())?;
            let eval = session.evaluate(&ck.params)?;
            let out = dir.join("diagnostics");
            fs::create_dir_all(&out)?;
            let mut w = csv::Writer::from_path(out.join(ATTENTION_FILE)).map_err(|e| Error::config(e.to_string()))?;
            for r in &eval.attention {
                w.serialize(r).map_err(|e| Error::config(e.to_string()))?;
            }
            w.flush()?;
            println!(
                "{}",
                serde_json::json!({
                    "rows": eval.attention.len(),
                    "attention_tv": eval.report.attention_tv,
                    "mlm_accuracy": eval.report.mlm_accuracy,
                    "path": out.join(ATTENTION_FILE),
                })
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Parse { .. } | Error::Image(_) => 4,
        Error::UnknownToken(_) | Error::EmptyCaption | Error::UnknownConcept(_) => 5,
        Error::DegenerateInput(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(split_overrides(std::env::args().collect()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
