use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gazby::encoder::EncoderConfig;
use gazby::gaze::GazeConfig;
use gazby::harness::{
    gradient_suite, run_evaluate, run_rerank, run_train_gaze, run_train_ranker, RunConfig, SynthConfig,
    SyntheticCorpus, GRADCHECK_TOLERANCE,
};
use gazby::Error;

#[derive(Parser)]
#[command(name = "gazby", version, about = "Gaze-modulated passage re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scoring mode, e.g. last_layer or maxsim
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    gaze_checkpoint: Option<PathBuf>,
    #[arg(long)]
    ranker_checkpoint: Option<PathBuf>,
    /// Metric cutoff
    #[arg(long)]
    k: Option<usize>,
    /// exp or linear
    #[arg(long)]
    gain: Option<String>,
    /// Further overrides as key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the gaze model on the fixation corpus
    TrainGaze(Common),
    /// Train a ranker on query/positive/negative triples
    TrainRanker(Common),
    /// Re-rank candidate lists and write a run file
    Rerank(Common),
    /// Score a run file against qrels
    Evaluate(Common),
    /// Compare analytic and finite-difference gradients
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the seeded synthetic corpus and a config pointing at it
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(c: &Common) -> gazby::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            cfg
        }
    };
    if let Some(m) = &c.mode {
        cfg.mode = m.clone();
    }
    if let Some(p) = &c.gaze_checkpoint {
        cfg.gaze_checkpoint = Some(p.clone());
    }
    if let Some(p) = &c.ranker_checkpoint {
        cfg.ranker_checkpoint = Some(p.clone());
    }
    if let Some(k) = c.k {
        cfg.k = k;
    }
    if let Some(g) = &c.gain {
        cfg.gain = g.parse()?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn synth(out: &Path, seed: u64) -> gazby::Result<()> {
    let corpus = SyntheticCorpus::generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    // Desk-sized model so the synthetic pipeline trains in minutes.
    let mut base = RunConfig {
        seed,
        encoder: EncoderConfig {
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            max_len: 64,
            attn_dropout: 0.0,
        },
        gaze: GazeConfig::desk(),
        max_len: 64,
        m_d: 24,
        ..RunConfig::default()
    };
    base.train.lr = 3e-3;
    base.train.batch_size = 16;
    base.gaze_train.stop_below = Some(0.005);
    corpus.write_to(out, &base)?;
    println!("wrote synthetic corpus to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> gazby::Result<ExitCode> {
    match cli.command {
        Command::TrainGaze(c) => {
            let r = run_train_gaze(&config(&c)?)?;
            println!("epochs {} steps {} mse {:.6}", r.epoch_loss.len(), r.steps, r.final_mse);
        }
        Command::TrainRanker(c) => {
            let r = run_train_ranker(&config(&c)?)?;
            let last = r.step_loss.last().copied().unwrap_or(f64::NAN);
            println!("steps {} final batch loss {last:.6}", r.steps);
        }
        Command::Rerank(c) => {
            let cfg = config(&c)?;
            let run = run_rerank(&cfg)?;
            let path = cfg.run.as_deref().unwrap_or(Path::new("-"));
            println!("ranked {} queries into {}", run.len(), path.display());
        }
        Command::Evaluate(c) => print!("{}", run_evaluate(&config(&c)?)?),
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for case in gradient_suite(seed)? {
                ok &= case.passed();
                println!(
                    "{} {:<42} max rel error {:.3e} over {} coordinates",
                    if case.passed() { "ok  " } else { "FAIL" },
                    case.name,
                    case.report.max_rel_error,
                    case.report.coords_checked
                );
            }
            if !ok {
                eprintln!("gradients disagree beyond {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth { out, seed } => synth(&out, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
