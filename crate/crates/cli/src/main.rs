use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use transducer_core::decoder::write_hypotheses;
use transducer_core::lm::NgramModel;
use transducer_core::model::Model;
use transducer_core::pipeline::{self, Config, PipelineError, Stage};

/// Three-stage monotonic transducer training on a synthetic transduction task.
#[derive(Parser)]
#[command(name = "transducer", version)]
struct Cli {
    /// Config file (`#transducer-config v1` header, `key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda1=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its n-gram LMs.
    GenData,
    /// Train the CTC model used for alignment.
    TrainCtc,
    /// Write CTC Viterbi alignments for train and dev.
    Align,
    /// Train one stage (ctc, stage1, stage2, stage3).
    Train {
        #[arg(long)]
        stage: String,
    },
    /// Build static N-best stores from the stage-2 model.
    BuildNbest,
    /// Write ranked hypotheses for a split.
    Decode {
        #[command(flatten)]
        target: EvalTarget,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode a split and report WER with Sub/Del/Ins.
    Evaluate {
        #[command(flatten)]
        target: EvalTarget,
        /// Also write per-utterance results here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grid-search λ1 (and λ2) on a split.
    TuneScales {
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Finite-difference check of the three stage losses on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare full-sum, CTC, MBR and beam search against brute-force oracles.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the effective config.
    PrintConfig,
}

#[derive(Args)]
struct EvalTarget {
    /// Checkpoint file; defaults to the one written by `--stage`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "stage2")]
    stage: String,
    #[arg(long, default_value = "dev")]
    split: String,
}

fn load_config(cli: &Cli) -> Result<Config, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn open_out(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn stdout_err(source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: PathBuf::from("<stdout>"), source }
}

struct Target {
    model: Model,
    lm: Option<NgramModel>,
    utts: Vec<transducer_core::dataio::Utterance>,
}

fn load_target(cfg: &Config, t: &EvalTarget) -> Result<Target, PipelineError> {
    let paths = cfg.paths();
    let stage: Stage = t.stage.parse()?;
    let ckpt = t.checkpoint.clone().unwrap_or_else(|| paths.checkpoint(stage.number()));
    let model = pipeline::load_model(&ckpt, None)?;
    let lm_path = paths.lm();
    let lm = if lm_path.exists() { Some(NgramModel::load(&lm_path)?) } else { None };
    let dir = paths.split(&t.split);
    if !dir.join("manifest.txt").exists() {
        return Err(PipelineError::Missing { artifact: "dataset split", path: dir.join("manifest.txt") });
    }
    let utts = transducer_core::dataio::read_split(&dir)?;
    Ok(Target { model, lm, utts })
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let [train, dev, test] = pipeline::gen_data(&cfg)?;
            println!("gen-data train={train} dev={dev} test={test}");
        }
        Command::TrainCtc => report_stage(&pipeline::run_stage(&cfg, Stage::Ctc)?),
        Command::Align => {
            let [train, dev] = pipeline::align(&cfg)?;
            println!("align train={train} dev={dev}");
        }
        Command::Train { stage } => report_stage(&pipeline::run_stage(&cfg, stage.parse()?)?),
        Command::BuildNbest => {
            let lambda1 = pipeline::build_nbest(&cfg)?;
            println!("build-nbest lambda1={lambda1}");
        }
        Command::Decode { target, output } => {
            let t = load_target(&cfg, target)?;
            let decoded = pipeline::decode_split(&t.model, t.lm.as_ref(), &t.utts, &cfg.decode_config())?;
            let mut w: Box<dyn Write> = match output {
                Some(p) => Box::new(open_out(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            for (id, hyps) in &decoded {
                write_hypotheses(&mut w, id, hyps).map_err(stdout_err)?;
            }
            w.flush().map_err(stdout_err)?;
        }
        Command::Evaluate { target, report } => {
            let t = load_target(&cfg, target)?;
            let r = pipeline::evaluate(&t.model, t.lm.as_ref(), &t.utts, &cfg.decode_config())?;
            println!("evaluate split={} {}", target.split, r.summary_line());
            if let Some(p) = report {
                let mut w = open_out(p)?;
                r.write(&mut w).and_then(|_| w.flush()).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
            }
        }
        Command::TuneScales { target } => {
            let t = load_target(&cfg, target)?;
            let res = pipeline::tune_scales(
                &t.model,
                t.lm.as_ref(),
                &t.utts,
                &cfg.tune_lambda1.0,
                &cfg.tune_lambda2.0,
                &cfg.decode_config(),
            )?;
            for (l1, l2, wer) in &res.table {
                println!("grid lambda1={l1} lambda2={l2} wer={wer:.2}");
            }
            println!("best {}", res.report.summary_line());
        }
        Command::Gradcheck { seed } => {
            let s = pipeline::run_gradcheck(*seed)?;
            for (name, r) in &s.losses {
                println!(
                    "gradcheck loss={name} params={} checked={} failures={} max_rel_error={:.3e} {}",
                    s.params,
                    r.checked,
                    r.failures,
                    r.max_rel_error,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            println!("gradcheck max_rel_error={:.3e} tol=1e-4 {}", s.max_rel_error(), if s.passed() { "PASS" } else { "FAIL" });
            if !s.passed() {
                return Err(PipelineError::CheckFailed("gradient check failed".into()));
            }
        }
        Command::OracleCheck { seed } => {
            let s = pipeline::run_oracle_check(*seed)?;
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            println!("oracle fullsum instances={} max_err={:.3e} {}", s.fullsum_instances, s.fullsum_max_err, verdict(s.fullsum_ok()));
            println!("oracle ctc instances={} max_err={:.3e} {}", s.ctc_instances, s.ctc_max_err, verdict(s.ctc_ok()));
            println!(
                "oracle mbr lists={} grad_sum={:.3e} shift={:.3e} bound_violations={} {}",
                s.mbr_lists,
                s.mbr_grad_sum_max,
                s.mbr_shift_max,
                s.mbr_bound_violations,
                verdict(s.mbr_ok())
            );
            println!("oracle decoder instances={} mismatches={} {}", s.decoder_instances, s.decoder_mismatches, verdict(s.decoder_ok()));
            if !s.passed() {
                return Err(PipelineError::CheckFailed("oracle check failed".into()));
            }
        }
        Command::PrintConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn report_stage(r: &pipeline::StageReport) {
    info!("{} done", r.stage);
    let last = r.metrics.last();
    println!(
        "train stage={} checkpoint={} epochs={} best_epoch={} initial_dev_loss={} final_dev_loss={}",
        r.stage,
        r.checkpoint.display(),
        r.metrics.len(),
        r.best_epoch,
        r.initial_dev_loss,
        last.map_or(r.initial_dev_loss, |m| m.dev_loss)
    );
    if !r.risk_trace.is_empty() {
        let trace: Vec<String> = r.risk_trace.iter().map(|x| x.to_string()).collect();
        println!("expected_risk {}", trace.join(" "));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::from(if matches!(e, PipelineError::Config(_)) { 2 } else { 1 })
        }
    }
}
