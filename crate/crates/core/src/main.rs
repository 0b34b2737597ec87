use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use styleswap::arrays::{self, DType};
use styleswap::config::RunConfig;
use styleswap::corpus::{generate_corpus, load_corpus, sha256_hex, write_corpus, Corpus};
use styleswap::evaluation::{
    control_svg, curves_csv, eval_ablation, eval_control_response, eval_cross_combination, held_out_texts,
    EvalReport, SpeakerProbe, StyleClassifier,
};
use styleswap::model::Model;
use styleswap::synthesis::{synthesize, ScaleSpec, SynthesisRequest};
use styleswap::training::{checkpoint_path, latest_checkpoint, prepare_items, Checkpoint, MetricsRecord, Trainer};
use styleswap::vocoder::write_wav;
use styleswap::{Error, Result};

#[derive(Parser)]
#[command(name = "styleswap", version, about = "Cross-speaker style transfer on a synthetic corpus")]
struct Cli {
    /// Base directory for relative output paths.
    #[arg(long, env = "STYLESWAP_RUN_ROOT", global = true)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, or continue one with `--resume`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; defaults to the one recorded by a resumed run.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume")]
        out: Option<PathBuf>,
        /// Run directory to continue from its latest checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize one utterance.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or run directory (latest checkpoint).
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated phoneme ids.
        #[arg(long, value_delimiter = ',', required = true)]
        phonemes: Vec<usize>,
        #[arg(long)]
        speaker: usize,
        #[arg(long)]
        style: usize,
        #[arg(long, default_value_t = 1.0)]
        pitch_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        energy_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        duration_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Objective evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Checkpoint file or run directory; required for cross and control.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus directory; regenerated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Cross,
    Ablation,
    Control,
}

/// Identity of whatever was written into a run directory.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    command: String,
    fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corpus: Option<PathBuf>,
}

const RUN_FILE: &str = "run.json";

fn resolve(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("{seed_key}={s}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Claim `dir` for a run. A non-empty directory must carry the same
/// fingerprint; nothing of another run is overwritten.
fn claim_dir(dir: &Path, command: &str, fingerprint: &str, corpus: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record_path = dir.join(RUN_FILE);
    if record_path.exists() {
        let rec = read_record(dir)?;
        if rec.command != command || rec.fingerprint != fingerprint {
            return Err(Error::Compatibility(format!(
                "{} holds a `{}` run with fingerprint {}; refusing to write a run with fingerprint {fingerprint}",
                dir.display(),
                rec.command,
                rec.fingerprint
            )));
        }
        return Ok(());
    }
    let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if non_empty {
        return Err(Error::Compatibility(format!(
            "{} is not empty and has no {RUN_FILE}",
            dir.display()
        )));
    }
    let rec = RunRecord {
        command: command.into(),
        fingerprint: fingerprint.into(),
        corpus: corpus.map(Path::to_path_buf),
    };
    write_file(&record_path, &serde_json::to_vec_pretty(&rec)?)
}

fn read_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RUN_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| Error::input(format!("no checkpoint in {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    info!(checkpoint = %file.display(), "loading");
    Checkpoint::load(&file)
}

fn corpus_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus> {
    let corpus = match dir {
        Some(d) => load_corpus(d)?,
        None => generate_corpus(&cfg.corpus)?,
    };
    if corpus.spec != cfg.corpus {
        return Err(Error::Compatibility(
            "corpus on disk was generated with a different [corpus] section".into(),
        ));
    }
    Ok(corpus)
}

fn gen_corpus(root: &Option<PathBuf>, common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common, "corpus.seed")?;
    let out = resolve(root, out);
    claim_dir(&out, "gen-corpus", &cfg.corpus.fingerprint(), None)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&corpus, &out)?;
    info!(utterances = corpus.utterances.len(), out = %out.display(), "corpus written");
    Ok(())
}

/// Fingerprint of a training run; the step budget may change on resume.
fn train_fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut t = cfg.train.clone();
    t.max_steps = 0;
    t.checkpoint_every = 0;
    let key = serde_json::json!({
        "model": cfg.model_spec()?.fingerprint(),
        "seed": cfg.seed,
        "train": t,
    });
    Ok(sha256_hex(&serde_json::to_vec(&key)?))
}

fn train_cmd(
    root: &Option<PathBuf>,
    common: &Common,
    corpus: Option<&Path>,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common, "seed")?;
    let fingerprint = train_fingerprint(&cfg)?;
    let out = resolve(root, resume.or(out).expect("clap requires one of them"));
    let corpus_dir = match (corpus, resume) {
        (Some(c), _) => resolve(root, c),
        (None, Some(_)) => read_record(&out)?
            .corpus
            .ok_or_else(|| Error::input("resumed run does not record its corpus; pass --corpus"))?,
        (None, None) => return Err(Error::input("--corpus is required")),
    };
    let existing = latest_checkpoint(&out)?;
    if resume.is_none() && existing.is_some() {
        return Err(Error::input(format!(
            "{} already holds checkpoints; use --resume to continue",
            out.display()
        )));
    }
    claim_dir(&out, "train", &fingerprint, Some(&corpus_dir))?;
    let corpus = corpus_for(&cfg, Some(&corpus_dir))?;
    let spec = cfg.model_spec()?;
    let mut trainer = match existing {
        Some(path) if resume.is_some() => {
            let ckpt = Checkpoint::load(&path)?;
            ckpt.to_model_for(&spec)?;
            info!(step = ckpt.header.step, "resuming");
            Trainer::resume(&ckpt, &cfg.train, cfg.seed)?
        }
        _ => Trainer::new(Model::new(&spec, corpus.stats.clone(), cfg.seed)?, &cfg.train, cfg.seed)?,
    };
    let metrics_path = out.join("metrics.jsonl");
    // records past the resumed step belong to an interrupted tail
    let mut metrics: String = match fs::read_to_string(&metrics_path) {
        Ok(text) => text
            .lines()
            .filter(|l| {
                serde_json::from_str::<MetricsRecord>(l).is_ok_and(|r| r.step <= trainer.step)
            })
            .map(|l| format!("{l}\n"))
            .collect(),
        Err(_) => String::new(),
    };
    write_file(&metrics_path, metrics.as_bytes())?;
    let mut items = prepare_items(&corpus, &trainer.model);
    if cfg.train.max_utterances > 0 {
        items.truncate(cfg.train.max_utterances);
    }
    let every = cfg.train.checkpoint_every;
    let max_steps = cfg.train.max_steps;
    trainer.run(&items, |t, rec| {
        metrics.push_str(&serde_json::to_string(rec)?);
        metrics.push('\n');
        if rec.step % 100 == 0 || rec.step == 1 {
            info!(step = rec.step, loss = rec.loss.total, lr = rec.lr, "train");
        }
        if (every > 0 && rec.step % every == 0) || rec.step == max_steps {
            write_file(&metrics_path, metrics.as_bytes())?;
            t.checkpoint().save(&checkpoint_path(&out, rec.step))?;
        }
        Ok(())
    })?;
    write_file(&metrics_path, metrics.as_bytes())?;
    if latest_checkpoint(&out)? != Some(checkpoint_path(&out, trainer.step)) {
        trainer.checkpoint().save(&checkpoint_path(&out, trainer.step))?;
    }
    info!(step = trainer.step, out = %out.display(), "training finished");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth_cmd(
    root: &Option<PathBuf>,
    common: &Common,
    ckpt: &Path,
    phonemes: &[usize],
    speaker: usize,
    style: usize,
    scales: ScaleSpec,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common, "seed")?;
    let model = open_checkpoint(&resolve(root, ckpt))?.to_model()?;
    scales.validate()?;
    for w in scales.warnings() {
        warn!("{w}");
    }
    let request = SynthesisRequest {
        phonemes: phonemes.to_vec(),
        speaker_id: speaker,
        style_id: style,
        scales,
        seed: cfg.seed,
    };
    let out = resolve(root, out);
    let fingerprint = sha256_hex(&serde_json::to_vec(&serde_json::json!({
        "model": model.fingerprint(),
        "params": model.store.fingerprint(),
        "request": request,
    }))?);
    claim_dir(&out, "synth", &fingerprint, None)?;
    let (output, wav) = synthesize(&model, &request)?;
    if output.reached_cap {
        warn!("decoder reached max_decoder_steps without stopping");
    }
    write_wav(&out.join("audio.wav"), &wav)?;
    arrays::write(&out.join("mel.arr"), &output.mel_after, DType::F32)?;
    arrays::write(&out.join("prosody_used.arr"), output.prosody_used.as_tensor(), DType::F64)?;
    arrays::write(
        &out.join("prosody_predicted.arr"),
        output.prosody_predicted.as_tensor(),
        DType::F64,
    )?;
    arrays::write(&out.join("alignment.arr"), &output.alignments, DType::F32)?;
    write_file(&out.join("request.json"), &serde_json::to_vec_pretty(&request)?)?;
    info!(frames = output.mel_after.rows(), out = %out.display(), "synthesized");
    Ok(())
}

fn eval_cmd(
    root: &Option<PathBuf>,
    common: &Common,
    mode: Mode,
    ckpt: Option<&Path>,
    corpus_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common, "seed")?;
    let out = resolve(root, out);
    let corpus_dir = corpus_dir.map(|c| resolve(root, c));
    let corpus = corpus_for(&cfg, corpus_dir.as_deref())?;
    let texts = held_out_texts(&corpus, cfg.eval.texts_per_cell);
    let model = match ckpt {
        Some(p) => Some(open_checkpoint(&resolve(root, p))?.to_model()?),
        None if mode == Mode::Ablation => None,
        None => return Err(Error::input("--ckpt is required for this mode")),
    };
    let fingerprint = sha256_hex(&serde_json::to_vec(&serde_json::json!({
        "config": cfg.fingerprint(),
        "model": model.as_ref().map(|m| (m.fingerprint(), m.store.fingerprint())),
    }))?);
    claim_dir(&out, "eval", &fingerprint, corpus_dir.as_deref())?;
    let report_path = out.join("report.json");
    let mut report: EvalReport = match fs::read(&report_path) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => EvalReport::default(),
    };
    report.fingerprint = fingerprint;
    match mode {
        Mode::Cross => {
            let model = model.expect("checked above");
            let clf = StyleClassifier::fit_corpus(&corpus)?;
            let probe = SpeakerProbe::new(&corpus.timbres);
            let r = eval_cross_combination(&model, &clf, &probe, &texts, cfg.eval.seed, |_| {})?;
            info!(
                off_diagonal_style = r.off_diagonal_style_accuracy,
                off_diagonal_speaker = r.off_diagonal_speaker_accuracy,
                "cross-combination"
            );
            report.cross = Some(r);
        }
        Mode::Control => {
            let model = model.expect("checked above");
            let points = eval_control_response(&model, &corpus.timbres, &texts, &cfg.eval, |_, _, _| {})?;
            write_file(&out.join("curves.csv"), curves_csv(&points).as_bytes())?;
            for f in ["pitch", "duration", "energy"] {
                write_file(&out.join(format!("control_{f}.svg")), control_svg(&points, f).as_bytes())?;
            }
            report.control = Some(points);
        }
        Mode::Ablation => {
            let spec = cfg.model_spec()?;
            let rows = eval_ablation(
                &corpus,
                &spec,
                &cfg.train,
                cfg.seed,
                &cfg.eval.ablation_variants,
                &texts,
                cfg.eval.seed,
                |name| {
                    let path = out.join("ablation").join(name).join(checkpoint_path(Path::new(""), cfg.train.max_steps));
                    let m = Checkpoint::load(&path).ok()?.to_model().ok()?;
                    info!(variant = name, "reusing trained variant");
                    Some(m)
                },
                |name, trainer| {
                    let dir = out.join("ablation").join(name);
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    trainer.checkpoint().save(&checkpoint_path(&dir, trainer.step))?;
                    info!(variant = name, "trained");
                    Ok(())
                },
                |name, o| {
                    if o.reached_cap {
                        warn!(variant = name, "decoder hit max_decoder_steps");
                    }
                },
            )?;
            report.ablation = Some(rows);
        }
    }
    write_file(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    info!(report = %report_path.display(), "evaluation written");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::GenCorpus { common, out } => gen_corpus(&root, &common, &out),
        Command::Train {
            common,
            corpus,
            out,
            resume,
        } => train_cmd(&root, &common, corpus.as_deref(), out.as_deref(), resume.as_deref()),
        Command::Synth {
            common,
            ckpt,
            phonemes,
            speaker,
            style,
            pitch_scale,
            energy_scale,
            duration_scale,
            out,
        } => synth_cmd(
            &root,
            &common,
            &ckpt,
            &phonemes,
            speaker,
            style,
            ScaleSpec {
                pitch_scale,
                energy_scale,
                duration_scale,
            },
            &out,
        ),
        Command::Eval {
            common,
            mode,
            ckpt,
            corpus,
            out,
        } => eval_cmd(&root, &common, mode, ckpt.as_deref(), corpus.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
