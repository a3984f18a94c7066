//! Command-line surface: corpus generation, the two training stages,
//! evaluation, decoding, the ablation battery, and shrink analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stast::analysis::{
    evaluate_bleu, mean_bleu_by_variant, run_ablation, shrink_histogram, write_ablation_csv,
};
use stast::config::Settings;
use stast::data::{
    generate_corpus, load_manifest, write_corpus, AsrUtterance, SynthConfig,
    Utterance, Vocabulary,
};
use stast::decode::translate_speech;
use stast::error::{Error, Result};
use stast::loss::{AdaptationMode, LossWeights};
use stast::model::checkpoint::{load_model, load_train, save_model};
use stast::model::{Model, ModelConfig};
use stast::scalar::Scalar;
use stast::train::{average_checkpoints, pretrain_acoustic, train_joint, TrainPlan};

#[derive(Parser)]
#[command(name = "stast", version, about = "speech translation with shrunk acoustic states")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// UTF-8 `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Numeric precision: f32 (training) or f64 (bit-exact runs).
    #[arg(long, default_value = "f32")]
    precision: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (train/dev/test splits).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: CTC-only acoustic pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Training manifest (speech-transcription[-translation] rows).
        #[arg(long)]
        manifest: PathBuf,
        /// Extra ASR manifest folded into pretraining.
        #[arg(long)]
        asr_manifest: Option<PathBuf>,
    },
    /// Stage 2: joint multi-task training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Warm-start model (typically the pretraining output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume a joint run from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "sequence")]
        adaptation: String,
        /// Loss weights as `alpha,beta,gamma,eta`.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Corpus BLEU of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Print translations, one per input row.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Train and score every cumulative ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dev_manifest: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "17")]
        seeds: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Histogram of transcription length minus shrunk length.
    AnalyzeShrink {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        // gen-data is precision-independent (features are f32 on disk)
        Cmd::GenData { common } => gen_data(&common),
        Cmd::Pretrain { common, manifest, asr_manifest } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_pretrain::<f32>(&common, &manifest, asr_manifest.as_deref()),
                P::F64 => cmd_pretrain::<f64>(&common, &manifest, asr_manifest.as_deref()),
            })
        }
        Cmd::Train { common, manifest, checkpoint, resume, adaptation, weights } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_train::<f32>(&common, &manifest, checkpoint.as_deref(), resume.as_deref(), &adaptation, weights.as_deref()),
                P::F64 => cmd_train::<f64>(&common, &manifest, checkpoint.as_deref(), resume.as_deref(), &adaptation, weights.as_deref()),
            })
        }
        Cmd::Eval { common, manifest, checkpoint, beam } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_eval::<f32>(&common, &manifest, &checkpoint, beam),
                P::F64 => cmd_eval::<f64>(&common, &manifest, &checkpoint, beam),
            })
        }
        Cmd::Decode { common, manifest, checkpoint, beam } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_decode::<f32>(&common, &manifest, &checkpoint, beam),
                P::F64 => cmd_decode::<f64>(&common, &manifest, &checkpoint, beam),
            })
        }
        Cmd::Ablate { common, manifest, dev_manifest, seeds, beam } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_ablate::<f32>(&common, &manifest, &dev_manifest, &seeds, beam),
                P::F64 => cmd_ablate::<f64>(&common, &manifest, &dev_manifest, &seeds, beam),
            })
        }
        Cmd::AnalyzeShrink { common, manifest, checkpoint } => {
            dispatch(&common.precision.clone(), |p| match p {
                P::F32 => cmd_analyze::<f32>(&common, &manifest, &checkpoint),
                P::F64 => cmd_analyze::<f64>(&common, &manifest, &checkpoint),
            })
        }
    }
}

enum P {
    F32,
    F64,
}

fn dispatch(precision: &str, f: impl FnOnce(P) -> Result<()>) -> Result<()> {
    match precision {
        "f32" => f(P::F32),
        "f64" => f(P::F64),
        other => Err(Error::Config(format!("precision {other:?} (expected f32 or f64)"))),
    }
}

fn settings(common: &Common) -> Result<Settings> {
    match &common.config {
        Some(path) => Settings::load(path),
        None => Ok(Settings::default()),
    }
}

fn ensure_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out)
        .map_err(|e| Error::io(common.out.display().to_string(), e))
}

fn synth_config(s: &Settings, seed: u64) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        seed,
        vocab_size: s.get_or("vocab_size", d.vocab_size)?,
        d_feat: s.get_or("d_feat", d.d_feat)?,
        len_range: (s.get_or("min_len", d.len_range.0)?, s.get_or("max_len", d.len_range.1)?),
        frames_per_token: (
            s.get_or("min_frames_per_token", d.frames_per_token.0)?,
            s.get_or("max_frames_per_token", d.frames_per_token.1)?,
        ),
        noise_sigma: s.get_or("noise_sigma", d.noise_sigma)?,
        p_silence: s.get_or("p_silence", d.p_silence)?,
        silence_range: (
            s.get_or("min_silence", d.silence_range.0)?,
            s.get_or("max_silence", d.silence_range.1)?,
        ),
        corpus_size: s.get_or("corpus_size", d.corpus_size)?,
    })
}

fn model_config(s: &Settings, d_feat: usize, vocab_size: usize) -> Result<ModelConfig> {
    let d = ModelConfig::desk(d_feat, vocab_size);
    let cfg = ModelConfig {
        n_layers_acoustic: s.get_or("layers_acoustic", d.n_layers_acoustic)?,
        n_layers_semantic: s.get_or("layers_semantic", d.n_layers_semantic)?,
        n_layers_decoder: s.get_or("layers_decoder", d.n_layers_decoder)?,
        d_model: s.get_or("d_model", d.d_model)?,
        n_heads: s.get_or("n_heads", d.n_heads)?,
        d_ff: s.get_or("d_ff", d.d_ff)?,
        dropout: s.get_or("dropout", d.dropout)?,
        d_feat,
        vocab_size,
        use_semantic_encoder: s.get_or("use_semantic_encoder", true)?,
        use_shrink: s.get_or("use_shrink", true)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_plan(
    s: &Settings,
    seed: u64,
    weights: LossWeights,
    adaptation: AdaptationMode,
) -> Result<TrainPlan> {
    let d = TrainPlan::default();
    let plan = TrainPlan {
        pretrain_epochs: s.get_or("pretrain_epochs", d.pretrain_epochs)?,
        joint_epochs: s.get_or("joint_epochs", d.joint_epochs)?,
        weights,
        adaptation,
        warmup_steps: s.get_or("warmup_steps", d.warmup_steps)?,
        peak_lr: s.get_or("peak_lr", d.peak_lr)?,
        checkpoint_interval: s.get_or("checkpoint_interval", d.checkpoint_interval)?,
        average_last: s.get_or("average_last", d.average_last)?,
        seed,
        frame_budget: s.get_or("frame_budget", d.frame_budget)?,
    };
    plan.validate()?;
    Ok(plan)
}

fn parse_weights(raw: Option<&str>) -> Result<LossWeights> {
    let Some(raw) = raw else { return Ok(LossWeights::default()) };
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("--weights wants alpha,beta,gamma,eta, got {raw:?}")));
    }
    let mut vals = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--weights component {p:?} is not a number")))?;
    }
    let w = LossWeights { alpha: vals[0], beta: vals[1], gamma: vals[2], eta: vals[3] };
    w.validate()?;
    Ok(w)
}

/// Every run leaves a settings dump sufficient to reproduce it.
fn dump_config(common: &Common, extra: &[(&str, String)]) -> Result<()> {
    let mut s = settings(common)?;
    s.set("seed", common.seed);
    s.set("precision", &common.precision);
    for (k, v) in extra {
        s.set(k, v);
    }
    s.write(&common.out.join("config_dump.txt"))
}

fn load_st(manifest: &Path) -> Result<(Vec<Utterance>, Vocabulary)> {
    let vocab = Vocabulary::load(&manifest.parent().unwrap_or(Path::new(".")).join("vocab.txt"))?;
    let utts = load_manifest(manifest, &vocab)?.st()?;
    Ok((utts, vocab))
}

fn load_model_any<F: Scalar>(path: &Path) -> Result<Model<F>> {
    match load_model::<F>(path) {
        Ok(m) => Ok(m),
        Err(Error::Format(_)) => Ok(load_train::<F>(path)?.0),
        Err(e) => Err(e),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    ensure_out(common)?;
    let s = settings(common)?;
    let dev_size: usize = s.get_or("dev_size", 200)?;
    let test_size: usize = s.get_or("test_size", 200)?;
    let mut cfg = synth_config(&s, common.seed)?;
    let train_size = cfg.corpus_size;
    cfg.corpus_size = train_size + dev_size + test_size;
    let (corpus, vocab) = generate_corpus(&cfg)?;

    let splits = [
        ("train", &corpus[..train_size]),
        ("dev", &corpus[train_size..train_size + dev_size]),
        ("test", &corpus[train_size + dev_size..]),
    ];
    for (name, split) in splits {
        let dir = common.out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_corpus(split, &vocab, &dir)?;
    }
    dump_config(common, &[
        ("corpus_size", train_size.to_string()),
        ("dev_size", dev_size.to_string()),
        ("test_size", test_size.to_string()),
        ("vocab_size", cfg.vocab_size.to_string()),
        ("d_feat", cfg.d_feat.to_string()),
    ])?;
    println!("wrote {train_size}+{dev_size}+{test_size} utterances under {}", common.out.display());
    Ok(())
}

fn cmd_pretrain<F: Scalar>(common: &Common, manifest: &Path, asr: Option<&Path>) -> Result<()> {
    ensure_out(common)?;
    let s = settings(common)?;
    let (train, vocab) = load_st(manifest)?;
    let mut corpus: Vec<AsrUtterance> = train.iter().cloned().map(AsrUtterance::from).collect();
    if let Some(asr_path) = asr {
        corpus.extend(load_manifest(asr_path, &vocab)?.asr());
    }
    let d_feat = corpus.first().map(|u| u.speech.cols).ok_or_else(|| {
        Error::DegenerateBatch("pretraining corpus is empty".into())
    })?;
    let cfg = model_config(&s, d_feat, vocab.len())?;
    let plan = train_plan(&s, common.seed, LossWeights::default(), AdaptationMode::Off)?;
    let mut model: Model<F> = Model::new(cfg, common.seed)?;
    let log = pretrain_acoustic(&mut model, &corpus, &plan)?;
    let out_model = common.out.join("pretrained.stck");
    save_model(&out_model, &model)?;
    dump_config(common, &[("stage", "pretrain".into()), ("pretrain_epochs", plan.pretrain_epochs.to_string())])?;
    if let Some(last) = log.last() {
        println!("pretraining done: {} steps, final l_ctc {:.4}", log.len(), last.l_ctc);
    }
    println!("saved {}", out_model.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train<F: Scalar>(
    common: &Common,
    manifest: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    adaptation: &str,
    weights: Option<&str>,
) -> Result<()> {
    ensure_out(common)?;
    let s = settings(common)?;
    let (corpus, vocab) = load_st(manifest)?;
    let d_feat = corpus.first().map(|u| u.speech.cols).ok_or_else(|| {
        Error::DegenerateBatch("training corpus is empty".into())
    })?;
    let adaptation: AdaptationMode = adaptation.parse()?;
    let weights = parse_weights(weights)?;
    let plan = train_plan(&s, common.seed, weights, adaptation)?;

    let (mut model, log) = match resume {
        Some(ckpt) => stast::train::resume_joint::<F>(ckpt, &corpus, &plan, Some(&common.out))?,
        None => {
            let mut model: Model<F> = match init {
                Some(path) => load_model_any(path)?,
                None => Model::new(model_config(&s, d_feat, vocab.len())?, common.seed)?,
            };
            let log = train_joint(&mut model, &corpus, &plan, Some(&common.out))?;
            (model, log)
        }
    };

    // trailing-checkpoint average becomes the final model
    let k = plan.average_last.max(1);
    let tail = if log.checkpoints.len() > k {
        &log.checkpoints[log.checkpoints.len() - k..]
    } else {
        &log.checkpoints[..]
    };
    if !tail.is_empty() {
        let stores: Vec<_> = tail
            .iter()
            .map(|p| load_train::<F>(p).map(|(m, _)| m.params))
            .collect::<Result<_>>()?;
        model.params = average_checkpoints(&stores)?;
    }
    let out_model = common.out.join("model.stck");
    save_model(&out_model, &model)?;
    dump_config(common, &[
        ("stage", "train".into()),
        ("adaptation", adaptation.to_string()),
        ("weights", format!("{},{},{},{}", plan.weights.alpha, plan.weights.beta, plan.weights.gamma, plan.weights.eta)),
        ("joint_epochs", plan.joint_epochs.to_string()),
        ("averaged_checkpoints", tail.len().to_string()),
    ])?;
    println!(
        "joint training done: {} steps, final l_total {:.4}, averaged {} checkpoints",
        log.breakdowns.len(),
        log.breakdowns.last().map(|b| b.l_total).unwrap_or(f64::NAN),
        tail.len()
    );
    println!("saved {}", out_model.display());
    Ok(())
}

fn cmd_eval<F: Scalar>(common: &Common, manifest: &Path, checkpoint: &Path, beam: usize) -> Result<()> {
    ensure_out(common)?;
    let (corpus, _) = load_st(manifest)?;
    let model: Model<F> = load_model_any(checkpoint)?;
    let (report, degenerate) = evaluate_bleu(&model, &corpus, beam)?;
    let lines = [
        ("bleu", format!("{:.4}", report.bleu)),
        ("p1", format!("{:.6}", report.precisions[0])),
        ("p2", format!("{:.6}", report.precisions[1])),
        ("p3", format!("{:.6}", report.precisions[2])),
        ("p4", format!("{:.6}", report.precisions[3])),
        ("brevity_penalty", format!("{:.6}", report.brevity_penalty)),
        ("hyp_len", report.hyp_len.to_string()),
        ("ref_len", report.ref_len.to_string()),
        ("degenerate_shrinks", degenerate.to_string()),
        ("beam", beam.to_string()),
    ];
    let mut body = String::new();
    for (k, v) in &lines {
        body.push_str(&format!("{k}\t{v}\n"));
        println!("{k}\t{v}");
    }
    let path = common.out.join("bleu.txt");
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    dump_config(common, &[("stage", "eval".into()), ("beam", beam.to_string())])?;
    Ok(())
}

fn cmd_decode<F: Scalar>(common: &Common, manifest: &Path, checkpoint: &Path, beam: usize) -> Result<()> {
    ensure_out(common)?;
    let vocab = Vocabulary::load(&manifest.parent().unwrap_or(Path::new(".")).join("vocab.txt"))?;
    let utts = load_manifest(manifest, &vocab)?.asr();
    let model: Model<F> = load_model_any(checkpoint)?;
    let mut body = String::new();
    for u in &utts {
        let line = match translate_speech(&model, &u.speech, beam)? {
            Some(out) => vocab.ids_to_string(&out.tokens),
            None => String::new(),
        };
        println!("{}\t{line}", u.id);
        body.push_str(&format!("{}\t{line}\n", u.id));
    }
    let path = common.out.join("hypotheses.tsv");
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    dump_config(common, &[("stage", "decode".into()), ("beam", beam.to_string())])?;
    Ok(())
}

fn cmd_ablate<F: Scalar>(
    common: &Common,
    manifest: &Path,
    dev_manifest: &Path,
    seeds: &str,
    beam: usize,
) -> Result<()> {
    ensure_out(common)?;
    let s = settings(common)?;
    let (train, vocab) = load_st(manifest)?;
    let (dev, _) = load_st(dev_manifest)?;
    let d_feat = train.first().map(|u| u.speech.cols).ok_or_else(|| {
        Error::DegenerateBatch("ablation corpus is empty".into())
    })?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad seed {p:?}"))))
        .collect::<Result<_>>()?;
    let cfg = model_config(&s, d_feat, vocab.len())?;
    let plan = train_plan(&s, common.seed, LossWeights::default(), AdaptationMode::SequenceLevel)?;
    let results = run_ablation::<F>(&plan, &cfg, &train, &dev, &seeds, beam)?;
    write_ablation_csv(&results, &common.out.join("ablation.csv"))?;
    for (variant, bleu) in mean_bleu_by_variant(&results) {
        println!("{variant}\t{bleu:.4}");
    }
    dump_config(common, &[("stage", "ablate".into()), ("beam", beam.to_string())])?;
    Ok(())
}

fn cmd_analyze<F: Scalar>(common: &Common, manifest: &Path, checkpoint: &Path) -> Result<()> {
    ensure_out(common)?;
    let (corpus, _) = load_st(manifest)?;
    let model: Model<F> = load_model_any(checkpoint)?;
    let hist = shrink_histogram(&model, &corpus)?;
    hist.write_csv(&common.out.join("shrink_hist.csv"))?;
    println!("fraction_at_zero\t{:.4}", hist.fraction_at_zero());
    println!("fraction_within_2\t{:.4}", hist.fraction_within(2));
    dump_config(common, &[("stage", "analyze-shrink".into())])?;
    Ok(())
}
