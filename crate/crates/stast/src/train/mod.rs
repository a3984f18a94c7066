//! Two-stage training curriculum: CTC-only acoustic pretraining, then joint
//! multi-task training over the four objectives. Everything is driven by
//! statelessly derived RNG streams, so a run can be checkpointed and resumed
//! bit-exactly (in 64-bit precision).

mod adam;

pub use adam::{lr_at, Adam, CLIP_NORM};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::autodiff::{Tape, Tensor};
use crate::data::{make_batches, AsrUtterance, Batch, Utterance};
use crate::error::{Error, Result};
use crate::loss::{
    adaptation_loss, ctc_loss, teacher_forcing, translation_loss, utterance_total, AdaptationMode,
    LossBreakdown, LossWeights, UtteranceLosses,
};
use crate::model::checkpoint::{save_train, TrainState};
use crate::model::{Ctx, Model, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;

// RNG stream tags; both stages use the same derivation so that a joint run
// with β=γ=η=0 replays the pretraining trajectory exactly.
const STREAM_DROPOUT: u64 = 1;
const STREAM_BATCH: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub weights: LossWeights,
    pub adaptation: AdaptationMode,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub checkpoint_interval: u64,
    pub average_last: usize,
    pub seed: u64,
    pub frame_budget: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            pretrain_epochs: 10,
            joint_epochs: 30,
            weights: LossWeights::default(),
            adaptation: AdaptationMode::SequenceLevel,
            warmup_steps: 400,
            peak_lr: 1e-3,
            checkpoint_interval: 1000,
            average_last: 5,
            seed: 17,
            frame_budget: 800,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint interval must be at least 1".into()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup must be at least 1 step".into()));
        }
        if self.frame_budget < 1 {
            return Err(Error::Config("frame budget must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak learning rate {} not positive", self.peak_lr)));
        }
        Ok(())
    }

    /// FNV-1a over the debug rendering; stored in checkpoints so a resume
    /// under a different plan is caught.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in format!("{self:?}").bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

pub struct TrainLog {
    pub breakdowns: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

/// Stage 1: optimize α·L_CTC only. Pre-net, acoustic encoder, and the tied
/// projection move; semantic encoder and decoder gradients are never even
/// computed.
pub fn pretrain_acoustic<F: Scalar>(
    model: &mut Model<F>,
    corpus: &[AsrUtterance],
    plan: &TrainPlan,
) -> Result<Vec<LossBreakdown>> {
    if plan.pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    let utts: Vec<Utterance> = corpus
        .iter()
        .map(|u| Utterance {
            id: u.id.clone(),
            speech: u.speech.clone(),
            transcription: u.transcription.clone(),
            translation: Vec::new(),
        })
        .collect();
    let subset = model.acoustic_param_names();
    let weights = LossWeights { alpha: plan.weights.alpha, beta: 0.0, gamma: 0.0, eta: 0.0 };
    let mut adam = Adam::new();
    run_stage(StageArgs {
        model,
        adam: &mut adam,
        corpus: &utts,
        plan,
        epochs: plan.pretrain_epochs,
        weights: &weights,
        adaptation: AdaptationMode::Off,
        subset: Some(&subset),
        start_step: 0,
        out: None,
        checkpoints: &mut Vec::new(),
    })
}

/// Stage 2: joint multi-task training on (s, x, y) triplets.
pub fn train_joint<F: Scalar>(
    model: &mut Model<F>,
    corpus: &[Utterance],
    plan: &TrainPlan,
    out: Option<&Path>,
) -> Result<TrainLog> {
    let mut adam = Adam::new();
    joint_inner(model, &mut adam, corpus, plan, 0, out)
}

/// Continue a joint run from a saved training checkpoint. Replays the exact
/// remaining trajectory of the uninterrupted run.
pub fn resume_joint<F: Scalar>(
    ckpt: &Path,
    corpus: &[Utterance],
    plan: &TrainPlan,
    out: Option<&Path>,
) -> Result<(Model<F>, TrainLog)> {
    let (mut model, state) = crate::model::checkpoint::load_train::<F>(ckpt)?;
    if state.plan_hash != plan.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint was written under a different training plan (hash {:#x} vs {:#x})",
            state.plan_hash,
            plan.hash()
        )));
    }
    let mut adam = Adam::from_parts(state.adam_m, state.adam_v, state.step);
    let log = joint_inner(&mut model, &mut adam, corpus, plan, state.step, out)?;
    Ok((model, log))
}

fn joint_inner<F: Scalar>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    corpus: &[Utterance],
    plan: &TrainPlan,
    start_step: u64,
    out: Option<&Path>,
) -> Result<TrainLog> {
    let mut checkpoints = Vec::new();
    let breakdowns = run_stage(StageArgs {
        model,
        adam,
        corpus,
        plan,
        epochs: plan.joint_epochs,
        weights: &plan.weights.clone(),
        adaptation: plan.adaptation,
        subset: None,
        start_step,
        out,
        checkpoints: &mut checkpoints,
    })?;
    Ok(TrainLog { breakdowns, checkpoints })
}

struct StageArgs<'a, F: Scalar> {
    model: &'a mut Model<F>,
    adam: &'a mut Adam<F>,
    corpus: &'a [Utterance],
    plan: &'a TrainPlan,
    epochs: usize,
    weights: &'a LossWeights,
    adaptation: AdaptationMode,
    subset: Option<&'a [String]>,
    start_step: u64,
    out: Option<&'a Path>,
    checkpoints: &'a mut Vec<PathBuf>,
}

fn run_stage<F: Scalar>(args: StageArgs<F>) -> Result<Vec<LossBreakdown>> {
    let StageArgs { model, adam, corpus, plan, epochs, weights, adaptation, subset, start_step, out, checkpoints } =
        args;
    plan.validate()?;
    weights.validate()?;
    if corpus.is_empty() {
        return Err(Error::DegenerateBatch("empty training corpus".into()));
    }

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("metrics.csv");
            let file = if start_step == 0 {
                let mut f = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
                writeln!(f, "step,l_ctc,l_st,l_mt,l_ad,l_total,lr,wordlevel_fallbacks")
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                f
            } else {
                fs::OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?
            };
            Some((file, path))
        }
        None => None,
    };

    let mut step = 0u64;
    let mut log = Vec::new();
    let mut last_saved = None;
    for epoch in 0..epochs {
        let batch_seed = RngState::new(plan.seed).fork(STREAM_BATCH).fork(epoch as u64).next_u64();
        let batches = make_batches(corpus, plan.frame_budget, batch_seed)?;
        for batch in &batches {
            step += 1;
            if step <= start_step {
                continue;
            }
            let lr = lr_at(step, plan.warmup_steps, plan.peak_lr);
            let (grads, breakdown) = batch_step(model, batch, corpus, weights, adaptation, subset, plan, step)?;
            if !breakdown.l_total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step}: {breakdown:?}"
                )));
            }
            adam.step(&mut model.params, &grads, lr)?;
            if let Some((f, path)) = &mut metrics {
                writeln!(
                    f,
                    "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{lr:.8},{}",
                    breakdown.l_ctc,
                    breakdown.l_st,
                    breakdown.l_mt,
                    breakdown.l_ad,
                    breakdown.l_total,
                    breakdown.wordlevel_fallbacks
                )
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            log.push(breakdown);
            if let Some(dir) = out {
                if step % plan.checkpoint_interval == 0 {
                    checkpoints.push(save_at(dir, model, adam, plan, step)?);
                    last_saved = Some(step);
                }
            }
        }
    }
    if let Some(dir) = out {
        if last_saved != Some(step) && step > start_step {
            checkpoints.push(save_at(dir, model, adam, plan, step)?);
        }
    }
    Ok(log)
}

fn save_at<F: Scalar>(
    dir: &Path,
    model: &Model<F>,
    adam: &Adam<F>,
    plan: &TrainPlan,
    step: u64,
) -> Result<PathBuf> {
    let path = dir.join(format!("checkpoint_{step:06}.stck"));
    let state = TrainState {
        step,
        rng: RngState::new(plan.seed),
        plan_hash: plan.hash(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
    };
    save_train(&path, model, &state)?;
    Ok(path)
}

struct UtteranceWork<F: Scalar> {
    ctx: Ctx<F>,
    losses: UtteranceLosses<F>,
    degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
fn batch_step<F: Scalar>(
    model: &Model<F>,
    batch: &Batch,
    corpus: &[Utterance],
    weights: &LossWeights,
    adaptation: AdaptationMode,
    subset: Option<&[String]>,
    plan: &TrainPlan,
    step: u64,
) -> Result<(IndexMap<String, Vec<F>>, LossBreakdown)> {
    let n_utt = batch.utterances.len();
    let need_ctc = weights.alpha > 0.0;
    let need_st = weights.beta > 0.0;
    let need_ad = weights.eta > 0.0 && adaptation != AdaptationMode::Off;
    let need_mt = weights.gamma > 0.0;
    let need_speech_semantic = need_st || need_ad;

    // Phase 1: build each utterance's tape and loss terms.
    let mut work: Vec<UtteranceWork<F>> = Vec::with_capacity(n_utt);
    for (ui, &ci) in batch.utterances.iter().enumerate() {
        let u = &corpus[ci];
        let tape: Tape<F> = Tape::new();
        let rng = RngState::new(plan.seed).fork(STREAM_DROPOUT).fork(step).fork(ui as u64);
        let mut ctx = model.ctx(&tape, true, rng, subset);
        let mut losses = UtteranceLosses::default();
        let mut degenerate = false;

        let mut h_s: Option<Tensor<F>> = None;
        if need_ctc || need_speech_semantic {
            let pre = model.pre_net(&mut ctx, &u.speech)?;
            let h = model.encode_acoustic(&mut ctx, &pre, None)?;
            let ctc_logits = model.ctc_logits(&mut ctx, &h)?;
            if need_ctc {
                let lp = ctc_logits.log_softmax_rows();
                losses.ctc = Some(ctc_loss(&lp, &u.transcription, model.cfg.blank_id())?);
            }
            if need_speech_semantic {
                let states = if model.cfg.use_shrink {
                    let (shrink, states) = model.shrink(&h, &ctc_logits, None)?;
                    degenerate = shrink.degenerate;
                    states
                } else {
                    Some(h)
                };
                h_s = match states {
                    Some(s) if model.cfg.use_semantic_encoder => {
                        Some(model.encode_semantic(&mut ctx, &s, None)?)
                    }
                    other => other,
                };
            }
        }

        if need_st {
            if let Some(enc) = &h_s {
                let (input, gold) = teacher_forcing(&u.translation);
                let logits = model.decode(&mut ctx, enc, None, &input)?;
                let mask = vec![true; gold.len()];
                losses.st = Some(translation_loss(&logits, &gold, &mask)?);
                losses.st_tokens = gold.len();
            }
        }

        let mut h_x: Option<Tensor<F>> = None;
        if need_mt || need_ad {
            h_x = Some(model.encode_text(&mut ctx, &u.transcription)?);
        }
        if need_mt {
            let enc = h_x.as_ref().unwrap();
            let (input, gold) = teacher_forcing(&u.translation);
            let logits = model.decode(&mut ctx, enc, None, &input)?;
            let mask = vec![true; gold.len()];
            losses.mt = Some(translation_loss(&logits, &gold, &mask)?);
            losses.mt_tokens = gold.len();
        }
        if need_ad {
            let (ad, fallback) = adaptation_loss(h_s.as_ref(), h_x.as_ref().unwrap(), adaptation)?;
            losses.ad = ad;
            losses.wordlevel_fallback = fallback;
        }

        work.push(UtteranceWork { ctx, losses, degenerate });
    }

    // Phase 2: batch-level token totals, composition, backward, accumulation.
    let st_total: usize = work.iter().map(|w| w.losses.st_tokens).sum();
    let mt_total: usize = work.iter().map(|w| w.losses.mt_tokens).sum();

    let mut grads: IndexMap<String, Vec<F>> = IndexMap::new();
    let mut b = LossBreakdown { n_utterances: n_utt, ..Default::default() };
    for w in &work {
        if w.degenerate {
            b.degenerate_shrinks += 1;
        }
        if w.losses.wordlevel_fallback {
            b.wordlevel_fallbacks += 1;
        }
        if let Some(l) = &w.losses.ctc {
            b.l_ctc += l.item().to_f64().unwrap() / n_utt as f64;
        }
        if let Some(l) = &w.losses.st {
            b.l_st += l.item().to_f64().unwrap() * w.losses.st_tokens as f64 / st_total.max(1) as f64;
        }
        if let Some(l) = &w.losses.mt {
            b.l_mt += l.item().to_f64().unwrap() * w.losses.mt_tokens as f64 / mt_total.max(1) as f64;
        }
        if let Some(l) = &w.losses.ad {
            b.l_ad += l.item().to_f64().unwrap() / n_utt as f64;
        }
        if let Some(total) = utterance_total(&w.losses, weights, n_utt, st_total, mt_total) {
            total.backward()?;
            for (name, g) in w.ctx.param_grads() {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
    }
    Ok((grads, LossBreakdown::compose(weights, b)))
}

/// Elementwise mean of parameter sets with identical inventories; the
/// training recipe averages the trailing checkpoints into the final model.
pub fn average_checkpoints<F: Scalar>(stores: &[ParamStore<F>]) -> Result<ParamStore<F>> {
    let first = stores
        .first()
        .ok_or_else(|| Error::Contract("averaging needs at least one checkpoint".into()))?;
    for s in &stores[1..] {
        if s.len() != first.len() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter inventories differ: {} vs {}",
                s.len(),
                first.len()
            )));
        }
        for (name, p) in first.iter() {
            match s.get(name) {
                Some(q) if q.rows == p.rows && q.cols == p.cols => {}
                Some(q) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name}: {}x{} vs {}x{}",
                        q.rows, q.cols, p.rows, p.cols
                    )))
                }
                None => return Err(Error::CheckpointMismatch(format!("{name} missing from one checkpoint"))),
            }
        }
    }
    let k = crate::scalar::c::<F>(1.0 / stores.len() as f64);
    let mut out = ParamStore::default();
    for (name, p) in first.iter() {
        let mut mean = vec![F::zero(); p.values.len()];
        for s in stores {
            for (m, v) in mean.iter_mut().zip(&s.get(name).unwrap().values) {
                *m += *v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * k;
        }
        out.insert(name.clone(), p.rows, p.cols, mean);
    }
    Ok(out)
}
