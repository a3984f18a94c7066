//! Post-training analysis: the shrunk-length histogram and the cumulative
//! ablation battery.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::autodiff::Tape;
use crate::bleu::{corpus_bleu, BleuReport};
use crate::data::Utterance;
use crate::decode::translate_speech;
use crate::error::{Error, Result};
use crate::model::{shrink_from_logits, Model, ModelConfig};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::train::{pretrain_acoustic, train_joint, TrainPlan};
use crate::data::AsrUtterance;
use crate::loss::LossWeights;

/// Distribution of T_x minus the shrunk length over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkHistogram {
    /// diff -> count; diff = transcription length - collapsed length.
    pub counts: BTreeMap<i64, usize>,
    pub total: usize,
}

impl ShrinkHistogram {
    pub fn fraction_at_zero(&self) -> f64 {
        *self.counts.get(&0).unwrap_or(&0) as f64 / self.total.max(1) as f64
    }

    /// Fraction with |diff| strictly below `bound`.
    pub fn fraction_within(&self, bound: i64) -> f64 {
        let n: usize = self.counts.iter().filter(|(d, _)| d.abs() < bound).map(|(_, c)| c).sum();
        n as f64 / self.total.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("diff,count,fraction\n");
        for (diff, count) in &self.counts {
            body.push_str(&format!("{diff},{count},{:.6}\n", *count as f64 / self.total as f64));
        }
        fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Run every utterance through the acoustic encoder and tabulate how far the
/// shrunk length lands from the transcription length.
pub fn shrink_histogram<F: Scalar>(model: &Model<F>, corpus: &[Utterance]) -> Result<ShrinkHistogram> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for u in corpus {
        let tape: Tape<F> = Tape::new();
        let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
        let pre = model.pre_net(&mut ctx, &u.speech)?;
        let h = model.encode_acoustic(&mut ctx, &pre, None)?;
        let logits = model.ctc_logits(&mut ctx, &h)?;
        let shrink = shrink_from_logits(
            &logits.value(),
            logits.rows(),
            logits.cols(),
            model.cfg.blank_id(),
            None,
        );
        let diff = u.transcription.len() as i64 - shrink.collapsed_labels.len() as i64;
        *counts.entry(diff).or_insert(0) += 1;
    }
    Ok(ShrinkHistogram { counts, total: corpus.len() })
}

/// Translate the whole corpus and score against the gold translations.
/// Degenerate shrinks produce empty hypotheses (and get counted).
pub fn evaluate_bleu<F: Scalar>(
    model: &Model<F>,
    corpus: &[Utterance],
    beam_size: usize,
) -> Result<(BleuReport, usize)> {
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut degenerate = 0usize;
    for u in corpus {
        match translate_speech(model, &u.speech, beam_size)? {
            Some(out) => hyps.push(out.tokens),
            None => {
                degenerate += 1;
                hyps.push(Vec::new());
            }
        }
    }
    let refs: Vec<Vec<u32>> = corpus.iter().map(|u| u.translation.clone()).collect();
    Ok((corpus_bleu(&hyps, &refs)?, degenerate))
}

/// Cumulative ablation rows, each removing everything the previous rows did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoAdaptation,
    NoMultitask,
    NoSemanticEncoder,
    NoShrink,
    NoCtc,
}

pub const VARIANTS: [Variant; 6] = [
    Variant::Full,
    Variant::NoAdaptation,
    Variant::NoMultitask,
    Variant::NoSemanticEncoder,
    Variant::NoShrink,
    Variant::NoCtc,
];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdaptation => "-adaptation",
            Variant::NoMultitask => "-multitask",
            Variant::NoSemanticEncoder => "-semantic-encoder",
            Variant::NoShrink => "-shrink",
            Variant::NoCtc => "-ctc",
        }
    }

    /// Apply this row's cumulative removals to a base plan and model config.
    pub fn apply(&self, plan: &TrainPlan, cfg: &ModelConfig) -> (TrainPlan, ModelConfig) {
        let mut plan = plan.clone();
        let mut cfg = cfg.clone();
        let level = VARIANTS.iter().position(|v| v == self).unwrap();
        if level >= 1 {
            plan.weights.eta = 0.0;
        }
        if level >= 2 {
            plan.weights.gamma = 0.0;
        }
        if level >= 3 {
            cfg.use_semantic_encoder = false;
        }
        if level >= 4 {
            cfg.use_shrink = false;
        }
        if level >= 5 {
            plan.weights = LossWeights { alpha: 0.0, ..plan.weights };
            plan.pretrain_epochs = 0;
        }
        (plan, cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub variant: &'static str,
    pub seed: u64,
    pub bleu: f64,
}

/// Train and score every variant for every seed. Variants share the data
/// order per seed (it is derived from the plan seed alone).
pub fn run_ablation<F: Scalar>(
    base_plan: &TrainPlan,
    base_cfg: &ModelConfig,
    train_corpus: &[Utterance],
    dev_corpus: &[Utterance],
    seeds: &[u64],
    beam_size: usize,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let asr: Vec<AsrUtterance> = train_corpus.iter().cloned().map(AsrUtterance::from).collect();
    let mut results = Vec::new();
    for variant in VARIANTS {
        for &seed in seeds {
            let (mut plan, cfg) = variant.apply(base_plan, base_cfg);
            plan.seed = seed;
            let mut model: Model<F> = Model::new(cfg, seed)?;
            if plan.pretrain_epochs > 0 && plan.weights.alpha > 0.0 {
                pretrain_acoustic(&mut model, &asr, &plan)?;
            }
            train_joint(&mut model, train_corpus, &plan, None)?;
            let (report, _) = evaluate_bleu(&model, dev_corpus, beam_size)?;
            results.push(AblationResult { variant: variant.name(), seed, bleu: report.bleu });
        }
    }
    Ok(results)
}

pub fn write_ablation_csv(results: &[AblationResult], path: &Path) -> Result<()> {
    let mut body = String::from("variant,seed,bleu\n");
    for r in results {
        body.push_str(&format!("{},{},{:.4}\n", r.variant, r.seed, r.bleu));
    }
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Mean BLEU per variant, in declaration order.
pub fn mean_bleu_by_variant(results: &[AblationResult]) -> Vec<(&'static str, f64)> {
    VARIANTS
        .iter()
        .map(|v| {
            let rows: Vec<f64> =
                results.iter().filter(|r| r.variant == v.name()).map(|r| r.bleu).collect();
            (v.name(), rows.iter().sum::<f64>() / rows.len().max(1) as f64)
        })
        .collect()
}
