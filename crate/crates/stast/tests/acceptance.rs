//! Acceptance suite. Each test prints one pass line; the expensive criteria
//! share a single battery of trained models (built once, on first use).

use std::sync::OnceLock;
use std::time::Instant;

use stast::analysis::{evaluate_bleu, shrink_histogram, Variant, VARIANTS};
use stast::autodiff::check::check_gradients;
use stast::autodiff::{Tape, Tensor};
use stast::bleu::corpus_bleu;
use stast::data::vocab::{BOS, EOS, PAD, SPECIALS};
use stast::data::{generate_corpus, AsrUtterance, Features, SynthConfig, Utterance};
use stast::decode::{beam_decode, greedy_ctc_decode};
use stast::loss::{
    adaptation_loss, collapse_path, ctc_brute_force, ctc_loss, min_frames, teacher_forcing,
    AdaptationMode,
};
use stast::model::{shrink_from_logits, Model, ModelConfig};
use stast::rng::RngState;
use stast::train::{pretrain_acoustic, train_joint, TrainPlan};
use stast::{Model32, Model64};

fn pass(line: &str) {
    println!("[PASS] {line}");
}

// ---------------------------------------------------------------- shared data

struct Corpus {
    train: Vec<Utterance>,
    dev: Vec<Utterance>,
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let cfg = SynthConfig {
            seed: 17,
            vocab_size: 30,
            d_feat: 16,
            corpus_size: 400,
            ..SynthConfig::default()
        };
        let (mut all, _) = generate_corpus(&cfg).expect("corpus generation");
        let dev = all.split_off(300);
        Corpus { train: all, dev }
    })
}

fn desk_model_cfg() -> ModelConfig {
    ModelConfig::desk(16, 30)
}

/// The pinned recipe: desk geometry, seed 17, 300 utterances, 40 + 60 epochs.
fn pinned_plan() -> TrainPlan {
    TrainPlan {
        pretrain_epochs: 40,
        joint_epochs: 60,
        warmup_steps: 200,
        peak_lr: 2e-3,
        checkpoint_interval: 100_000,
        seed: 17,
        ..TrainPlan::default()
    }
}

/// Fully trained seed-17 model on the pinned recipe, shared by the
/// weight-tying and shrunk-length criteria.
fn pinned_model() -> &'static (Model32, f64) {
    static PINNED: OnceLock<(Model32, f64)> = OnceLock::new();
    PINNED.get_or_init(|| {
        let started = Instant::now();
        let c = corpus();
        let plan = pinned_plan();
        let asr: Vec<AsrUtterance> = c.train.iter().cloned().map(AsrUtterance::from).collect();
        let mut model: Model32 = Model::new(desk_model_cfg(), plan.seed).unwrap();
        pretrain_acoustic(&mut model, &asr, &plan).unwrap();
        train_joint(&mut model, &c.train, &plan, None).unwrap();
        (model, started.elapsed().as_secs_f64())
    })
}

// Reduced battery recipe for the multi-seed ablation/adaptation criteria;
// same geometry, smaller corpus and fewer epochs to fit the time budget.
const BATTERY_SEEDS: [u64; 3] = [17, 18, 19];
const BATTERY_TRAIN: usize = 200;

fn battery_plan() -> TrainPlan {
    TrainPlan {
        pretrain_epochs: 30,
        joint_epochs: 40,
        warmup_steps: 200,
        peak_lr: 2e-3,
        checkpoint_interval: 100_000,
        ..TrainPlan::default()
    }
}

struct Battery {
    /// Chain variants in declaration order: full .. -shrink; mean dev BLEU.
    chain_means: Vec<(&'static str, f64)>,
    full_models: Vec<Model32>,
    no_adaptation_models: Vec<Model32>,
    word_mean: f64,
    elapsed_s: f64,
}

fn battery() -> &'static Battery {
    static BATTERY: OnceLock<Battery> = OnceLock::new();
    BATTERY.get_or_init(|| {
        let started = Instant::now();
        let c = corpus();
        let train = &c.train[..BATTERY_TRAIN];
        let asr: Vec<AsrUtterance> = train.iter().cloned().map(AsrUtterance::from).collect();
        let base_plan = battery_plan();
        let base_cfg = desk_model_cfg();

        let run = |plan: &TrainPlan, cfg: &ModelConfig, seed: u64| -> (Model32, f64) {
            let mut plan = plan.clone();
            plan.seed = seed;
            let mut model: Model32 = Model::new(cfg.clone(), seed).unwrap();
            if plan.pretrain_epochs > 0 && plan.weights.alpha > 0.0 {
                pretrain_acoustic(&mut model, &asr, &plan).unwrap();
            }
            train_joint(&mut model, train, &plan, None).unwrap();
            let (report, _) = evaluate_bleu(&model, &c.dev, 4).unwrap();
            (model, report.bleu)
        };

        let mut chain_means = Vec::new();
        let mut full_models = Vec::new();
        let mut no_adaptation_models = Vec::new();
        // -ctc is exercised by the CLI; the ordering chain stops at -shrink.
        for variant in &VARIANTS[..5] {
            let (plan, cfg) = variant.apply(&base_plan, &base_cfg);
            let mut sum = 0.0;
            for &seed in &BATTERY_SEEDS {
                let (model, bleu) = run(&plan, &cfg, seed);
                eprintln!("battery: {variant} seed {seed} bleu {bleu:.2}");
                sum += bleu;
                match variant {
                    Variant::Full => full_models.push(model),
                    Variant::NoAdaptation => no_adaptation_models.push(model),
                    _ => {}
                }
            }
            chain_means.push((variant.name(), sum / BATTERY_SEEDS.len() as f64));
        }

        let mut word_plan = base_plan.clone();
        word_plan.adaptation = AdaptationMode::WordLevel;
        let mut word_sum = 0.0;
        for &seed in &BATTERY_SEEDS {
            let (_, bleu) = run(&word_plan, &base_cfg, seed);
            eprintln!("battery: word-adaptation seed {seed} bleu {bleu:.2}");
            word_sum += bleu;
        }

        Battery {
            chain_means,
            full_models,
            no_adaptation_models,
            word_mean: word_sum / BATTERY_SEEDS.len() as f64,
            elapsed_s: started.elapsed().as_secs_f64(),
        }
    })
}

fn random_log_probs(rng: &mut RngState, tape: &Tape<f64>, rows: usize, cols: usize) -> Tensor<f64> {
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    tape.var(rows, cols, vals).log_softmax_rows()
}

// -------------------------------------------------------------- criterion 1

#[test]
fn c01_ctc_matches_brute_force_oracle() {
    let started = Instant::now();
    let mut rng = RngState::new(41);
    let mut checked = 0usize;
    for t in 1..=6usize {
        for v in 1..=3u32 {
            for len in 0..=3usize {
                for _ in 0..200 {
                    let tape: Tape<f64> = Tape::new();
                    let lp = random_log_probs(&mut rng, &tape, t, v as usize + 1);
                    let target: Vec<u32> =
                        (0..len).map(|_| (rng.next_u64() % v as u64) as u32).collect();
                    let oracle = ctc_brute_force(&lp, &target, v).unwrap();
                    match ctc_loss(&lp, &target, v) {
                        Ok(loss) => {
                            let got = loss.item();
                            let rel = (got - oracle).abs() / oracle.abs().max(1.0);
                            assert!(
                                rel < 1e-6,
                                "T={t} V={v} target={target:?}: dp {got} vs oracle {oracle}"
                            );
                            checked += 1;
                        }
                        Err(_) => {
                            assert!(
                                oracle.is_infinite(),
                                "dp infeasible but oracle finite for T={t} target={target:?}"
                            );
                        }
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "oracle sweep took {secs:.1}s");
    pass(&format!("01 ctc oracle equivalence ({checked} feasible cases, {secs:.1}s)"));
}

// -------------------------------------------------------------- criterion 2

#[test]
fn c02_gradient_suite() {
    let started = Instant::now();
    let mut rng = RngState::new(42);
    let step = 1e-4;
    let tol = 1e-4;
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };

    type Builder = Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>>;
    let primitives: Vec<(&str, Vec<(usize, usize)>, Builder)> = vec![
        ("matmul", vec![(2, 3), (3, 2)], Box::new(|_, v| v[0].matmul(&v[1]).unwrap().sum_all())),
        ("matmul_nt", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].matmul_nt(&v[1]).unwrap().sum_all())),
        ("add", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].add(&v[1]).unwrap().mul_elem(&v[0]).unwrap().sum_all())),
        ("sub", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].sub(&v[1]).unwrap().mul_elem(&v[0]).unwrap().sum_all())),
        ("mul_elem", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].mul_elem(&v[1]).unwrap().sum_all())),
        ("add_row", vec![(3, 2), (1, 2)], Box::new(|_, v| v[0].add_row(&v[1]).unwrap().mul_elem(&v[0]).unwrap().sum_all())),
        ("scale", vec![(2, 3)], Box::new(|_, v| v[0].scale(1.7).mul_elem(&v[0]).unwrap().sum_all())),
        ("softmax_rows", vec![(2, 4)], Box::new(|_, v| v[0].softmax_rows().mul_elem(&v[0]).unwrap().sum_all())),
        ("log_softmax_rows", vec![(2, 4)], Box::new(|_, v| v[0].log_softmax_rows().mul_elem(&v[0]).unwrap().sum_all())),
        ("layer_norm", vec![(2, 4), (1, 4), (1, 4)], Box::new(|_, v| v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap().mul_elem(&v[0]).unwrap().sum_all())),
        ("gather_rows", vec![(4, 3)], Box::new(|_, v| v[0].gather_rows(&[2, 0, 2]).unwrap().sum_all())),
        ("embed_cols", vec![(3, 4)], Box::new(|_, v| v[0].embed_cols(&[1, 3, 1]).unwrap().sum_all())),
        ("gather_elems", vec![(3, 3)], Box::new(|_, v| v[0].gather_elems(&[(0, 1), (2, 2), (1, 0)]).unwrap().sum_all())),
        ("slice_cols", vec![(2, 5)], Box::new(|_, v| v[0].slice_cols(1, 3).unwrap().mul_elem(&v[0].slice_cols(0, 3).unwrap()).unwrap().sum_all())),
        ("concat_cols", vec![(2, 2), (2, 3)], Box::new(|_, v| Tensor::concat_cols(&[v[0].clone(), v[1].clone()]).unwrap().sum_all())),
        ("sum_all", vec![(2, 3)], Box::new(|_, v| v[0].mul_elem(&v[0]).unwrap().sum_all())),
        ("mean_all", vec![(2, 3)], Box::new(|_, v| v[0].mul_elem(&v[0]).unwrap().mean_all())),
        ("mean_rows", vec![(3, 2)], Box::new(|_, v| v[0].mean_rows().unwrap().mul_elem(&v[0].mean_rows().unwrap()).unwrap().sum_all())),
        ("lse2", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].lse2(&v[1]).unwrap().sum_all())),
        ("shift_cols", vec![(2, 4)], Box::new(|_, v| v[0].shift_cols(1).mul_elem(&v[0]).unwrap().sum_all())),
        ("mse", vec![(2, 3), (2, 3)], Box::new(|_, v| v[0].mse(&v[1]).unwrap())),
        ("masked_cross_entropy", vec![(3, 4)], Box::new(|_, v| v[0].masked_cross_entropy(&[1, 3, 0], &[true, true, false]).unwrap())),
    ];
    for (name, shapes, f) in &primitives {
        for i in 0..50 {
            let values: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| vals(r * c)).collect();
            check_gradients(shapes, &values, f, step, tol)
                .unwrap_or_else(|e| panic!("{name} instance {i}: {e}"));
        }
    }

    // CTC dynamic program, end to end from raw logits.
    for i in 0..50 {
        let t = 2 + (i % 4);
        let width = 3 + (i % 2); // |V| in {2, 3} plus blank
        let blank = (width - 1) as u32;
        let target: Vec<u32> = (0..1 + i % 2).map(|k| ((i + k) % (width - 1)) as u32).collect();
        if min_frames(&target) > t {
            continue;
        }
        let values = vec![vals(t * width)];
        check_gradients(
            &[(t, width)],
            &values,
            |_, v| ctc_loss(&v[0].log_softmax_rows(), &target, blank).unwrap(),
            step,
            tol,
        )
        .unwrap_or_else(|e| panic!("ctc instance {i}: {e}"));
    }

    // Full multi-task composite on a tiny model: analytic parameter grads
    // against central differences through the whole forward.
    let mut composite_checked = 0usize;
    for inst in 0..50u64 {
        let cfg = ModelConfig {
            n_layers_acoustic: 1,
            n_layers_semantic: 1,
            n_layers_decoder: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            dropout: 0.0,
            d_feat: 3,
            vocab_size: 5,
            use_semantic_encoder: true,
            use_shrink: true,
        };
        let model: Model64 = Model::new(cfg.clone(), 1000 + inst).unwrap();
        let mut urng = RngState::new(2000 + inst);
        let x: Vec<u32> = (0..2).map(|_| SPECIALS + (urng.next_u64() % 2) as u32).collect();
        let y: Vec<u32> = (0..2).map(|_| SPECIALS + (urng.next_u64() % 2) as u32).collect();
        let frames = 6;
        let feats = Features::new(frames, 3, (0..frames * 3).map(|_| urng.normal() as f32).collect());
        let u = Utterance { id: "g".into(), speech: feats, transcription: x, translation: y };

        // The adaptation teacher is a stop-gradient on the text side, so the
        // numeric evaluation must hold it fixed at the base model's value or
        // finite differences would flow through the detached path.
        let teacher: Vec<f64> = {
            let tape: Tape<f64> = Tape::new();
            let mut ctx = model.ctx(&tape, true, RngState::new(0), None);
            let h_x = model.encode_text(&mut ctx, &u.transcription).unwrap();
            h_x.mean_rows().unwrap().value()
        };

        // returns the composite loss plus the shrink's kept frames: the
        // argmax gate is discrete, so entries where a perturbation flips it
        // have no meaningful finite difference and get skipped
        let total = |m: &Model64| -> (f64, Vec<usize>) {
            let tape: Tape<f64> = Tape::new();
            let mut ctx = m.ctx(&tape, true, RngState::new(0), None);
            let pre = m.pre_net(&mut ctx, &u.speech).unwrap();
            let h = m.encode_acoustic(&mut ctx, &pre, None).unwrap();
            let logits = m.ctc_logits(&mut ctx, &h).unwrap();
            let l_ctc = ctc_loss(&logits.log_softmax_rows(), &u.transcription, m.cfg.blank_id()).unwrap();
            let (shrink, states) = m.shrink(&h, &logits, None).unwrap();
            let h_s = states.map(|s| m.encode_semantic(&mut ctx, &s, None).unwrap());
            let (input, gold) = teacher_forcing(&u.translation);
            let mut l = l_ctc;
            if let Some(enc) = &h_s {
                let st = m.decode(&mut ctx, enc, None, &input).unwrap();
                let mask = vec![true; gold.len()];
                l = l.add(&st.masked_cross_entropy(&gold.iter().map(|&g| g as usize).collect::<Vec<_>>(), &mask).unwrap()).unwrap();
            }
            let h_x = m.encode_text(&mut ctx, &u.transcription).unwrap();
            let mt = m.decode(&mut ctx, &h_x, None, &input).unwrap();
            let mask = vec![true; gold.len()];
            l = l.add(&mt.masked_cross_entropy(&gold.iter().map(|&g| g as usize).collect::<Vec<_>>(), &mask).unwrap()).unwrap();
            let _ = &h_x;
            if let Some(enc) = &h_s {
                let t = tape.constant(1, teacher.len(), teacher.clone());
                let ad = enc.mean_rows().unwrap().mse(&t).unwrap();
                l = l.add(&ad).unwrap();
            }
            (l.item(), shrink.kept_indices)
        };

        // analytic grads
        let tape: Tape<f64> = Tape::new();
        let mut ctx = model.ctx(&tape, true, RngState::new(0), None);
        let pre = model.pre_net(&mut ctx, &u.speech).unwrap();
        let h = model.encode_acoustic(&mut ctx, &pre, None).unwrap();
        let logits = model.ctc_logits(&mut ctx, &h).unwrap();
        let l_ctc = ctc_loss(&logits.log_softmax_rows(), &u.transcription, model.cfg.blank_id()).unwrap();
        let (shrink, states) = model.shrink(&h, &logits, None).unwrap();
        if shrink.degenerate {
            continue; // the shrink gate makes the loss piecewise; skip
        }
        let h_s = states.map(|s| model.encode_semantic(&mut ctx, &s, None).unwrap());
        let (input, gold) = teacher_forcing(&u.translation);
        let gold_usize: Vec<usize> = gold.iter().map(|&g| g as usize).collect();
        let mask = vec![true; gold.len()];
        let mut l = l_ctc;
        let st = model.decode(&mut ctx, h_s.as_ref().unwrap(), None, &input).unwrap();
        l = l.add(&st.masked_cross_entropy(&gold_usize, &mask).unwrap()).unwrap();
        let h_x = model.encode_text(&mut ctx, &u.transcription).unwrap();
        let mt = model.decode(&mut ctx, &h_x, None, &input).unwrap();
        l = l.add(&mt.masked_cross_entropy(&gold_usize, &mask).unwrap()).unwrap();
        let (ad, _) = adaptation_loss(h_s.as_ref(), &h_x, AdaptationMode::SequenceLevel).unwrap();
        l = l.add(&ad.unwrap()).unwrap();
        l.backward().unwrap();
        let grads = ctx.param_grads();

        for name in ["tied_projection", "pre_net.w", "acoustic.0.attn.wq", "decoder.0.cross.wv"] {
            let g = &grads[name];
            let n = g.len();
            // spot-check a handful of entries per matrix
            for k in 0..n.min(6) {
                let ei = (k * 37) % n;
                let mut mp = model.params.clone();
                mp.get_mut(name).unwrap().values[ei] += step;
                let (plus, kept_p) = total(&Model::from_parts(cfg.clone(), mp));
                let mut mm = model.params.clone();
                mm.get_mut(name).unwrap().values[ei] -= step;
                let (minus, kept_m) = total(&Model::from_parts(cfg.clone(), mm));
                if kept_p != shrink.kept_indices || kept_m != shrink.kept_indices {
                    continue; // perturbation crossed an argmax boundary
                }
                let numeric = (plus - minus) / (2.0 * step);
                let a = g[ei];
                let err = (a - numeric).abs();
                assert!(
                    err <= 1e-6_f64.max(tol * a.abs().max(numeric.abs())),
                    "composite inst {inst} {name}[{ei}]: analytic {a:.6e} vs numeric {numeric:.6e}"
                );
            }
        }
        composite_checked += 1;
    }
    assert!(composite_checked >= 40, "only {composite_checked} composite instances were checkable");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient suite took {secs:.1}s");
    pass(&format!("02 gradient suite (primitives + ctc + composite, {secs:.1}s)"));
}

// -------------------------------------------------------------- criterion 3

#[test]
fn c03_shrink_matches_independent_collapse() {
    let mut rng = RngState::new(43);
    for _ in 0..1000 {
        let rows = 1 + (rng.next_u64() % 8) as usize;
        let cols = 4 + (rng.next_u64() % 5) as usize;
        let blank = (cols - 1) as u32;
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();

        // independent argmax path + collapse
        let mut path = Vec::with_capacity(rows);
        for t in 0..rows {
            let row = &values[t * cols..(t + 1) * cols];
            let mut best = 0usize;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            path.push(best as u32);
        }
        let expected = collapse_path(&path, blank);

        let shrink = shrink_from_logits(&values, rows, cols, blank, None);
        assert_eq!(shrink.collapsed_labels, expected);
        assert!(shrink.kept_indices.windows(2).all(|w| w[0] < w[1]), "kept indices not strictly increasing");
        assert_eq!(shrink.degenerate, expected.is_empty());
        assert_eq!(shrink.kept_indices.len(), expected.len());

        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(rows, cols, values);
        assert_eq!(greedy_ctc_decode(&logits, blank, None), expected);
    }

    // the worked collapse example: aa-ab- and a-abb- both give aab
    let a = 3u32;
    let b = 4u32;
    let blank = 6u32;
    for path in [[a, a, blank, a, b, blank], [a, blank, a, b, b, blank]] {
        assert_eq!(collapse_path(&path, blank), vec![a, a, b]);
    }
    pass("03 shrink collapse correctness (1000 random + worked example)");
}

// -------------------------------------------------------------- criterion 4

#[test]
fn c04_weight_tying_inventory_after_training() {
    let (model, _) = pinned_model();
    let cfg = &model.cfg;
    let tied_shaped: Vec<&String> = model
        .params
        .iter()
        .filter(|(_, p)| p.rows == cfg.d_model && p.cols == cfg.width())
        .map(|(n, _)| n)
        .collect();
    assert_eq!(tied_shaped.len(), 1, "expected exactly one {}x{} matrix, found {tied_shaped:?}", cfg.d_model, cfg.width());
    assert_eq!(tied_shaped[0], "tied_projection");

    // a mutation through the single storage shows up in all three roles
    let probe = |m: &Model32| -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let tape = Tape::new();
        let mut ctx = m.ctx(&tape, false, RngState::new(0), None);
        let h = tape.constant(2, cfg.d_model, (0..2 * cfg.d_model).map(|i| (i as f32 * 0.13).sin()).collect());
        let ctc = m.ctc_logits(&mut ctx, &h).unwrap().value();
        let emb = m.embed_source(&mut ctx, &[SPECIALS, SPECIALS + 1]).unwrap().value();
        let dec = m.decode(&mut ctx, &h, None, &[BOS, SPECIALS]).unwrap().value();
        (ctc, emb, dec)
    };
    let before = probe(model);
    let mut mutated = Model::from_parts(cfg.clone(), model.params.clone());
    // perturb a content-token column so every view reads it
    let col = SPECIALS as usize;
    mutated.tied_projection_mut().values[col] += 0.5;
    let after = probe(&mutated);
    assert_ne!(before.0, after.0, "ctc view blind to the mutation");
    assert_ne!(before.1, after.1, "embedding view blind to the mutation");
    assert_ne!(before.2, after.2, "decoder projection view blind to the mutation");
    pass("04 weight tying (single storage, visible through all three views)");
}

// -------------------------------------------------------------- criterion 5

#[test]
fn c05_shrunk_length_statistic() {
    let (model, train_secs) = pinned_model();
    let hist = shrink_histogram(model, &corpus().dev).unwrap();
    let at_zero = hist.fraction_at_zero();
    let within = hist.fraction_within(2);
    assert!(at_zero >= 0.70, "fraction at zero {at_zero:.3} < 0.70");
    assert!(within >= 0.90, "fraction within 2 {within:.3} < 0.90");
    assert!(*train_secs < 600.0, "pinned recipe took {train_secs:.0}s");
    pass(&format!("05 shrunk-length statistic (at-zero {at_zero:.3}, within-2 {within:.3}, recipe {train_secs:.0}s)"));
}

// -------------------------------------------------------------- criterion 6

#[test]
fn c06_ablation_ordering() {
    let b = battery();
    let means = &b.chain_means;
    for w in means.windows(2) {
        let (hi_name, hi) = w[0];
        let (lo_name, lo) = w[1];
        assert!(
            lo <= hi + 0.3,
            "{lo_name} ({lo:.2}) exceeds {hi_name} ({hi:.2}) beyond the noise allowance"
        );
    }
    let full = means[0].1;
    let no_shrink = means[4].1;
    assert!(
        full >= no_shrink + 2.0,
        "full ({full:.2}) does not beat -shrink ({no_shrink:.2}) by 2 BLEU"
    );
    assert!(b.elapsed_s < 3600.0, "battery took {:.0}s", b.elapsed_s);
    let table: Vec<String> = means.iter().map(|(n, m)| format!("{n} {m:.2}")).collect();
    pass(&format!("06 ablation ordering ({}; battery {:.0}s)", table.join(", "), b.elapsed_s));
}

// -------------------------------------------------------------- criterion 7

#[test]
fn c07_sequence_vs_word_adaptation() {
    let b = battery();
    let seq = b.chain_means[0].1;
    let word = b.word_mean;
    assert!(seq >= word - 0.3, "sequence {seq:.2} vs word {word:.2}");
    pass(&format!("07 adaptation modes (sequence {seq:.2}, word {word:.2})"));
}

// -------------------------------------------------------------- criterion 8

#[test]
fn c08_adaptation_closes_representation_gap() {
    let b = battery();
    let gap = |model: &Model32| -> f64 {
        let dev = &corpus().dev;
        let mut sum = 0.0;
        let mut n = 0usize;
        for u in dev {
            let tape = Tape::new();
            let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
            let (enc, _, _) = model.encode_speech(&mut ctx, &u.speech).unwrap();
            let Some(enc) = enc else { continue };
            let h_x = model.encode_text(&mut ctx, &u.transcription).unwrap();
            let gap = enc
                .mean_rows()
                .unwrap()
                .mse(&h_x.mean_rows().unwrap())
                .unwrap()
                .item();
            sum += gap as f64;
            n += 1;
        }
        sum / n as f64
    };
    let with: f64 = b.full_models.iter().map(|m| gap(m)).sum::<f64>() / b.full_models.len() as f64;
    let without: f64 =
        b.no_adaptation_models.iter().map(|m| gap(m)).sum::<f64>() / b.no_adaptation_models.len() as f64;
    assert!(with < without, "adaptation mse {with:.4} not below {without:.4}");
    pass(&format!("08 adaptation closes the gap (mse {with:.4} < {without:.4})"));
}

// -------------------------------------------------------------- criterion 9

#[test]
fn c09_bleu_hand_case() {
    let r = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).unwrap();
    assert!((r.bleu - 77.8800783).abs() < 0.01, "hand case scored {}", r.bleu);
    let sents = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6]];
    assert!((corpus_bleu(&sents, &sents).unwrap().bleu - 100.0).abs() < 1e-9);
    let zero = corpus_bleu(&[vec![1, 2, 3, 4, 5]], &[vec![6, 7, 8, 9, 10]]).unwrap();
    assert_eq!(zero.bleu, 0.0);
    pass(&format!("09 bleu scorer (hand case {:.4})", r.bleu));
}

// ------------------------------------------------------------- criterion 10

#[test]
fn c10_determinism_and_bit_exact_resume() {
    let c = corpus();
    let train = &c.train[..40];
    let plan = TrainPlan {
        pretrain_epochs: 0,
        joint_epochs: 6,
        warmup_steps: 10,
        peak_lr: 1e-3,
        checkpoint_interval: 4,
        seed: 17,
        frame_budget: 400,
        ..TrainPlan::default()
    };
    let cfg = ModelConfig {
        n_layers_acoustic: 1,
        n_layers_semantic: 1,
        n_layers_decoder: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        dropout: 0.1,
        d_feat: 16,
        vocab_size: 30,
        use_semantic_encoder: true,
        use_shrink: true,
    };

    // identical seeds -> identical metrics.csv
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut model_a: Model64 = Model::new(cfg.clone(), plan.seed).unwrap();
    let log_a = train_joint(&mut model_a, train, &plan, Some(dir_a.path())).unwrap();
    let mut model_b: Model64 = Model::new(cfg.clone(), plan.seed).unwrap();
    train_joint(&mut model_b, train, &plan, Some(dir_b.path())).unwrap();
    let metrics_a = std::fs::read(dir_a.path().join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir_b.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "same-seed runs diverged");
    for (name, p) in model_a.params.iter() {
        let q = model_b.params.get(name).unwrap();
        assert!(p.values.iter().zip(&q.values).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} differs");
    }

    // resume from a mid-run checkpoint and land on the same bits
    let mid = log_a
        .checkpoints
        .iter()
        .find(|p| !p.ends_with(log_a.checkpoints.last().unwrap()))
        .expect("a mid-run checkpoint exists");
    let dir_c = tempfile::tempdir().unwrap();
    let (resumed, _) =
        stast::train::resume_joint::<f64>(mid, train, &plan, Some(dir_c.path())).unwrap();
    for (name, p) in model_a.params.iter() {
        let q = resumed.params.get(name).unwrap();
        assert!(
            p.values.iter().zip(&q.values).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{name} differs after resume"
        );
    }
    pass("10 determinism and bit-exact 64-bit resume");
}

// ------------------------------------------------------------- criterion 11

fn tiny_decoder_cfg() -> ModelConfig {
    ModelConfig {
        n_layers_acoustic: 1,
        n_layers_semantic: 1,
        n_layers_decoder: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        dropout: 0.0,
        d_feat: 4,
        vocab_size: 6,
        use_semantic_encoder: true,
        use_shrink: true,
    }
}

/// Reference greedy loop: per-step argmax over permitted tokens.
fn greedy_reference(model: &Model64, enc: &Tensor<f64>, max_len: usize) -> Vec<u32> {
    let width = model.cfg.width();
    let tape = enc.tape().clone();
    let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
    let mut tokens: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut input = vec![BOS];
        input.extend_from_slice(&tokens);
        let logits = model.decode(&mut ctx, enc, None, &input).unwrap();
        let lp = logits.log_softmax_rows().value();
        let last = &lp[(input.len() - 1) * width..input.len() * width];
        let mut best: Option<(u32, f64)> = None;
        for (tok, &v) in last.iter().enumerate() {
            let tok = tok as u32;
            if tok == PAD || tok == BOS || tok == model.cfg.blank_id() {
                continue;
            }
            if best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((tok, v));
            }
        }
        let (tok, _) = best.unwrap();
        if tok == EOS {
            break;
        }
        tokens.push(tok);
    }
    tokens
}

/// Score a candidate token sequence exactly as beam search would.
fn sequence_score(model: &Model64, enc: &Tensor<f64>, tokens: &[u32]) -> f64 {
    let width = model.cfg.width();
    let tape = enc.tape().clone();
    let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
    let mut input = vec![BOS];
    input.extend_from_slice(tokens);
    let logits = model.decode(&mut ctx, enc, None, &input).unwrap();
    let lp = logits.log_softmax_rows().value();
    let mut score = 0.0;
    for (pos, &tok) in tokens.iter().enumerate() {
        score += lp[pos * width + tok as usize];
    }
    score / tokens.len() as f64
}

#[test]
fn c11_beam_search() {
    let cfg = tiny_decoder_cfg();
    let content: Vec<u32> = (SPECIALS..cfg.vocab_size as u32).collect();
    let max_len = 4usize;

    // beam 1 is exactly greedy on random models
    for seed in 0..100u64 {
        let model: Model64 = Model::new(cfg.clone(), seed).unwrap();
        let tape: Tape<f64> = Tape::new();
        let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
        let src: Vec<u32> = vec![content[(seed % 3) as usize], content[((seed / 3) % 3) as usize]];
        let enc = model.encode_text(&mut ctx, &src).unwrap();
        let b1 = beam_decode(&model, &enc, 1, max_len).unwrap();
        let greedy = greedy_reference(&model, &enc, max_len);
        assert_eq!(b1.tokens, greedy, "seed {seed}: beam-1 differs from greedy");
    }

    // exhaustive candidate set: every content sequence up to max_len,
    // terminated by eos or truncated at the limit
    let mut candidates: Vec<Vec<u32>> = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for depth in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            let mut done = prefix.clone();
            done.push(EOS);
            candidates.push(done);
            for &t in &content {
                let mut ext = prefix.clone();
                ext.push(t);
                if depth + 1 == max_len {
                    candidates.push(ext.clone()); // truncated, no eos
                }
                next.push(ext);
            }
        }
        frontier = next;
    }

    // find a model where greedy is provably suboptimal and beam 2 fixes it
    let mut solved = None;
    for seed in 0..200u64 {
        let model: Model64 = Model::new(cfg.clone(), seed).unwrap();
        let tape: Tape<f64> = Tape::new();
        let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
        let enc = model.encode_text(&mut ctx, &[content[0], content[1]]).unwrap();
        let oracle = candidates
            .iter()
            .max_by(|a, b| {
                sequence_score(&model, &enc, a)
                    .partial_cmp(&sequence_score(&model, &enc, b))
                    .unwrap()
                    .then_with(|| b.cmp(a))
            })
            .unwrap();
        let mut oracle_tokens = oracle.clone();
        if oracle_tokens.last() == Some(&EOS) {
            oracle_tokens.pop();
        }
        let greedy = greedy_reference(&model, &enc, max_len);
        if greedy == oracle_tokens {
            continue;
        }
        let b2 = beam_decode(&model, &enc, 2, max_len).unwrap();
        if b2.tokens == oracle_tokens {
            solved = Some((seed, greedy, b2.tokens));
            break;
        }
    }
    let (seed, greedy, b2) = solved.expect("no greedy-suboptimal instance solved by beam 2 found");
    assert_ne!(greedy, b2);
    pass(&format!("11 beam search (beam-1 == greedy on 100 models; instance seed {seed} solved by beam 2)"));
}
