//! Model assembly, the two-stage schedule, training and evaluation.
//!
//! Both encoders stay frozen in both stages, so their outputs for every
//! sample (global image and ground-truth crops) are computed once and
//! reused. Stage 1 trains the pixel projection and the mask decoder;
//! stage 2 adds the cross-attention fusion, the language model and the
//! semantic projection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attr_eval::{score_logits, score_vqa, Answer, AttrProbe, AttrReport};
use crate::autograd::{Tape, Var};
use crate::config::{LossConfig, ModelConfig, OptimizerKind, RunConfig};
use crate::decoder;
use crate::error::{LiraError, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::generation::{generate, instruction, GenerateOptions, Lira, Task};
use crate::image::{BinaryMask, ImageBuffer};
use crate::lm;
use crate::losses::{self, LossReport};
use crate::metrics::{overlap, MetricReport, Overlap};
use crate::params::{Adam, Optimizer, ParamStore, Sgd};
use crate::sefe::{self, Branch, FeatureGrid, Sefe};
use crate::sequence::{
    assemble_plain_sequence, assemble_training_sequence, build_inference_prefix, crop_region, Element,
    InterleavedSequence,
};
use crate::synth::{LoadedSample, Split};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, P_CLOSE, P_OPEN};

pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    sefe::init(&mut store, cfg, &mut rng);
    lm::init(&mut store, cfg, &mut rng);
    decoder::init(&mut store, cfg, &mut rng);
    store
}

/// Parameter-name prefixes trained in `stage`.
pub fn stage_groups(stage: u8) -> Result<Vec<&'static str>> {
    match stage {
        1 => Ok(vec![sefe::MLP_P, decoder::PREFIX]),
        2 => Ok(vec![sefe::MLP_P, decoder::PREFIX, sefe::MHCA, lm::PREFIX, sefe::MLP_S]),
        s => Err(LiraError::invalid(format!("unknown stage {s}"))),
    }
}

pub fn configure_trainable(stage: u8, store: &mut ParamStore) -> Result<BTreeSet<String>> {
    let groups = stage_groups(stage)?;
    for g in &groups {
        if store.with_prefix(g).next().is_none() {
            return Err(LiraError::UnknownParam(format!("{g}*")));
        }
    }
    let names: Vec<String> = store
        .names()
        .filter(|n| groups.iter().any(|g| n.starts_with(g)))
        .map(String::from)
        .collect();
    store.set_trainable(names)?;
    Ok(store.trainable().clone())
}

/// A sample with its frozen encoder outputs precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: ImageBuffer,
    /// Ground-truth crops at the local resolution.
    pub crops: Vec<ImageBuffer>,
    pub raw_s: Tensor,
    pub raw_p: Tensor,
    pub raw_locals: Vec<Tensor>,
    pub instruction: Vec<TokenId>,
    pub descriptions: Vec<Vec<TokenId>>,
    pub masks: Vec<BinaryMask>,
    pub ilvc: bool,
}

fn encode_raw(store: &ParamStore, cfg: &ModelConfig, img: &ImageBuffer, branch: Branch) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = sefe::encode_on(&mut t, store, cfg, img, branch)?;
    Ok(t.value(v).clone())
}

impl Prepared {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        cfg: &ModelConfig,
        id: String,
        image: ImageBuffer,
        masks: Vec<BinaryMask>,
        instruction: Vec<TokenId>,
        descriptions: Vec<Vec<TokenId>>,
        ilvc: bool,
    ) -> Result<Self> {
        if masks.len() != descriptions.len() {
            return Err(LiraError::invalid(format!("{} masks for {} descriptions", masks.len(), descriptions.len())));
        }
        let mut crops = Vec::new();
        let mut raw_locals = Vec::new();
        if ilvc {
            for m in &masks {
                let c = crop_region(&image, m, cfg.local_res)?.region;
                raw_locals.push(encode_raw(store, cfg, &c, Branch::Semantic)?);
                crops.push(c);
            }
        }
        Ok(Prepared {
            id,
            raw_s: encode_raw(store, cfg, &image, Branch::Semantic)?,
            raw_p: encode_raw(store, cfg, &image, Branch::Pixel)?,
            image,
            crops,
            raw_locals,
            instruction,
            descriptions,
            masks,
            ilvc,
        })
    }

    pub fn from_sample(store: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, s: &LoadedSample) -> Result<Self> {
        let descriptions = s
            .record
            .regions
            .iter()
            .map(|r| vocab.encode(&r.description))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            store,
            cfg,
            s.record.id.clone(),
            s.image.clone(),
            s.masks.clone(),
            vocab.encode(&s.record.instruction)?,
            descriptions,
            s.record.ilvc,
        )
    }
}

/// Loss nodes of one sample.
pub struct SampleLoss {
    pub total: Var,
    pub text: Var,
    pub ce: Option<Var>,
    pub dice: Option<Var>,
    pub sequence: InterleavedSequence,
    pub lm: lm::LmNodes,
}

/// Builds the combined loss of one sample on `tape`. With `encode_on_tape`
/// the encoders run on the tape too (for gradient checks); otherwise the
/// cached encoder outputs enter as constants.
pub fn sample_loss_on(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    p: &Prepared,
    encode_on_tape: bool,
) -> Result<SampleLoss> {
    let (rs, rp) = if encode_on_tape {
        (
            sefe::encode_on(tape, store, cfg, &p.image, Branch::Semantic)?,
            sefe::encode_on(tape, store, cfg, &p.image, Branch::Pixel)?,
        )
    } else {
        (tape.constant(p.raw_s.clone()), tape.constant(p.raw_p.clone()))
    };
    let f = sefe::global_on(tape, store, cfg, rs, rp)?;
    let global = FeatureGrid::new(tape.value(f).clone())?;
    let mut feature_nodes = vec![f];
    let seq = if p.ilvc {
        let mut locals = Vec::with_capacity(p.crops.len());
        for (i, crop) in p.crops.iter().enumerate() {
            let raw = if encode_on_tape {
                sefe::encode_on(tape, store, cfg, crop, Branch::Semantic)?
            } else {
                tape.constant(p.raw_locals[i].clone())
            };
            let l = sefe::project_on(tape, store, cfg, raw, Branch::Semantic)?;
            locals.push(FeatureGrid::new(tape.value(l).clone())?);
            feature_nodes.push(l);
        }
        assemble_training_sequence(global, &p.instruction, &p.descriptions, locals)?
    } else {
        assemble_plain_sequence(global, &p.instruction, p.masks.len())
    };
    let nodes = lm::forward_on(tape, store, cfg, &seq, Some(&feature_nodes))?;
    let text = lm::next_token_loss_on(tape, nodes.logits, &seq)?;
    let dims = (p.image.height(), p.image.width());
    let mut mask_terms = Vec::new();
    let mut ces = Vec::new();
    let mut dices = Vec::new();
    for (r, gt) in seq.seg_rows().into_iter().zip(&p.masks) {
        let h = tape.slice(nodes.hidden, 0, r, r + 1)?;
        let pred = decoder::decode_on(tape, store, h, rp, dims)?;
        let (m, ce, dice) = losses::region_mask_loss_on(tape, pred, gt, loss_cfg)?;
        mask_terms.push(m);
        ces.push(ce);
        dices.push(dice);
    }
    let (total, ce, dice) = if mask_terms.is_empty() {
        (text, None, None)
    } else {
        let n = mask_terms.len() as f64;
        let mean = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
            let mut acc = xs[0];
            for &x in &xs[1..] {
                acc = tape.add(acc, x)?;
            }
            Ok(tape.scale(acc, 1.0 / n))
        };
        let mask = mean(tape, &mask_terms)?;
        let ce = mean(tape, &ces)?;
        let dice = mean(tape, &dices)?;
        let weighted = tape.scale(mask, loss_cfg.alpha);
        (tape.add(text, weighted)?, Some(ce), Some(dice))
    };
    Ok(SampleLoss {
        total,
        text,
        ce,
        dice,
        sequence: seq,
        lm: nodes,
    })
}

pub fn loss_report(tape: &Tape, l: &SampleLoss, cfg: &LossConfig) -> LossReport {
    let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
    let r = losses::report(tape.value(l.text).item(), v(l.ce), v(l.dice), cfg);
    LossReport {
        total: tape.value(l.total).item(),
        ..r
    }
}

/// Loss value and trainable-parameter gradients of one sample.
pub fn sample_gradients(
    store: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    p: &Prepared,
    encode_on_tape: bool,
) -> Result<(LossReport, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let l = sample_loss_on(&mut tape, store, cfg, loss_cfg, p, encode_on_tape)?;
    let report = loss_report(&tape, &l, loss_cfg);
    let grads = tape.backward(l.total)?.params();
    Ok((report, grads))
}

pub fn sample_loss(store: &ParamStore, cfg: &ModelConfig, loss_cfg: &LossConfig, p: &Prepared, encode_on_tape: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let l = sample_loss_on(&mut tape, store, cfg, loss_cfg, p, encode_on_tape)?;
    Ok(tape.value(l.total).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).expect("log entries serialise") + "\n")
            .collect()
    }
}

pub fn prepare_split(store: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, split: &Split) -> Result<Vec<Prepared>> {
    split
        .samples
        .iter()
        .map(|s| Prepared::from_sample(store, cfg, vocab, s))
        .collect()
}

/// Runs `cfg.steps()` optimizer steps of `cfg.stage` on `data`, starting
/// from `store`. Each step averages the gradients of `cfg.batch_size`
/// samples drawn without replacement from a seeded shuffle.
pub fn train(cfg: &RunConfig, mut store: ParamStore, data: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps() > 0 {
        return Err(LiraError::invalid("no training samples"));
    }
    configure_trainable(cfg.stage, &mut store)?;
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.learning_rate }),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.learning_rate)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (cfg.stage as u64) << 56);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps());
    for step in 0..cfg.steps() {
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut mean = LossReport::default();
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let (rep, grads) = sample_gradients(&store, &cfg.model, &cfg.loss, &data[idx], false)?;
            if !rep.total.is_finite() {
                return Err(LiraError::NonFinite(format!("loss at stage {} step {step}", cfg.stage)));
            }
            for (k, g) in grads {
                match sum.get_mut(&k) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(k, g);
                    }
                }
            }
            for (m, v) in [
                (&mut mean.total, rep.total),
                (&mut mean.text, rep.text),
                (&mut mean.mask, rep.mask),
                (&mut mean.ce, rep.ce),
                (&mut mean.dice, rep.dice),
            ] {
                *m += v / cfg.batch_size as f64;
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for g in sum.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(&mut store, &sum)?;
        if step % 50 == 0 {
            log::info!("stage {} step {step}: loss {:.4} (text {:.4}, mask {:.4})", cfg.stage, mean.total, mean.text, mean.mask);
        }
        log.push(StepLog {
            stage: cfg.stage,
            step,
            loss: mean,
        });
    }
    Ok(TrainOutcome { store, log })
}

/// Loads data, initialises or restores parameters, trains and writes the
/// checkpoint and the JSON-lines log.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = Vocab::load(&cfg.data_dir.join("vocab.txt"))?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(LiraError::invalid(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let split = Split::load(&cfg.data_dir.join("train"))?;
    let mut store = init_model(&cfg.model, cfg.seed);
    if let Some(path) = &cfg.init_checkpoint {
        store.load_values_from(&ParamStore::load(path)?)?;
    }
    let data = prepare_split(&store, &cfg.model, &vocab, &split)?;
    log::info!("training stage {} on {} samples", cfg.stage, data.len());
    let out = train(cfg, store, &data)?;
    out.store.save(&cfg.checkpoint)?;
    if let Some(path) = &cfg.log {
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.log_jsonl().as_bytes())?;
    }
    Ok(out)
}

/// `(row, token)` targets that fall inside `<p> … </p>` blocks.
pub fn description_targets(seq: &InterleavedSequence) -> Vec<(usize, TokenId)> {
    let starts = seq.element_rows();
    let mut inside = false;
    let mut out = Vec::new();
    for (k, e) in seq.elements().iter().enumerate() {
        match e {
            Element::Token(P_OPEN) => inside = true,
            Element::Token(P_CLOSE) => inside = false,
            Element::Token(t) if inside && k > 0 => out.push((starts[k] - 1, *t)),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefsegReport {
    pub ilvc_enabled: bool,
    pub metrics: MetricReport,
    /// Teacher-forced accuracy on local-description tokens (ground-truth
    /// crops); `None` without ILVC.
    pub token_accuracy: Option<f64>,
    pub description_tokens: usize,
    pub protocol_errors: usize,
    pub truncated: usize,
}

struct SampleEval {
    overlap: Overlap,
    correct: usize,
    tokens: usize,
    protocol_error: bool,
    truncated: bool,
}

fn eval_one(store: &ParamStore, cfg: &RunConfig, vocab: &Vocab, s: &LoadedSample) -> Result<SampleEval> {
    let m = &cfg.model;
    let lira = Lira::new(store, m);
    let instr = instruction(vocab, Task::Refseg, cfg.ilvc_enabled, &s.record.query)?;
    let opts = GenerateOptions {
        ilvc_enabled: cfg.ilvc_enabled,
        max_steps: cfg.max_generation_steps,
        ..Default::default()
    };
    let res = generate(&lira, &s.image, &instr, &opts)?;
    let gt = &s.masks[0];
    let pred = res
        .binary_masks
        .first()
        .cloned()
        .unwrap_or_else(|| BinaryMask::empty(gt.height(), gt.width()));
    let ov = overlap(&pred, gt)?;

    let (mut correct, mut tokens) = (0, 0);
    if cfg.ilvc_enabled {
        let desc = s
            .record
            .regions
            .iter()
            .map(|r| vocab.encode(&r.description))
            .collect::<Result<Vec<_>>>()?;
        let p = Prepared::new(store, m, s.record.id.clone(), s.image.clone(), s.masks.clone(), instr, desc, true)?;
        let mut tape = Tape::new();
        let l = sample_loss_on(&mut tape, store, m, &cfg.loss, &p, false)?;
        let logits = tape.value(l.lm.logits);
        for (row, t) in description_targets(&l.sequence) {
            tokens += 1;
            correct += (lm::argmax(logits.row(row)) == t) as usize;
        }
    }
    Ok(SampleEval {
        overlap: ov,
        correct,
        tokens,
        protocol_error: res.protocol_error.is_some(),
        truncated: res.truncated,
    })
}

/// Runs `f` over `items`, on scoped threads when `parallel`. Results keep
/// the input order.
fn map_samples<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if !parallel || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Referring segmentation on the single-region samples of `split`.
pub fn evaluate_refseg(store: &ParamStore, cfg: &RunConfig, vocab: &Vocab, split: &Split) -> Result<RefsegReport> {
    let samples: Vec<&LoadedSample> = split
        .samples
        .iter()
        .filter(|s| s.record.task == Task::Refseg && s.masks.len() == 1)
        .collect();
    let evals = map_samples(&samples, cfg.parallel_eval, |s| eval_one(store, cfg, vocab, s))?;
    let overlaps: Vec<Overlap> = evals.iter().map(|e| e.overlap).collect();
    let tokens: usize = evals.iter().map(|e| e.tokens).sum();
    let correct: usize = evals.iter().map(|e| e.correct).sum();
    Ok(RefsegReport {
        ilvc_enabled: cfg.ilvc_enabled,
        metrics: MetricReport::from_overlaps(&overlaps)?,
        token_accuracy: (cfg.ilvc_enabled && tokens > 0).then(|| correct as f64 / tokens as f64),
        description_tokens: tokens,
        protocol_errors: evals.iter().filter(|e| e.protocol_error).count(),
        truncated: evals.iter().filter(|e| e.truncated).count(),
    })
}

/// Seg state of `<seg>` appended right after the referring prompt.
pub fn referring_seg_state(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    img: &ImageBuffer,
    description: &str,
    ilvc: bool,
) -> Result<lm::SegState> {
    let (f_g, _) = Sefe::new(store, cfg).forward(img)?;
    let mut seq = build_inference_prefix(&f_g, &instruction(vocab, Task::Refseg, ilvc, description)?);
    seq.push_seg(false);
    let out = lm::forward(store, cfg, &seq)?;
    Ok(out.seg_states.into_iter().next().expect("one seg pushed"))
}

/// Yes if the `yes` logit beats the `no` logit after the question prompt.
pub fn answer_question(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    img: &ImageBuffer,
    question: &str,
    ilvc: bool,
) -> Result<Answer> {
    let (f_g, _) = Sefe::new(store, cfg).forward(img)?;
    let seq = build_inference_prefix(&f_g, &instruction(vocab, Task::Vqa, ilvc, question)?);
    let out = lm::forward(store, cfg, &seq)?;
    let l = out.last_logits();
    Ok(if l[vocab.id("yes")?] > l[vocab.id("no")?] {
        Answer::Yes
    } else {
        Answer::No
    })
}

pub fn evaluate_attr(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocab,
    probes: &[AttrProbe],
    split_dir: &Path,
) -> Result<AttrReport> {
    let m = &cfg.model;
    let per_probe = map_samples(probes, cfg.parallel_eval, |p| {
        let img = ImageBuffer::load_ppm(&split_dir.join(&p.image))?;
        let pos = answer_question(store, m, vocab, &img, &p.positive_question, cfg.ilvc_enabled)?;
        let neg = answer_question(store, m, vocab, &img, &p.negative_question, cfg.ilvc_enabled)?;
        let seg = referring_seg_state(store, m, vocab, &img, &p.description, cfg.ilvc_enabled)?;
        Ok((p.id(), (pos, neg), seg))
    })?;
    let mut answers = BTreeMap::new();
    let mut states = BTreeMap::new();
    for (id, a, s) in per_probe {
        answers.insert(id.clone(), a);
        states.insert(id, s);
    }
    let (acc1, acc3) = score_logits(probes, &states, vocab)?;
    Ok(AttrReport {
        vqa_acc: score_vqa(probes, &answers)?,
        acc1,
        acc3,
        n: probes.len(),
    })
}

/// A random image with `regions` rectangular masks and two-token
/// descriptions, sized for `cfg`.
pub fn toy_sample(store: &ParamStore, cfg: &ModelConfig, ilvc: bool, regions: usize, seed: u64) -> Result<Prepared> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let img = ImageBuffer::new(n, n, (0..n * n * 3).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let mut masks = Vec::with_capacity(regions);
    for _ in 0..regions {
        let (r0, c0) = (rng.gen_range(0..n - 2), rng.gen_range(0..n - 2));
        let (r1, c1) = (rng.gen_range(r0 + 2..=n), rng.gen_range(c0 + 2..=n));
        masks.push(BinaryMask::from_fn(n, n, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c)));
    }
    let descriptions = (0..regions).map(|_| vec![rng.gen_range(6..cfg.vocab_size), rng.gen_range(6..cfg.vocab_size)]).collect();
    let instruction = (0..3).map(|_| rng.gen_range(6..cfg.vocab_size)).collect();
    Prepared::new(store, cfg, format!("toy{seed}"), img, masks, instruction, descriptions, ilvc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub heads: usize,
    pub lm_layers: usize,
    pub ilvc: bool,
    pub regions: usize,
    pub loss: f64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub cases: Vec<GradCase>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Checks full-loss gradients of every parameter (encoders included) on
/// `n` toy configurations that vary attention heads, depth, local
/// coupling and region count.
pub fn grad_check_suite(n: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradSuiteReport> {
    let loss_cfg = LossConfig::default();
    let mut cases = Vec::with_capacity(n);
    for k in 0..n {
        let enc_heads = [1, 2][(k / 4) % 2];
        let cfg = ModelConfig {
            heads: [1, 2][k % 2],
            enc_heads,
            pixel_dim: [5, 4][enc_heads - 1],
            lm_layers: 1 + (k / 2) % 2,
            ..ModelConfig::tiny()
        };
        let ilvc = k % 3 != 2;
        let regions = k % 3;
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        let store = init_model(&cfg, case_seed);
        let sample = toy_sample(&store, &cfg, ilvc, regions, case_seed ^ 0x5eed)?;
        let (report, grads) = sample_gradients(&store, &cfg, &loss_cfg, &sample, true)?;
        let check = grad_check(
            &store,
            &grads,
            &GradCheckOptions { seed: case_seed, ..*opts },
            |s| sample_loss(s, &cfg, &loss_cfg, &sample, true),
        )?;
        cases.push(GradCase {
            heads: cfg.heads,
            lm_layers: cfg.lm_layers,
            ilvc,
            regions,
            loss: report.total,
            report: check,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        checked: cases.iter().map(|c| c.report.checked).sum(),
        passed: !cases.is_empty() && cases.iter().all(|c| c.report.passed),
        max_rel_err,
        cases,
    })
}
