//! Training: Adam with an inverse-square-root learning-rate schedule,
//! deterministic token-budget batching, periodic checkpointing, and the
//! pretrain-finetune initialization path.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Reduction};
use crate::bpe::SubwordSentence;
use crate::checkpoint::{Checkpoint, OPT_PREFIX};
use crate::corpus::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{DropoutCtx, Su4mtModel};
use crate::nn::Parameters;
use crate::tensor::{Scalar, Tensor};
use crate::wpe::SpanSet;

/// One id-encoded sentence pair ready for the model. `tgt` carries neither
/// BOS nor EOS.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub src: Vec<u32>,
    pub spans: SpanSet,
    pub tgt: Vec<u32>,
}

/// Encodes segmented parallel text into id examples; spans must align with
/// the source subword lengths.
pub fn encode_corpus(
    src: &[SubwordSentence],
    spans: &[SpanSet],
    tgt: &[SubwordSentence],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<TrainingExample>> {
    if src.len() != tgt.len() || src.len() != spans.len() {
        return Err(Error::SpanMismatch(format!(
            "{} source sentences, {} span sets, {} target sentences",
            src.len(),
            spans.len(),
            tgt.len()
        )));
    }
    src.iter()
        .zip(spans)
        .zip(tgt)
        .map(|((s, sp), t)| {
            if sp.sentence_len() != s.len() {
                return Err(Error::SpanMismatch(format!(
                    "spans cover {} subwords, sentence has {}",
                    sp.sentence_len(),
                    s.len()
                )));
            }
            Ok(TrainingExample {
                src: s.subwords().iter().map(|w| src_vocab.id(w)).collect(),
                spans: sp.clone(),
                tgt: t.subwords().iter().map(|w| tgt_vocab.id(w)).collect(),
            })
        })
        .collect()
}

/// A padded batch: id matrices, padding masks, and per-sentence span sets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub spans: Vec<SpanSet>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample]) -> Self {
        let max_src = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let max_tgt = examples.iter().map(|e| e.tgt.len()).max().unwrap_or(0);
        let pad_to = |ids: &[u32], width: usize| {
            let mut row = ids.to_vec();
            row.resize(width, PAD);
            let mut mask = vec![true; ids.len()];
            mask.resize(width, false);
            (row, mask)
        };
        let mut batch = Batch {
            src: Vec::with_capacity(examples.len()),
            tgt: Vec::with_capacity(examples.len()),
            src_mask: Vec::with_capacity(examples.len()),
            tgt_mask: Vec::with_capacity(examples.len()),
            spans: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let (s, sm) = pad_to(&e.src, max_src);
            let (t, tm) = pad_to(&e.tgt, max_tgt);
            batch.src.push(s);
            batch.src_mask.push(sm);
            batch.tgt.push(t);
            batch.tgt_mask.push(tm);
            batch.spans.push(e.spans.clone());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Unpadded views recovered through the masks.
    pub fn examples(&self) -> impl Iterator<Item = (&[u32], &SpanSet, &[u32])> {
        (0..self.len()).map(move |i| {
            let s_len = self.src_mask[i].iter().filter(|&&m| m).count();
            let t_len = self.tgt_mask[i].iter().filter(|&&m| m).count();
            (&self.src[i][..s_len], &self.spans[i], &self.tgt[i][..t_len])
        })
    }

    /// Target positions the loss will see (EOS included).
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask
            .iter()
            .map(|m| m.iter().filter(|&&x| x).count() + 1)
            .sum()
    }
}

/// `lr(step) = peak * min(step / warmup, sqrt(warmup / step))`; the peak is
/// reached exactly at the warmup step.
pub fn schedule_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    assert!(step >= 1, "schedule is 1-based");
    let warmup = warmup.max(1) as f64;
    let step = step as f64;
    peak * (step / warmup).min((warmup / step).sqrt())
}

/// Adam state: first/second moments per parameter (in parameter order) plus
/// the step count and schedule settings.
#[derive(Clone, Debug)]
pub struct OptimState<F> {
    names: Vec<String>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    pub step: u64,
    pub peak_lr: f64,
    pub warmup: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-8;

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &Parameters<F>, peak_lr: f64, warmup: u64) -> Self {
        let names = params.iter().map(|(n, _)| n.to_owned()).collect();
        let zeros: Vec<Tensor<F>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimState {
            names,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            peak_lr,
            warmup,
        }
    }

    /// One Adam update with bias correction; `grads` must be in parameter
    /// order.
    pub fn apply(&mut self, params: &mut Parameters<F>, grads: &[Tensor<F>]) {
        assert_eq!(grads.len(), self.names.len(), "gradient count");
        self.step += 1;
        let lr = schedule_lr(self.peak_lr, self.warmup, self.step);
        let b1 = F::from_f64(BETA1);
        let b2 = F::from_f64(BETA2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - BETA1.powi(self.step as i32));
        let bias2 = F::from_f64(1.0 - BETA2.powi(self.step as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(ADAM_EPS);
        for (i, name) in self.names.iter().enumerate() {
            let g = &grads[i];
            let p = params.get_mut(name).expect("parameter set changed");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g.data()[j];
                let mj = b1 * m.data()[j] + (one - b1) * gj;
                let vj = b2 * v.data()[j] + (one - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = (mj / bias1) / ((vj / bias2).sqrt() + eps);
                p.data_mut()[j] -= lr * update;
            }
        }
    }

    /// Serializes moments into a checkpoint under `opt.` names, for the
    /// parameters the checkpoint carries.
    pub fn store(&self, ckpt: &mut Checkpoint) {
        for (i, name) in self.names.iter().enumerate() {
            if ckpt.get(name).is_none() {
                continue;
            }
            ckpt.push(format!("{OPT_PREFIX}m.{name}"), self.m[i].cast::<f32>());
            ckpt.push(format!("{OPT_PREFIX}v.{name}"), self.v[i].cast::<f32>());
        }
    }

    /// Restores moments and the step count saved by [`OptimState::store`].
    /// Parameters absent from the checkpoint keep zero moments; a model
    /// array without matching moments is an error (an averaged checkpoint,
    /// for instance, cannot resume training).
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let m = ckpt.get(&format!("{OPT_PREFIX}m.{name}"));
            let v = ckpt.get(&format!("{OPT_PREFIX}v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.shape() != self.m[i].shape() {
                        return Err(Error::CheckpointMismatch(format!(
                            "optimizer shape for {name}: {:?} vs {:?}",
                            m.shape(),
                            self.m[i].shape()
                        )));
                    }
                    self.m[i] = m.cast::<F>();
                    self.v[i] = v.cast::<F>();
                }
                _ if ckpt.get(name).is_some() => {
                    return Err(Error::CheckpointMismatch(format!(
                        "missing optimizer state for {name}"
                    )));
                }
                _ => {}
            }
        }
        self.step = ckpt.step;
        Ok(())
    }
}

/// Training-run settings.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub batch_tokens: usize,
    pub max_steps: u64,
    /// Stop once an epoch's mean per-token loss falls below this; 0
    /// disables early stopping.
    pub stop_loss: f64,
    pub smoothing: f64,
    pub seed: u64,
    /// Checkpoint every N steps; 0 means once per epoch.
    pub ckpt_every_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 7e-4,
            warmup: 100,
            batch_tokens: 1024,
            max_steps: 1000,
            stop_loss: 0.0,
            smoothing: 0.0,
            seed: 1,
            ckpt_every_steps: 0,
        }
    }
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub epochs: u64,
    /// Mean per-token loss of each optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean per-token loss over the final completed epoch.
    pub final_epoch_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Deterministic epoch batching: example order is shuffled by a stream
/// derived from (seed, epoch), then greedily grouped under the token
/// budget.
pub fn epoch_batches(examples: &[TrainingExample], seed: u64, epoch: u64, batch_tokens: usize) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch.wrapping_mul(0xD1B5_4A32_D192_ED03)),
    );
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut current: Vec<TrainingExample> = Vec::new();
    let mut tokens = 0usize;
    for idx in order {
        let e = &examples[idx];
        let cost = e.src.len() + e.tgt.len() + 1;
        if !current.is_empty() && tokens + cost > batch_tokens {
            batches.push(Batch::from_examples(&current));
            current.clear();
            tokens = 0;
        }
        current.push(e.clone());
        tokens += cost;
    }
    if !current.is_empty() {
        batches.push(Batch::from_examples(&current));
    }
    batches
}

/// One optimizer step over a batch. Returns the mean per-token loss seen
/// before the update.
pub fn train_step<F: Scalar>(
    model: &mut Su4mtModel<F>,
    opt: &mut OptimState<F>,
    batch: &Batch,
    smoothing: f64,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let mut ctx = DropoutCtx::for_step(model.config.dropout, seed, opt.step);
    let mut total: Option<crate::autograd::Var> = None;
    let mut tokens = 0usize;
    for (src, spans, tgt) in batch.examples() {
        let (loss, t) = model.build_pair_loss(&mut g, &bound, src, spans, tgt, smoothing, &mut ctx)?;
        tokens += t;
        total = Some(match total {
            Some(acc) => g.add(acc, loss),
            None => loss,
        });
    }
    let total = total.ok_or(Error::EmptyCorpus)?;
    let mean = g.scale(total, F::from_f64(1.0 / tokens as f64));
    let loss_value = g.value(mean).data()[0].as_f64();
    let grads = g.backward(mean);
    let ordered: Vec<Tensor<F>> = bound.iter().map(|(_, var)| grads.get(var).clone()).collect();
    opt.apply(&mut model.params, &ordered);
    Ok(loss_value)
}

/// Mean per-token loss over a whole corpus without updating parameters
/// (dropout disabled).
pub fn evaluate_loss<F: Scalar>(
    model: &Su4mtModel<F>,
    examples: &[TrainingExample],
    smoothing: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for e in examples {
        let mut g = Graph::inference();
        let bound = model.params.bind(&mut g);
        let mut ctx = DropoutCtx::disabled();
        let (loss, t) =
            model.build_pair_loss(&mut g, &bound, &e.src, &e.spans, &e.tgt, smoothing, &mut ctx)?;
        total += g.value(loss).data()[0].as_f64();
        tokens += t;
    }
    Ok(total / tokens as f64)
}

/// Runs the training loop. When `resume` is given, optimizer state and the
/// step counter are restored and the run continues exactly where the
/// interrupted one would have been (batch order is a pure function of seed,
/// epoch and step).
pub fn train<F: Scalar>(
    model: &mut Su4mtModel<F>,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = OptimState::new(&model.params, cfg.peak_lr, cfg.warmup);
    if let Some(ckpt) = resume {
        ckpt.load_into(model)?;
        opt.restore(ckpt)?;
    }

    let mut report = TrainReport {
        steps: opt.step,
        epochs: 0,
        step_losses: Vec::new(),
        final_epoch_loss: f64::INFINITY,
        checkpoints: Vec::new(),
    };
    let save = |model: &Su4mtModel<F>, opt: &OptimState<F>, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = out_dir {
            let mut ckpt = Checkpoint::from_model(model, opt.step);
            opt.store(&mut ckpt);
            let path = dir.join(format!("checkpoint-{:06}.ckpt", opt.step));
            ckpt.save(&path)?;
            if report.checkpoints.last() != Some(&path) {
                report.checkpoints.push(path);
            }
        }
        Ok(())
    };

    let mut global_step = 0u64;
    'outer: for epoch in 0.. {
        let batches = epoch_batches(examples, cfg.seed, epoch, cfg.batch_tokens);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        let mut ran_any = false;
        for batch in &batches {
            if global_step < opt.step {
                // Replaying the schedule up to the resume point.
                global_step += 1;
                continue;
            }
            if opt.step >= cfg.max_steps {
                break 'outer;
            }
            let loss = train_step(model, &mut opt, batch, cfg.smoothing, cfg.seed)?;
            global_step += 1;
            ran_any = true;
            let tokens = batch.target_tokens();
            epoch_loss += loss * tokens as f64;
            epoch_tokens += tokens;
            report.step_losses.push(loss);
            if cfg.ckpt_every_steps > 0 && opt.step % cfg.ckpt_every_steps == 0 {
                save(model, &opt, &mut report)?;
            }
        }
        report.epochs = epoch + 1;
        if ran_any {
            report.final_epoch_loss = epoch_loss / epoch_tokens as f64;
            if cfg.ckpt_every_steps == 0 {
                save(model, &opt, &mut report)?;
            }
            if cfg.stop_loss > 0.0 && report.final_epoch_loss < cfg.stop_loss {
                break;
            }
        }
        if opt.step >= cfg.max_steps {
            break;
        }
    }
    save(model, &opt, &mut report)?;
    report.steps = opt.step;
    Ok(report)
}

/// Label-smoothed cross entropy as a standalone value (no graph kept).
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    pad: u32,
    smoothing: f64,
    reduction: Reduction,
) -> Result<F> {
    let mut g = Graph::inference();
    let l = g.leaf(logits.clone());
    let loss = g.cross_entropy(l, targets, pad, smoothing, reduction)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputMode, ModelConfig};
    use approx::assert_relative_eq;

    fn tiny_model(mode: InputMode, dropout: f64, seed: u64) -> Su4mtModel<f32> {
        let mut cfg = ModelConfig::desk(16, 16);
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.heads = 2;
        cfg.asf_heads = 2;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        cfg.dropout = dropout;
        cfg.input_mode = mode;
        Su4mtModel::init(cfg, seed).unwrap()
    }

    fn toy_examples(n: usize) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| {
                let a = 4 + (i % 6) as u32;
                let b = 4 + ((i / 6) % 6) as u32;
                TrainingExample {
                    src: vec![a, b, 4 + ((i / 36) % 6) as u32],
                    spans: SpanSet::singletons(3),
                    tgt: vec![b, a],
                }
            })
            .collect()
    }

    #[test]
    fn uniform_predictor_loses_ln_v() {
        let vocab = 11;
        let t = 4;
        let logits = Tensor::<f64>::zeros(vec![t, vocab]);
        let loss = cross_entropy(&logits, &[4, 5, 6, 7], PAD, 0.0, Reduction::Sum).unwrap();
        assert_relative_eq!(loss, t as f64 * (vocab as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn one_hot_predictor_loses_nothing() {
        let vocab = 6;
        let mut logits = Tensor::<f64>::zeros(vec![2, vocab]);
        logits.data_mut()[4] = 1000.0;
        logits.data_mut()[vocab + 5] = 1000.0;
        let loss = cross_entropy(&logits, &[4, 5], PAD, 0.0, Reduction::Sum).unwrap();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn quarter_probability_two_class_case() {
        // Two classes with p(correct) = 0.25: logits (0, ln 3).
        let logits = Tensor::from_rows(&[&[3.0f64.ln(), 0.0f64]]);
        let loss = cross_entropy(&logits, &[1], PAD, 0.0, Reduction::Sum).unwrap();
        assert_relative_eq!(loss, -(0.25f64.ln()) * 1.0, epsilon = 1e-12);
        assert_relative_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn all_pad_target_is_an_error() {
        let logits = Tensor::<f64>::zeros(vec![2, 5]);
        assert!(matches!(
            cross_entropy(&logits, &[PAD, PAD], PAD, 0.0, Reduction::Sum),
            Err(Error::AllPadTarget)
        ));
    }

    #[test]
    fn loss_matches_independent_recount() {
        // Naive f64 recomputation along a different code path.
        let data: Vec<f64> = (0..3 * 7).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let logits = Tensor::from_vec(vec![3, 7], data.clone()).unwrap();
        let targets = [2u32, 6, 3];
        let got = cross_entropy(&logits, &targets, PAD, 0.0, Reduction::Sum).unwrap();
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * 7..(i + 1) * 7];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[t as usize].exp() / z).ln();
        }
        assert_relative_eq!(got, want, epsilon = 1e-6);
    }

    #[test]
    fn schedule_peaks_exactly_at_warmup() {
        let peak = 7e-4;
        let warmup = 50;
        assert_relative_eq!(schedule_lr(peak, warmup, warmup), peak, epsilon = 1e-18);
        let mut last = 0.0;
        for step in 1..=warmup {
            let lr = schedule_lr(peak, warmup, step);
            assert!(lr > last, "warmup must increase");
            last = lr;
        }
        for step in warmup + 1..warmup + 40 {
            let lr = schedule_lr(peak, warmup, step);
            assert!(lr < last, "decay must decrease");
            last = lr;
        }
    }

    #[test]
    fn fresh_model_loss_is_near_ln_vocab() {
        let model = tiny_model(InputMode::TokenSemantic, 0.0, 3);
        let examples = toy_examples(8);
        let loss = evaluate_loss(&model, &examples, 0.0).unwrap();
        let ln_v = (model.config.tgt_vocab as f64).ln();
        assert!(
            (loss - ln_v).abs() < 1.5,
            "initial loss {loss} too far from ln V = {ln_v}"
        );
    }

    #[test]
    fn batches_are_deterministic_and_budgeted() {
        let examples = toy_examples(40);
        let a = epoch_batches(&examples, 9, 0, 24);
        let b = epoch_batches(&examples, 9, 0, 24);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.src, y.src);
            assert_eq!(x.tgt, y.tgt);
        }
        let other_epoch = epoch_batches(&examples, 9, 1, 24);
        assert!(a.iter().zip(&other_epoch).any(|(x, y)| x.src != y.src));
        let total: usize = a.iter().map(Batch::len).sum();
        assert_eq!(total, 40);
        for batch in &a {
            let tokens: usize = batch
                .examples()
                .map(|(s, _, t)| s.len() + t.len() + 1)
                .sum();
            assert!(batch.len() == 1 || tokens <= 24);
        }
    }

    #[test]
    fn batch_masks_match_pad_positions() {
        let examples = vec![
            TrainingExample {
                src: vec![4, 5, 6, 7],
                spans: SpanSet::singletons(4),
                tgt: vec![4],
            },
            TrainingExample {
                src: vec![8],
                spans: SpanSet::singletons(1),
                tgt: vec![5, 6, 7],
            },
        ];
        let batch = Batch::from_examples(&examples);
        for i in 0..batch.len() {
            for (j, &m) in batch.src_mask[i].iter().enumerate() {
                assert_eq!(m, j < examples[i].src.len());
                if !m {
                    assert_eq!(batch.src[i][j], PAD);
                }
            }
        }
        let views: Vec<_> = batch.examples().collect();
        assert_eq!(views[0].0, &examples[0].src[..]);
        assert_eq!(views[1].2, &examples[1].tgt[..]);
        assert_eq!(batch.target_tokens(), 1 + 1 + 3 + 1);
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut model = tiny_model(InputMode::TokenSemantic, 0.0, 5);
        let examples = toy_examples(24);
        let before = evaluate_loss(&model, &examples, 0.0).unwrap();
        let cfg = TrainConfig {
            max_steps: 30,
            warmup: 10,
            batch_tokens: 64,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &examples, &cfg, None, None).unwrap();
        assert_eq!(report.steps, 30);
        let after = evaluate_loss(&model, &examples, 0.0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let examples = toy_examples(20);
        let cfg_full = TrainConfig {
            max_steps: 8,
            warmup: 4,
            batch_tokens: 48,
            seed: 11,
            ..TrainConfig::default()
        };
        // Dropout on, to prove the per-step streams replay identically.
        let mut full = tiny_model(InputMode::TokenSemantic, 0.1, 21);
        let full_report = train(&mut full, &examples, &cfg_full, None, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = tiny_model(InputMode::TokenSemantic, 0.1, 21);
        let cfg_half = TrainConfig {
            max_steps: 5,
            ckpt_every_steps: 5,
            ..cfg_full.clone()
        };
        train(&mut first, &examples, &cfg_half, Some(dir.path()), None).unwrap();
        let ckpt = Checkpoint::load(dir.path().join("checkpoint-000005.ckpt")).unwrap();

        let mut resumed = tiny_model(InputMode::TokenSemantic, 0.1, 99);
        let resumed_report = train(&mut resumed, &examples, &cfg_full, None, Some(&ckpt)).unwrap();
        assert_eq!(resumed_report.steps, 8);
        assert_eq!(resumed_report.step_losses.len(), 3);
        for (a, b) in full_report.step_losses[5..]
            .iter()
            .zip(&resumed_report.step_losses)
        {
            assert_eq!(a, b, "resumed losses diverge");
        }
        for ((_, pa), (_, pb)) in full.params.iter().zip(resumed.params.iter()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn finetune_init_keeps_baseline_and_refreshes_fusion() {
        // Pretrain-style baseline checkpoint.
        let mut base = tiny_model(InputMode::TokenOnly, 0.0, 31);
        let examples = toy_examples(12);
        let cfg = TrainConfig {
            max_steps: 3,
            batch_tokens: 64,
            ..TrainConfig::default()
        };
        train(&mut base, &examples, &cfg, None, None).unwrap();
        let ckpt = Checkpoint::from_model(&base, 3);

        let mut fine = tiny_model(InputMode::TokenSemantic, 0.0, 77);
        let fresh_fusion: Vec<(String, Vec<f32>)> = fine
            .params
            .iter()
            .filter(|(n, _)| Su4mtModel::<f32>::is_fusion_param(n))
            .map(|(n, t)| (n.to_owned(), t.data().to_vec()))
            .collect();
        ckpt.load_into(&mut fine).unwrap();
        for (name, tensor) in fine.params.iter() {
            if Su4mtModel::<f32>::is_fusion_param(name) {
                let (_, fresh) = fresh_fusion.iter().find(|(n, _)| n == name).unwrap();
                assert_eq!(tensor.data(), &fresh[..], "{name} must stay fresh");
            } else {
                assert_eq!(
                    tensor.data(),
                    ckpt.get(name).unwrap().data(),
                    "{name} must be bit-identical to the checkpoint"
                );
            }
        }
    }
}
