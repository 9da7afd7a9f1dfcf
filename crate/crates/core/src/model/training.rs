use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::DiffusionModel;
use super::vocab::{TokenId, Vocabulary};
use crate::decoder::Canvas;
use crate::error::{Error, Result};
use crate::neural::{masked_cross_entropy, optimizer_step, OptimizerConfig};

/// A corrupted canvas, its clean targets, and the positions scored by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: Canvas,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

/// `prompt ++ answer ++ [eos; ...]` filled out to `canvas_len` positions.
pub fn padded_targets(
    prompt: &[TokenId],
    answer: &[TokenId],
    canvas_len: usize,
    eos_id: TokenId,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token"));
    }
    if prompt.len() + answer.len() > canvas_len {
        return Err(Error::invalid(format!(
            "prompt ({}) plus answer ({}) exceed canvas length {canvas_len}",
            prompt.len(),
            answer.len()
        )));
    }
    if prompt.len() == canvas_len {
        return Err(Error::invalid("canvas has no generation slot"));
    }
    let mut targets = Vec::with_capacity(canvas_len);
    targets.extend_from_slice(prompt);
    targets.extend_from_slice(answer);
    targets.resize(canvas_len, eos_id);
    Ok(targets)
}

/// Masks each response position independently with probability `ratio`.
/// The resulting loss mask may be empty.
pub fn corrupt<R: Rng + ?Sized>(
    targets: &[TokenId],
    prompt_len: usize,
    ratio: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<TrainingExample> {
    let mut tokens = targets.to_vec();
    let mut loss_mask = vec![false; targets.len()];
    for pos in prompt_len..targets.len() {
        if rng.gen::<f64>() < ratio {
            tokens[pos] = mask_id;
            loss_mask[pos] = true;
        }
    }
    let input = Canvas::from_parts(tokens, loss_mask.clone(), prompt_len, mask_id)?;
    Ok(TrainingExample {
        input,
        targets: targets.to_vec(),
        loss_mask,
    })
}

/// Builds one EoS-padded, randomly masked training example.
///
/// The mask ratio is drawn from (0, 1); a draw that masks nothing is
/// discarded and redrawn.
pub fn make_training_example<R: Rng + ?Sized>(
    prompt: &[TokenId],
    answer: &[TokenId],
    canvas_len: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TrainingExample> {
    let targets = padded_targets(prompt, answer, canvas_len, vocab.eos_id())?;
    loop {
        let ratio = loop {
            let t: f64 = rng.gen();
            if t > 0.0 {
                break t;
            }
        };
        let example = corrupt(&targets, prompt.len(), ratio, vocab.mask_id(), rng)?;
        if example.loss_mask.iter().any(|&m| m) {
            return Ok(example);
        }
    }
}

/// One prompt/answer pair, with the largest generation window to train it under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Draw each example's generation window uniformly from
    /// `[answer length, max_new]` instead of always using `max_new`.
    pub variable_length: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            variable_length: true,
            grad_clip: Some(1.0),
            optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

/// Trains `model` in place and returns the mean batch loss of every
/// optimiser step.
pub fn train(
    model: &mut DiffusionModel,
    corpus: &[TrainingItem],
    cfg: &TrainingConfig,
) -> Result<Vec<f64>> {
    train_with_progress(model, corpus, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(step, batch loss)` after each update.
pub fn train_with_progress<F>(
    model: &mut DiffusionModel,
    corpus: &[TrainingItem],
    cfg: &TrainingConfig,
    mut progress: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64),
{
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    cfg.optimizer.validate()?;
    let vocab = model.vocab().clone();
    for item in corpus {
        let limit = item.prompt.len() + item.max_new.max(item.answer.len());
        if item.max_new == 0 || limit > model.config().max_positions {
            return Err(Error::invalid(format!(
                "training item needs {limit} positions (max_new {})",
                item.max_new
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = cfg.optimizer.clone();
    let mut grads = model.params().clone();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &corpus[i];
                let min_new = item.answer.len().max(1);
                let l_new = if cfg.variable_length && item.max_new > min_new {
                    rng.gen_range(min_new..=item.max_new)
                } else {
                    item.max_new.max(min_new)
                };
                let canvas_len = item.prompt.len() + l_new;
                let example = make_training_example(
                    &item.prompt,
                    &item.answer,
                    canvas_len,
                    &vocab,
                    &mut rng,
                )?;
                let (logits, cache) = model.forward_cached(example.input.tokens())?;
                let (loss, dlogits) =
                    masked_cross_entropy(&logits, &example.targets, &example.loss_mask)?;
                model.backward(&cache, &dlogits, &mut grads);
                batch_loss += loss;
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            let step = history.len();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: batch_loss,
                });
            }
            grads.scale_grads(1.0 / n);
            if let Some(limit) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|p| p.grad.data().iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if !norm.is_finite() {
                    return Err(Error::Diverged { step, loss: norm });
                }
                if norm > limit {
                    grads.scale_grads(limit / norm);
                }
            }
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&grads)?;
            optimizer_step(params, &mut optimizer)?;
            history.push(batch_loss);
            progress(step, batch_loss);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic()
    }

    #[test]
    fn full_ratio_masks_every_response_slot() {
        let v = vocab();
        let targets = padded_targets(&[3, 20, 8], &[20, 20], 8, v.eos_id()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = corrupt(&targets, 3, 1.0, v.mask_id(), &mut rng).unwrap();
        assert_eq!(
            ex.loss_mask,
            vec![false, false, false, true, true, true, true, true]
        );
        assert!(ex.input.tokens()[3..].iter().all(|&t| t == v.mask_id()));
    }

    #[test]
    fn vanishing_ratio_can_leave_mask_empty_but_examples_never_are() {
        let v = vocab();
        let targets = padded_targets(&[3, 20], &[20], 4, v.eos_id()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = corrupt(&targets, 2, 1e-12, v.mask_id(), &mut rng).unwrap();
        assert!(ex.loss_mask.iter().all(|&m| !m));
        for _ in 0..200 {
            let ex = make_training_example(&[3, 20], &[20], 4, &v, &mut rng).unwrap();
            assert!(ex.loss_mask.iter().any(|&m| m));
        }
    }

    #[test]
    fn eos_padding_fills_the_tail() {
        let v = vocab();
        let prompt = [3, 20, 8, 11, 2];
        let answer = [20, 20, 20];
        let targets = padded_targets(&prompt, &answer, prompt.len() + 10, v.eos_id()).unwrap();
        assert_eq!(targets.iter().filter(|&&t| t == v.eos_id()).count(), 7);
        assert_eq!(&targets[5..8], &answer);
    }

    #[test]
    fn answer_too_long_is_rejected() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_training_example(&[3, 4], &[20; 5], 6, &v, &mut rng).is_err());
    }

    #[test]
    fn prompt_positions_never_masked() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prompt = [3, 21, 8, 13, 2];
        for _ in 0..1000 {
            let answer_len = rng.gen_range(1..10);
            let answer = vec![21; answer_len];
            let ex = make_training_example(&prompt, &answer, 16, &v, &mut rng).unwrap();
            assert!(ex.loss_mask[..5].iter().all(|&m| !m));
            assert_eq!(&ex.input.tokens()[..5], &prompt);
        }
    }

    fn small_model() -> DiffusionModel {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 16,
            vocab: vocab(),
        };
        DiffusionModel::new(cfg, 4).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut model = small_model();
        let before = model.params().clone();
        let corpus = vec![TrainingItem {
            prompt: vec![3, 20, 8, 10, 2],
            answer: vec![20, 20],
            max_new: 6,
        }];
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 1,
            optimizer: OptimizerConfig {
                learning_rate: 0.0,
                ..OptimizerConfig::default()
            },
            ..TrainingConfig::default()
        };
        let history = train(&mut model, &corpus, &cfg).unwrap();
        assert_eq!(history.len(), 3);
        for (a, b) in model.params().iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn memorises_a_single_example() {
        let mut model = small_model();
        let corpus = vec![TrainingItem {
            prompt: vec![3, 22, 8, 11, 2],
            answer: vec![22],
            max_new: 4,
        }];
        let cfg = TrainingConfig {
            epochs: 300,
            batch_size: 1,
            variable_length: false,
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
            ..TrainingConfig::default()
        };
        let history = train(&mut model, &corpus, &cfg).unwrap();
        let tail: f64 = history[history.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.1, "final smoothed loss {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![
            TrainingItem {
                prompt: vec![3, 22, 8, 11, 2],
                answer: vec![22],
                max_new: 4,
            },
            TrainingItem {
                prompt: vec![3, 25, 8, 12, 2],
                answer: vec![25, 25],
                max_new: 5,
            },
        ];
        let cfg = TrainingConfig {
            epochs: 4,
            batch_size: 2,
            seed: 17,
            ..TrainingConfig::default()
        };
        let mut a = small_model();
        let mut b = small_model();
        let ha = train(&mut a, &corpus, &cfg).unwrap();
        let hb = train(&mut b, &corpus, &cfg).unwrap();
        assert_eq!(ha, hb);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut model = small_model();
        assert!(train(&mut model, &[], &TrainingConfig::default()).is_err());
    }
}
