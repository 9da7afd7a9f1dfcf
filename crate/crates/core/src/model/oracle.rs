use super::transformer::DiffusionModel;
use super::vocab::{TokenId, Vocabulary};
use crate::decoder::Canvas;
use crate::error::{Error, Result};
use crate::neural::Matrix;

/// Anything that can score every canvas position against the vocabulary.
///
/// Implementations must return a `(canvas.len(), vocab.size())` matrix of
/// finite logits. Only rows at masked positions carry meaning for decoding.
pub trait LogitOracle: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn logits(&self, canvas: &Canvas) -> Result<Matrix>;
}

impl LogitOracle for DiffusionModel {
    fn vocab(&self) -> &Vocabulary {
        self.vocab()
    }

    fn logits(&self, canvas: &Canvas) -> Result<Matrix> {
        self.forward(canvas)
    }
}

impl DiffusionModel {
    /// One forward pass over the canvas.
    pub fn forward(&self, canvas: &Canvas) -> Result<Matrix> {
        self.forward_tokens(canvas.tokens())
    }
}

/// Stand-in for a log-probability of zero; finite, and far enough below any
/// real entry that its softmax weight underflows to exactly zero.
const LOG_ZERO: f64 = -1000.0;

/// Test double emitting a fixed EoS probability per generation slot.
///
/// At a masked position in slot `i` (0-based, counted from the end of the
/// prompt) the row puts probability `schedule[i]` on EoS and spreads the
/// rest uniformly over the filler tokens. Slots past the end of the
/// schedule use probability zero. Other rows are all-zero logits.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    vocab: Vocabulary,
    schedule: Vec<f64>,
    fillers: Vec<TokenId>,
}

impl ScriptedOracle {
    pub fn new(vocab: Vocabulary, schedule: Vec<f64>, fillers: Vec<TokenId>) -> Result<Self> {
        if let Some(p) = schedule.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!(
                "EoS probability {p} outside [0, 1]"
            )));
        }
        if fillers.is_empty() {
            return Err(Error::invalid(
                "scripted oracle needs at least one filler token",
            ));
        }
        for &f in &fillers {
            if f == vocab.eos_id() || f == vocab.mask_id() || f as usize >= vocab.size() {
                return Err(Error::invalid(format!("invalid filler token {f}")));
            }
        }
        let mut sorted = fillers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != fillers.len() {
            return Err(Error::invalid("duplicate filler tokens"));
        }
        Ok(Self {
            vocab,
            schedule,
            fillers,
        })
    }

    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    fn fill_row(&self, row: &mut [f64], eos_prob: f64) {
        row.iter_mut().for_each(|v| *v = LOG_ZERO);
        let ln = |p: f64| if p > 0.0 { p.ln() } else { LOG_ZERO };
        row[self.vocab.eos_id() as usize] = ln(eos_prob);
        let filler = ln((1.0 - eos_prob) / self.fillers.len() as f64);
        for &f in &self.fillers {
            row[f as usize] = filler;
        }
    }
}

impl LogitOracle for ScriptedOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, canvas: &Canvas) -> Result<Matrix> {
        let mut out = Matrix::zeros(canvas.len(), self.vocab.size());
        for pos in canvas.masked_positions() {
            let slot = pos - canvas.prompt_len();
            let p = self.schedule.get(slot).copied().unwrap_or(0.0);
            self.fill_row(out.row_mut(pos), p);
        }
        Ok(out)
    }
}
