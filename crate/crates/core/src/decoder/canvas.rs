use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Prompt tokens followed by generation slots.
///
/// Positions below `prompt_len` are never masked; masked positions hold the
/// mask id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    prompt_len: usize,
    mask_id: TokenId,
}

impl Canvas {
    /// Builds `prompt ++ [mask; l_new]`.
    pub fn new(prompt: &[TokenId], l_new: usize, mask_id: TokenId) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must contain at least one token"));
        }
        if l_new == 0 {
            return Err(Error::invalid("at least one generation slot is required"));
        }
        if prompt.contains(&mask_id) {
            return Err(Error::invalid("prompt contains the mask token"));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + l_new, mask_id);
        let mut masked = vec![false; prompt.len()];
        masked.resize(prompt.len() + l_new, true);
        Ok(Self {
            tokens,
            masked,
            prompt_len: prompt.len(),
            mask_id,
        })
    }

    /// Assembles a canvas from explicit parts (training inputs, tests).
    pub fn from_parts(
        tokens: Vec<TokenId>,
        masked: Vec<bool>,
        prompt_len: usize,
        mask_id: TokenId,
    ) -> Result<Self> {
        if tokens.len() != masked.len() {
            return Err(Error::shape("tokens and mask flags differ in length"));
        }
        if prompt_len == 0 || prompt_len > tokens.len() {
            return Err(Error::invalid("prompt length out of range"));
        }
        if masked[..prompt_len].iter().any(|&m| m) {
            return Err(Error::invalid("prompt positions cannot be masked"));
        }
        for (t, &m) in tokens.iter().zip(&masked) {
            if m != (*t == mask_id) {
                return Err(Error::invalid("mask flags disagree with mask tokens"));
            }
        }
        Ok(Self {
            tokens,
            masked,
            prompt_len,
            mask_id,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Number of generation slots (`L_c - L_p`).
    pub fn generation_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// Commits `token` at a currently masked position.
    pub(crate) fn unmask(&mut self, position: usize, token: TokenId) {
        debug_assert!(self.masked[position]);
        debug_assert_ne!(token, self.mask_id);
        self.tokens[position] = token;
        self.masked[position] = false;
    }

    /// Drops trailing positions so the canvas has `target` total length.
    ///
    /// Every removed position must still be masked and at least one
    /// generation slot must remain.
    pub fn crop(&self, target: usize) -> Result<Canvas> {
        if target <= self.prompt_len {
            return Err(Error::invalid(format!(
                "crop target {target} leaves no generation slot after a {}-token prompt",
                self.prompt_len
            )));
        }
        if target > self.len() {
            return Err(Error::invalid(format!(
                "crop target {target} exceeds canvas length {}",
                self.len()
            )));
        }
        if let Some(p) = (target..self.len()).find(|&p| !self.masked[p]) {
            return Err(Error::invalid(format!(
                "crop to {target} would remove unmasked position {p}"
            )));
        }
        Ok(Canvas {
            tokens: self.tokens[..target].to_vec(),
            masked: self.masked[..target].to_vec(),
            prompt_len: self.prompt_len,
            mask_id: self.mask_id,
        })
    }
}
