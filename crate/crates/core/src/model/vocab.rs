use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Words used for payload and answer content in the synthetic tasks.
const WORDS: [&str; 46] = [
    "apple", "brick", "cloud", "delta", "ember", "frost", "grape", "harbor", "ivory", "jade",
    "kite", "lemon", "maple", "nectar", "olive", "pearl", "quartz", "river", "stone", "tiger",
    "umber", "violet", "willow", "xenon", "yarrow", "zephyr", "amber", "birch", "cedar", "dune",
    "eagle", "fern", "glade", "heron", "iris", "juniper", "kelp", "lotus", "moss", "north", "opal",
    "pine", "quill", "reed", "sage", "thorn",
];

/// Token inventory shared by the model and the synthetic tasks.
///
/// Layout of the built-in vocabulary (size 64):
///
/// | ids     | tokens                                  |
/// |---------|-----------------------------------------|
/// | 0       | `<mask>`                                |
/// | 1       | `<eos>`                                 |
/// | 2       | `<sep>`                                 |
/// | 3..=5   | task markers `<copy>`, `<add>`, `<qa>`  |
/// | 6, 7    | `+`, `.`                                |
/// | 8..=17  | digits `0`..`9`                         |
/// | 18..=63 | content words                           |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    mask_id: TokenId,
    eos_id: TokenId,
}

pub const MASK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const COPY: TokenId = 3;
pub const ADD: TokenId = 4;
pub const QA: TokenId = 5;
pub const PLUS: TokenId = 6;
pub const PERIOD: TokenId = 7;
pub const DIGIT_BASE: TokenId = 8;
pub const WORD_BASE: TokenId = 18;
pub const NUM_WORDS: usize = WORDS.len();

impl Default for Vocabulary {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl Vocabulary {
    /// The built-in 64-token vocabulary.
    pub fn synthetic() -> Self {
        Self {
            size: WORD_BASE as usize + NUM_WORDS,
            mask_id: MASK,
            eos_id: EOS,
        }
    }

    /// A vocabulary with custom reserved ids, used by scripted oracles.
    pub fn new(size: usize, mask_id: TokenId, eos_id: TokenId) -> Result<Self> {
        if mask_id == eos_id {
            return Err(Error::invalid("mask and eos ids must differ"));
        }
        if mask_id as usize >= size || eos_id as usize >= size {
            return Err(Error::invalid(
                "reserved ids must be below the vocabulary size",
            ));
        }
        Ok(Self {
            size,
            mask_id,
            eos_id,
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    #[inline]
    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn digit(d: u32) -> TokenId {
        debug_assert!(d < 10);
        DIGIT_BASE + d
    }

    pub fn word(i: usize) -> TokenId {
        WORD_BASE + (i % NUM_WORDS) as TokenId
    }

    /// Text form of a token id.
    pub fn token_text(&self, id: TokenId) -> String {
        match id {
            MASK => "<mask>".into(),
            EOS => "<eos>".into(),
            SEP => "<sep>".into(),
            COPY => "<copy>".into(),
            ADD => "<add>".into(),
            QA => "<qa>".into(),
            PLUS => "+".into(),
            PERIOD => ".".into(),
            d if (DIGIT_BASE..DIGIT_BASE + 10).contains(&d) => (d - DIGIT_BASE).to_string(),
            w if (w as usize) < self.size
                && w >= WORD_BASE
                && ((w - WORD_BASE) as usize) < NUM_WORDS =>
            {
                WORDS[(w - WORD_BASE) as usize].into()
            }
            other => format!("<{other}>"),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token_text(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses whitespace-separated token text. Unknown ids may be written `<N>`.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|piece| self.lookup(piece))
            .collect()
    }

    fn lookup(&self, piece: &str) -> Result<TokenId> {
        let id = match piece {
            "<mask>" => MASK,
            "<eos>" => EOS,
            "<sep>" => SEP,
            "<copy>" => COPY,
            "<add>" => ADD,
            "<qa>" => QA,
            "+" => PLUS,
            "." => PERIOD,
            p if p.len() == 1 && p.as_bytes()[0].is_ascii_digit() => {
                DIGIT_BASE + (p.as_bytes()[0] - b'0') as TokenId
            }
            p => {
                if let Some(i) = WORDS.iter().position(|w| *w == p) {
                    WORD_BASE + i as TokenId
                } else if let Some(n) = p.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
                    n.parse()
                        .map_err(|_| Error::invalid(format!("unknown token {p:?}")))?
                } else {
                    return Err(Error::invalid(format!("unknown token {p:?}")));
                }
            }
        };
        if id as usize >= self.size {
            return Err(Error::invalid(format!(
                "token {piece:?} outside vocabulary"
            )));
        }
        Ok(id)
    }
}
