//! Token vocabulary with greedy longest-match tokenization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type TokenId = usize;

/// Structural special tokens occupy the first six ids.
pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// The answer delimiter renders as literal text so the verifier can parse it.
pub const ANSWER: TokenId = 3;
pub const GUIDE_OPEN: TokenId = 4;
pub const GUIDE_CLOSE: TokenId = 5;

const SPECIAL_STRS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "Answer:", "<guide>", "</guide>"];

/// Ordered token list; token <-> id is a bijection by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build a vocabulary from the fixed specials plus `extra` symbols.
    /// Duplicate extras are a configuration error.
    pub fn build(extra: &[&str]) -> Result<Vocab> {
        let mut tokens: Vec<String> = SPECIAL_STRS.iter().map(|s| s.to_string()).collect();
        for &t in extra {
            if t.is_empty() {
                return Err(Error::Config("empty vocab token".into()));
            }
            if tokens.iter().any(|x| x == t) {
                return Err(Error::Config(format!("duplicate vocab token {t:?}")));
            }
            tokens.push(t.to_string());
        }
        Ok(Vocab { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, s: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == s)
    }

    /// Greedy longest-match tokenization. Structural specials never match
    /// ordinary text; an uncoverable character is a data error naming it.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Err(Error::Data("cannot tokenize empty text".into()));
        }
        // candidates sorted longest-first; answer delimiter participates,
        // bracket-named structural specials do not
        let mut cands: Vec<(usize, &str)> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(id, _)| *id == ANSWER || *id >= SPECIAL_STRS.len())
            .map(|(id, t)| (id, t.as_str()))
            .collect();
        cands.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let hit = cands.iter().find(|(_, t)| rest.starts_with(t));
            match hit {
                Some(&(id, t)) => {
                    out.push(id);
                    rest = &rest[t.len()..];
                }
                None => {
                    let ch = rest.chars().next().unwrap();
                    return Err(Error::Data(format!(
                        "character {ch:?} not covered by vocabulary"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Concatenate token strings; bracket-named structural specials render
    /// as nothing so generated text stays parseable.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let mut s = String::new();
        for &t in tokens {
            if t == ANSWER || t >= SPECIAL_STRS.len() {
                s.push_str(&self.tokens[t]);
            }
        }
        s
    }
}
