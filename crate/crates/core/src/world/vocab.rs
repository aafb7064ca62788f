//! Token vocabulary of the micro-language.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{WorldConfig, WorldError, WorldMode};

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;
pub const CHOSEN: Token = 4;
pub const REJECTED: Token = 5;
pub const SUM: Token = 6;
pub const HINT: Token = 7;

pub const SPECIALS: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<sep>", "<chosen>", "<rejected>", "<sum>", "<hint>"];

/// Maximum vocabulary size for any world.
pub const MAX_VOCAB: usize = 128;

/// Token ids for one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTokens {
    pub name: Token,
    pub hi: Token,
    pub lo: Token,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
    topics: Vec<Token>,
    ood_topics: Vec<Token>,
    prompts: Vec<Token>,
    attributes: Vec<AttributeTokens>,
    fillers: Vec<Token>,
}

impl Vocabulary {
    pub fn build(config: &WorldConfig) -> Result<Self, WorldError> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            topics: Vec::new(),
            ood_topics: Vec::new(),
            prompts: Vec::new(),
            attributes: Vec::new(),
            fillers: Vec::new(),
        };
        for s in SPECIALS {
            v.push(s)?;
        }
        for t in &config.topics {
            let id = v.push(t)?;
            v.topics.push(id);
        }
        for t in &config.ood_topics {
            let id = v.push(t)?;
            v.ood_topics.push(id);
        }
        match config.mode {
            WorldMode::Topic => {
                let id = v.push("talk_about_a_pet")?;
                v.prompts.push(id);
            }
            WorldMode::Attribute => {
                for q in 0..config.questions.max(1) {
                    let id = v.push(&format!("q{q}"))?;
                    v.prompts.push(id);
                }
            }
        }
        for a in &config.attributes {
            let name = v.push(a)?;
            let hi = v.push(&format!("{a}_hi"))?;
            let lo = v.push(&format!("{a}_lo"))?;
            v.attributes.push(AttributeTokens { name, hi, lo });
        }
        for f in 0..config.fillers {
            let id = v.push(&format!("w{f}"))?;
            v.fillers.push(id);
        }
        if v.tokens.len() > MAX_VOCAB {
            return Err(WorldError::Config(format!(
                "vocabulary has {} tokens, at most {MAX_VOCAB} allowed",
                v.tokens.len()
            )));
        }
        Ok(v)
    }

    fn push(&mut self, name: &str) -> Result<Token, WorldError> {
        if self.index.contains_key(name) {
            return Err(WorldError::DuplicateToken(name.to_string()));
        }
        let id = self.tokens.len();
        self.tokens.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<Token> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: Token) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// In-distribution topic tokens.
    pub fn topics(&self) -> &[Token] {
        &self.topics
    }

    /// Topic tokens reserved for out-of-distribution users.
    pub fn ood_topics(&self) -> &[Token] {
        &self.ood_topics
    }

    pub fn is_topic(&self, t: Token) -> bool {
        self.topics.contains(&t) || self.ood_topics.contains(&t)
    }

    pub fn prompts(&self) -> &[Token] {
        &self.prompts
    }

    pub fn attributes(&self) -> &[AttributeTokens] {
        &self.attributes
    }

    pub fn fillers(&self) -> &[Token] {
        &self.fillers
    }

    pub fn detokenize(&self, ids: &[Token]) -> String {
        ids.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }

    /// SHA-256 over the ordered token list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pets_vocabulary_layout() {
        let v = Vocabulary::build(&WorldConfig::pets()).unwrap();
        for name in ["dog", "cat", "rabbit", "bird"] {
            assert!(v.id(name).is_some(), "{name} missing");
        }
        assert_eq!(v.id("<sum>"), Some(SUM));
        assert_eq!(v.id("<hint>"), Some(HINT));
        assert!(v.attributes().is_empty());
        assert!(v.len() <= MAX_VOCAB);
        assert_eq!(v.ood_topics(), &[v.id("rabbit").unwrap(), v.id("bird").unwrap()]);
    }

    #[test]
    fn deterministic_build() {
        let a = Vocabulary::build(&WorldConfig::ufp(4)).unwrap();
        let b = Vocabulary::build(&WorldConfig::ufp(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.attributes().len(), 4);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = WorldConfig::pets();
        c.ood_topics = vec!["dog".into(), "bird".into()];
        assert_eq!(
            Vocabulary::build(&c),
            Err(WorldError::DuplicateToken("dog".into()))
        );
    }
}
