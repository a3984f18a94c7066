//! Closed toy vocabulary. The blank label lives at index |V|, outside the
//! token list, matching the width-|V|+1 projection.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Number of reserved special tokens (pad, bos, eos).
pub const SPECIALS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Standard layout: `<pad>`, `<bos>`, `<eos>`, then `n_content` word tokens.
    pub fn synthetic(n_content: usize) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        for i in 0..n_content {
            tokens.push(format!("w{i:02}"));
        }
        Vocabulary::from_tokens(tokens).expect("generated tokens are unique")
    }

    /// |V|, excluding blank.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The reserved blank id, always exactly |V|.
    pub fn blank_id(&self) -> u32 {
        self.tokens.len() as u32
    }

    /// Projection width |V|+1.
    pub fn width(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn n_content(&self) -> usize {
        self.tokens.len() - SPECIALS as usize
    }

    /// First content id.
    pub fn content_base(&self) -> u32 {
        SPECIALS
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn ids_to_string(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn string_to_ids(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Config(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    /// One token per line; line number = id; blank implicit at index |V|.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.is_empty() {
            return Err(Error::Format(format!("empty vocabulary file {}", path.display())));
        }
        Vocabulary::from_tokens(tokens)
    }
}
