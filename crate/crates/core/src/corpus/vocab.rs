use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Ids below this value are reserved markers, never content.
pub const NUM_RESERVED: usize = 4;
/// Out-of-vocabulary placeholder; an ordinary (non-reserved) entry.
pub const UNK: usize = 4;

const RESERVED_NAMES: [&str; 4] = ["[CLS]", "[PAD]", "[BOS]", "[EOS]"];
const UNK_NAME: &str = "[UNK]";

/// Whitespace-token vocabulary. Line number in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for name in RESERVED_NAMES.iter().chain([&UNK_NAME]) {
            v.add(name);
        }
        v
    }

    /// Returns the id of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whitespace-tokenises `text`; unknown tokens map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Whitespace-tokenises `text`, growing the vocabulary.
    pub fn encode_growing(&mut self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.add(t)).collect()
    }

    /// Joins tokens with single spaces, skipping reserved markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_RESERVED)
            .map(|&i| self.token(i).unwrap_or(UNK_NAME))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let tok = line.trim_end_matches('\r');
            if i < RESERVED_NAMES.len() && tok != RESERVED_NAMES[i] {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {}", RESERVED_NAMES[i]),
                });
            }
            if v.index.contains_key(tok) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token `{tok}`"),
                });
            }
            v.add(tok);
        }
        if v.len() <= UNK {
            return Err(Error::Format(format!("{}: vocabulary lacks reserved entries", path.display())));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[BOS]"), Some(BOS));
        assert_eq!(v.id("[EOS]"), Some(EOS));
        assert_eq!(v.id("[UNK]"), Some(UNK));
    }

    #[test]
    fn file_round_trip_and_encoding() {
        let mut v = Vocabulary::new();
        let ids = v.encode_growing("the cat  sat on the mat");
        assert_eq!(ids[0], ids[4]);
        assert_eq!(v.encode("the dog"), vec![ids[0], UNK]);
        assert_eq!(v.decode(&[BOS, ids[1], ids[2], EOS]), "cat sat");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }
}
