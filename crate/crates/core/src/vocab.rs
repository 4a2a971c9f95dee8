//! Token and cell identifier spaces shared by the generator and the model.
//!
//! Tokens: `0` is end-of-sequence (rendered as `.`), `1` is the article `a`,
//! `2` is the conjunction `and`; object words follow in order of first use.
//! Cells: `0` is background, `1` is the counterfactual mask, object `k`
//! occupies cells with id `k + 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type CellId = u32;

pub const EOS: TokenId = 0;
pub const ARTICLE: TokenId = 1;
pub const CONJUNCTION: TokenId = 2;
const RESERVED_WORDS: [&str; 3] = [".", "a", "and"];

pub const BACKGROUND: CellId = 0;
pub const MASK: CellId = 1;
pub const FIRST_OBJECT_CELL: CellId = 2;

pub fn object_cell(object: usize) -> CellId {
    object as CellId + FIRST_OBJECT_CELL
}

/// Object index for a cell id, `None` for background and mask.
pub fn cell_object(cell: CellId) -> Option<usize> {
    (cell >= FIRST_OBJECT_CELL).then(|| (cell - FIRST_OBJECT_CELL) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabObject {
    pub name: String,
    pub phrase: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub objects: Vec<VocabObject>,
}

impl Vocabulary {
    /// Builds the vocabulary from `(object name, phrase words)` pairs.
    pub fn from_objects<'a, I, W>(objects: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, W)>,
        W: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<String> = RESERVED_WORDS.iter().map(|w| w.to_string()).collect();
        let mut entries = Vec::new();
        for (name, phrase_words) in objects {
            let mut phrase = Vec::new();
            for w in phrase_words {
                if RESERVED_WORDS.contains(&w) {
                    return Err(Error::config(
                        "world.objects",
                        format!("object `{name}` uses reserved word `{w}`"),
                    ));
                }
                let id = match words.iter().position(|x| x == w) {
                    Some(i) => i,
                    None => {
                        words.push(w.to_string());
                        words.len() - 1
                    }
                };
                phrase.push(id as TokenId);
            }
            if phrase.is_empty() {
                return Err(Error::config(
                    "world.objects",
                    format!("object `{name}` has no words"),
                ));
            }
            if entries.iter().any(|e: &VocabObject| e.name == name) {
                return Err(Error::config(
                    "world.objects",
                    format!("duplicate object `{name}`"),
                ));
            }
            entries.push(VocabObject {
                name: name.to_string(),
                phrase,
            });
        }
        Ok(Vocabulary {
            words,
            objects: entries,
        })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn phrase(&self, object: usize) -> &[TokenId] {
        &self.objects[object].phrase
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
