use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::vocab::{Role, Vocabulary};
use crate::error::{Error, Result};

/// `modality, organ, category` plus optional augmentation phrases.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTriplet {
    pub modality: String,
    pub organ: String,
    pub category: String,
    #[serde(default)]
    pub aug_texts: Vec<String>,
}

impl PromptTriplet {
    pub fn new(modality: &str, organ: &str, category: &str) -> Self {
        Self {
            modality: modality.to_string(),
            organ: organ.to_string(),
            category: category.to_string(),
            aug_texts: vec![],
        }
    }

    pub fn with_aug(mut self, aug: &str) -> Self {
        self.aug_texts.push(aug.to_string());
        self
    }

    /// Embedding-table rows in sequence order.
    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let mut ids = vec![
            vocab.id(Role::Modality, &self.modality)?,
            vocab.id(Role::Organ, &self.organ)?,
            vocab.id(Role::Category, &self.category)?,
        ];
        for a in &self.aug_texts {
            ids.push(vocab.id(Role::Augmentation, a)?);
        }
        Ok(ids)
    }

    pub fn len(&self) -> usize {
        3 + self.aug_texts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl std::fmt::Display for PromptTriplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}, {}, {}", self.modality, self.organ, self.category)?;
        for a in &self.aug_texts {
            write!(f, ", {a}")?;
        }
        Ok(())
    }
}

/// One row per vocabulary token, in [`Vocabulary::id`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    rows: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocabulary, rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != vocab.len() || rows.ncols() == 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding table {:?} does not fit a vocabulary of {} tokens",
                rows.dim(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, rows })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// True when no two tokens share an embedding row.
    pub fn rows_distinct(&self) -> bool {
        let n = self.rows.nrows();
        (0..n).all(|i| (i + 1..n).all(|j| self.rows.row(i) != self.rows.row(j)))
    }
}

/// Sequence of token vectors: rows are modality, organ, category, then one
/// row per augmentation phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Array2<f64>);

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

pub fn encode_prompt(triplet: &PromptTriplet, table: &EmbeddingTable) -> Result<TextEmbedding> {
    let ids = triplet.token_ids(&table.vocab)?;
    Ok(TextEmbedding(table.rows.select(Axis(0), &ids)))
}
