//! Toy text pathway: a fixed small vocabulary, prompt templates and a
//! trainable embedding table that includes the rare token [V].
//!
//! Whitespace tokenization over a closed vocabulary. The pooled (mean)
//! embedding of a prompt is what conditions the denoiser; gradients scatter
//! back into the table rows so the [V] row (and, unless frozen, the template
//! rows) train during concept learning.

use crate::error::{CoreError, Result};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub const RARE_TOKEN: &str = "[V]";
pub const PAD_TOKEN: &str = "[PAD]";

/// Ordered token list; indices are stable across save/load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    class_names: Vec<String>,
    class_noun: String,
    pub embedding_dim: usize,
}

impl Vocabulary {
    /// Builds the closed vocabulary: template words, the class noun, the five
    /// class names, [V] and [PAD].
    pub fn new(class_names: &[String], class_noun: &str, embedding_dim: usize) -> Result<Self> {
        if class_names.is_empty() {
            return Err(CoreError::config("vocabulary: class names must be non-empty"));
        }
        let mut tokens: Vec<String> = ["an", "image", "of", "a", "with", "crack", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in class_noun.split_whitespace() {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        for name in class_names {
            if tokens.iter().any(|t| t == name) {
                return Err(CoreError::config(format!("vocabulary: duplicate class name {name}")));
            }
            tokens.push(name.clone());
        }
        tokens.push(RARE_TOKEN.to_string());
        tokens.push(PAD_TOKEN.to_string());
        Ok(Vocabulary {
            tokens,
            class_names: class_names.to_vec(),
            class_noun: class_noun.to_string(),
            embedding_dim,
        })
    }

    pub fn default_toy(embedding_dim: usize) -> Self {
        let classes = ["radial", "axial", "diagonal", "curved", "branched"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>();
        Vocabulary::new(&classes, "panel", embedding_dim).unwrap()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_noun(&self) -> &str {
        &self.class_noun
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn pad_index(&self) -> usize {
        self.index_of(PAD_TOKEN).unwrap()
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for word in prompt.split_whitespace() {
            match self.index_of(word) {
                Some(i) => ids.push(i),
                None => unknown.push(word.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(CoreError::UnknownToken(unknown.join(", ")));
        }
        Ok(ids)
    }

    /// Structural checks: [V] exactly once, all class names present, [PAD]
    /// present, no duplicate tokens.
    pub fn validate(&self) -> Result<()> {
        let v_count = self.tokens.iter().filter(|t| *t == RARE_TOKEN).count();
        if v_count != 1 {
            return Err(CoreError::config(format!("vocabulary: [V] must appear exactly once, found {v_count}")));
        }
        if self.index_of(PAD_TOKEN).is_none() {
            return Err(CoreError::config("vocabulary: [PAD] missing"));
        }
        for name in &self.class_names {
            if self.index_of(name).is_none() {
                return Err(CoreError::config(format!("vocabulary: class name {name} missing")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tokens {
            if !seen.insert(t) {
                return Err(CoreError::config(format!("vocabulary: duplicate token {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTemplate {
    /// "an image of a [V]"
    Concept,
    /// "an image of a [V] with a <classes> crack"
    ConceptWithCrack,
    /// "a <class noun>"
    ClassNoun,
}

/// Renders one of the three prompt templates. Multiple classes are joined
/// with "and".
pub fn build_prompt(template: PromptTemplate, class_names: &[String], vocab: &Vocabulary) -> Result<String> {
    match template {
        PromptTemplate::Concept => Ok(format!("an image of a {RARE_TOKEN}")),
        PromptTemplate::ClassNoun => Ok(format!("a {}", vocab.class_noun())),
        PromptTemplate::ConceptWithCrack => {
            if class_names.is_empty() {
                return Err(CoreError::config("prompt: concept_with_crack needs at least one class name"));
            }
            for name in class_names {
                if !vocab.class_names().contains(name) {
                    return Err(CoreError::config(format!("prompt: unknown class name {name}")));
                }
            }
            Ok(format!("an image of a {RARE_TOKEN} with a {} crack", class_names.join(" and ")))
        }
    }
}

/// Token-wise embedded prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vectors: Array2<f64>,
    pub tokens: Vec<usize>,
    pub source_prompt: String,
}

impl PromptEmbedding {
    /// Mean over positions; the conditioning vector the denoiser consumes.
    pub fn pooled(&self) -> Array1<f64> {
        let (l, d) = self.vectors.dim();
        let mut out = Array1::zeros(d);
        for row in self.vectors.outer_iter() {
            out += &row;
        }
        out / l as f64
    }
}

/// Deterministic lookup of a prompt in the embedding table. Empty prompts
/// pad to length 1 with the padding vector.
pub fn encode_prompt(prompt: &str, vocab: &Vocabulary, table: ArrayView2<'_, f64>) -> Result<PromptEmbedding> {
    if table.nrows() != vocab.len() || table.ncols() != vocab.embedding_dim {
        return Err(CoreError::shape(format!(
            "embedding table {}x{} does not match vocabulary {}x{}",
            table.nrows(),
            table.ncols(),
            vocab.len(),
            vocab.embedding_dim
        )));
    }
    let mut tokens = vocab.tokenize(prompt)?;
    if tokens.is_empty() {
        tokens.push(vocab.pad_index());
    }
    let mut vectors = Array2::zeros((tokens.len(), vocab.embedding_dim));
    for (i, &tok) in tokens.iter().enumerate() {
        vectors.row_mut(i).assign(&table.row(tok));
    }
    Ok(PromptEmbedding { vectors, tokens, source_prompt: prompt.to_string() })
}

/// Scatters the gradient of a pooled embedding back into table-row gradients.
pub fn accumulate_table_grad(embedding: &PromptEmbedding, grad_pooled: &Array1<f64>, table_grad: &mut Array2<f64>) {
    let l = embedding.tokens.len() as f64;
    for &tok in &embedding.tokens {
        let mut row = table_grad.row_mut(tok);
        row += &grad_pooled.mapv(|v| v / l);
    }
}

/// Checks that no two table rows are identical (lookup injectivity).
pub fn check_table_injective(table: ArrayView2<'_, f64>) -> Result<()> {
    let n = table.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if table.row(i) == table.row(j) {
                return Err(CoreError::numeric(format!("embedding rows {i} and {j} are identical")));
            }
        }
    }
    Ok(())
}
