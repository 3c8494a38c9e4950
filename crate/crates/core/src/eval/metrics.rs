use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::FeatureSequence;

/// Substitutions, insertions and deletions of a minimal alignment of a
/// hypothesis against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_length: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimal
/// alignments the backtrace prefers a match or substitution, then a
/// deletion, then an insertion.
pub fn edit_counts<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = hyp[i - 1].as_ref() == reference[j - 1].as_ref();
            d[i][j] = (d[i - 1][j - 1] + usize::from(!same))
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        substitutions: 0,
        insertions: 0,
        deletions: 0,
        ref_length: m,
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = hyp[i - 1].as_ref() == reference[j - 1].as_ref();
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            counts.deletions += 1;
            j -= 1;
        } else {
            counts.insertions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Word,
    Char,
}

/// Lowercases and drops every character that is neither alphanumeric nor
/// whitespace.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

pub fn tokenize(text: &str, tokenizer: Tokenizer) -> Vec<String> {
    let norm = normalize_text(text);
    match tokenizer {
        Tokenizer::Word => norm.split_whitespace().map(str::to_string).collect(),
        Tokenizer::Char => norm
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// `(S + I + D) / N` of the hypothesis against the L1_S1 transcript, with
/// words or characters as tokens.
pub fn s1_wer(hyp: &str, s1_transcript: &str, tokenizer: Tokenizer) -> Result<f64, EvalError> {
    let reference = tokenize(s1_transcript, tokenizer);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let counts = edit_counts(&tokenize(hyp, tokenizer), &reference);
    Ok(counts.errors() as f64 / counts.ref_length as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Mean over generated frames of the best cosine similarity to any
/// reference frame. Zero frames have cosine 0 with everything.
pub fn speech_bert_score(gen: &FeatureSequence, reference: &FeatureSequence) -> Result<f64, EvalError> {
    if gen.dim() != reference.dim() {
        return Err(EvalError::DimMismatch {
            generated: gen.dim(),
            reference: reference.dim(),
        });
    }
    let total: f64 = (0..gen.num_frames())
        .map(|i| {
            (0..reference.num_frames())
                .map(|j| cosine(gen.row(i), reference.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / gen.num_frames() as f64)
}
