//! Instruction embeddings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::igt1::Archive;
use crate::rng;
use crate::tensor::Tensor;

/// The instruction vector `s` fed to the allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("empty sentence embedding".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "sentence embedding",
                detail: format!("component {i} is {}", values[i]),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }
}

/// Source of instruction embeddings.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    /// Sum of seeded Gaussian vectors, one per lower-cased word unigram and
    /// bigram, scaled to unit length.
    HashToy { dim: usize, seed: u64 },
    /// Exact lookup in an archive whose tensor names are the instructions.
    FileLookup(Archive),
}

impl EmbeddingProvider {
    pub fn lookup_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::FileLookup(Archive::read(path)?))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn hash_toy(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let toks = tokens(text);
    let mut grams: Vec<String> = toks.clone();
    grams.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    if grams.is_empty() {
        grams.push(String::new());
    }
    let mut acc = vec![0.0; dim];
    for gram in &grams {
        let mut r = rng::seeded(rng::derive_seed(seed, fnv1a(gram.as_bytes())));
        for a in acc.iter_mut() {
            *a += rng::gaussian(&mut r);
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    acc.iter_mut().for_each(|x| *x /= norm);
    acc
}

pub fn embed_instruction(text: &str, provider: &EmbeddingProvider) -> Result<SentenceEmbedding> {
    match provider {
        EmbeddingProvider::HashToy { dim, seed } => {
            if *dim == 0 {
                return Err(Error::Config("embedding dimension must be positive".into()));
            }
            SentenceEmbedding::new(hash_toy(text, *dim, *seed))
        }
        EmbeddingProvider::FileLookup(archive) => {
            let t = archive
                .get(text)
                .ok_or_else(|| Error::UnknownInstruction(text.to_owned()))?;
            if t.rank() != 1 {
                return Err(Error::dim("embedding lookup", t.shape(), &[t.len()]));
            }
            SentenceEmbedding::new(t.data().to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_ignores_case_and_punctuation() {
        let p = EmbeddingProvider::HashToy { dim: 8, seed: 1 };
        let a = embed_instruction("Count the cars!", &p).unwrap();
        let b = embed_instruction("count  the cars", &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn word_order_matters_through_bigrams() {
        let p = EmbeddingProvider::HashToy { dim: 8, seed: 1 };
        let a = embed_instruction("red car", &p).unwrap();
        let b = embed_instruction("car red", &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_text_still_embeds() {
        let p = EmbeddingProvider::HashToy { dim: 4, seed: 0 };
        let e = embed_instruction("  ", &p).unwrap();
        let n: f64 = e.as_slice().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
