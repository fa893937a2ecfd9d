//! Deterministic hashed character-trigram embeddings and cosine geometry.
//!
//! A text is lowercased, split into overlapping character trigrams, each
//! trigram's UTF-8 bytes are hashed with 64-bit FNV-1a into one of `dim`
//! buckets, and the bucket counts are L2-normalized. Features are
//! nonnegative, so cosine similarity always lies in `[0, 1]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit-norm (or all-zero) nonnegative feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    /// Normalizes `values` to unit length. Rejects negative or non-finite
    /// components; an all-zero input stays zero.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::contract(format!(
                "embedding components must be finite and nonnegative, got {v}"
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(EmbeddingVector(values));
        }
        Ok(EmbeddingVector(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// True for the degenerate embedding of a too-short text.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Hashed trigram embedder with a configurable bucket count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrigramEmbedder {
    pub dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        TrigramEmbedder { dim: DEFAULT_DIM }
    }
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        TrigramEmbedder { dim }
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let lower: Vec<char> = text.to_lowercase().chars().collect();
        let mut counts = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for w in lower.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            counts[(fnv1a64(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        EmbeddingVector::from_values(counts).expect("counts are nonnegative")
    }

    pub fn embed_all<S: AsRef<str>>(&self, texts: &[S]) -> Vec<EmbeddingVector> {
        texts.iter().map(|t| self.embed(t.as_ref())).collect()
    }

    /// Embedding used to compare short answers. The answer is padded with a
    /// space on each side so one- and two-character answers still produce
    /// boundary trigrams.
    pub fn embed_answer(&self, answer: &str) -> EmbeddingVector {
        self.embed(&format!(" {} ", answer.trim()))
    }
}

/// Embeds with the default 256-bucket embedder.
pub fn embed_text(text: &str) -> EmbeddingVector {
    TrigramEmbedder::default().embed(text)
}

/// Dot product of two unit vectors, clamped to `[0, 1]`; zero if either
/// vector is zero.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "embedding dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(0.0, 1.0))
}

/// `1 - cosine_similarity`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

#[derive(Deserialize)]
struct ExternalRecord {
    id: String,
    vector: Vec<f64>,
}

/// Vectors loaded from an external-embedding JSONL file.
#[derive(Debug, Default)]
pub struct ExternalEmbeddings {
    pub vectors: BTreeMap<String, EmbeddingVector>,
    /// Ids whose vectors had negative or non-finite components.
    pub rejected: Vec<String>,
}

/// Loads `{"id": .., "vector": [..]}` lines. Vectors are re-normalized;
/// vectors with negative components are skipped with a warning.
pub fn load_external(path: impl AsRef<Path>, dim: usize) -> Result<ExternalEmbeddings> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = ExternalEmbeddings::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: ExternalRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.vector.len() != dim {
            return Err(err(format!("expected {dim} components, got {}", rec.vector.len())));
        }
        match EmbeddingVector::from_values(rec.vector) {
            Ok(v) => {
                if out.vectors.insert(rec.id.clone(), v).is_some() {
                    return Err(err(format!("duplicate id {:?}", rec.id)));
                }
            }
            Err(e) => {
                log::warn!("{}:{}: rejecting {:?}: {e}", path.display(), i + 1, rec.id);
                out.rejected.push(rec.id);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn unit(values: &[f64]) -> EmbeddingVector {
        let mut v = values.to_vec();
        v.resize(DEFAULT_DIM, 0.0);
        EmbeddingVector::from_values(v).unwrap()
    }

    fn trigram_set(t: &str) -> HashSet<String> {
        let c: Vec<char> = t.to_lowercase().chars().collect();
        c.windows(3).map(|w| w.iter().collect()).collect()
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn deterministic_and_unit() {
        let a = embed_text("What is 3+4*2?");
        let b = embed_text("What is 3+4*2?");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!(a.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn short_text_is_zero() {
        assert!(embed_text("").is_zero());
        assert!(embed_text("ab").is_zero());
        assert!(!embed_text("abc").is_zero());
        assert_eq!(cosine_similarity(&embed_text(""), &embed_text("abc")).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_trigrams_are_orthogonal() {
        let (a, b) = ("abcabc", "xyzxyz");
        assert!(trigram_set(a).is_disjoint(&trigram_set(b)));
        let ea = embed_text(a);
        let eb = embed_text(b);
        let shared_bucket = ea.values().iter().zip(eb.values()).any(|(x, y)| *x > 0.0 && *y > 0.0);
        assert!(!shared_bucket);
        assert_eq!(cosine_similarity(&ea, &eb).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let v = unit(&[0.6, 0.8]);
        let w = unit(&[0.8, 0.6]);
        assert!((cosine_similarity(&v, &w).unwrap() - 0.96).abs() < 1e-12);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&unit(&[1.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
        let short = EmbeddingVector::from_values(vec![1.0; 3]).unwrap();
        assert!(matches!(cosine_similarity(&v, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn answer_embedding_separates_short_answers() {
        let e = TrigramEmbedder::default();
        assert!(!e.embed_answer("7").is_zero());
        assert_eq!(e.embed_answer("12"), e.embed_answer(" 12"));
        assert!(cosine_similarity(&e.embed_answer("12"), &e.embed_answer("21")).unwrap() < 1.0);
    }

    #[test]
    fn batch_embedding_permutes_with_input() {
        let texts = ["one text", "another", "third item"];
        let e = TrigramEmbedder::default();
        let fwd = e.embed_all(&texts);
        let rev = e.embed_all(&[texts[2], texts[1], texts[0]]);
        assert_eq!(fwd[0], rev[2]);
        assert_eq!(fwd[2], rev[0]);
    }

    #[test]
    fn external_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"vector\":[3,4,0]}\n{\"id\":\"b\",\"vector\":[1,-1,0]}\n",
        )
        .unwrap();
        let ext = load_external(&path, 3).unwrap();
        assert_eq!(ext.rejected, vec!["b".to_string()]);
        assert_eq!(ext.vectors["a"].values(), &[0.6, 0.8, 0.0]);
        assert!(load_external(&path, 4).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn similarity_symmetric_in_range(a in ".{0,40}", b in ".{0,40}") {
                let (ea, eb) = (embed_text(&a), embed_text(&b));
                let ab = cosine_similarity(&ea, &eb).unwrap();
                prop_assert_eq!(ab, cosine_similarity(&eb, &ea).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                let n = ea.norm();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
    }
}
