//! Random and acquisition-filtered selection from a sample pool.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{acquisition_score, RewardConfig, RewardContext, ACQUISITIONS};
use crate::rng::derive_seed;
use crate::sample::Sample;

/// One score per acquisition function, in [`ACQUISITIONS`] order.
pub type ScoreRow = [f64; 5];

const PROXIMITY: usize = 1;
const DIVERSITY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(x - min) / (max - min)`; a constant column maps to 0.5.
    #[default]
    MinMax,
    /// Average rank scaled to `[0, 1]`; ties share their mean rank.
    Rank,
}

/// `k` distinct pool items drawn uniformly, in draw order.
pub fn random_select(pool: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k > pool.len() {
        return Err(Error::contract(format!("cannot select {k} of {} samples", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_indices(&mut rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect())
}

fn normalize_column(values: &[f64], scheme: Normalization) -> Vec<f64> {
    let n = values.len();
    match scheme {
        Normalization::MinMax => {
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(max > min) {
                return vec![0.5; n];
            }
            values.iter().map(|v| (v - min) / (max - min)).collect()
        }
        Normalization::Rank => {
            if n < 2 {
                return vec![0.5; n];
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let mut out = vec![0.0; n];
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && values[order[j + 1]] == values[order[i]] {
                    j += 1;
                }
                let mean_rank = (i + j) as f64 / 2.0;
                for &o in &order[i..=j] {
                    out[o] = mean_rank / (n - 1) as f64;
                }
                i = j + 1;
            }
            out
        }
    }
}

/// Column-wise normalization of a score matrix.
pub fn normalize_scores(raw: &[ScoreRow], scheme: Normalization) -> Vec<ScoreRow> {
    let mut out = vec![[0.0; 5]; raw.len()];
    for c in 0..5 {
        let col: Vec<f64> = raw.iter().map(|r| r[c]).collect();
        for (row, v) in out.iter_mut().zip(normalize_column(&col, scheme)) {
            row[c] = v;
        }
    }
    out
}

/// A pool with raw, normalized, and combined scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub samples: Vec<Sample>,
    pub raw: Vec<ScoreRow>,
    pub normalized: Vec<ScoreRow>,
    /// Row means of `normalized`.
    pub combined: Vec<f64>,
}

impl ScoredPool {
    pub fn new(samples: Vec<Sample>, raw: Vec<ScoreRow>, scheme: Normalization) -> Result<Self> {
        if samples.len() != raw.len() {
            return Err(Error::contract("one score row per sample required"));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("acquisition score".into()));
        }
        for r in &raw {
            if r[PROXIMITY] + r[DIVERSITY] != 1.0 {
                return Err(Error::contract("proximity and diversity scores are not complementary"));
            }
        }
        let normalized = normalize_scores(&raw, scheme);
        if scheme == Normalization::MinMax {
            for n in &normalized {
                if (n[PROXIMITY] + n[DIVERSITY] - 1.0).abs() > 1e-9 {
                    return Err(Error::contract("normalized proximity and diversity are not reversed"));
                }
            }
        }
        let combined = normalized.iter().map(|r| r.iter().sum::<f64>() / 5.0).collect();
        Ok(ScoredPool {
            samples,
            raw,
            normalized,
            combined,
        })
    }

    /// Indices of the `k` highest combined scores; ties go to the lower
    /// pool index.
    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        if k > self.samples.len() {
            return Err(Error::contract(format!("cannot select {k} of {} samples", self.samples.len())));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.sort_by(|&a, &b| self.combined[b].total_cmp(&self.combined[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }

    /// Writes one JSON line per sample with raw, normalized and combined
    /// scores.
    pub fn write_ledger(&self, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            raw: BTreeMap<&'static str, f64>,
            normalized: BTreeMap<&'static str, f64>,
            combined: f64,
        }
        for (i, s) in self.samples.iter().enumerate() {
            let named = |row: &ScoreRow| ACQUISITIONS.iter().map(|k| k.name()).zip(row.iter().copied()).collect();
            let line = Line {
                id: &s.id,
                raw: named(&self.raw[i]),
                normalized: named(&self.normalized[i]),
                combined: self.combined[i],
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }
}

/// Scores every sample with the five acquisition functions. Sample `i`
/// uses the answer-variance seed `derive_seed(seed, [i])`.
pub fn score_pool(pool: &[Sample], ctx: &RewardContext<'_>, cfg: &RewardConfig, seed: u64) -> Result<Vec<ScoreRow>> {
    pool.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = [0.0; 5];
            for (slot, kind) in row.iter_mut().zip(ACQUISITIONS) {
                *slot = acquisition_score(kind, cfg, ctx, s, derive_seed(seed, &[i as u64]))?;
            }
            Ok(row)
        })
        .collect()
}

/// The `k` samples with the highest mean normalized acquisition score.
pub fn filtered_select(
    pool: &[Sample],
    k: usize,
    ctx: &RewardContext<'_>,
    cfg: &RewardConfig,
    scheme: Normalization,
    seed: u64,
) -> Result<(Vec<Sample>, ScoredPool)> {
    if k > pool.len() {
        return Err(Error::contract(format!("cannot select {k} of {} samples", pool.len())));
    }
    let raw = score_pool(pool, ctx, cfg, seed)?;
    let scored = ScoredPool::new(pool.to_vec(), raw, scheme)?;
    let chosen = scored.top_k(k)?.into_iter().map(|i| scored.samples[i].clone()).collect();
    Ok((chosen, scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::TrigramEmbedder;
    use crate::sample::Source;
    use crate::student::{GenerationConfig, ModelShape, StudentModel, Vocabulary};
    use std::sync::Arc;

    fn pool(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample::new(format!("s{i}"), format!("What is {i}*{}?", i % 7), "r", "a", Source::Generated))
            .collect()
    }

    fn row(c: f64, p: f64, g: f64, a: f64) -> ScoreRow {
        [c, p, g, 1.0 - p, a]
    }

    #[test]
    fn random_selection() {
        let p = pool(10);
        let all = random_select(&p, 10, 3).unwrap();
        let mut ids: Vec<_> = all.iter().map(|s| s.id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = p.iter().map(|s| s.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
        assert_eq!(random_select(&p, 4, 9).unwrap(), random_select(&p, 4, 9).unwrap());
        assert!(random_select(&p, 11, 0).is_err());
    }

    #[test]
    fn constant_columns() {
        let raw = vec![row(1.0, 0.5, 2.0, 3.0); 4];
        let sp = ScoredPool::new(pool(4), raw, Normalization::MinMax).unwrap();
        assert!(sp.combined.iter().all(|&c| c == 0.5));
        assert_eq!(sp.top_k(2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn dominance() {
        // Proximity and diversity move oppositely, so "dominates" means
        // every other column is higher.
        let raw = vec![row(1.0, 0.5, 1.0, 1.0), row(2.0, 0.5, 3.0, 2.0)];
        let sp = ScoredPool::new(pool(2), raw, Normalization::MinMax).unwrap();
        assert_eq!(sp.top_k(1).unwrap(), vec![1]);
    }

    #[test]
    fn rank_normalization() {
        assert_eq!(normalize_column(&[3.0, 1.0, 2.0], Normalization::Rank), vec![1.0, 0.0, 0.5]);
        assert_eq!(normalize_column(&[1.0, 1.0, 5.0], Normalization::Rank), vec![0.25, 0.25, 1.0]);
        assert_eq!(normalize_column(&[2.0, 2.0], Normalization::Rank), vec![0.5, 0.5]);
        assert_eq!(normalize_column(&[7.0], Normalization::MinMax), vec![0.5]);
    }

    #[test]
    fn complement_check_rejects_bad_rows() {
        let raw = vec![[0.0, 0.3, 0.0, 0.3, 0.0]];
        assert!(ScoredPool::new(pool(1), raw, Normalization::MinMax).is_err());
    }

    #[test]
    fn ledger_lines() {
        let raw = vec![row(1.0, 0.2, 2.0, 3.0), row(2.0, 0.6, 1.0, 1.0)];
        let sp = ScoredPool::new(pool(2), raw, Normalization::MinMax).unwrap();
        let mut buf = Vec::new();
        sp.write_ledger(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["id"], "s0");
        assert_eq!(first["raw"]["answer_variance"], 3.0);
        assert_eq!(first["normalized"]["proximity"], 0.0);
        assert_eq!(first["combined"], sp.combined[0]);
    }

    #[test]
    fn filtered_selection_end_to_end() {
        let student = StudentModel::new(Arc::new(Vocabulary::default()), ModelShape { window: 8, embed: 4, hidden: 8 }, 2);
        let p = pool(6);
        let centers = crate::rewards::fit_centers(&p, &TrigramEmbedder::default(), 2).unwrap();
        let ctx = RewardContext {
            student: &student,
            centers: &centers,
            embedder: TrigramEmbedder::default(),
            sampling: GenerationConfig {
                max_new_symbols: 20,
                ..Default::default()
            },
        };
        let cfg = RewardConfig::default();
        let (chosen, sp) = filtered_select(&p, 3, &ctx, &cfg, Normalization::MinMax, 1).unwrap();
        assert_eq!(chosen.len(), 3);
        let again = filtered_select(&p, 3, &ctx, &cfg, Normalization::MinMax, 1).unwrap();
        assert_eq!(chosen, again.0);
        assert!(sp.normalized.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(filtered_select(&p, 7, &ctx, &cfg, Normalization::MinMax, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn raw_rows() -> impl Strategy<Value = Vec<ScoreRow>> {
            proptest::collection::vec(
                (0.0f64..10.0, 0.0f64..1.0, 0.0f64..10.0, 1.0f64..8.0).prop_map(|(c, p, g, a)| row(c, p, g, a)),
                2..20,
            )
        }

        proptest! {
            #[test]
            fn selection_invariant_under_affine_column_maps(
                raw in raw_rows(),
                col in prop_oneof![Just(0usize), Just(2usize), Just(4usize)],
                scale in 0.5f64..4.0,
                shift in -5.0f64..5.0,
                k in 1usize..20,
            ) {
                let n = raw.len();
                let k = k.min(n);
                let a = ScoredPool::new(pool(n), raw.clone(), Normalization::MinMax).unwrap();
                let mut moved = raw;
                for r in &mut moved {
                    r[col] = r[col] * scale + shift;
                }
                let b = ScoredPool::new(pool(n), moved, Normalization::MinMax).unwrap();
                for (x, y) in a.combined.iter().zip(&b.combined) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                // Rankings agree up to floating-point ties.
                let ta = a.top_k(k).unwrap();
                let tb = b.top_k(k).unwrap();
                for (i, j) in ta.iter().zip(&tb) {
                    prop_assert!((a.combined[*i] - a.combined[*j]).abs() < 1e-9);
                }
            }

            #[test]
            fn normalized_in_unit_interval(raw in raw_rows()) {
                for scheme in [Normalization::MinMax, Normalization::Rank] {
                    for r in normalize_scores(&raw, scheme) {
                        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
                    }
                }
            }
        }
    }
}
