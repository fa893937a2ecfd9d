//! Acquisition functions used as generator rewards, and the format reward.
//!
//! Each acquisition function scores one parsed (question, reasoning,
//! answer) sample against the student model or the seed-set geometry:
//!
//! * confidence: `1 / max(mean top-2 margin, eps)` of the student on the
//!   sample's reasoning and answer,
//! * proximity: cosine similarity of the question to its nearest seed-set
//!   cluster centroid,
//! * diversity: `1 - proximity`,
//! * gradient: L2 norm of the student's loss gradient on the sample,
//! * answer variance: effective number of answer clusters among `k`
//!   student responses to the question.
//!
//! The format reward is `0` for parseable text and `-1` otherwise and is
//! always added to the configured acquisition score.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{effective_cluster_count, hdbscan, summarize_clusters, HdbscanParams, NOISE};
use crate::embed::{cosine_similarity, EmbeddingVector, TrigramEmbedder};
use crate::error::{Error, Result};
use crate::prompt::{student_prompt, student_target};
use crate::sample::{extract_answer, parse_tagged, Sample, Source};
use crate::student::{GenerationConfig, StudentModel, Symbol, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Confidence,
    Proximity,
    Gradient,
    Diversity,
    AnswerVariance,
    Format,
}

/// The five acquisition functions, in score-matrix column order.
pub const ACQUISITIONS: [RewardKind; 5] = [
    RewardKind::Confidence,
    RewardKind::Proximity,
    RewardKind::Gradient,
    RewardKind::Diversity,
    RewardKind::AnswerVariance,
];

/// All generator-training modes: the five acquisitions and format-only.
pub const ALL_MODES: [RewardKind; 6] = [
    RewardKind::Format,
    RewardKind::Confidence,
    RewardKind::Proximity,
    RewardKind::Gradient,
    RewardKind::Diversity,
    RewardKind::AnswerVariance,
];

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Confidence => "confidence",
            RewardKind::Proximity => "proximity",
            RewardKind::Gradient => "gradient",
            RewardKind::Diversity => "diversity",
            RewardKind::AnswerVariance => "answer_variance",
            RewardKind::Format => "format",
        }
    }

    pub fn needs_centers(self) -> bool {
        matches!(self, RewardKind::Proximity | RewardKind::Diversity)
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_MODES
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("reward", format!("unknown reward {s:?}")))
    }
}

/// Reward settings for generator training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub reward: RewardKind,
    /// Responses sampled per question by answer variance.
    pub k: usize,
    /// Lower clamp on the mean margin for confidence.
    pub epsilon: f64,
    pub min_cluster_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            reward: RewardKind::Format,
            k: 8,
            epsilon: 1e-6,
            min_cluster_size: 2,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("reward.k", "k must be at least 2"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("reward.epsilon", "epsilon must be positive"));
        }
        if self.min_cluster_size < 2 {
            return Err(Error::config("reward.min_cluster_size", "must be at least 2"));
        }
        Ok(())
    }
}

/// Confidence reward with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceScore {
    pub reward: f64,
    pub mean_margin: f64,
    /// The mean margin was below epsilon.
    pub clamped: bool,
    /// Empty response; the reward is 0.
    pub degenerate: bool,
}

pub fn confidence_reward(
    student: &StudentModel,
    prompt: &[Symbol],
    response: &[Symbol],
    epsilon: f64,
) -> Result<ConfidenceScore> {
    if response.is_empty() {
        return Ok(ConfidenceScore {
            reward: 0.0,
            mean_margin: 0.0,
            clamped: false,
            degenerate: true,
        });
    }
    let margins = student.top2_margin(prompt, response)?;
    let conf = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok(ConfidenceScore {
        reward: 1.0 / conf.max(epsilon),
        mean_margin: conf,
        clamped: conf < epsilon,
        degenerate: false,
    })
}

/// Similarity to the nearest center.
pub fn proximity_reward(e: &EmbeddingVector, centers: &[EmbeddingVector]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::config(
            "reward",
            "no cluster centers: fit centers on the seed samples first",
        ));
    }
    let mut best = 0.0f64;
    for c in centers {
        best = best.max(cosine_similarity(e, c)?);
    }
    Ok(best)
}

pub fn diversity_reward(e: &EmbeddingVector, centers: &[EmbeddingVector]) -> Result<f64> {
    Ok(1.0 - proximity_reward(e, centers)?)
}

/// Student prompt and target symbols (target ends with EOS) for a sample.
pub fn student_pair(student: &StudentModel, sample: &Sample) -> Result<(Vec<Symbol>, Vec<Symbol>)> {
    let prompt = student.encode(&student_prompt(&sample.question))?;
    let mut target = student.encode(&student_target(&sample.reasoning, &sample.answer))?;
    target.push(EOS);
    Ok((prompt, target))
}

/// L2 norm of the student's loss gradient on the sample.
pub fn gradient_reward(student: &StudentModel, sample: &Sample) -> Result<f64> {
    let (prompt, target) = student_pair(student, sample)?;
    let (_, grad) = student.loss_and_gradient(&prompt, &target)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    Ok(norm)
}

/// The `k` sampled student responses to `question`, seeds
/// `base_seed..base_seed + k`, in seed order.
pub fn sample_responses(
    student: &StudentModel,
    question: &str,
    k: usize,
    base_seed: u64,
    sampling: &GenerationConfig,
) -> Result<Vec<String>> {
    let prompt = student.encode(&student_prompt(question))?;
    (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = sampling.with_seed(base_seed.wrapping_add(i));
            student.sample(&prompt, &cfg).map(|g| student.decode(&g.symbols))
        })
        .collect()
}

/// Answer span of a response, or the whole response when it has none.
pub fn answer_span(response: &str) -> String {
    extract_answer(response).unwrap_or_else(|| response.trim().to_string())
}

/// Effective number of distinct answers among `k` student responses.
pub fn answer_variance_reward(
    student: &StudentModel,
    question: &str,
    k: usize,
    base_seed: u64,
    sampling: &GenerationConfig,
    min_cluster_size: usize,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract("answer variance needs k >= 2"));
    }
    let responses = sample_responses(student, question, k, base_seed, sampling)?;
    let answers: Vec<String> = responses.iter().map(|r| answer_span(r)).collect();
    Ok(answer_count(&answers, &TrigramEmbedder::default(), min_cluster_size)? as f64)
}

/// Effective cluster count of a set of answers.
pub fn answer_count(answers: &[String], embedder: &TrigramEmbedder, min_cluster_size: usize) -> Result<usize> {
    let points: Vec<_> = answers.iter().map(|a| embedder.embed_answer(a)).collect();
    let assignment = hdbscan(&points, HdbscanParams::with_min_cluster_size(min_cluster_size))?;
    Ok(effective_cluster_count(&assignment))
}

pub fn format_reward(raw: &str) -> f64 {
    if parse_tagged(raw).is_ok() {
        0.0
    } else {
        -1.0
    }
}

/// Centroids of the seed-question clusters. When no cluster forms, every
/// non-degenerate seed question serves as its own center.
pub fn fit_centers(
    seeds: &[Sample],
    embedder: &TrigramEmbedder,
    min_cluster_size: usize,
) -> Result<Vec<EmbeddingVector>> {
    let points: Vec<_> = seeds.iter().map(|s| embedder.embed(&s.question)).collect();
    if points.is_empty() {
        return Err(Error::config("reward", "cannot fit cluster centers without seed samples"));
    }
    let assignment = hdbscan(&points, HdbscanParams::with_min_cluster_size(min_cluster_size))?;
    let mut centers: Vec<_> = summarize_clusters(&points, &assignment)?
        .into_iter()
        .map(|s| s.centroid)
        .filter(|c| !c.is_zero())
        .collect();
    if centers.is_empty() {
        log::warn!("seed questions formed no cluster; using each seed as a center");
        centers = points
            .iter()
            .zip(&assignment.labels)
            .filter(|(p, &l)| l == NOISE && !p.is_zero())
            .map(|(p, _)| p.clone())
            .collect();
    }
    if centers.is_empty() {
        return Err(Error::config("reward", "seed questions are too short to embed"));
    }
    Ok(centers)
}

/// Read-only state the rewards are measured against.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext<'a> {
    pub student: &'a StudentModel,
    pub centers: &'a [EmbeddingVector],
    pub embedder: TrigramEmbedder,
    /// Sampling settings for answer-variance responses.
    pub sampling: GenerationConfig,
}

/// One acquisition score for a parsed sample. `seed` drives the
/// answer-variance sampler.
pub fn acquisition_score(
    kind: RewardKind,
    cfg: &RewardConfig,
    ctx: &RewardContext<'_>,
    sample: &Sample,
    seed: u64,
) -> Result<f64> {
    match kind {
        RewardKind::Confidence => {
            let (prompt, target) = student_pair(ctx.student, sample)?;
            Ok(confidence_reward(ctx.student, &prompt, &target, cfg.epsilon)?.reward)
        }
        RewardKind::Proximity => proximity_reward(&ctx.embedder.embed(&sample.question), ctx.centers),
        RewardKind::Diversity => diversity_reward(&ctx.embedder.embed(&sample.question), ctx.centers),
        RewardKind::Gradient => gradient_reward(ctx.student, sample),
        RewardKind::AnswerVariance => answer_variance_reward(
            ctx.student,
            &sample.question,
            cfg.k,
            seed,
            &ctx.sampling,
            cfg.min_cluster_size,
        ),
        RewardKind::Format => Ok(0.0),
    }
}

/// Reward of one generated text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub scores: BTreeMap<String, f64>,
    pub acquisition_total: f64,
    pub format: f64,
    pub grand_total: f64,
}

impl RewardBreakdown {
    pub fn parsed(&self) -> bool {
        self.format == 0.0
    }
}

/// Format reward plus the configured acquisition score (0 for unparseable
/// text and in format-only mode).
pub fn total_reward(
    cfg: &RewardConfig,
    ctx: &RewardContext<'_>,
    raw: &str,
    seed: u64,
) -> Result<RewardBreakdown> {
    let mut scores = BTreeMap::new();
    let (format, acquisition) = match parse_tagged(raw) {
        Err(_) => (-1.0, 0.0),
        Ok(t) => {
            let a = if cfg.reward == RewardKind::Format {
                0.0
            } else {
                let sample = t.into_sample("candidate", Source::Generated);
                let a = acquisition_score(cfg.reward, cfg, ctx, &sample, seed)?;
                scores.insert(cfg.reward.name().to_string(), a);
                a
            };
            (0.0, a)
        }
    };
    scores.insert("format".into(), format);
    Ok(RewardBreakdown {
        scores,
        acquisition_total: acquisition,
        format,
        grand_total: acquisition + format,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::render_tagged;
    use crate::student::{ModelShape, Vocabulary};
    use std::sync::Arc;

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::from_values(values.to_vec()).unwrap()
    }

    fn tiny_shape() -> ModelShape {
        ModelShape {
            window: 2,
            embed: 1,
            hidden: 2,
        }
    }

    /// Logits giving p = (0.6, 0.3, 0.1 spread over the rest).
    fn margin_03_model() -> StudentModel {
        let vocab = Arc::new(Vocabulary::new("abcdef".chars()).unwrap());
        let v = vocab.len();
        let rest = 0.1 / (v - 2) as f64;
        let mut logits = vec![rest.ln(); v];
        logits[2] = 0.6f64.ln();
        logits[3] = 0.3f64.ln();
        StudentModel::with_fixed_logits(vocab, tiny_shape(), &logits).unwrap()
    }

    #[test]
    fn confidence_examples() {
        let m = margin_03_model();
        let s = confidence_reward(&m, &[2], &[2, 3, 4], 1e-6).unwrap();
        assert!((s.mean_margin - 0.3).abs() < 1e-6);
        assert!((s.reward - 1.0 / 0.3).abs() < 1e-4);
        let uniform = StudentModel::zeros(Arc::new(Vocabulary::default()), tiny_shape());
        let s = confidence_reward(&uniform, &[], &[5, 6], 1e-6).unwrap();
        assert_eq!(s.reward, 1e6);
        assert!(s.clamped);
        let s = confidence_reward(&uniform, &[], &[], 1e-6).unwrap();
        assert!(s.degenerate && s.reward == 0.0);
        let mut logits = vec![-1e3; 8];
        logits[2] = 0.0;
        let sure = StudentModel::with_fixed_logits(
            Arc::new(Vocabulary::new("abcdef".chars()).unwrap()),
            tiny_shape(),
            &logits,
        )
        .unwrap();
        assert_eq!(confidence_reward(&sure, &[], &[2, 2], 1e-6).unwrap().reward, 1.0);
    }

    #[test]
    fn proximity_and_diversity() {
        let c1 = unit(&[1.0, 0.0, 0.0]);
        let c2 = unit(&[0.0, 1.0, 0.0]);
        let e = unit(&[0.0, 0.0, 1.0]);
        assert_eq!(proximity_reward(&c1, &[c1.clone(), c2.clone()]).unwrap(), 1.0);
        assert_eq!(proximity_reward(&e, &[c1.clone(), c2.clone()]).unwrap(), 0.0);
        assert_eq!(diversity_reward(&e, &[c1.clone()]).unwrap(), 1.0);
        // sim(e, c1) = 0.2, sim(e, c2) = 0.7
        let e = unit(&[0.2, 0.7, (1.0f64 - 0.04 - 0.49).sqrt()]);
        let p = proximity_reward(&e, &[c1.clone(), c2.clone()]).unwrap();
        assert!((p - 0.7).abs() < 1e-12);
        assert!((diversity_reward(&e, &[c1, c2]).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(proximity_reward(&e, &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_reward("<question>Q</question><reasoning>R</reasoning><answer>A</answer>"), 0.0);
        assert_eq!(format_reward("<question>Q</question><reasoning>R</reasoning><answer>A"), -1.0);
        assert_eq!(format_reward(""), -1.0);
    }

    #[test]
    fn reward_names_round_trip() {
        for k in ALL_MODES {
            assert_eq!(k.name().parse::<RewardKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!(matches!("entropy".parse::<RewardKind>(), Err(Error::Config { .. })));
    }

    #[test]
    fn total_reward_composition() {
        let student = StudentModel::zeros(Arc::new(Vocabulary::default()), tiny_shape());
        let centers = vec![unit(&[1.0, 0.0])];
        let ctx = RewardContext {
            student: &student,
            centers: &centers,
            embedder: TrigramEmbedder::new(2),
            sampling: GenerationConfig::default(),
        };
        let good = "<question>What is 1+2?</question><reasoning>1+2=3</reasoning><answer>3</answer>";
        let fmt = RewardConfig::default();
        let r = total_reward(&fmt, &ctx, good, 0).unwrap();
        assert_eq!((r.grand_total, r.acquisition_total), (0.0, 0.0));
        let conf = RewardConfig {
            reward: RewardKind::Confidence,
            ..Default::default()
        };
        let r = total_reward(&conf, &ctx, "<question>Q</question>", 0).unwrap();
        assert_eq!(r.grand_total, -1.0);
        assert!(!r.parsed());
        let r = total_reward(&conf, &ctx, good, 0).unwrap();
        assert_eq!(r.grand_total, 1e6);
        assert_eq!(r.scores["confidence"], 1e6);
    }

    #[test]
    fn diversity_composition_value() {
        // Question embedding with proximity 0.25 to the only center.
        let student = StudentModel::zeros(Arc::new(Vocabulary::default()), tiny_shape());
        let embedder = TrigramEmbedder::default();
        let q = "What is 4*4?";
        let e = embedder.embed(q);
        let mut other = vec![0.0; e.dim()];
        let j = e.values().iter().position(|&v| v == 0.0).unwrap();
        // center = 0.25 e + sqrt(1 - 0.0625) u, u a unit axis orthogonal to e
        for (o, v) in other.iter_mut().zip(e.values()) {
            *o = 0.25 * v;
        }
        other[j] = (1.0f64 - 0.0625).sqrt();
        let center = EmbeddingVector::from_values(other).unwrap();
        let centers = vec![center];
        let ctx = RewardContext {
            student: &student,
            centers: &centers,
            embedder,
            sampling: GenerationConfig::default(),
        };
        let cfg = RewardConfig {
            reward: RewardKind::Diversity,
            ..Default::default()
        };
        let raw = render_tagged(&Sample::new("x", q, "4*4=16", "16", Source::Seed));
        let r = total_reward(&cfg, &ctx, &raw, 0).unwrap();
        assert!((r.acquisition_total - 0.75).abs() < 1e-12);
        assert!((r.grand_total - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gradient_reward_matches_finite_differences() {
        let vocab = Arc::new(Vocabulary::default());
        let shape = ModelShape {
            window: 2,
            embed: 1,
            hidden: 2,
        };
        let m = StudentModel::new(vocab, shape, 5);
        assert!(m.param_count() <= 500);
        let s = Sample::new("x", "What is 2+3?", "2+3=5", "5", Source::Seed);
        let reward = gradient_reward(&m, &s).unwrap();
        let (prompt, target) = student_pair(&m, &s).unwrap();
        let h = 1e-4;
        let mut norm2 = 0.0;
        for i in 0..m.param_count() {
            let mut p = m.params().to_vec();
            p[i] += h;
            let up = m.with_params(p.clone()).unwrap();
            p[i] -= 2.0 * h;
            let down = m.with_params(p).unwrap();
            let g = (up.loss(&prompt, &target).unwrap() - down.loss(&prompt, &target).unwrap()) / (2.0 * h);
            norm2 += g * g;
        }
        assert!(reward > 0.0);
        assert!((reward - norm2.sqrt()).abs() / reward < 1e-3);
    }

    #[test]
    fn gradient_scale_covariance() {
        let m = StudentModel::new(Arc::new(Vocabulary::default()), tiny_shape(), 9);
        let s = Sample::new("x", "What is 7-2?", "7-2=5", "5", Source::Seed);
        let (prompt, target) = student_pair(&m, &s).unwrap();
        let n = target.len() as f64;
        let norm = |c: f64| {
            let w = vec![-c / n; target.len()];
            let (g, _) = m.weighted_logprob_gradient(&prompt, &target, &w).unwrap();
            g.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        assert_eq!(norm(1.0), gradient_reward(&m, &s).unwrap());
        for c in [0.5, 2.0, 8.0] {
            assert_eq!(norm(c), c * norm(1.0));
        }
        assert!((norm(3.0) - 3.0 * norm(1.0)).abs() <= 1e-12 * norm(1.0));
    }

    #[test]
    fn answer_variance_cases() {
        let e = TrigramEmbedder::default();
        let same: Vec<String> = vec!["42".into(); 8];
        assert_eq!(answer_count(&same, &e, 2).unwrap(), 1);
        let distinct: Vec<String> = ["abc", "def", "ghi", "jkl", "mno", "pqr", "stu", "vwx"]
            .iter()
            .map(|s| s.repeat(2))
            .collect();
        assert_eq!(answer_count(&distinct, &e, 2).unwrap(), 8);
        let mut two: Vec<String> = vec!["aaaa".into(); 4];
        two.extend(vec!["zzzz".to_string(); 4]);
        assert_eq!(answer_count(&two, &e, 2).unwrap(), 2);

        let student = StudentModel::new(Arc::new(Vocabulary::default()), ModelShape::default(), 3);
        let sampling = GenerationConfig {
            max_new_symbols: 40,
            ..Default::default()
        };
        let r = answer_variance_reward(&student, "What is 1+1?", 8, 11, &sampling, 2).unwrap();
        assert!((1.0..=8.0).contains(&r));
        assert_eq!(r, answer_variance_reward(&student, "What is 1+1?", 8, 11, &sampling, 2).unwrap());
        let greedy = sampling.greedy();
        assert_eq!(answer_variance_reward(&student, "What is 1+1?", 8, 11, &greedy, 2).unwrap(), 1.0);
    }

    #[test]
    fn centers_from_seeds() {
        let seeds: Vec<Sample> = ["What is 1+2?", "What is 1+3?", "zzzz yyyy xxxx", "zzzz yyyy xxxy"]
            .iter()
            .enumerate()
            .map(|(i, q)| Sample::new(i.to_string(), *q, "r", "a", Source::Seed))
            .collect();
        let c = fit_centers(&seeds, &TrigramEmbedder::default(), 2).unwrap();
        assert!(!c.is_empty());
        for s in &seeds {
            let p = proximity_reward(&TrigramEmbedder::default().embed(&s.question), &c).unwrap();
            assert!(p > 0.5);
        }
        assert!(fit_centers(&[], &TrigramEmbedder::default(), 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn proximity_plus_diversity_is_one(
                e in proptest::collection::vec(0.0f64..1.0, 6),
                cs in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 1..5),
            ) {
                let e = EmbeddingVector::from_values(e).unwrap();
                let cs: Vec<_> = cs.into_iter().map(|c| EmbeddingVector::from_values(c).unwrap()).collect();
                let p = proximity_reward(&e, &cs).unwrap();
                prop_assert_eq!(p + diversity_reward(&e, &cs).unwrap(), 1.0);
                prop_assert!((0.0..=1.0).contains(&p));
            }

            #[test]
            fn confidence_antitone(a in 0.01f64..1.0, b in 0.01f64..1.0) {
                prop_assume!(a != b);
                let r = |m: f64| 1.0 / m.max(1e-6);
                prop_assert_eq!(a < b, r(a) > r(b));
            }
        }
    }
}
