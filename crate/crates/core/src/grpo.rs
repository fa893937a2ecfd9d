//! Group-relative policy optimization.
//!
//! For each prompt a group of `G` completions is sampled from the current
//! policy and scored. Rewards are standardized within the group to give
//! advantages `A_i`, and the policy ascends, per completion symbol,
//!
//! ```text
//! min(rho * A_i, clip(rho, 1 - eps, 1 + eps) * A_i) - beta * KL_t
//! ```
//!
//! with `rho = exp(logp - logp_old)` and the per-symbol estimator
//! `KL_t = exp(ref - logp) - (ref - logp) - 1` against a frozen reference.
//! Symbol terms are averaged within a completion, then over completions.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::TrigramEmbedder;
use crate::error::{Error, Result};
use crate::prompt::{generator_prompt, TemplateKind};
use crate::rewards::{fit_centers, total_reward, RewardBreakdown, RewardConfig, RewardContext};
use crate::rng::derive_seed;
use crate::sample::Sample;
use crate::student::{GenerationConfig, Optimizer, OptimizerKind, StudentModel, Symbol};

/// Optimizer and rollout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub inner_epochs: usize,
    /// Prompts (groups) per step.
    pub groups_per_step: usize,
    /// Seed examples shown in each generator prompt.
    pub icl_examples: usize,
    /// Seed samples beyond this count are ignored.
    pub seed_limit: usize,
    pub generation: GenerationConfig,
    /// Sampling used for student responses inside rewards.
    pub response_generation: GenerationConfig,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 1.0,
            optimizer: OptimizerKind::Sgd,
            steps: 300,
            inner_epochs: 1,
            groups_per_step: 1,
            icl_examples: 4,
            seed_limit: 500,
            generation: GenerationConfig::default(),
            response_generation: GenerationConfig {
                max_new_symbols: 64,
                ..GenerationConfig::default()
            },
            reward: RewardConfig::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("generator.group_size", "group size must be at least 2"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("generator.clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::config("generator.kl_beta", "must be nonnegative"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("generator.learning_rate", "must be finite and nonnegative"));
        }
        if self.inner_epochs == 0 || self.groups_per_step == 0 {
            return Err(Error::config("generator.inner_epochs", "inner_epochs and groups_per_step must be positive"));
        }
        for (key, g) in [("generator.generation", &self.generation), ("generator.response_generation", &self.response_generation)] {
            if !(g.temperature > 0.0) {
                return Err(Error::config(format!("{key}.temperature"), "must be positive"));
            }
        }
        self.reward.validate()
    }
}

/// Group-standardized advantages; all zero when the rewards are constant.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    // Equal rewards carry no signal; the mean can round away from them.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// One sampled group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub prompt: Vec<Symbol>,
    pub completions: Vec<Vec<Symbol>>,
    pub raw_texts: Vec<String>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub ref_logprobs: Vec<Vec<f64>>,
    pub old_logprobs: Vec<Vec<f64>>,
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    /// Mean per-symbol KL estimate, averaged as the objective.
    pub kl: f64,
    /// Fraction of completion symbols whose ratio term was clipped.
    pub clip_fraction: f64,
}

/// Gradient of the objective (to be ascended) and the step statistics.
pub fn grpo_gradient(
    policy: &StudentModel,
    rollouts: &[GroupRollout],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<(Vec<f64>, StepStats)> {
    let items: Vec<(usize, usize)> = rollouts
        .iter()
        .enumerate()
        .flat_map(|(r, g)| (0..g.completions.len()).map(move |i| (r, i)))
        .collect();
    if items.is_empty() {
        return Ok((vec![0.0; policy.param_count()], StepStats::default()));
    }
    let per_item = 1.0 / items.len() as f64;
    let parts: Vec<(Vec<f64>, f64, usize, usize)> = items
        .par_iter()
        .map(|&(r, i)| {
            let g = &rollouts[r];
            let completion = &g.completions[i];
            let t_len = completion.len();
            if t_len == 0 {
                return Ok((vec![0.0; policy.param_count()], 0.0, 0, 0));
            }
            let (old, refl) = (&g.old_logprobs[i], &g.ref_logprobs[i]);
            if old.len() != t_len || refl.len() != t_len {
                return Err(Error::contract("log-probability rows must match completion lengths"));
            }
            let a = g.advantages[i];
            let scale = per_item / t_len as f64;
            let mut kl = 0.0;
            let mut clipped = 0;
            let result = policy.logprob_gradient_with(&g.prompt, completion, |t, logp| {
                let rho = (logp - old[t]).exp();
                let x = refl[t] - logp;
                let ex = x.exp();
                kl += ex - x - 1.0;
                let is_clipped = (a > 0.0 && rho > 1.0 + clip_epsilon) || (a < 0.0 && rho < 1.0 - clip_epsilon);
                if is_clipped {
                    clipped += 1;
                }
                let ratio_term = if is_clipped { 0.0 } else { a * rho };
                scale * (ratio_term - kl_beta * (1.0 - ex))
            });
            let dump = || {
                Error::NonFinite(format!(
                    "objective for completion {:?} with rewards {:?}",
                    g.raw_texts[i], g.rewards[i]
                ))
            };
            let grad = match result {
                Ok((grad, _)) if kl.is_finite() => grad,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(dump()),
                Err(e) => return Err(e),
            };
            Ok((grad, kl / t_len as f64, clipped, t_len))
        })
        .collect::<Result<_>>()?;

    let mut grad = vec![0.0; policy.param_count()];
    let (mut kl, mut clipped, mut symbols) = (0.0, 0usize, 0usize);
    for (g, k, c, n) in &parts {
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
        kl += k;
        clipped += c;
        symbols += n;
    }
    let rewards: Vec<f64> = rollouts.iter().flat_map(|g| g.rewards.iter().map(|r| r.grand_total)).collect();
    let advs: Vec<f64> = rollouts.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let stats = StepStats {
        mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
        mean_abs_advantage: advs.iter().map(|a| a.abs()).sum::<f64>() / advs.len().max(1) as f64,
        kl: kl * per_item,
        clip_fraction: if symbols == 0 { 0.0 } else { clipped as f64 / symbols as f64 },
    };
    Ok((grad, stats))
}

/// One ascent step on the clipped, KL-penalized objective.
pub fn grpo_step(
    policy: &StudentModel,
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<(StudentModel, StepStats)> {
    let (grad, stats) = grpo_gradient(policy, rollouts, cfg.clip_epsilon, cfg.kl_beta)?;
    Ok((policy.step(&grad, cfg.learning_rate)?, stats))
}

/// A prompt to roll out, with an index the scorer may use to find the
/// reference item behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: String,
    pub item: usize,
}

/// Reward source for rollouts. Implementations must be deterministic in
/// their arguments.
pub trait Scorer: Sync {
    fn score(&self, episode: &Episode, completion: &str, seed: u64) -> Result<RewardBreakdown>;
}

/// Samples and scores one group from `policy`.
pub fn collect_rollout(
    policy: &StudentModel,
    reference: &StudentModel,
    episode: &Episode,
    scorer: &dyn Scorer,
    cfg: &GrpoConfig,
    stream: &[u64],
) -> Result<GroupRollout> {
    let prompt = policy.encode(&episode.prompt)?;
    let drawn: Vec<_> = (0..cfg.group_size as u64)
        .into_par_iter()
        .map(|i| {
            let mut parts = stream.to_vec();
            parts.push(i);
            let gen = cfg.generation.with_seed(derive_seed(cfg.seed, &parts));
            let g = policy.sample(&prompt, &gen)?;
            let text = policy.decode(&g.symbols);
            parts.push(u64::MAX);
            let reward = scorer.score(episode, &text, derive_seed(cfg.seed, &parts))?;
            let refl = reference.sequence_logprobs(&prompt, &g.symbols)?;
            Ok((g.symbols, text, reward, g.logprobs, refl))
        })
        .collect::<Result<_>>()?;
    let mut rollout = GroupRollout {
        prompt,
        completions: Vec::new(),
        raw_texts: Vec::new(),
        rewards: Vec::new(),
        advantages: Vec::new(),
        ref_logprobs: Vec::new(),
        old_logprobs: Vec::new(),
    };
    for (symbols, text, reward, old, refl) in drawn {
        rollout.completions.push(symbols);
        rollout.raw_texts.push(text);
        rollout.rewards.push(reward);
        rollout.old_logprobs.push(old);
        rollout.ref_logprobs.push(refl);
    }
    let totals: Vec<f64> = rollout.rewards.iter().map(|r| r.grand_total).collect();
    rollout.advantages = compute_advantages(&totals);
    Ok(rollout)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub mean_reward: f64,
    pub format_pass_rate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    /// Fraction of this step's completions repeating an earlier one.
    pub duplicate_fraction: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentModel,
    /// Mean grand total per step.
    pub reward_curve: Vec<f64>,
    pub log: Vec<TrainLogEntry>,
}

/// Runs `cfg.steps` GRPO steps from `initial`, which also serves as the
/// frozen reference. `episodes(step)` supplies the prompts of each step.
pub fn train(
    initial: &StudentModel,
    cfg: &GrpoConfig,
    mut episodes: impl FnMut(usize) -> Vec<Episode>,
    scorer: &dyn Scorer,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut reward_curve = Vec::with_capacity(cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let eps = episodes(step);
        let rollouts: Vec<GroupRollout> = eps
            .iter()
            .enumerate()
            .map(|(g, ep)| collect_rollout(&policy, &reference, ep, scorer, cfg, &[step as u64, g as u64]))
            .collect::<Result<_>>()?;
        let mut first = None;
        for _ in 0..cfg.inner_epochs {
            let (grad, stats) = grpo_gradient(&policy, &rollouts, cfg.clip_epsilon, cfg.kl_beta)?;
            policy = optimizer.apply(&policy, &grad, 1.0)?;
            first.get_or_insert(stats);
        }
        let stats = first.unwrap_or_default();
        let rewards: Vec<&RewardBreakdown> = rollouts.iter().flat_map(|g| &g.rewards).collect();
        let texts: Vec<&String> = rollouts.iter().flat_map(|g| &g.raw_texts).collect();
        let n = rewards.len().max(1) as f64;
        let mut seen = HashSet::new();
        let dups = texts.iter().filter(|t| !seen.insert(t.trim())).count();
        let entry = TrainLogEntry {
            step,
            mean_reward: stats.mean_reward,
            format_pass_rate: rewards.iter().filter(|r| r.parsed()).count() as f64 / n,
            kl: stats.kl,
            clip_fraction: stats.clip_fraction,
            duplicate_fraction: dups as f64 / n,
        };
        log::debug!(
            "step {step}: reward {:.4} format {:.3} kl {:.5}",
            entry.mean_reward,
            entry.format_pass_rate,
            entry.kl
        );
        on_step(&entry);
        reward_curve.push(stats.mean_reward);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: policy,
        reward_curve,
        log,
    })
}

/// Scores generator completions with [`total_reward`] against a frozen
/// student and frozen seed-set centers.
pub struct GeneratorScorer<'a> {
    pub reward: RewardConfig,
    pub context: RewardContext<'a>,
}

impl Scorer for GeneratorScorer<'_> {
    fn score(&self, _episode: &Episode, completion: &str, seed: u64) -> Result<RewardBreakdown> {
        total_reward(&self.reward, &self.context, completion, seed)
    }
}

/// Generator prompt for `step`: the instruction plus a window of seed
/// examples that advances by `icl_examples` each step.
pub fn rotating_prompt(kind: TemplateKind, seeds: &[Sample], icl_examples: usize, step: usize) -> String {
    if seeds.is_empty() || icl_examples == 0 {
        return generator_prompt(kind, &[]);
    }
    let start = step * icl_examples;
    let window: Vec<Sample> = (0..icl_examples.min(seeds.len()))
        .map(|j| seeds[(start + j) % seeds.len()].clone())
        .collect();
    generator_prompt(kind, &window)
}

/// Trains a generator from `initial` against rewards measured on
/// `student`, prompting with rotating windows of `seeds`. Cluster centers
/// for proximity and diversity are fitted once on the seed questions.
pub fn train_generator(
    initial: &StudentModel,
    student: &StudentModel,
    seeds: &[Sample],
    cfg: &GrpoConfig,
    kind: TemplateKind,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("generator", "at least one seed sample is required"));
    }
    let seeds = if seeds.len() > cfg.seed_limit {
        log::warn!("using the first {} of {} seed samples", cfg.seed_limit, seeds.len());
        &seeds[..cfg.seed_limit]
    } else {
        seeds
    };
    let embedder = TrigramEmbedder::default();
    let centers = if cfg.reward.reward.needs_centers() {
        fit_centers(seeds, &embedder, cfg.reward.min_cluster_size)?
    } else {
        Vec::new()
    };
    let scorer = GeneratorScorer {
        reward: cfg.reward.clone(),
        context: RewardContext {
            student,
            centers: &centers,
            embedder,
            sampling: cfg.response_generation,
        },
    };
    let groups = cfg.groups_per_step;
    let mut write_err = None;
    let outcome = train(
        initial,
        cfg,
        |step| {
            (0..groups)
                .map(|g| Episode {
                    prompt: rotating_prompt(kind, seeds, cfg.icl_examples, step * groups + g),
                    item: 0,
                })
                .collect()
        },
        &scorer,
        |entry| {
            if let Some(w) = log_sink.as_deref_mut() {
                let line = serde_json::to_string(entry).expect("log entries serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    write_err.get_or_insert(e);
                }
            }
        },
    )?;
    match write_err {
        Some(e) => Err(e.into()),
        None => Ok(outcome),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::{ModelShape, Vocabulary, EOS};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            scores: BTreeMap::new(),
            acquisition_total: total,
            format: 0.0,
            grand_total: total,
        }
    }

    fn tiny() -> ModelShape {
        ModelShape {
            window: 2,
            embed: 2,
            hidden: 3,
        }
    }

    /// Vocabulary {BOS, EOS, a, b} with fixed logits for a and b only.
    fn two_symbol_model(la: f64, lb: f64) -> StudentModel {
        let vocab = Arc::new(Vocabulary::new("ab".chars()).unwrap());
        StudentModel::with_fixed_logits(vocab, tiny(), &[-1e4, -1e4, la, lb]).unwrap()
    }

    fn rollout_for(model: &StudentModel, completions: Vec<Vec<Symbol>>, rewards: &[f64]) -> GroupRollout {
        let prompt = vec![2];
        let lps: Vec<Vec<f64>> = completions
            .iter()
            .map(|c| model.sequence_logprobs(&prompt, c).unwrap())
            .collect();
        GroupRollout {
            prompt,
            raw_texts: completions.iter().map(|c| model.decode(c)).collect(),
            completions,
            rewards: rewards.iter().map(|&r| breakdown(r)).collect(),
            advantages: compute_advantages(rewards),
            ref_logprobs: lps.clone(),
            old_logprobs: lps,
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
        let a = compute_advantages(&[0.0, 2.0]);
        assert!((a[0] + 1.0).abs() < 1e-6 && (a[1] - 1.0).abs() < 1e-6);
        let a = compute_advantages(&[0.3, -1.0, 7.5, 2.0, 2.0]);
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted = compute_advantages(&[10.3, 9.0, 17.5, 12.0, 12.0]);
        for (x, y) in a.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn reinforce_oracle() {
        // Context-independent policy over {a, b}: d log p(s) / d bias =
        // onehot(s) - p, so the on-policy objective gradient is
        // sum_i A_i / (G * T_i) * sum_t (onehot(s_t) - p).
        let m = two_symbol_model(0.3, -0.2);
        let p = m.next_distribution(&[]).unwrap();
        let completions = vec![vec![2, 3, 2], vec![3], vec![2, 2], vec![3, 3, 3, 2]];
        let rewards = [1.0, 0.0, 0.5, -2.0];
        let r = rollout_for(&m, completions.clone(), &rewards);
        let (grad, stats) = grpo_gradient(&m, &[r.clone()], 0.2, 0.0).unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
        let layout = m.layout();
        let g = completions.len() as f64;
        for j in 0..4 {
            let mut expect = 0.0;
            for (c, a) in completions.iter().zip(&r.advantages) {
                let s: f64 = c.iter().map(|&t| (t == j) as u8 as f64 - p[j]).sum();
                expect += a * s / (g * c.len() as f64);
            }
            assert!((grad[layout.out_b + j] - expect).abs() < 1e-6, "bias {j}");
        }
        let rest: f64 = grad[..layout.out_b].iter().map(|x| x.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn zero_advantage_zero_beta_is_a_no_op() {
        let m = StudentModel::new(Arc::new(Vocabulary::new("ab".chars()).unwrap()), tiny(), 3);
        let r = rollout_for(&m, vec![vec![2, 3, EOS], vec![3, EOS], vec![2, EOS]], &[0.7, 0.7, 0.7]);
        let cfg = GrpoConfig {
            kl_beta: 0.0,
            learning_rate: 1.0,
            ..Default::default()
        };
        let (next, _) = grpo_step(&m, &[r], &cfg).unwrap();
        assert_eq!(next.params(), m.params());
    }

    #[test]
    fn kl_vanishes_at_the_reference() {
        let m = StudentModel::new(Arc::new(Vocabulary::new("ab".chars()).unwrap()), tiny(), 4);
        let r = rollout_for(&m, vec![vec![2, 3], vec![3, 3, EOS]], &[1.0, 1.0]);
        let (grad, stats) = grpo_gradient(&m, &[r], 0.2, 100.0).unwrap();
        assert_eq!(stats.kl, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn clipping_blocks_the_ratio_term() {
        let old = two_symbol_model(0.0, 0.0);
        let new = two_symbol_model(2.0, 0.0);
        // Under `new`, rho(a) = 1.76 and rho(b) = 0.24.
        let r = rollout_for(&old, vec![vec![2], vec![3]], &[1.0, 0.0]);
        let (grad, stats) = grpo_gradient(&new, &[r], 0.2, 0.0).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let r = rollout_for(&old, vec![vec![2], vec![3]], &[0.0, 1.0]);
        let (_, stats) = grpo_gradient(&new, &[r], 0.2, 0.0).unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
    }

    struct Fixed;
    impl Scorer for Fixed {
        fn score(&self, _: &Episode, completion: &str, _: u64) -> Result<RewardBreakdown> {
            Ok(breakdown(completion.matches('a').count() as f64))
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_steps_is_identity() {
        let m = StudentModel::new(Arc::new(Vocabulary::new("ab".chars()).unwrap()), tiny(), 7);
        let cfg = GrpoConfig {
            steps: 0,
            generation: GenerationConfig {
                max_new_symbols: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        let eps = |_: usize| {
            vec![Episode {
                prompt: "ab".into(),
                item: 0,
            }]
        };
        let out = train(&m, &cfg, eps, &Fixed, |_| {}).unwrap();
        assert_eq!(out.model.params(), m.params());
        let cfg = GrpoConfig { steps: 5, ..cfg };
        let a = train(&m, &cfg, eps, &Fixed, |_| {}).unwrap();
        let b = train(&m, &cfg, eps, &Fixed, |_| {}).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.reward_curve, b.reward_curve);
        assert_eq!(a.log.len(), 5);
    }

    #[test]
    fn rewarded_symbol_becomes_likelier() {
        let m = StudentModel::new(Arc::new(Vocabulary::new("ab".chars()).unwrap()), tiny(), 8);
        let cfg = GrpoConfig {
            steps: 40,
            learning_rate: 0.5,
            generation: GenerationConfig {
                max_new_symbols: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        let eps = |_: usize| {
            vec![Episode {
                prompt: "b".into(),
                item: 0,
            }]
        };
        let out = train(&m, &cfg, eps, &Fixed, |_| {}).unwrap();
        let p0 = m.next_distribution(&[3]).unwrap()[2];
        let p1 = out.model.next_distribution(&[3]).unwrap()[2];
        assert!(p1 > p0, "{p0} -> {p1}");
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig { group_size: 1, ..Default::default() },
            GrpoConfig { clip_epsilon: 1.0, ..Default::default() },
            GrpoConfig { kl_beta: -0.1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn rotating_window_advances() {
        use crate::sample::Source;
        let seeds: Vec<Sample> = (0..5)
            .map(|i| Sample::new(i.to_string(), format!("What is {i}+1?"), "r", "a", Source::Seed))
            .collect();
        let p0 = rotating_prompt(TemplateKind::Math, &seeds, 2, 0);
        let p1 = rotating_prompt(TemplateKind::Math, &seeds, 2, 1);
        assert!(p0.contains("What is 0+1?") && p0.contains("What is 1+1?"));
        assert!(p1.contains("What is 2+1?") && !p1.contains("What is 0+1?"));
        let p2 = rotating_prompt(TemplateKind::Math, &seeds, 2, 2);
        assert!(p2.contains("What is 4+1?") && p2.contains("What is 0+1?"));
    }
}
