//! Student training paradigms, accuracy, and distributional coverage.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::grpo::{self, Episode, GrpoConfig, Scorer};
use crate::prompt::{icl_prefix, student_prompt};
use crate::rewards::{student_pair, RewardBreakdown};
use crate::rng::derive_seed;
use crate::sample::{extract_answer, parse_tagged, Sample};
use crate::student::{GenerationConfig, Optimizer, OptimizerKind, StudentModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Icl,
    Sft,
    Rl,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Icl => "icl",
            Paradigm::Sft => "sft",
            Paradigm::Rl => "rl",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "icl" => Ok(Paradigm::Icl),
            "sft" => Ok(Paradigm::Sft),
            "rl" => Ok(Paradigm::Rl),
            _ => Err(Error::config("eval.paradigm", format!("unknown paradigm {s:?}"))),
        }
    }
}

/// Anything that answers a question, possibly with no answer.
pub trait Answerer: Sync {
    fn answer(&self, question: &str) -> Result<Option<String>>;
}

/// Greedy decoding from a model, optionally behind an in-context prefix.
#[derive(Debug, Clone)]
pub struct TrainedStudent {
    pub model: StudentModel,
    pub prefix: String,
    pub max_new_symbols: usize,
}

impl TrainedStudent {
    pub fn plain(model: StudentModel, max_new_symbols: usize) -> Self {
        TrainedStudent {
            model,
            prefix: String::new(),
            max_new_symbols,
        }
    }

    /// Greedy response to `question`.
    pub fn respond(&self, question: &str) -> Result<String> {
        let prompt = self.model.encode(&format!("{}{}", self.prefix, student_prompt(question)))?;
        let cfg = GenerationConfig {
            max_new_symbols: self.max_new_symbols,
            ..GenerationConfig::default()
        }
        .greedy();
        Ok(self.model.decode(&self.model.sample(&prompt, &cfg)?.symbols))
    }
}

impl Answerer for TrainedStudent {
    fn answer(&self, question: &str) -> Result<Option<String>> {
        Ok(extract_answer(&self.respond(question)?))
    }
}

/// Fraction of `test` whose extracted answer equals the reference exactly.
/// A missing answer counts as wrong.
pub fn evaluate_accuracy(answerer: &dyn Answerer, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let correct: Vec<bool> = test
        .par_iter()
        .map(|s| Ok(answerer.answer(&s.question)?.as_deref() == Some(s.answer.trim())))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / test.len() as f64)
}

/// Mean pairwise cosine similarity between the two sets.
pub fn coverage(gen: &[EmbeddingVector], test: &[EmbeddingVector]) -> Result<f64> {
    if gen.is_empty() || test.is_empty() {
        return Err(Error::contract("coverage needs two non-empty sets"));
    }
    let mut total = 0.0;
    for g in gen {
        for t in test {
            total += cosine_similarity(g, t)?;
        }
    }
    Ok(total / (gen.len() * test.len()) as f64)
}

/// Student training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub paradigm: Paradigm,
    /// In-context examples for ICL.
    pub icl_examples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// GRPO settings for the RL paradigm; its reward config is unused.
    pub rl: GrpoConfig,
    pub max_new_symbols: usize,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            paradigm: Paradigm::Sft,
            icl_examples: 3,
            epochs: 10,
            learning_rate: 0.003,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            rl: GrpoConfig {
                steps: 100,
                learning_rate: 0.5,
                generation: GenerationConfig {
                    max_new_symbols: 64,
                    ..GenerationConfig::default()
                },
                ..GrpoConfig::default()
            },
            max_new_symbols: 64,
            seed: 0,
        }
    }
}

/// Binary exact-match reward on the item's reference answer plus the
/// format reward on the full question/response text.
pub struct AccuracyScorer<'a> {
    pub data: &'a [Sample],
}

impl Scorer for AccuracyScorer<'_> {
    fn score(&self, episode: &Episode, completion: &str, _seed: u64) -> Result<RewardBreakdown> {
        let sample = &self.data[episode.item];
        let format = if parse_tagged(&format!("{}{completion}", episode.prompt)).is_ok() {
            0.0
        } else {
            -1.0
        };
        let accuracy = (extract_answer(completion).as_deref() == Some(sample.answer.trim())) as u8 as f64;
        Ok(RewardBreakdown {
            scores: [("accuracy".to_string(), accuracy), ("format".to_string(), format)].into(),
            acquisition_total: accuracy,
            format,
            grand_total: accuracy + format,
        })
    }
}

/// Trains a student on `data` under `cfg.paradigm`. The base is not
/// modified.
pub fn train_student(base: &StudentModel, data: &[Sample], cfg: &StudentConfig) -> Result<TrainedStudent> {
    if data.is_empty() {
        return Err(Error::contract("training data is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    match cfg.paradigm {
        Paradigm::Icl => {
            let mut shots: Vec<Sample> = data.to_vec();
            shots.shuffle(&mut rng);
            shots.truncate(cfg.icl_examples);
            Ok(TrainedStudent {
                model: base.clone(),
                prefix: icl_prefix(&shots),
                max_new_symbols: cfg.max_new_symbols,
            })
        }
        Paradigm::Sft => {
            if cfg.batch_size == 0 {
                return Err(Error::config("eval.batch_size", "must be positive"));
            }
            let pairs: Vec<_> = data.iter().map(|s| student_pair(base, s)).collect::<Result<_>>()?;
            let mut model = base.clone();
            let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<_> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                    model = opt.update(&model, &batch)?;
                }
            }
            Ok(TrainedStudent::plain(model, cfg.max_new_symbols))
        }
        Paradigm::Rl => {
            let rl = GrpoConfig {
                seed: derive_seed(cfg.seed, &[1]),
                ..cfg.rl.clone()
            };
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let groups = rl.groups_per_step;
            let scorer = AccuracyScorer { data };
            let out = grpo::train(
                base,
                &rl,
                |step| {
                    (0..groups)
                        .map(|g| {
                            let item = order[(step * groups + g) % order.len()];
                            Episode {
                                prompt: student_prompt(&data[item].question),
                                item,
                            }
                        })
                        .collect()
                },
                &scorer,
                |_| {},
            )?;
            Ok(TrainedStudent::plain(out.model, cfg.max_new_symbols))
        }
    }
}
