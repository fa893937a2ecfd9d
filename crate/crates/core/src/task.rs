//! Toy verifiable task: integer arithmetic with `+`, `-` and `*`.
//!
//! Questions read `What is 12+7*3?`. The canonical reasoning evaluates
//! multiplication first, then left to right, one step per clause
//! (`7*3=21; 12+21=33`), and the answer is the integer result. A
//! four-choice variant appends options `A) .. D) ..` and answers with the
//! letter.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Sample, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    pub fn from_symbol(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' => Some(Op::Sub),
            '*' => Some(Op::Mul),
            _ => None,
        }
    }

    fn apply(self, a: i64, b: i64) -> Option<i64> {
        match self {
            Op::Add => a.checked_add(b),
            Op::Sub => a.checked_sub(b),
            Op::Mul => a.checked_mul(b),
        }
    }
}

/// A flat expression `operands[0] ops[0] operands[1] ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expr {
    pub operands: Vec<i64>,
    pub ops: Vec<Op>,
}

impl Expr {
    pub fn render(&self) -> String {
        let mut s = self.operands[0].to_string();
        for (op, x) in self.ops.iter().zip(&self.operands[1..]) {
            s.push(op.symbol());
            s.push_str(&x.to_string());
        }
        s
    }

    /// Evaluation steps as `(a, op, b, result)`: all products first, then
    /// sums and differences left to right.
    pub fn steps(&self) -> Option<Vec<(i64, Op, i64, i64)>> {
        let mut vals = self.operands.clone();
        let mut ops = self.ops.clone();
        let mut steps = Vec::new();
        while let Some(i) = ops.iter().position(|&o| o == Op::Mul) {
            let r = Op::Mul.apply(vals[i], vals[i + 1])?;
            steps.push((vals[i], Op::Mul, vals[i + 1], r));
            vals.splice(i..=i + 1, [r]);
            ops.remove(i);
        }
        while !ops.is_empty() {
            let op = ops.remove(0);
            let r = op.apply(vals[0], vals[1])?;
            steps.push((vals[0], op, vals[1], r));
            vals.splice(0..=1, [r]);
        }
        Some(steps)
    }

    pub fn eval(&self) -> Option<i64> {
        match self.steps()?.last() {
            Some(&(_, _, _, r)) => Some(r),
            None => Some(self.operands[0]),
        }
    }

    pub fn reasoning(&self) -> Option<String> {
        let steps = self.steps()?;
        Some(
            steps
                .iter()
                .map(|(a, op, b, r)| format!("{a}{}{b}={r}", op.symbol()))
                .collect::<Vec<_>>()
                .join("; "),
        )
    }
}

/// Parses `12+7*3` (whitespace allowed) with at least one operator.
pub fn parse_expression(text: &str) -> Option<Expr> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut operands = Vec::new();
    let mut ops = Vec::new();
    let mut digits = String::new();
    for c in compact.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            let op = Op::from_symbol(c)?;
            if digits.is_empty() || digits.len() > 12 {
                return None;
            }
            operands.push(digits.parse().ok()?);
            digits.clear();
            ops.push(op);
        }
    }
    if digits.is_empty() || digits.len() > 12 || ops.is_empty() {
        return None;
    }
    operands.push(digits.parse().ok()?);
    Some(Expr { operands, ops })
}

pub fn question_text(expr: &Expr) -> String {
    format!("What is {}?", expr.render())
}

const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Splits `What is E? A) x B) y C) z D) w` into the expression text and the
/// four option strings, when options are present.
fn split_question(question: &str) -> (&str, Option<Vec<&str>>) {
    let q = question.trim();
    let body = q.strip_prefix("What is").unwrap_or(q);
    match body.find('?') {
        Some(i) => {
            let expr = &body[..i];
            let rest = &body[i + 1..];
            if rest.trim().is_empty() {
                return (expr, None);
            }
            let mut opts = Vec::new();
            let mut tail = rest;
            for (k, l) in LETTERS.iter().enumerate() {
                let tag = format!("{l})");
                let Some(start) = tail.find(&tag) else {
                    return (expr, Some(Vec::new()));
                };
                let after = &tail[start + tag.len()..];
                let end = if k + 1 < LETTERS.len() {
                    after.find(&format!("{})", LETTERS[k + 1])).unwrap_or(after.len())
                } else {
                    after.len()
                };
                opts.push(after[..end].trim());
                tail = &after[end..];
            }
            (expr, Some(opts))
        }
        None => (body, None),
    }
}

/// Exact answer for a toy question, or `None` if it is not a well-formed
/// arithmetic question (or, for the choice variant, no option matches).
pub fn oracle_answer(question: &str) -> Option<String> {
    let (expr, options) = split_question(question);
    let value = parse_expression(expr)?.eval()?;
    match options {
        None => Some(value.to_string()),
        Some(opts) => {
            let want = value.to_string();
            opts.iter()
                .position(|o| *o == want)
                .filter(|_| opts.len() == 4)
                .map(|i| LETTERS[i].to_string())
        }
    }
}

/// Parameters of the toy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub min_operand: i64,
    pub max_operand: i64,
    pub min_operators: usize,
    pub max_operators: usize,
    /// Allowed operator symbols, e.g. `"+-*"`.
    pub operators: String,
    pub train_size: usize,
    pub test_size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Four-choice variant.
    pub choices: bool,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            min_operand: 0,
            max_operand: 99,
            min_operators: 1,
            max_operators: 2,
            operators: "+-*".into(),
            train_size: 500,
            test_size: 200,
            train_seed: 1,
            test_seed: 2,
            choices: false,
        }
    }
}

impl ToyTaskConfig {
    /// Held-out variant with a disjoint operand range and a different
    /// operator mix.
    pub fn out_of_distribution(&self) -> Self {
        let width = self.max_operand - self.min_operand;
        ToyTaskConfig {
            min_operand: self.max_operand + 1,
            max_operand: self.max_operand + 1 + width,
            operators: if self.operators.contains('*') { "-*".into() } else { self.operators.clone() },
            test_seed: self.test_seed.wrapping_add(1_000_003),
            train_seed: self.train_seed.wrapping_add(1_000_003),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<Vec<Op>> {
        if self.min_operand < 0 || self.max_operand < self.min_operand {
            return Err(Error::config("task.max_operand", "operand range is empty or negative"));
        }
        if self.min_operators == 0 || self.max_operators < self.min_operators {
            return Err(Error::config("task.max_operators", "need 1 <= min_operators <= max_operators"));
        }
        let ops: Option<Vec<Op>> = self.operators.chars().map(Op::from_symbol).collect();
        match ops {
            Some(ops) if !ops.is_empty() => Ok(ops),
            _ => Err(Error::config("task.operators", "use a non-empty subset of \"+-*\"")),
        }
    }
}

/// Generated train and test splits with disjoint questions.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ToyTask {
    pub fn new(config: ToyTaskConfig) -> Result<Self> {
        let ops = config.validate()?;
        let mut seen = HashSet::new();
        let test = generate_split(&config, &ops, config.test_seed, config.test_size, "test", &mut seen)?;
        let train = generate_split(&config, &ops, config.train_seed, config.train_size, "train", &mut seen)?;
        Ok(ToyTask {
            config,
            train,
            test,
        })
    }

    /// Seed samples: the first `n` training items.
    pub fn seeds(&self, n: usize) -> Vec<Sample> {
        self.train.iter().take(n).cloned().collect()
    }
}

fn random_expr(cfg: &ToyTaskConfig, ops: &[Op], rng: &mut ChaCha8Rng) -> Expr {
    let n_ops = rng.gen_range(cfg.min_operators..=cfg.max_operators);
    let operands = (0..=n_ops)
        .map(|_| rng.gen_range(cfg.min_operand..=cfg.max_operand))
        .collect();
    let ops = (0..n_ops).map(|_| *ops.choose(rng).unwrap()).collect();
    Expr { operands, ops }
}

/// Builds one sample for `expr`; with `choices`, three distinct distractors
/// near the true value are shuffled in with it.
pub fn make_sample(expr: &Expr, id: String, choices: bool, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let value = expr.eval()?;
    let mut reasoning = expr.reasoning()?;
    if reasoning.is_empty() {
        reasoning = value.to_string();
    }
    let mut question = question_text(expr);
    let mut answer = value.to_string();
    if choices {
        let mut opts = vec![value];
        while opts.len() < 4 {
            let d = value + rng.gen_range(-10i64..=10);
            if !opts.contains(&d) {
                opts.push(d);
            }
        }
        opts.shuffle(rng);
        let pos = opts.iter().position(|&o| o == value)?;
        for (l, o) in LETTERS.iter().zip(&opts) {
            question.push_str(&format!(" {l}) {o}"));
        }
        answer = LETTERS[pos].to_string();
        reasoning = format!("{reasoning}; choice {answer}");
    }
    Some(Sample::new(id, question, reasoning, answer, Source::Seed))
}

fn generate_split(
    cfg: &ToyTaskConfig,
    ops: &[Op],
    seed: u64,
    n: usize,
    prefix: &str,
    seen: &mut HashSet<String>,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let cap = 1000 * (n + 1);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > cap {
            return Err(Error::config(
                "task",
                format!("could not draw {n} distinct {prefix} questions from the operand range"),
            ));
        }
        let expr = random_expr(cfg, ops, &mut rng);
        if !seen.insert(expr.render()) {
            continue;
        }
        let id = format!("{prefix}-{:05}", out.len());
        if let Some(s) = make_sample(&expr, id, cfg.choices, &mut rng) {
            out.push(s);
        }
    }
    Ok(out)
}
