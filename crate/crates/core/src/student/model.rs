use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{Symbol, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};

/// Hyperparameters of the fixed-window MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    /// Context window in symbols.
    pub window: usize,
    /// Symbol embedding width.
    pub embed: usize,
    /// Hidden layer width.
    pub hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            window: 16,
            embed: 16,
            hidden: 64,
        }
    }
}

/// Sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_symbols: usize,
    pub seed: u64,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 1.0,
            max_new_symbols: 160,
            seed: 0,
            greedy: false,
        }
    }
}

impl GenerationConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        GenerationConfig { seed, ..self }
    }

    pub fn greedy(self) -> Self {
        GenerationConfig {
            greedy: true,
            ..self
        }
    }
}

/// A completion drawn by [`StudentModel::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted symbols, ending with EOS when the model stopped on its own.
    pub symbols: Vec<Symbol>,
    /// Log-probability of each emitted symbol under the untempered model.
    pub logprobs: Vec<f64>,
}

/// Offsets of the parameter blocks inside the flat parameter vector.
///
/// Layout, all row-major: embedding `[V][E]`, hidden weights `[W*E][H]`,
/// hidden bias `[H]`, output weights `[H][V]`, output bias `[V]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding: usize,
    pub hidden_w: usize,
    pub hidden_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(vocab: usize, shape: ModelShape) -> Self {
        let ModelShape {
            window,
            embed,
            hidden,
        } = shape;
        let hidden_w = vocab * embed;
        let hidden_b = hidden_w + window * embed * hidden;
        let out_w = hidden_b + hidden;
        let out_b = out_w + hidden * vocab;
        ParamLayout {
            embedding: 0,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            total: out_b + vocab,
        }
    }
}

/// The tiny autoregressive model shared by the generator and student roles.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    vocab: Arc<Vocabulary>,
    shape: ModelShape,
    layout: ParamLayout,
    params: Vec<f64>,
    seed: u64,
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl StudentModel {
    /// Randomly initialized model. Parameters are drawn uniformly and
    /// rounded to f32 so checkpoints are lossless.
    pub fn new(vocab: Arc<Vocabulary>, shape: ModelShape, seed: u64) -> Self {
        let v = vocab.len();
        let layout = ParamLayout::new(v, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let fan_in = (shape.window * shape.embed) as f64;
        let w1 = 1.0 / fan_in.sqrt();
        let w2 = 0.5 / (shape.hidden as f64).sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let scale = if i < layout.hidden_w {
                0.5
            } else if i < layout.hidden_b {
                w1
            } else if i < layout.out_w {
                0.0
            } else if i < layout.out_b {
                w2
            } else {
                0.0
            };
            if scale > 0.0 {
                *p = to_f32_grid(rng.gen_range(-scale..scale));
            }
        }
        StudentModel {
            vocab,
            shape,
            layout,
            params,
            seed,
        }
    }

    /// All-zero parameters: the uniform distribution everywhere.
    pub fn zeros(vocab: Arc<Vocabulary>, shape: ModelShape) -> Self {
        let layout = ParamLayout::new(vocab.len(), shape);
        StudentModel {
            vocab,
            shape,
            layout,
            params: vec![0.0; layout.total],
            seed: 0,
        }
    }

    /// A model whose next-symbol logits are `logits` for every context:
    /// all weights zero, output bias set.
    pub fn with_fixed_logits(vocab: Arc<Vocabulary>, shape: ModelShape, logits: &[f64]) -> Result<Self> {
        let mut m = StudentModel::zeros(vocab, shape);
        if logits.len() != m.vocab.len() {
            return Err(Error::contract("one logit per vocabulary symbol required"));
        }
        let b = m.layout.out_b;
        m.params[b..b + logits.len()].copy_from_slice(logits);
        Ok(m)
    }

    /// Same model with a replaced parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.layout.total {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(StudentModel {
            params,
            ..self.clone()
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Symbol>> {
        self.vocab.encode(text)
    }

    pub fn decode(&self, symbols: &[Symbol]) -> String {
        self.vocab.decode(symbols)
    }

    /// Symbols visible when predicting the symbol after `context`: the last
    /// `window` symbols, left-padded with BOS.
    fn window_of(&self, context: &[Symbol], out: &mut Vec<Symbol>) {
        let w = self.shape.window;
        out.clear();
        let start = context.len().saturating_sub(w);
        out.extend(std::iter::repeat(BOS).take(w - (context.len() - start)));
        out.extend_from_slice(&context[start..]);
    }

    fn forward(&self, window: &[Symbol]) -> Activations {
        let ModelShape { embed, hidden, .. } = self.shape;
        let v = self.vocab.len();
        let p = &self.params;
        let l = self.layout;

        let mut input = Vec::with_capacity(window.len() * embed);
        for &s in window {
            input.extend_from_slice(&p[l.embedding + s * embed..l.embedding + (s + 1) * embed]);
        }
        let mut pre = p[l.hidden_b..l.hidden_b + hidden].to_vec();
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &p[l.hidden_w + i * hidden..l.hidden_w + (i + 1) * hidden];
            for (acc, w) in pre.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
        let hid: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        let mut logits = p[l.out_b..l.out_b + v].to_vec();
        for (j, &h) in hid.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &p[l.out_w + j * v..l.out_w + (j + 1) * v];
            for (acc, w) in logits.iter_mut().zip(row) {
                *acc += h * w;
            }
        }
        Activations {
            input,
            hidden: hid,
            logits,
        }
    }

    /// Accumulates the gradient of `dlogits . logits` into `grad`.
    fn backward(&self, window: &[Symbol], act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let ModelShape { embed, hidden, .. } = self.shape;
        let v = self.vocab.len();
        let p = &self.params;
        let l = self.layout;

        for (g, d) in grad[l.out_b..l.out_b + v].iter_mut().zip(dlogits) {
            *g += d;
        }
        let mut dpre = vec![0.0; hidden];
        for j in 0..hidden {
            let h = act.hidden[j];
            let row = l.out_w + j * v;
            for (g, d) in grad[row..row + v].iter_mut().zip(dlogits) {
                *g += h * d;
            }
            let dh = dot(&p[row..row + v], dlogits);
            dpre[j] = dh * (1.0 - h * h);
        }
        for (g, d) in grad[l.hidden_b..l.hidden_b + hidden].iter_mut().zip(&dpre) {
            *g += d;
        }
        for (i, &x) in act.input.iter().enumerate() {
            let row = l.hidden_w + i * hidden;
            for (g, d) in grad[row..row + hidden].iter_mut().zip(&dpre) {
                *g += x * d;
            }
            let dx = dot(&p[row..row + hidden], &dpre);
            let sym = window[i / embed];
            grad[l.embedding + sym * embed + i % embed] += dx;
        }
    }

    /// Raw next-symbol logits after `context`.
    pub fn logits(&self, context: &[Symbol]) -> Result<Vec<f64>> {
        let mut w = Vec::with_capacity(self.shape.window);
        self.window_of(context, &mut w);
        let logits = self.forward(&w).logits;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Softmax of the next-symbol logits.
    pub fn next_distribution(&self, context: &[Symbol]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(context)?, 1.0))
    }

    /// For each response position, p(top-1) - p(top-2) of the model's
    /// next-symbol distribution, whatever symbol the response actually has.
    pub fn top2_margin(&self, prompt: &[Symbol], response: &[Symbol]) -> Result<Vec<f64>> {
        let mut ctx = prompt.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &s in response {
            let dist = self.next_distribution(&ctx)?;
            let (mut first, mut second) = (0.0f64, 0.0f64);
            for &q in &dist {
                if q > first {
                    second = first;
                    first = q;
                } else if q > second {
                    second = q;
                }
            }
            out.push(first - second);
            ctx.push(s);
        }
        Ok(out)
    }

    /// Ancestral sampling until EOS or `max_new_symbols`.
    pub fn sample(&self, prompt: &[Symbol], cfg: &GenerationConfig) -> Result<Generation> {
        if !(cfg.temperature > 0.0) {
            return Err(Error::contract("temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ctx = prompt.to_vec();
        let mut window = Vec::with_capacity(self.shape.window);
        let mut symbols = Vec::new();
        let mut logprobs = Vec::new();
        for _ in 0..cfg.max_new_symbols {
            self.window_of(&ctx, &mut window);
            let logits = self.forward(&window).logits;
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("logits".into()));
            }
            let next = if cfg.greedy {
                argmax(&logits)
            } else {
                let probs = softmax(&logits, cfg.temperature);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, q) in probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            logprobs.push(log_softmax_at(&logits, next));
            symbols.push(next);
            ctx.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(Generation { symbols, logprobs })
    }

    /// log p(completion_t | prompt, completion_<t) for each position.
    pub fn sequence_logprobs(&self, prompt: &[Symbol], completion: &[Symbol]) -> Result<Vec<f64>> {
        let mut ctx = prompt.to_vec();
        let mut window = Vec::with_capacity(self.shape.window);
        let mut out = Vec::with_capacity(completion.len());
        for &s in completion {
            self.window_of(&ctx, &mut window);
            let logits = self.forward(&window).logits;
            let lp = log_softmax_at(&logits, s);
            if !lp.is_finite() {
                return Err(Error::NonFinite("log-probability".into()));
            }
            out.push(lp);
            ctx.push(s);
        }
        Ok(out)
    }

    /// Gradient of `sum_t weights[t] * log p(completion_t | ...)` together
    /// with the per-position log-probabilities.
    pub fn weighted_logprob_gradient(
        &self,
        prompt: &[Symbol],
        completion: &[Symbol],
        weights: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if weights.len() != completion.len() {
            return Err(Error::contract("one weight per completion symbol required"));
        }
        self.logprob_gradient_with(prompt, completion, |t, _| weights[t])
    }

    /// Like [`Self::weighted_logprob_gradient`], with the weight of position
    /// `t` computed by `weight(t, log p_t)` during the single forward pass.
    pub fn logprob_gradient_with(
        &self,
        prompt: &[Symbol],
        completion: &[Symbol],
        mut weight: impl FnMut(usize, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.total];
        let mut ctx = prompt.to_vec();
        let mut window = Vec::with_capacity(self.shape.window);
        let mut logprobs = Vec::with_capacity(completion.len());
        for (t, &s) in completion.iter().enumerate() {
            self.window_of(&ctx, &mut window);
            let act = self.forward(&window);
            let lp = log_softmax_at(&act.logits, s);
            logprobs.push(lp);
            let w = weight(t, lp);
            if w != 0.0 {
                // d log p_s / d logits = onehot(s) - p
                let probs = softmax(&act.logits, 1.0);
                let mut dlogits: Vec<f64> = probs.iter().map(|q| -w * q).collect();
                dlogits[s] += w;
                self.backward(&window, &act, &dlogits, &mut grad);
            }
            ctx.push(s);
        }
        if grad.iter().any(|g| !g.is_finite()) || logprobs.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((grad, logprobs))
    }

    /// Mean next-symbol cross-entropy over `target` and its exact gradient.
    pub fn loss_and_gradient(&self, prompt: &[Symbol], target: &[Symbol]) -> Result<(f64, Vec<f64>)> {
        if target.is_empty() {
            return Err(Error::contract("target must be non-empty"));
        }
        let w = -1.0 / target.len() as f64;
        let weights = vec![w; target.len()];
        let (grad, logprobs) = self.weighted_logprob_gradient(prompt, target, &weights)?;
        let loss = -logprobs.iter().sum::<f64>() / target.len() as f64;
        Ok((loss, grad))
    }

    /// Mean next-symbol cross-entropy over `target`.
    pub fn loss(&self, prompt: &[Symbol], target: &[Symbol]) -> Result<f64> {
        let lp = self.sequence_logprobs(prompt, target)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    /// `params + scale * direction`, rounded to the f32 grid.
    pub fn step(&self, direction: &[f64], scale: f64) -> Result<Self> {
        if direction.len() != self.layout.total {
            return Err(Error::contract("direction length does not match parameter count"));
        }
        if direction.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("update direction".into()));
        }
        let params = self
            .params
            .iter()
            .zip(direction)
            .map(|(p, g)| to_f32_grid(p + scale * g))
            .collect();
        Ok(StudentModel {
            params,
            ..self.clone()
        })
    }

    /// Mean cross-entropy gradient over `batch`.
    pub fn batch_gradient(&self, batch: &[(Vec<Symbol>, Vec<Symbol>)]) -> Result<Vec<f64>> {
        let grads: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|(prompt, target)| self.loss_and_gradient(prompt, target).map(|(_, g)| g))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; self.layout.total];
        for g in &grads {
            for (m, x) in mean.iter_mut().zip(g) {
                *m += x;
            }
        }
        if !batch.is_empty() {
            let inv = 1.0 / batch.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        Ok(mean)
    }

    /// One gradient-descent step on the mean loss of `batch`.
    pub fn sft_update(&self, batch: &[(Vec<Symbol>, Vec<Symbol>)], learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) {
            return Err(Error::contract("learning rate must be nonnegative"));
        }
        if batch.is_empty() || learning_rate == 0.0 {
            return Ok(self.clone());
        }
        let mean = self.batch_gradient(batch)?;
        self.step(&mean, -learning_rate)
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[i] - max - z.ln()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
