//! Small next-token models trained on each device.
//!
//! Both models predict token `t_{i+1}` from token `t_i`, with a begin-of-sequence
//! context (id `V`) in front of every utterance, so an utterance of length `L`
//! yields `L` prediction pairs.
//!
//! * [`ModelKind::Logistic`]: a softmax regression on the one-hot context.
//!   Its loss is convex in the parameters.
//! * [`ModelKind::Bigram`]: embedding, linear projection, softmax.
//!
//! Losses are in nats and perplexity uses the natural exponential.
//! Parameters live in one flat `f64` vector; [`ModelParams::layout`] names the
//! slices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::population::Utterance;

/// Above this many parameters, [`grad_check`] samples coordinates.
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;
pub const GRAD_CHECK_SAMPLE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Bigram,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Bigram => "bigram",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab_size: u32,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    fn new(name: &str, rows: usize, cols: usize) -> Self {
        Segment {
            name: name.to_owned(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, vocab_size: u32, dim: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind,
            vocab_size,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidModel("dim must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidModel("vocab_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Begin-of-sequence context id.
    pub fn bos(&self) -> u32 {
        self.vocab_size
    }

    fn contexts(&self) -> usize {
        self.vocab_size as usize + 1
    }

    pub fn layout(&self) -> Vec<Segment> {
        let v = self.vocab_size as usize;
        match self.kind {
            ModelKind::Logistic => vec![
                Segment::new("weight", self.contexts(), v),
                Segment::new("bias", 1, v),
            ],
            ModelKind::Bigram => vec![
                Segment::new("embedding", self.contexts(), self.dim),
                Segment::new("output", self.dim, v),
                Segment::new("bias", 1, v),
            ],
        }
    }

    pub fn param_len(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters: a uniform predictor over the vocabulary.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ModelParams {
            spec,
            values: vec![0.0; spec.param_len()],
        })
    }

    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} values, got {}",
                spec.param_len(),
                values.len()
            )));
        }
        let params = ModelParams { spec, values };
        params.check_finite()?;
        Ok(params)
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn layout(&self) -> Vec<Segment> {
        self.spec.layout()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteParams(i)),
            None => Ok(()),
        }
    }

    /// Slice of the named layout segment.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for seg in self.layout() {
            if seg.name == name {
                return Some(&self.values[offset..offset + seg.len()]);
            }
            offset += seg.len();
        }
        None
    }
}

/// Scaled uniform initialisation; biases start at zero.
pub fn init_params(kind: ModelKind, vocab_size: u32, dim: usize, seed: u64) -> Result<ModelParams> {
    let spec = ModelSpec::new(kind, vocab_size, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_len());
    for seg in spec.layout() {
        let scale = match (kind, seg.name.as_str()) {
            (_, "bias") => 0.0,
            (ModelKind::Logistic, _) => 0.01,
            (ModelKind::Bigram, _) => 1.0 / (dim as f64).sqrt(),
        };
        values.extend((0..seg.len()).map(|_| {
            if scale == 0.0 {
                0.0
            } else {
                rng.gen_range(-scale..scale)
            }
        }));
    }
    Ok(ModelParams { spec, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub context: u32,
    pub target: u32,
}

/// Appends the prediction pairs of one utterance.
pub fn push_pairs(tokens: &[u32], bos: u32, out: &mut Vec<Pair>) {
    let mut context = bos;
    for &target in tokens {
        out.push(Pair { context, target });
        context = target;
    }
}

/// A nonempty list of prediction pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pairs: Vec<Pair>,
}

impl Batch {
    pub fn new(pairs: Vec<Pair>, vocab_size: u32) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(p) = pairs
            .iter()
            .find(|p| p.context > vocab_size || p.target >= vocab_size)
        {
            return Err(Error::InvalidModel(format!(
                "pair ({}, {}) outside vocabulary of {vocab_size}",
                p.context, p.target
            )));
        }
        Ok(Batch { pairs })
    }

    pub fn from_utterances<'a, I>(utterances: I, vocab_size: u32) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Utterance>,
    {
        let mut pairs = Vec::new();
        for u in utterances {
            push_pairs(&u.tokens, vocab_size, &mut pairs);
        }
        Batch::new(pairs, vocab_size)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Summed negative log-likelihood over `pairs`. When `grad` is given, the
/// gradient of that sum is added into it.
fn nll_sum(spec: &ModelSpec, values: &[f64], pairs: &[Pair], grad: Option<&mut [f64]>) -> f64 {
    let (total, pass) = forward(spec, values, pairs, grad.is_some());
    if let (Some(g), Some(pass)) = (grad, pass) {
        pass.accumulate(spec, g, 1.0);
    }
    total
}

/// One SGD step on the summed NLL over `pairs`: `values -= step * grad`.
/// Returns the summed NLL before the step.
fn sgd_step(spec: &ModelSpec, values: &mut [f64], pairs: &[Pair], step: f64) -> f64 {
    let (total, pass) = forward(spec, values, pairs, true);
    if let Some(pass) = pass {
        pass.accumulate(spec, values, -step);
    }
    total
}

/// What the backward pass needs from the forward pass.
struct Backprop {
    contexts: Vec<usize>,
    /// Gradient of the summed NLL with respect to each context's logits.
    dz: Vec<f64>,
    /// Bigram only: gathered embedding rows and their gradient.
    hidden: Vec<f64>,
    hidden_grad: Vec<f64>,
}

/// Logits depend only on the context, so pairs are grouped by context and the
/// distinct contexts of a batch go through one matrix product each way.
fn forward(spec: &ModelSpec, values: &[f64], pairs: &[Pair], want_grad: bool) -> (f64, Option<Backprop>) {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable_by_key(|p| (p.context, p.target));
    let groups: Vec<&[Pair]> = sorted.chunk_by(|a, b| a.context == b.context).collect();
    if groups.is_empty() {
        return (0.0, None);
    }
    let contexts: Vec<usize> = groups.iter().map(|g| g[0].context as usize).collect();
    let v = spec.vocab_size as usize;
    let d = spec.dim;
    let n = contexts.len();
    let mut logits = Vec::with_capacity(n * v);
    let mut hidden = Vec::new();
    match spec.kind {
        ModelKind::Logistic => {
            let bias = &values[spec.contexts() * v..];
            for &c in &contexts {
                logits.extend(values[c * v..(c + 1) * v].iter().zip(bias).map(|(w, b)| w + b));
            }
        }
        ModelKind::Bigram => {
            let out_at = spec.contexts() * d;
            let bias = &values[out_at + d * v..];
            hidden = gather_rows(values, &contexts, d);
            for _ in 0..n {
                logits.extend_from_slice(bias);
            }
            // logits += hidden (n x d) . output (d x v)
            gemm((n, d, v), &hidden, (d, 1), &values[out_at..out_at + d * v], (v, 1), 1.0, &mut logits, (v, 1));
        }
    }

    let mut total = 0.0;
    for (row, group) in logits.chunks_exact_mut(v).zip(&groups) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, |m, z| if z > m { z } else { m });
        for p in group.iter() {
            total -= row[p.target as usize] - max;
        }
        let norm = exp_shifted(row, max);
        total += group.len() as f64 * norm.ln();
        if want_grad {
            // count * softmax(z) - target counts
            let scale = group.len() as f64 / norm;
            for z in row.iter_mut() {
                *z *= scale;
            }
            for p in group.iter() {
                row[p.target as usize] -= 1.0;
            }
        }
    }
    if !want_grad {
        return (total, None);
    }

    let mut hidden_grad = Vec::new();
    if spec.kind == ModelKind::Bigram {
        let out_at = spec.contexts() * d;
        hidden_grad = vec![0.0; n * d];
        // hidden_grad (n x d) = dz (n x v) . output^T (v x d)
        gemm((n, v, d), &logits, (v, 1), &values[out_at..out_at + d * v], (1, v), 0.0, &mut hidden_grad, (d, 1));
    }
    let pass = Backprop {
        contexts,
        dz: logits,
        hidden,
        hidden_grad,
    };
    (total, Some(pass))
}

impl Backprop {
    /// `target += alpha * grad`.
    fn accumulate(&self, spec: &ModelSpec, target: &mut [f64], alpha: f64) {
        let v = spec.vocab_size as usize;
        let rows = self.dz.chunks_exact(v);
        match spec.kind {
            ModelKind::Logistic => {
                let (tw, tb) = target.split_at_mut(spec.contexts() * v);
                for (row, &c) in rows.zip(&self.contexts) {
                    for ((g, w), b) in row.iter().zip(&mut tw[c * v..(c + 1) * v]).zip(tb.iter_mut()) {
                        *w += alpha * g;
                        *b += alpha * g;
                    }
                }
            }
            ModelKind::Bigram => {
                let d = spec.dim;
                let n = self.contexts.len();
                let (te, rest) = target.split_at_mut(spec.contexts() * d);
                let (to, tb) = rest.split_at_mut(d * v);
                let mut bias_grad = vec![0.0; v];
                for row in rows {
                    for (b, g) in bias_grad.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                for (t, g) in tb.iter_mut().zip(&bias_grad) {
                    *t += alpha * g;
                }
                // output += alpha * hidden^T (d x n) . dz (n x v)
                gemm_scaled((d, n, v), alpha, &self.hidden, (1, d), &self.dz, (v, 1), 1.0, to, (v, 1));
                for (row, &c) in self.hidden_grad.chunks_exact(d).zip(&self.contexts) {
                    for (e, h) in te[c * d..(c + 1) * d].iter_mut().zip(row) {
                        *e += alpha * h;
                    }
                }
            }
        }
    }
}

/// `row[i] = exp(row[i] - shift)`. Returns the sum.
fn exp_shifted(row: &mut [f64], shift: f64) -> f64 {
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - shift).exp();
        sum += *z;
    }
    sum
}

fn gather_rows(values: &[f64], rows: &[usize], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&values[r * width..(r + 1) * width]);
    }
    out
}

/// `c = a . b + beta c` for an `m x k` by `k x n` product. Each matrix is
/// given as a slice plus (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    dims: (usize, usize, usize),
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    gemm_scaled(dims, 1.0, a, a_strides, b, b_strides, beta, c, c_strides);
}

/// `c = alpha a . b + beta c`.
#[allow(clippy::too_many_arguments)]
fn gemm_scaled(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the slices, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    params.check_finite()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v = params.spec.vocab_size;
    if batch.pairs.iter().any(|p| p.context > v || p.target >= v) {
        return Err(Error::LayoutMismatch(format!(
            "batch ids exceed model vocabulary of {v}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the batch, in nats.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    Ok(nll_sum(&params.spec, &params.values, &batch.pairs, None) / batch.len() as f64)
}

/// Analytic gradient of [`loss`], in the parameter layout.
pub fn grad(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    Ok(loss_and_grad(params, batch)?.1)
}

pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_batch(params, batch)?;
    let mut g = vec![0.0; params.len()];
    let n = batch.len() as f64;
    let total = nll_sum(&params.spec, &params.values, &batch.pairs, Some(&mut g));
    g.iter_mut().for_each(|x| *x /= n);
    Ok((total / n, g))
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Pair-weighted mean of the minibatch losses, each taken before its step.
    pub mean_loss: f64,
    pub pairs: usize,
    pub steps: usize,
}

/// One pass of minibatch SGD over the shard's prediction pairs, in an order
/// shuffled by `rng`. The input parameters are left untouched.
pub fn sgd_epoch<R: Rng + ?Sized>(
    params: &ModelParams,
    utterances: &[Utterance],
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(ModelParams, EpochStats)> {
    let mut out = params.clone();
    let stats = sgd_epoch_in_place(&mut out, utterances, lr, batch_size, rng)?;
    Ok((out, stats))
}

/// [`sgd_epoch`] updating `params` directly. On error `params` may hold a
/// partially trained (or non-finite) state.
pub fn sgd_epoch_in_place<R: Rng + ?Sized>(
    params: &mut ModelParams,
    utterances: &[Utterance],
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if utterances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let batch = Batch::from_utterances(utterances, params.spec.vocab_size)?;
    check_batch(params, &batch)?;
    let mut pairs = batch.pairs;
    pairs.shuffle(rng);

    let spec = params.spec;
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in pairs.chunks(batch_size) {
        total += sgd_step(&spec, &mut params.values, chunk, lr / chunk.len() as f64);
        steps += 1;
    }
    params.check_finite()?;
    Ok(EpochStats {
        mean_loss: total / pairs.len() as f64,
        pairs: pairs.len(),
        steps,
    })
}

/// Summed NLL and predicted-token count over a set of utterances.
///
/// Per-utterance terms are added in sorted order, so the result does not
/// depend on the order the utterances arrive in.
pub fn nll_totals<'a, I>(params: &ModelParams, utterances: I) -> Result<(f64, usize)>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    params.check_finite()?;
    let mut pairs = Vec::new();
    let mut terms = Vec::new();
    let mut count = 0;
    for u in utterances {
        pairs.clear();
        push_pairs(&u.tokens, params.spec.vocab_size, &mut pairs);
        if pairs.iter().any(|p| p.target >= params.spec.vocab_size) {
            return Err(Error::LayoutMismatch(format!(
                "token exceeds model vocabulary of {}",
                params.spec.vocab_size
            )));
        }
        terms.push(nll_sum(&params.spec, &params.values, &pairs, None));
        count += pairs.len();
    }
    terms.sort_unstable_by(f64::total_cmp);
    Ok((terms.iter().sum(), count))
}

/// `exp(total NLL / predicted tokens)`, pooled over all utterances.
pub fn perplexity<'a, I>(params: &ModelParams, utterances: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let (total, count) = nll_totals(params, utterances)?;
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((total / count as f64).exp())
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `epsilon`. Every coordinate is checked up to
/// [`GRAD_CHECK_FULL_LIMIT`] parameters; above that a seeded sample of
/// [`GRAD_CHECK_SAMPLE`] coordinates is used.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-6)`, which stays meaningful
/// for coordinates whose true gradient is zero.
pub fn grad_check(params: &ModelParams, batch: &Batch, epsilon: f64, seed: u64) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::InvalidModel("no parameters to check".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = grad(params, batch)?;
    let coords: Vec<usize> = if params.len() > GRAD_CHECK_FULL_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, params.len(), GRAD_CHECK_SAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };
    let spec = params.spec;
    let n = batch.len() as f64;
    let mut probe = params.values.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = nll_sum(&spec, &probe, &batch.pairs, None) / n;
        probe[i] = orig - epsilon;
        let down = nll_sum(&spec, &probe, &batch.pairs, None) / n;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    vocab_size: u32,
    dim: usize,
    layout: Vec<Segment>,
}

/// Checkpoint format: one JSON header line, then the values as little-endian
/// `f64` in layout order.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        kind: params.spec.kind,
        vocab_size: params.spec.vocab_size,
        dim: params.spec.dim,
        layout: params.layout(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<ModelParams> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let spec = ModelSpec::new(header.kind, header.vocab_size, header.dim)?;
    if header.layout != spec.layout() {
        return Err(Error::Checkpoint("layout does not match model kind and sizes".into()));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != spec.param_len() * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of values, found {}",
            spec.param_len() * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ModelParams::from_values(spec, values)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    atomic_write(path, |f| write_checkpoint(params, BufWriter::new(f)))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
