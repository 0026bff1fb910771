//! Minimal causal-attention network with exact analytic gradients.
//!
//! One attention layer, no layer norm, no MLP: the smallest differentiable
//! policy whose gradients still exercise attention masks and position ids.
//! It accepts an arbitrary boolean mask and explicit position ids, which is
//! what makes it usable as the oracle for tree-flattened training: a
//! flattened batch under the tree mask must produce exactly the gradients of
//! the per-path batches under plain causal masks.
//!
//! Forward pass, all in double precision:
//!
//! ```text
//! x_i      = tok_emb[token_ids[i]] + pos_emb[position_ids[i]]
//! q, k, v  = x W_q, x W_k, x W_v
//! s[i][j]  = q_i . k_j / sqrt(D)        over allowed j only
//! a[i]     = softmax_j(s[i])            over allowed j only
//! h_i      = (sum_j a[i][j] v_j) W_o
//! logits_i = h_i W_u
//! ```
//!
//! Token `i` is scored by the log-softmax at its *predecessor* position: the
//! unique attended token whose position id is `position_ids[i] - 1`. Within a
//! segment that is the previous flat token; at a segment start it is the
//! parent segment's last token. Tokens at path position 0 have no predecessor
//! and report log-probability 0; they never contribute to losses.
//!
//! Masked-out pairs are skipped outright rather than weighted by zero, so a
//! token's outputs are bit-identical under any mutation of tokens outside its
//! allowed set.

use crate::packing::DenseMask;
use crate::rng::Lcg64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Dense row-major matrix. Serializes as nested row arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * other` with plain triple loops.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) += a * other.at(k, j);
                }
            }
        }
        out
    }

    /// `out = self^T * other`.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) += a * other.at(k, j);
                }
            }
        }
        out
    }

    /// `out = self * other^T`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * other.at(j, k);
                }
                *out.at_mut(i, j) = s;
            }
        }
        out
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let nested: Vec<&[f64]> = (0..self.rows).map(|r| self.row(r)).collect();
        nested.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let nested: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        let rows = nested.len();
        let cols = nested.first().map(Vec::len).unwrap_or(0);
        if nested.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Mat { rows, cols, data: nested.into_iter().flatten().collect() })
    }
}

/// All parameters of the network. `max_positions` bounds the position ids the
/// net accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefNetParams {
    pub seed: Option<u64>,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_positions: usize,
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub unembedding: Mat,
}

/// Gradients with the same shapes as [`RefNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefNetGrads {
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub unembedding: Mat,
}

impl RefNetParams {
    /// Deterministic initialization: every entry is an independent uniform
    /// draw in `[-0.5, 0.5)` from the documented Lcg64 stream, filled in
    /// field order (token, position, W_q, W_k, W_v, W_o, unembedding),
    /// row-major within each matrix.
    pub fn seeded(seed: u64, vocab_size: usize, dim: usize, max_positions: usize) -> Self {
        let mut rng = Lcg64::new(seed);
        let mut fill = |rows: usize, cols: usize| {
            let mut m = Mat::zeros(rows, cols);
            for v in &mut m.data {
                *v = rng.uniform(-0.5, 0.5);
            }
            m
        };
        Self {
            seed: Some(seed),
            vocab_size,
            dim,
            max_positions,
            token_embedding: fill(vocab_size, dim),
            position_embedding: fill(max_positions, dim),
            w_q: fill(dim, dim),
            w_k: fill(dim, dim),
            w_v: fill(dim, dim),
            w_o: fill(dim, dim),
            unembedding: fill(dim, vocab_size),
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize, max_positions: usize) -> Self {
        Self {
            seed: None,
            vocab_size,
            dim,
            max_positions,
            token_embedding: Mat::zeros(vocab_size, dim),
            position_embedding: Mat::zeros(max_positions, dim),
            w_q: Mat::zeros(dim, dim),
            w_k: Mat::zeros(dim, dim),
            w_v: Mat::zeros(dim, dim),
            w_o: Mat::zeros(dim, dim),
            unembedding: Mat::zeros(dim, vocab_size),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("token_embedding", &self.token_embedding),
            ("position_embedding", &self.position_embedding),
            ("W_q", &self.w_q),
            ("W_k", &self.w_k),
            ("W_v", &self.w_v),
            ("W_o", &self.w_o),
            ("unembedding", &self.unembedding),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("token_embedding", &mut self.token_embedding),
            ("position_embedding", &mut self.position_embedding),
            ("W_q", &mut self.w_q),
            ("W_k", &mut self.w_k),
            ("W_v", &mut self.w_v),
            ("W_o", &mut self.w_o),
            ("unembedding", &mut self.unembedding),
        ]
    }

    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_snapshot_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

impl RefNetGrads {
    fn zeros_like(p: &RefNetParams) -> Self {
        Self {
            token_embedding: Mat::zeros(p.vocab_size, p.dim),
            position_embedding: Mat::zeros(p.max_positions, p.dim),
            w_q: Mat::zeros(p.dim, p.dim),
            w_k: Mat::zeros(p.dim, p.dim),
            w_v: Mat::zeros(p.dim, p.dim),
            w_o: Mat::zeros(p.dim, p.dim),
            unembedding: Mat::zeros(p.dim, p.vocab_size),
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("token_embedding", &self.token_embedding),
            ("position_embedding", &self.position_embedding),
            ("W_q", &self.w_q),
            ("W_k", &self.w_k),
            ("W_v", &self.w_v),
            ("W_o", &self.w_o),
            ("unembedding", &self.unembedding),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("token_embedding", &mut self.token_embedding),
            ("position_embedding", &mut self.position_embedding),
            ("W_q", &mut self.w_q),
            ("W_k", &mut self.w_k),
            ("W_v", &mut self.w_v),
            ("W_o", &mut self.w_o),
            ("unembedding", &mut self.unembedding),
        ]
    }

    /// Accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &RefNetGrads) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.blocks_mut() {
            for x in &mut m.data {
                *x *= s;
            }
        }
    }

    /// All gradient entries concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, m)| m.data.iter().copied()).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RefNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("position id {position} >= max_positions {max_positions}")]
    PositionOverflow { position: u32, max_positions: usize },
    #[error("trace does not match: {0}")]
    TraceMismatch(String),
    #[error("instance too large: {params} parameters exceeds cap {cap}")]
    InstanceTooLarge { params: usize, cap: usize },
}

/// Cached activations sufficient for the exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    allowed: Vec<Vec<usize>>,
    pred: Vec<Option<usize>>,
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    mix: Mat,
    h: Mat,
    /// Softmax over the vocabulary at every position.
    probs: Mat,
    pub logprobs: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Next-token distribution (probabilities) at position `i`.
    pub fn dist(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn predecessor(&self, i: usize) -> Option<usize> {
        self.pred[i]
    }
}

/// Run the network. Returns the per-token next-token log-probabilities and a
/// trace for [`backward`].
pub fn forward_logprobs(
    params: &RefNetParams,
    token_ids: &[u32],
    position_ids: &[u32],
    mask: &DenseMask,
) -> Result<(Vec<f64>, ForwardTrace), RefNetError> {
    let t = token_ids.len();
    let d = params.dim;
    if position_ids.len() != t {
        return Err(RefNetError::ShapeMismatch(format!(
            "{} token ids vs {} position ids",
            t,
            position_ids.len()
        )));
    }
    if mask.t != t {
        return Err(RefNetError::ShapeMismatch(format!("mask is {}x{0}, need {t}", mask.t)));
    }
    for (i, &tok) in token_ids.iter().enumerate() {
        if tok as usize >= params.vocab_size {
            return Err(RefNetError::ShapeMismatch(format!(
                "token id {tok} at {i} >= vocab {}",
                params.vocab_size
            )));
        }
    }
    for &p in position_ids {
        if p as usize >= params.max_positions {
            return Err(RefNetError::PositionOverflow {
                position: p,
                max_positions: params.max_positions,
            });
        }
    }

    let mut allowed: Vec<Vec<usize>> = Vec::with_capacity(t);
    for i in 0..t {
        if !mask.get(i, i) {
            return Err(RefNetError::ShapeMismatch(format!("mask[{i}][{i}] must be true")));
        }
        allowed.push((0..t).filter(|&j| mask.get(i, j)).collect());
    }

    // Predecessor of i: the unique attended token at path position
    // position_ids[i] - 1. Path position 0 has none.
    let mut pred = Vec::with_capacity(t);
    for i in 0..t {
        if position_ids[i] == 0 {
            pred.push(None);
            continue;
        }
        let want = position_ids[i] - 1;
        let mut found = None;
        for &j in &allowed[i] {
            if j != i && position_ids[j] == want {
                if found.is_some() {
                    return Err(RefNetError::ShapeMismatch(format!(
                        "token {i} has multiple predecessors at position {want}"
                    )));
                }
                found = Some(j);
            }
        }
        match found {
            Some(j) => pred.push(Some(j)),
            None => {
                return Err(RefNetError::ShapeMismatch(format!(
                    "token {i} at position {} has no attended predecessor",
                    position_ids[i]
                )))
            }
        }
    }

    // Embeddings.
    let mut x = Mat::zeros(t, d);
    for i in 0..t {
        let tok_row = params.token_embedding.row(token_ids[i] as usize);
        let pos_row = params.position_embedding.row(position_ids[i] as usize);
        for c in 0..d {
            *x.at_mut(i, c) = tok_row[c] + pos_row[c];
        }
    }
    let q = x.matmul(&params.w_q);
    let k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);

    // Masked attention; masked pairs are never touched.
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = Mat::zeros(t, t);
    let mut mix = Mat::zeros(t, d);
    for i in 0..t {
        let js = &allowed[i];
        let mut scores = Vec::with_capacity(js.len());
        let mut max_s = f64::NEG_INFINITY;
        for &j in js {
            let mut s = 0.0;
            for c in 0..d {
                s += q.at(i, c) * k.at(j, c);
            }
            let s = s * scale;
            if s > max_s {
                max_s = s;
            }
            scores.push(s);
        }
        let mut denom = 0.0;
        for s in &mut scores {
            *s = (*s - max_s).exp();
            denom += *s;
        }
        for (&j, e) in js.iter().zip(&scores) {
            let a = e / denom;
            *attn.at_mut(i, j) = a;
            for c in 0..d {
                *mix.at_mut(i, c) += a * v.at(j, c);
            }
        }
    }

    let h = mix.matmul(&params.w_o);
    let logits = h.matmul(&params.unembedding);

    // Log-softmax over the vocabulary per position.
    let vsize = params.vocab_size;
    let mut probs = Mat::zeros(t, vsize);
    let mut logsm = Mat::zeros(t, vsize);
    for i in 0..t {
        let row = logits.row(i);
        let max_l = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &l in row {
            denom += (l - max_l).exp();
        }
        let log_denom = denom.ln() + max_l;
        for c in 0..vsize {
            *logsm.at_mut(i, c) = row[c] - log_denom;
            *probs.at_mut(i, c) = (row[c] - log_denom).exp();
        }
    }

    let mut logprobs = vec![0.0; t];
    for i in 0..t {
        if let Some(p) = pred[i] {
            logprobs[i] = logsm.at(p, token_ids[i] as usize);
        }
    }

    let trace = ForwardTrace {
        token_ids: token_ids.to_vec(),
        position_ids: position_ids.to_vec(),
        allowed,
        pred,
        x,
        q,
        k,
        v,
        attn,
        mix,
        h,
        probs,
        logprobs: logprobs.clone(),
    };
    Ok((logprobs, trace))
}

/// Exact gradients of `sum_i upstream[i] * logprob[i]` with respect to every
/// parameter block.
pub fn backward(
    params: &RefNetParams,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<RefNetGrads, RefNetError> {
    let t = trace.len();
    let d = params.dim;
    let vsize = params.vocab_size;
    if upstream.len() != t {
        return Err(RefNetError::TraceMismatch(format!(
            "{} upstream grads for {t} tokens",
            upstream.len()
        )));
    }
    if trace.x.cols != d || trace.probs.cols != vsize {
        return Err(RefNetError::TraceMismatch("trace shaped for different params".into()));
    }

    // d loss / d logits[p][c] = sum over tokens scored at p of
    // g_i * (indicator(c == y_i) - softmax(logits_p)[c]).
    let mut d_logits = Mat::zeros(t, vsize);
    for i in 0..t {
        let g = upstream[i];
        if g == 0.0 {
            continue;
        }
        if let Some(p) = trace.pred[i] {
            let target = trace.token_ids[i] as usize;
            let probs = trace.probs.row(p);
            let row = d_logits.row_mut(p);
            for c in 0..vsize {
                row[c] -= g * probs[c];
            }
            row[target] += g;
        }
    }

    let mut grads = RefNetGrads::zeros_like(params);

    // logits = h * W_u
    grads.unembedding = trace.h.t_matmul(&d_logits);
    let d_h = d_logits.matmul_t(&params.unembedding);

    // h = mix * W_o
    grads.w_o = trace.mix.t_matmul(&d_h);
    let d_mix = d_h.matmul_t(&params.w_o);

    // mix_i = sum_j a[i][j] v_j over allowed j
    let mut d_v = Mat::zeros(t, d);
    let mut d_q = Mat::zeros(t, d);
    let mut d_k = Mat::zeros(t, d);
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..t {
        let js = &trace.allowed[i];
        // d a[i][j] = d_mix_i . v_j
        let mut d_a = Vec::with_capacity(js.len());
        for &j in js {
            let mut s = 0.0;
            for c in 0..d {
                s += d_mix.at(i, c) * trace.v.at(j, c);
            }
            d_a.push(s);
            let a = trace.attn.at(i, j);
            for c in 0..d {
                *d_v.at_mut(j, c) += a * d_mix.at(i, c);
            }
        }
        // Softmax backward within the allowed set.
        let mut dot = 0.0;
        for (&j, &da) in js.iter().zip(&d_a) {
            dot += trace.attn.at(i, j) * da;
        }
        for (&j, &da) in js.iter().zip(&d_a) {
            let ds = trace.attn.at(i, j) * (da - dot) * scale;
            for c in 0..d {
                *d_q.at_mut(i, c) += ds * trace.k.at(j, c);
                *d_k.at_mut(j, c) += ds * trace.q.at(i, c);
            }
        }
    }

    // q, k, v = x W_{q,k,v}
    grads.w_q = trace.x.t_matmul(&d_q);
    grads.w_k = trace.x.t_matmul(&d_k);
    grads.w_v = trace.x.t_matmul(&d_v);
    let mut d_x = d_q.matmul_t(&params.w_q);
    let d_x_k = d_k.matmul_t(&params.w_k);
    let d_x_v = d_v.matmul_t(&params.w_v);
    for (x, (a, b)) in d_x.data.iter_mut().zip(d_x_k.data.iter().zip(&d_x_v.data)) {
        *x += a + b;
    }

    // x_i = tok_emb[token_i] + pos_emb[pos_i]
    for i in 0..t {
        let tok = trace.token_ids[i] as usize;
        let pos = trace.position_ids[i] as usize;
        for c in 0..d {
            *grads.token_embedding.at_mut(tok, c) += d_x.at(i, c);
            *grads.position_embedding.at_mut(pos, c) += d_x.at(i, c);
        }
    }

    Ok(grads)
}

/// One instance for gradient checking.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub mask: DenseMask,
    pub upstream: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckTolerances {
    /// Central finite-difference step.
    pub fd_step: f64,
    /// Max allowed relative error per block.
    pub rel_tol: f64,
}

impl Default for GradcheckTolerances {
    fn default() -> Self {
        Self { fd_step: 1e-6, rel_tol: 1e-5 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckBlock {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<GradcheckBlock>,
    pub pass: bool,
}

const GRADCHECK_PARAM_CAP: usize = 10_000;

/// Relative error with a unit-scale floor: for entries near zero this decays
/// to an absolute comparison, which is what finite differences can resolve.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn instance_loss(params: &RefNetParams, instance: &GradcheckInstance) -> f64 {
    let (lps, _) =
        forward_logprobs(params, &instance.token_ids, &instance.position_ids, &instance.mask)
            .expect("gradcheck forward");
    lps.iter().zip(&instance.upstream).map(|(l, g)| l * g).sum()
}

/// Compare analytic gradients against central finite differences, block by
/// block. Fails with [`RefNetError::InstanceTooLarge`] above the parameter
/// cap that keeps finite differences tractable.
pub fn gradcheck(
    params: &RefNetParams,
    instance: &GradcheckInstance,
    tol: GradcheckTolerances,
) -> Result<GradcheckReport, RefNetError> {
    let count = params.param_count();
    if count > GRADCHECK_PARAM_CAP {
        return Err(RefNetError::InstanceTooLarge { params: count, cap: GRADCHECK_PARAM_CAP });
    }
    let (_, trace) =
        forward_logprobs(params, &instance.token_ids, &instance.position_ids, &instance.mask)?;
    let analytic = backward(params, &trace, &instance.upstream)?;
    Ok(compare_with_numeric(params, instance, &analytic, tol))
}

/// Finite-difference comparison against externally supplied analytic
/// gradients; lets tests inject faults into single blocks.
pub fn compare_with_numeric(
    params: &RefNetParams,
    instance: &GradcheckInstance,
    analytic: &RefNetGrads,
    tol: GradcheckTolerances,
) -> GradcheckReport {
    let mut work = params.clone();
    let mut blocks = Vec::new();
    let names: Vec<&'static str> = analytic.blocks().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = analytic.blocks().iter().find(|(n, _)| *n == name).unwrap().1.data.len();
        let mut max_err = 0.0f64;
        for idx in 0..len {
            let orig = {
                let mut bs = work.blocks_mut();
                let m = &mut bs.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                let orig = m.data[idx];
                m.data[idx] = orig + tol.fd_step;
                orig
            };
            let up = instance_loss(&work, instance);
            {
                let mut bs = work.blocks_mut();
                let m = &mut bs.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                m.data[idx] = orig - tol.fd_step;
            }
            let down = instance_loss(&work, instance);
            {
                let mut bs = work.blocks_mut();
                let m = &mut bs.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                m.data[idx] = orig;
            }
            let numeric = (up - down) / (2.0 * tol.fd_step);
            let a = analytic.blocks().iter().find(|(n, _)| *n == name).unwrap().1.data[idx];
            max_err = max_err.max(rel_err(a, numeric, 1e-3));
        }
        blocks.push(GradcheckBlock { name, max_rel_err: max_err, pass: max_err <= tol.rel_tol });
    }
    let pass = blocks.iter().all(|b| b.pass);
    GradcheckReport { blocks, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{build_attention_mask, dfs_flatten, NormalizationMode};
    use crate::trajectory::{build_tree, LinearCall, Role, TokenEvent, TurnSpan};

    fn causal_instance(seed: u64, t: usize, vocab: usize) -> (Vec<u32>, Vec<u32>, DenseMask) {
        let mut rng = Lcg64::new(seed);
        let ids: Vec<u32> = (0..t).map(|_| rng.below(vocab as u64) as u32).collect();
        let pos: Vec<u32> = (0..t as u32).collect();
        (ids, pos, DenseMask::causal(t))
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let params = RefNetParams::zeros(2, 1, 8);
        let (ids, pos, mask) = causal_instance(1, 5, 2);
        let (lps, trace) = forward_logprobs(&params, &ids, &pos, &mask).unwrap();
        assert_eq!(lps[0], 0.0); // no predecessor at path position 0
        for &lp in &lps[1..] {
            assert!((lp - (-(2.0f64).ln())).abs() < 1e-15);
        }
        for i in 0..5 {
            let sum: f64 = trace.dist(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_normalize_for_random_params() {
        let params = RefNetParams::seeded(11, 13, 6, 32);
        let (ids, pos, mask) = causal_instance(2, 9, 13);
        let (lps, trace) = forward_logprobs(&params, &ids, &pos, &mask).unwrap();
        for i in 0..9 {
            let sum: f64 = trace.dist(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "position {i} sums to {sum}");
            assert!(lps[i] <= 0.0);
        }
    }

    #[test]
    fn tree_mask_matches_generic_causal_on_single_path() {
        // A one-path tree's flattened batch is just a causal sequence; the
        // two mask routes must agree to machine precision (identical ops).
        let tokens: Vec<TokenEvent> = (0..7).map(|i| TokenEvent::generated(i % 5, -0.3)).collect();
        let call = LinearCall::new(
            "c",
            5,
            tokens,
            vec![TurnSpan::new(0, 7, Role::Assistant)],
        )
        .unwrap();
        let tree = build_tree(&[call]).unwrap();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let mask = build_attention_mask(&batch);
        let params = RefNetParams::seeded(5, 5, 4, 16);
        let (a, _) =
            forward_logprobs(&params, &batch.token_ids, &batch.position_ids, &mask).unwrap();
        let (b, _) = forward_logprobs(
            &params,
            &batch.token_ids,
            &batch.position_ids,
            &DenseMask::causal(batch.len()),
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_isolation_is_bit_exact() {
        // Two branches off a shared prefix; mutating branch A's tokens must
        // leave branch B's logprobs bit-identical.
        let mk = |cid: &str, tail: &[u32]| {
            let mut ids = vec![0u32, 1];
            ids.extend_from_slice(tail);
            let tokens: Vec<TokenEvent> =
                ids.iter().map(|&i| TokenEvent::generated(i, -0.2)).collect();
            let turns =
                (0..tokens.len()).map(|i| TurnSpan::new(i, i + 1, Role::Assistant)).collect();
            LinearCall::new(cid, 8, tokens, turns).unwrap()
        };
        let tree = build_tree(&[mk("a", &[2, 3]), mk("b", &[4, 5])]).unwrap();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let mask = build_attention_mask(&batch);
        let params = RefNetParams::seeded(17, 8, 4, 16);
        let (base, _) =
            forward_logprobs(&params, &batch.token_ids, &batch.position_ids, &mask).unwrap();

        // Branch A occupies flat [2, 4); branch B flat [4, 6).
        let mut mutated = batch.token_ids.clone();
        mutated[2] = 7;
        mutated[3] = 6;
        let (changed, _) =
            forward_logprobs(&params, &mutated, &batch.position_ids, &mask).unwrap();
        for i in [0usize, 1, 4, 5] {
            assert_eq!(base[i].to_bits(), changed[i].to_bits(), "token {i} leaked across branches");
        }
        assert_ne!(base[3].to_bits(), changed[3].to_bits());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = RefNetParams::seeded(3, 7, 3, 16);
        let (ids, pos, mask) = causal_instance(4, 6, 7);
        let (_, trace) = forward_logprobs(&params, &ids, &pos, &mask).unwrap();
        let grads = backward(&params, &trace, &vec![0.0; 6]).unwrap();
        for (_, m) in grads.blocks() {
            assert!(m.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradcheck_passes_on_random_tiny_instances() {
        for seed in 0..5u64 {
            let params = RefNetParams::seeded(100 + seed, 5, 4, 16);
            let (ids, pos, mask) = causal_instance(200 + seed, 8, 5);
            let mut rng = Lcg64::new(300 + seed);
            let upstream: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let instance = GradcheckInstance { token_ids: ids, position_ids: pos, mask, upstream };
            let report = gradcheck(&params, &instance, GradcheckTolerances::default()).unwrap();
            assert!(report.pass, "seed {seed}: {:?}", report.blocks);
        }
    }

    #[test]
    fn corrupted_block_fails_by_name() {
        let params = RefNetParams::seeded(42, 5, 3, 16);
        let (ids, pos, mask) = causal_instance(43, 6, 5);
        let upstream = vec![1.0; 6];
        let (_, trace) = forward_logprobs(&params, &ids, &pos, &mask).unwrap();
        let mut analytic = backward(&params, &trace, &upstream).unwrap();
        analytic.w_k.data[0] += 0.5;
        let instance = GradcheckInstance { token_ids: ids, position_ids: pos, mask, upstream };
        let report =
            compare_with_numeric(&params, &instance, &analytic, GradcheckTolerances::default());
        assert!(!report.pass);
        let failing: Vec<&str> =
            report.blocks.iter().filter(|b| !b.pass).map(|b| b.name).collect();
        assert_eq!(failing, vec!["W_k"]);
    }

    #[test]
    fn instance_cap_enforced() {
        let params = RefNetParams::seeded(1, 64, 16, 64); // 64*16 + 64*16 + 4*256 + 16*64 = 4096... scaled up below
        let big = RefNetParams::seeded(1, 200, 20, 100);
        assert!(big.param_count() > 10_000);
        let (ids, pos, mask) = causal_instance(1, 4, 64);
        let instance = GradcheckInstance {
            token_ids: ids,
            position_ids: pos,
            mask,
            upstream: vec![1.0; 4],
        };
        assert!(matches!(
            gradcheck(&big, &instance, GradcheckTolerances::default()),
            Err(RefNetError::InstanceTooLarge { .. })
        ));
        assert!(params.param_count() <= 10_000);
    }

    #[test]
    fn position_overflow_reported() {
        let params = RefNetParams::seeded(1, 5, 3, 4);
        let ids = vec![0u32; 6];
        let pos: Vec<u32> = (0..6).collect();
        let err = forward_logprobs(&params, &ids, &pos, &DenseMask::causal(6)).unwrap_err();
        assert!(matches!(err, RefNetError::PositionOverflow { position: 4, .. }));
    }

    #[test]
    fn position_embedding_rows_receive_gradient() {
        let params = RefNetParams::seeded(77, 6, 4, 16);
        let (ids, pos, mask) = causal_instance(78, 5, 6);
        let (_, trace) = forward_logprobs(&params, &ids, &pos, &mask).unwrap();
        let grads = backward(&params, &trace, &vec![1.0; 5]).unwrap();
        // The last position feeds no scored prediction, so only rows
        // 0..t-1 must show up in the gradient.
        for p in 0..4 {
            let row = grads.position_embedding.row(p);
            assert!(row.iter().any(|&x| x != 0.0), "position row {p} has zero gradient");
        }
    }

    #[test]
    fn snapshot_roundtrips() {
        let params = RefNetParams::seeded(9, 6, 4, 12);
        let json = params.to_snapshot_json();
        let back = RefNetParams::from_snapshot_json(&json).unwrap();
        assert_eq!(params, back);
    }
}
