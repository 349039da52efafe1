//! Forward pass and backpropagation through time for the gated encoder.
//!
//! Per step, with `x` the token embedding and `h` the previous state:
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! The final state is projected (`y = h_T Wo + bo`) and L2-normalized.

use super::{Embedding, GradientBuffer, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::seqdata::TokenId;

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Four independent partial sums; fixed order keeps results reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += x W` for row-major `W: [x.len() x out.len()]`.
#[inline]
fn vec_mat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `out += W d` for row-major `W: [out.len() x d.len()]`.
#[inline]
fn mat_vec_acc(w: &[f64], d: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(d.len())) {
        *o += dot(row, d);
    }
}

/// `G += x ⊗ d`.
#[inline]
fn outer_acc(x: &[f64], d: &[f64], g: &mut [f64]) {
    for (&xi, row) in x.iter().zip(g.chunks_exact_mut(d.len())) {
        for (gij, &dj) in row.iter_mut().zip(d) {
            *gij += xi * dj;
        }
    }
}

/// `G += A^T B` for `A: [T x rows]`, `B: [T x cols]`.
#[inline]
fn gram_acc(a: &[f64], b: &[f64], cols: usize, g: &mut [f64]) {
    let rows = g.len() / cols;
    for (i, g_row) in g.chunks_exact_mut(cols).enumerate() {
        for (a_row, b_row) in a.chunks_exact(rows).zip(b.chunks_exact(cols)) {
            let ai = a_row[i];
            for (gij, &bj) in g_row.iter_mut().zip(b_row) {
                *gij += ai * bj;
            }
        }
    }
}

fn check_tokens<'a>(config: &ModelConfig, tokens: &'a [TokenId]) -> Result<&'a [TokenId]> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::OutOfVocab {
            id: bad,
            vocab_size: config.vocab_size,
        });
    }
    let start = tokens.len().saturating_sub(config.max_seq_len);
    Ok(&tokens[start..])
}

struct Scratch {
    rh: Vec<f64>,
}

/// Per-token input projections `[x Wz | x Wr | x Wn]`, so the recurrent
/// loop only pays for the hidden-to-hidden products.
#[derive(Clone, Debug)]
pub struct Encoder<'a> {
    params: &'a ModelParams,
    config: &'a ModelConfig,
    rows: Vec<f64>,
    row_of: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl<'a> Encoder<'a> {
    /// Projects the whole vocabulary; amortized over many sequences.
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        let row_of: Vec<u32> = (0..config.vocab_size as u32).collect();
        Self::with_rows(params, config, row_of, config.vocab_size)
    }

    /// Projects only the tokens occurring in `tokens` (already validated).
    fn for_tokens(params: &'a ModelParams, config: &'a ModelConfig, tokens: &[TokenId]) -> Self {
        let mut row_of = vec![ABSENT; config.vocab_size];
        let mut n = 0u32;
        for &t in tokens {
            if row_of[t as usize] == ABSENT {
                row_of[t as usize] = n;
                n += 1;
            }
        }
        Self::with_rows(params, config, row_of, n as usize)
    }

    fn with_rows(params: &'a ModelParams, config: &'a ModelConfig, row_of: Vec<u32>, n_rows: usize) -> Self {
        let (d, hd) = (config.token_embed_dim, config.hidden_dim);
        let mut rows = vec![0.0; n_rows * 3 * hd];
        for (tok, &row) in row_of.iter().enumerate() {
            if row == ABSENT {
                continue;
            }
            let x = &params.token_embed[tok * d..(tok + 1) * d];
            let out = &mut rows[row as usize * 3 * hd..(row as usize + 1) * 3 * hd];
            let (oz, rest) = out.split_at_mut(hd);
            let (or, on) = rest.split_at_mut(hd);
            vec_mat_acc(x, &params.update_input, oz);
            vec_mat_acc(x, &params.reset_input, or);
            vec_mat_acc(x, &params.candidate_input, on);
        }
        Self {
            params,
            config,
            rows,
            row_of,
        }
    }

    fn projection(&self, tok: TokenId) -> &[f64] {
        let hd3 = 3 * self.config.hidden_dim;
        let row = self.row_of[tok as usize] as usize;
        &self.rows[row * hd3..(row + 1) * hd3]
    }

    /// One recurrent step. Writes gate activations and the new state.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn step(
        &self,
        tok: TokenId,
        h_prev: &[f64],
        z: &mut [f64],
        r: &mut [f64],
        n: &mut [f64],
        h_next: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let p = self.params;
        let hd = self.config.hidden_dim;
        let proj = self.projection(tok);

        for ((o, b), x) in z.iter_mut().zip(&p.update_bias).zip(&proj[..hd]) {
            *o = b + x;
        }
        vec_mat_acc(h_prev, &p.update_recurrent, z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));

        for ((o, b), x) in r.iter_mut().zip(&p.reset_bias).zip(&proj[hd..2 * hd]) {
            *o = b + x;
        }
        vec_mat_acc(h_prev, &p.reset_recurrent, r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));

        for ((o, &ri), &hi) in scratch.rh.iter_mut().zip(r.iter()).zip(h_prev) {
            *o = ri * hi;
        }
        for ((o, b), x) in n.iter_mut().zip(&p.candidate_bias).zip(&proj[2 * hd..]) {
            *o = b + x;
        }
        vec_mat_acc(&scratch.rh, &p.candidate_recurrent, n);
        n.iter_mut().for_each(|v| *v = v.tanh());

        for j in 0..hd {
            h_next[j] = (1.0 - z[j]) * n[j] + z[j] * h_prev[j];
        }
    }

    /// Final recurrent state (before projection and normalization).
    pub fn final_hidden(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let tokens = check_tokens(self.config, tokens)?;
        Ok(self.run_hidden(tokens))
    }

    fn run_hidden(&self, tokens: &[TokenId]) -> Vec<f64> {
        let hd = self.config.hidden_dim;
        let mut h = vec![0.0; hd];
        let mut h_next = vec![0.0; hd];
        let (mut z, mut r, mut n) = (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
        let mut scratch = Scratch { rh: vec![0.0; hd] };
        for &t in tokens {
            self.step(t, &h, &mut z, &mut r, &mut n, &mut h_next, &mut scratch);
            std::mem::swap(&mut h, &mut h_next);
        }
        h
    }

    /// Inference-only forward pass.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Embedding> {
        let h = self.final_hidden(tokens)?;
        normalize(&project(self.params, &h)).map(|(_, e)| e)
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardTrace> {
        let tokens = check_tokens(self.config, tokens)?;
        let (hd, steps) = (self.config.hidden_dim, tokens.len());
        let mut hidden = vec![0.0; (steps + 1) * hd];
        let mut update = vec![0.0; steps * hd];
        let mut reset = vec![0.0; steps * hd];
        let mut candidate = vec![0.0; steps * hd];
        let mut scratch = Scratch { rh: vec![0.0; hd] };
        for (t, &tok) in tokens.iter().enumerate() {
            let (past, future) = hidden.split_at_mut((t + 1) * hd);
            self.step(
                tok,
                &past[t * hd..],
                &mut update[t * hd..(t + 1) * hd],
                &mut reset[t * hd..(t + 1) * hd],
                &mut candidate[t * hd..(t + 1) * hd],
                &mut future[..hd],
                &mut scratch,
            );
        }
        let y = project(self.params, &hidden[steps * hd..]);
        let (norm, embedding) = normalize(&y)?;
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            hidden,
            update,
            reset,
            candidate,
            norm,
            embedding,
        })
    }
}

fn project(p: &ModelParams, h: &[f64]) -> Vec<f64> {
    let mut y = p.output_bias.clone();
    vec_mat_acc(h, &p.output_proj, &mut y);
    y
}

fn normalize(y: &[f64]) -> Result<(f64, Embedding)> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Data(format!("cannot normalize projection with norm {norm}")));
    }
    Ok((norm, Embedding(y.iter().map(|v| v / norm).collect())))
}

/// Final recurrent state (before projection and normalization).
pub fn final_hidden(params: &ModelParams, config: &ModelConfig, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let tokens = check_tokens(config, tokens)?;
    Ok(Encoder::for_tokens(params, config, tokens).run_hidden(tokens))
}

/// Inference-only forward pass.
pub fn embed_tokens(params: &ModelParams, config: &ModelConfig, tokens: &[TokenId]) -> Result<Embedding> {
    let tokens = check_tokens(config, tokens)?;
    Encoder::for_tokens(params, config, tokens).embed(tokens)
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    tokens: Vec<TokenId>,
    /// `(T + 1) x H`; row 0 is the zero initial state.
    hidden: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    norm: f64,
    pub embedding: Embedding,
}

impl ForwardTrace {
    /// Number of steps actually run (after truncation).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn forward(params: &ModelParams, config: &ModelConfig, tokens: &[TokenId]) -> Result<ForwardTrace> {
    let tokens = check_tokens(config, tokens)?;
    Encoder::for_tokens(params, config, tokens).forward(tokens)
}

/// Accumulates `d loss / d params` into `grads`, given `d loss / d embedding`.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    d_embedding: &[f64],
    grads: &mut GradientBuffer,
) {
    let (d, hd, steps) = (config.token_embed_dim, config.hidden_dim, trace.tokens.len());
    let e = &trace.embedding.0;

    // Through L2 normalization: dy = (de - e (e . de)) / |y|.
    let e_dot = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum::<f64>();
    let dy: Vec<f64> = e
        .iter()
        .zip(d_embedding)
        .map(|(ei, gi)| (gi - ei * e_dot) / trace.norm)
        .collect();

    // Transposed recurrent weights turn `W d` into row-wise axpy updates.
    let transpose = |w: &[f64], rows: usize, cols: usize| {
        let mut t = vec![0.0; w.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = w[i * cols + j];
            }
        }
        t
    };
    let uz_t = transpose(&params.update_recurrent, hd, hd);
    let ur_t = transpose(&params.reset_recurrent, hd, hd);
    let un_t = transpose(&params.candidate_recurrent, hd, hd);

    let h_last = &trace.hidden[steps * hd..];
    grads.output_bias.iter_mut().zip(&dy).for_each(|(g, v)| *g += v);
    outer_acc(h_last, &dy, &mut grads.output_proj);
    let mut dh = vec![0.0; hd];
    mat_vec_acc(&params.output_proj, &dy, &mut dh);

    // Gate pre-activation gradients summed per distinct token; the input
    // weights and token embeddings are updated once per token at the end.
    let mut slot_of: Vec<(TokenId, usize)> = Vec::new();
    let mut d_proj: Vec<f64> = Vec::new();
    let mut slot = |tok: TokenId, d_proj: &mut Vec<f64>| -> usize {
        match slot_of.iter().find(|(t, _)| *t == tok) {
            Some(&(_, s)) => s,
            None => {
                let s = slot_of.len();
                slot_of.push((tok, s));
                d_proj.resize((s + 1) * 3 * hd, 0.0);
                s
            }
        }
    };

    let mut dh_prev = vec![0.0; hd];
    let mut drh = vec![0.0; hd];
    // Per-step gate gradients and reset-scaled states, kept for the weight
    // gradients computed after the sweep.
    let mut all_dz = vec![0.0; steps * hd];
    let mut all_dr = vec![0.0; steps * hd];
    let mut all_dn = vec![0.0; steps * hd];
    let mut all_rh = vec![0.0; steps * hd];

    for t in (0..steps).rev() {
        let h_prev = &trace.hidden[t * hd..(t + 1) * hd];
        let z = &trace.update[t * hd..(t + 1) * hd];
        let r = &trace.reset[t * hd..(t + 1) * hd];
        let n = &trace.candidate[t * hd..(t + 1) * hd];
        let dz = &mut all_dz[t * hd..(t + 1) * hd];
        let dr = &mut all_dr[t * hd..(t + 1) * hd];
        let dn = &mut all_dn[t * hd..(t + 1) * hd];
        let rh = &mut all_rh[t * hd..(t + 1) * hd];

        for j in 0..hd {
            dn[j] = dh[j] * (1.0 - z[j]) * (1.0 - n[j] * n[j]);
            dz[j] = dh[j] * (h_prev[j] - n[j]) * z[j] * (1.0 - z[j]);
            dh_prev[j] = dh[j] * z[j];
            rh[j] = r[j] * h_prev[j];
        }

        // Candidate branch feeds the reset gate through r * h.
        drh.iter_mut().for_each(|v| *v = 0.0);
        vec_mat_acc(dn, &un_t, &mut drh);
        for j in 0..hd {
            dr[j] = drh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
            dh_prev[j] += drh[j] * r[j];
        }
        vec_mat_acc(dz, &uz_t, &mut dh_prev);
        vec_mat_acc(dr, &ur_t, &mut dh_prev);

        let s = slot(trace.tokens[t], &mut d_proj);
        let acc = &mut d_proj[s * 3 * hd..(s + 1) * 3 * hd];
        for j in 0..hd {
            acc[j] += dz[j];
            acc[hd + j] += dr[j];
            acc[2 * hd + j] += dn[j];
        }

        std::mem::swap(&mut dh, &mut dh_prev);
    }

    let h_prev_all = &trace.hidden[..steps * hd];
    gram_acc(h_prev_all, &all_dz, hd, &mut grads.update_recurrent);
    gram_acc(h_prev_all, &all_dr, hd, &mut grads.reset_recurrent);
    gram_acc(&all_rh, &all_dn, hd, &mut grads.candidate_recurrent);
    for (bias, all) in [
        (&mut grads.update_bias, &all_dz),
        (&mut grads.reset_bias, &all_dr),
        (&mut grads.candidate_bias, &all_dn),
    ] {
        for row in all.chunks_exact(hd) {
            bias.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
    }

    let mut dx = vec![0.0; d];
    for &(tok, s) in &slot_of {
        let tok = tok as usize;
        let acc = &d_proj[s * 3 * hd..(s + 1) * 3 * hd];
        let (az, rest) = acc.split_at(hd);
        let (ar, an) = rest.split_at(hd);
        let x = &params.token_embed[tok * d..(tok + 1) * d];
        outer_acc(x, az, &mut grads.update_input);
        outer_acc(x, ar, &mut grads.reset_input);
        outer_acc(x, an, &mut grads.candidate_input);
        dx.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&params.update_input, az, &mut dx);
        mat_vec_acc(&params.reset_input, ar, &mut dx);
        mat_vec_acc(&params.candidate_input, an, &mut dx);
        grads.token_embed[tok * d..(tok + 1) * d]
            .iter_mut()
            .zip(&dx)
            .for_each(|(g, v)| *g += v);
    }
}

/// Hinge value and its gradients with respect to the three embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negative: Vec<f64>,
}

impl TripletLoss {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> TripletLoss {
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let value = sq(anchor, positive) - sq(anchor, negative) + margin;
    let dim = anchor.len();
    if value <= 0.0 {
        return TripletLoss {
            loss: 0.0,
            d_anchor: vec![0.0; dim],
            d_positive: vec![0.0; dim],
            d_negative: vec![0.0; dim],
        };
    }
    let mut d_anchor = vec![0.0; dim];
    let mut d_positive = vec![0.0; dim];
    let mut d_negative = vec![0.0; dim];
    for i in 0..dim {
        d_anchor[i] = 2.0 * (negative[i] - positive[i]);
        d_positive[i] = -2.0 * (anchor[i] - positive[i]);
        d_negative[i] = 2.0 * (anchor[i] - negative[i]);
    }
    TripletLoss {
        loss: value,
        d_anchor,
        d_positive,
        d_negative,
    }
}

/// Loss and exact gradient for one `(anchor, positive, negative)` triplet.
pub fn backward_triplet(
    params: &ModelParams,
    config: &ModelConfig,
    anchor: &[TokenId],
    positive: &[TokenId],
    negative: &[TokenId],
    margin: f64,
) -> Result<(f64, GradientBuffer)> {
    let ta = forward(params, config, anchor)?;
    let tp = forward(params, config, positive)?;
    let tn = forward(params, config, negative)?;
    let tl = triplet_loss(&ta.embedding.0, &tp.embedding.0, &tn.embedding.0, margin);
    let mut grads = GradientBuffer::zeros(config);
    if tl.is_active() {
        backward(params, config, &ta, &tl.d_anchor, &mut grads);
        backward(params, config, &tp, &tl.d_positive, &mut grads);
        backward(params, config, &tn, &tl.d_negative, &mut grads);
    }
    Ok((tl.loss, grads))
}
