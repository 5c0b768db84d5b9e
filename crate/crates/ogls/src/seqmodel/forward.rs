//! Gradient-free forward paths: full-sequence logits, incremental decoding
//! with cached keys/values, temperature softmax, and ancestral sampling.

use super::{ModelParams, TokenId, EOS};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

fn layernorm_row(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mu = x.sum() / n;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let is = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_iter(
        x.iter()
            .zip(g.iter().zip(b.iter()))
            .map(|(&v, (&gi, &bi))| (v - mu) * is * gi + bi),
    )
}

fn layernorm_rows(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&layernorm_row(&row.to_owned(), g, b));
    }
    out
}

fn gelu(v: f64) -> f64 {
    let u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

/// Full-sequence forward: row t holds the next-token logits conditioned on
/// tokens[..=t]. Causal by construction.
pub fn forward_logits(p: &ModelParams, tokens: &[TokenId]) -> Result<Array2<f64>> {
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::Contract("forward on empty token sequence".into()));
    }
    if t_len > p.dims.window {
        return Err(Error::ContextWindow(format!(
            "sequence length {t_len} exceeds window {}",
            p.dims.window
        )));
    }
    for &t in tokens {
        if t >= p.dims.vocab {
            return Err(Error::Data(format!("token id {t} out of vocabulary")));
        }
    }
    let d = p.dims.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = Array2::zeros((t_len, d));
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &p.tok_emb.row(tok) + &p.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }
    for l in &p.layers {
        let h = layernorm_rows(&x, &l.ln1_g, &l.ln1_b);
        let q = h.dot(&l.wq);
        let k = h.dot(&l.wk);
        let v = h.dot(&l.wv);
        let mut att = Array2::zeros((t_len, d));
        for i in 0..t_len {
            // causal softmax over positions 0..=i
            let mut scores: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) * scale).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - m).exp();
                s += *sc;
            }
            let mut out = Array1::<f64>::zeros(d);
            for (j, &w) in scores.iter().enumerate() {
                out.scaled_add(w / s, &v.row(j));
            }
            att.row_mut(i).assign(&out);
        }
        x += &att.dot(&l.wo);
        let h2 = layernorm_rows(&x, &l.ln2_g, &l.ln2_b);
        let mut mid = h2.dot(&l.w_in) + &l.b_in;
        mid.mapv_inplace(gelu);
        x += &(mid.dot(&l.w_out) + &l.b_out);
    }
    let xf = layernorm_rows(&x, &p.ln_f_g, &p.ln_f_b);
    Ok(xf.dot(&p.w_head))
}

/// Softmax of the last logit row at the given temperature.
pub fn next_dist(p: &ModelParams, context: &[TokenId], temperature: f64) -> Result<Array1<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let logits = forward_logits(p, context)?;
    let last = logits.row(logits.nrows() - 1).to_owned();
    Ok(softmax_temp(&last, temperature))
}

pub fn softmax_temp(logits: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = logits / temperature;
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = scaled.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// Incremental decoding state: cached per-layer keys and values. Produces
/// logits identical to re-running [`forward_logits`] on the full prefix.
pub struct DecodeState {
    pos: usize,
    k: Vec<Vec<Array1<f64>>>,
    v: Vec<Vec<Array1<f64>>>,
}

impl DecodeState {
    pub fn new(layers: usize) -> Self {
        DecodeState {
            pos: 0,
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Feed one token; returns the next-token logits after it.
    pub fn push_token(&mut self, p: &ModelParams, tok: TokenId) -> Result<Array1<f64>> {
        if self.pos >= p.dims.window {
            return Err(Error::ContextWindow(format!(
                "decode position {} exceeds window {}",
                self.pos, p.dims.window
            )));
        }
        if tok >= p.dims.vocab {
            return Err(Error::Data(format!("token id {tok} out of vocabulary")));
        }
        let d = p.dims.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = &p.tok_emb.row(tok) + &p.pos_emb.row(self.pos);
        for (li, l) in p.layers.iter().enumerate() {
            let h = layernorm_row(&x, &l.ln1_g, &l.ln1_b);
            let q = h.dot(&l.wq);
            self.k[li].push(h.dot(&l.wk));
            self.v[li].push(h.dot(&l.wv));
            let mut scores: Vec<f64> = self.k[li].iter().map(|kj| q.dot(kj) * scale).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - m).exp();
                s += *sc;
            }
            let mut att = Array1::<f64>::zeros(d);
            for (w, vj) in scores.iter().zip(self.v[li].iter()) {
                att.scaled_add(w / s, vj);
            }
            x += &att.dot(&l.wo);
            let h2 = layernorm_row(&x, &l.ln2_g, &l.ln2_b);
            let mut mid = h2.dot(&l.w_in) + &l.b_in;
            mid.mapv_inplace(gelu);
            x += &(mid.dot(&l.w_out) + &l.b_out);
        }
        self.pos += 1;
        let xf = layernorm_row(&x, &p.ln_f_g, &p.ln_f_b);
        Ok(xf.dot(&p.w_head))
    }
}

fn sample_categorical(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample a continuation of at most `max_new` tokens; stops at eos (which is
/// included in the output) or when the context window is full. Deterministic
/// given `rng_seed`.
pub fn sample_sequence(
    p: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<Vec<TokenId>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be non-empty".into()));
    }
    if prompt.len() > p.dims.window {
        return Err(Error::ContextWindow(format!(
            "prompt length {} exceeds window {}",
            prompt.len(),
            p.dims.window
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = DecodeState::new(p.dims.layers);
    let mut logits = Array1::zeros(p.dims.vocab);
    for &t in prompt {
        logits = state.push_token(p, t)?;
    }
    let mut out = Vec::new();
    for _ in 0..max_new {
        let probs = softmax_temp(&logits, temperature);
        let tok = sample_categorical(&probs, &mut rng);
        out.push(tok);
        if tok == EOS {
            break;
        }
        if state.len() >= p.dims.window {
            break;
        }
        logits = state.push_token(p, tok)?;
    }
    Ok(out)
}
