//! Differentiable forward path: the same transformer as
//! [`super::forward::forward_logits`], built from tape operations so a scalar
//! loss can be differentiated with respect to every parameter tensor.

use super::forward::LN_EPS;
use super::{GradientBuffer, ModelDims, ModelParams, TokenId};
use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};

struct DiffLayer<'t> {
    ln1_g: Var<'t>,
    ln1_b: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ln2_g: Var<'t>,
    ln2_b: Var<'t>,
    w_in: Var<'t>,
    b_in: Var<'t>,
    w_out: Var<'t>,
    b_out: Var<'t>,
}

/// Model parameters registered as tape leaves, in canonical visit order.
pub struct DiffModel<'t> {
    pub dims: ModelDims,
    tok_emb: Var<'t>,
    pos_emb: Var<'t>,
    layers: Vec<DiffLayer<'t>>,
    ln_f_g: Var<'t>,
    ln_f_b: Var<'t>,
    w_head: Var<'t>,
}

impl<'t> DiffModel<'t> {
    pub fn new(tape: &'t Tape, params: &ModelParams) -> DiffModel<'t> {
        let layers = params
            .layers
            .iter()
            .map(|l| DiffLayer {
                ln1_g: tape.leaf1(l.ln1_g.clone()),
                ln1_b: tape.leaf1(l.ln1_b.clone()),
                wq: tape.leaf2(l.wq.clone()),
                wk: tape.leaf2(l.wk.clone()),
                wv: tape.leaf2(l.wv.clone()),
                wo: tape.leaf2(l.wo.clone()),
                ln2_g: tape.leaf1(l.ln2_g.clone()),
                ln2_b: tape.leaf1(l.ln2_b.clone()),
                w_in: tape.leaf2(l.w_in.clone()),
                b_in: tape.leaf1(l.b_in.clone()),
                w_out: tape.leaf2(l.w_out.clone()),
                b_out: tape.leaf1(l.b_out.clone()),
            })
            .collect();
        DiffModel {
            dims: params.dims,
            tok_emb: tape.leaf2(params.tok_emb.clone()),
            pos_emb: tape.leaf2(params.pos_emb.clone()),
            layers,
            ln_f_g: tape.leaf1(params.ln_f_g.clone()),
            ln_f_b: tape.leaf1(params.ln_f_b.clone()),
            w_head: tape.leaf2(params.w_head.clone()),
        }
    }

    fn layernorm(x: &Var<'t>, g: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        x.layernorm_rows(LN_EPS).mul_row(g).add_row(b)
    }

    /// Differentiable full-sequence forward; one logit row per position.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Var<'t>> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Contract("forward on empty token sequence".into()));
        }
        if t_len > self.dims.window {
            return Err(Error::ContextWindow(format!(
                "sequence length {t_len} exceeds window {}",
                self.dims.window
            )));
        }
        let positions: Vec<usize> = (0..t_len).collect();
        let mut x = self
            .tok_emb
            .gather_rows(tokens)
            .add(&self.pos_emb.gather_rows(&positions));
        let scale = 1.0 / (self.dims.dim as f64).sqrt();
        for l in &self.layers {
            let h = Self::layernorm(&x, &l.ln1_g, &l.ln1_b);
            let q = h.matmul(&l.wq);
            let k = h.matmul(&l.wk);
            let v = h.matmul(&l.wv);
            // scores[i][j] = q_i . k_j / sqrt(d)
            let kt = k.transpose();
            let att = q
                .matmul(&kt)
                .scale(scale)
                .causal_softmax_rows()
                .matmul(&v);
            x = x.add(&att.matmul(&l.wo));
            let h2 = Self::layernorm(&x, &l.ln2_g, &l.ln2_b);
            let mid = h2.matmul(&l.w_in).add_row(&l.b_in).gelu();
            x = x.add(&mid.matmul(&l.w_out).add_row(&l.b_out));
        }
        let xf = Self::layernorm(&x, &self.ln_f_g, &self.ln_f_b);
        Ok(xf.matmul(&self.w_head))
    }

    fn leaves(&self) -> Vec<&Var<'t>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w_in,
                &l.b_in, &l.w_out, &l.b_out,
            ]);
        }
        out.extend([&self.ln_f_g, &self.ln_f_b, &self.w_head]);
        out
    }

    /// Collect parameter gradients from a finished backward pass.
    pub fn gradients(&self, grads: &Grads) -> GradientBuffer {
        GradientBuffer {
            tensors: self.leaves().iter().map(|v| grads.get(v)).collect(),
        }
    }
}

/// Differentiate a scalar loss with respect to the model parameters.
pub fn backward(tape: &Tape, loss: &Var, model: &DiffModel) -> GradientBuffer {
    let grads = tape.backward(loss);
    model.gradients(&grads)
}
