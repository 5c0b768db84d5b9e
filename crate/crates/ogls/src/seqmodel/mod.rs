//! Tiny decoder-only autoregressive transformer with reverse-mode
//! differentiation, sampling, and an Adam-style optimizer. One parameter set
//! plays student, teacher, and diagnostic-reference roles.

pub mod diff;
pub mod forward;
pub mod optim;
pub mod vocab;

pub use diff::DiffModel;
pub use forward::{next_dist, sample_sequence, DecodeState};
pub use optim::{AdamState, StepOutcome};
pub use vocab::{TokenId, Vocab, ANSWER, BOS, EOS, GUIDE_CLOSE, GUIDE_OPEN, PAD};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub window: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.dim == 0 || self.layers == 0 || self.window == 0 {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// All weights of the model: single-head pre-norm attention blocks with a
/// GELU feed-forward, learned positional embeddings, tied nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f_g: Array1<f64>,
    pub ln_f_b: Array1<f64>,
    pub w_head: Array2<f64>,
}

/// One gradient tensor per parameter tensor, in canonical visit order.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub tensors: Vec<ArrayD<f64>>,
}

impl GradientBuffer {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(params: &ModelParams) -> GradientBuffer {
        let mut tensors = Vec::new();
        params.visit(&mut |_, view| tensors.push(ArrayD::zeros(view.raw_dim())));
        GradientBuffer { tensors }
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Array2::from_shape_vec((rows, cols), data).unwrap()
}

/// Deterministic initialization: scaled normal, std 0.02 everywhere except
/// residual-path output projections which use 0.02 / sqrt(2 L).
pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.dim;
    let std = 0.02;
    let std_res = 0.02 / (2.0 * dims.layers as f64).sqrt();
    let tok_emb = randn(&mut rng, dims.vocab, d, std);
    let pos_emb = randn(&mut rng, dims.window, d, std);
    let mut layers = Vec::with_capacity(dims.layers);
    for _ in 0..dims.layers {
        layers.push(LayerParams {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: randn(&mut rng, d, d, std),
            wk: randn(&mut rng, d, d, std),
            wv: randn(&mut rng, d, d, std),
            wo: randn(&mut rng, d, d, std_res),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w_in: randn(&mut rng, d, 4 * d, std),
            b_in: Array1::zeros(4 * d),
            w_out: randn(&mut rng, 4 * d, d, std_res),
            b_out: Array1::zeros(d),
        });
    }
    let ln_f_g = Array1::ones(d);
    let ln_f_b = Array1::zeros(d);
    let w_head = randn(&mut rng, d, dims.vocab, std);
    Ok(ModelParams {
        dims,
        tok_emb,
        pos_emb,
        layers,
        ln_f_g,
        ln_f_b,
        w_head,
    })
}

impl ModelParams {
    /// Visit every parameter tensor in canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f64>)) {
        f("tok_emb", self.tok_emb.view().into_dyn());
        f("pos_emb", self.pos_emb.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            f(&n("ln1_g"), l.ln1_g.view().into_dyn());
            f(&n("ln1_b"), l.ln1_b.view().into_dyn());
            f(&n("wq"), l.wq.view().into_dyn());
            f(&n("wk"), l.wk.view().into_dyn());
            f(&n("wv"), l.wv.view().into_dyn());
            f(&n("wo"), l.wo.view().into_dyn());
            f(&n("ln2_g"), l.ln2_g.view().into_dyn());
            f(&n("ln2_b"), l.ln2_b.view().into_dyn());
            f(&n("w_in"), l.w_in.view().into_dyn());
            f(&n("b_in"), l.b_in.view().into_dyn());
            f(&n("w_out"), l.w_out.view().into_dyn());
            f(&n("b_out"), l.b_out.view().into_dyn());
        }
        f("ln_f_g", self.ln_f_g.view().into_dyn());
        f("ln_f_b", self.ln_f_b.view().into_dyn());
        f("w_head", self.w_head.view().into_dyn());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f64>)) {
        f("tok_emb", self.tok_emb.view_mut().into_dyn());
        f("pos_emb", self.pos_emb.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let pfx = format!("layer{i}.");
            f(&format!("{pfx}ln1_g"), l.ln1_g.view_mut().into_dyn());
            f(&format!("{pfx}ln1_b"), l.ln1_b.view_mut().into_dyn());
            f(&format!("{pfx}wq"), l.wq.view_mut().into_dyn());
            f(&format!("{pfx}wk"), l.wk.view_mut().into_dyn());
            f(&format!("{pfx}wv"), l.wv.view_mut().into_dyn());
            f(&format!("{pfx}wo"), l.wo.view_mut().into_dyn());
            f(&format!("{pfx}ln2_g"), l.ln2_g.view_mut().into_dyn());
            f(&format!("{pfx}ln2_b"), l.ln2_b.view_mut().into_dyn());
            f(&format!("{pfx}w_in"), l.w_in.view_mut().into_dyn());
            f(&format!("{pfx}b_in"), l.b_in.view_mut().into_dyn());
            f(&format!("{pfx}w_out"), l.w_out.view_mut().into_dyn());
            f(&format!("{pfx}b_out"), l.b_out.view_mut().into_dyn());
        }
        f("ln_f_g", self.ln_f_g.view_mut().into_dyn());
        f("ln_f_b", self.ln_f_b.view_mut().into_dyn());
        f("w_head", self.w_head.view_mut().into_dyn());
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |_, v| out.extend(v.iter().cloned()));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, mut v| {
            for x in v.iter_mut() {
                *x = flat[pos];
                pos += 1;
            }
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    /// FNV-1a content hash over dims and raw f64 bits; used to assert teacher
    /// immutability and for config provenance.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        mix(&(self.dims.vocab as u64).to_le_bytes());
        mix(&(self.dims.dim as u64).to_le_bytes());
        mix(&(self.dims.layers as u64).to_le_bytes());
        mix(&(self.dims.window as u64).to_le_bytes());
        self.visit(&mut |_, v| {
            for &x in v.iter() {
                mix(&x.to_bits().to_le_bytes());
            }
        });
        h
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned checkpoint container; JSON round-trips f64 values bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub opt: Option<AdamState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}
