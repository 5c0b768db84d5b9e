//! Tape-based reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records every operation performed on [`Var`]s created from it.
//! Calling [`Tape::backward`] on a scalar result propagates gradients back to
//! the requested leaves. Detached values ([`Var::detach`]) start a fresh leaf
//! with no recorded history, so their gradient contribution is exactly zero.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

type GradFn = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    /// (parent id, gradient of parent given gradient of this node)
    parents: Vec<(usize, GradFn)>,
}

/// Records the computation graph for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor value tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    data: Rc<ArrayD<f64>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_id: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the backward target with respect to `v`, zeros if the
    /// target does not depend on it.
    pub fn get(&self, v: &Var) -> ArrayD<f64> {
        self.by_id
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| ArrayD::zeros(v.data.raw_dim()))
    }

    pub fn get_opt(&self, v: &Var) -> Option<&ArrayD<f64>> {
        self.by_id.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<(usize, GradFn)>, data: ArrayD<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents });
        Var {
            tape: self,
            id,
            data: Rc::new(data),
        }
    }

    /// Register a leaf tensor (parameter or constant).
    pub fn leaf(&self, data: ArrayD<f64>) -> Var<'_> {
        self.push(Vec::new(), data)
    }

    pub fn leaf2(&self, data: Array2<f64>) -> Var<'_> {
        self.leaf(data.into_dyn())
    }

    pub fn leaf1(&self, data: Array1<f64>) -> Var<'_> {
        self.leaf(data.into_dyn())
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Reverse pass from a scalar target. Returns gradients for every node
    /// the target depends on; query with [`Grads::get`].
    pub fn backward(&self, target: &Var) -> Grads {
        assert_eq!(
            target.data.len(),
            1,
            "backward target must be a scalar, got shape {:?}",
            target.data.shape()
        );
        let nodes = self.nodes.borrow();
        let mut by_id: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        by_id[target.id] = Some(ArrayD::from_elem(target.data.raw_dim(), 1.0));
        for id in (0..=target.id).rev() {
            let Some(grad) = by_id[id].take() else { continue };
            for (pid, f) in &nodes[id].parents {
                let contrib = f(&grad);
                match &mut by_id[*pid] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            by_id[id] = Some(grad);
        }
        Grads { by_id }
    }
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

fn softmax_rows_arr(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.data.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        *self.data.iter().next().unwrap()
    }

    /// Stop-gradient: a fresh leaf with the same value and no history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(Vec::new(), (*self.data).clone())
    }

    fn same_tape(&self, other: &Var) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let out = &*self.data + &*other.data;
        self.tape.push(
            vec![
                (self.id, Box::new(|g: &ArrayD<f64>| g.clone())),
                (other.id, Box::new(|g: &ArrayD<f64>| g.clone())),
            ],
            out,
        )
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let out = &*self.data - &*other.data;
        self.tape.push(
            vec![
                (self.id, Box::new(|g: &ArrayD<f64>| g.clone())),
                (other.id, Box::new(|g: &ArrayD<f64>| -g)),
            ],
            out,
        )
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let out = &*self.data * &*other.data;
        self.tape.push(
            vec![
                (self.id, Box::new(move |g: &ArrayD<f64>| g * &*b)),
                (other.id, Box::new(move |g: &ArrayD<f64>| g * &*a)),
            ],
            out,
        )
    }

    pub fn neg(&self) -> Var<'t> {
        let out = -&*self.data;
        self.tape
            .push(vec![(self.id, Box::new(|g: &ArrayD<f64>| -g))], out)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = &*self.data * c;
        self.tape
            .push(vec![(self.id, Box::new(move |g: &ArrayD<f64>| g * c))], out)
    }

    pub fn add_const(&self, c: &ArrayD<f64>) -> Var<'t> {
        assert_eq!(self.shape(), c.shape(), "add_const shape mismatch");
        let out = &*self.data + c;
        self.tape
            .push(vec![(self.id, Box::new(|g: &ArrayD<f64>| g.clone()))], out)
    }

    pub fn mul_const(&self, c: &ArrayD<f64>) -> Var<'t> {
        assert_eq!(self.shape(), c.shape(), "mul_const shape mismatch");
        let cc = c.clone();
        let out = &*self.data * c;
        self.tape
            .push(vec![(self.id, Box::new(move |g: &ArrayD<f64>| g * &cc))], out)
    }

    /// Matrix product of two rank-2 vars.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let a = as2(&self.data);
        let b = as2(&other.data);
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dim mismatch");
        let out = a.dot(&b).into_dyn();
        let a2 = a.clone();
        let b2 = b.clone();
        self.tape.push(
            vec![
                (
                    self.id,
                    Box::new(move |g: &ArrayD<f64>| as2(g).dot(&b2.t()).into_dyn()),
                ),
                (
                    other.id,
                    Box::new(move |g: &ArrayD<f64>| a2.t().dot(&as2(g)).into_dyn()),
                ),
            ],
            out,
        )
    }

    /// Transpose of a rank-2 var.
    pub fn transpose(&self) -> Var<'t> {
        let out = as2(&self.data).t().to_owned().into_dyn();
        self.tape.push(
            vec![(
                self.id,
                Box::new(|g: &ArrayD<f64>| as2(g).t().to_owned().into_dyn()),
            )],
            out,
        )
    }

    /// Matrix [m,n] + row vector [n], broadcast over rows.
    pub fn add_row(&self, row: &Var<'t>) -> Var<'t> {
        self.same_tape(row);
        let m = as2(&self.data);
        let r = as1(&row.data);
        assert_eq!(m.ncols(), r.len(), "add_row length mismatch");
        let out = (&m + &r).into_dyn();
        self.tape.push(
            vec![
                (self.id, Box::new(|g: &ArrayD<f64>| g.clone())),
                (
                    row.id,
                    Box::new(|g: &ArrayD<f64>| as2(g).sum_axis(Axis(0)).into_dyn()),
                ),
            ],
            out,
        )
    }

    /// Matrix [m,n] * row vector [n], broadcast over rows.
    pub fn mul_row(&self, row: &Var<'t>) -> Var<'t> {
        self.same_tape(row);
        let m = as2(&self.data);
        let r = as1(&row.data);
        assert_eq!(m.ncols(), r.len(), "mul_row length mismatch");
        let out = (&m * &r).into_dyn();
        let m2 = m.clone();
        let r2 = r.clone();
        self.tape.push(
            vec![
                (
                    self.id,
                    Box::new(move |g: &ArrayD<f64>| (&as2(g) * &r2).into_dyn()),
                ),
                (
                    row.id,
                    Box::new(move |g: &ArrayD<f64>| {
                        (&as2(g) * &m2).sum_axis(Axis(0)).into_dyn()
                    }),
                ),
            ],
            out,
        )
    }

    /// GELU activation (tanh approximation), elementwise.
    pub fn gelu(&self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| {
            let u = C * (v + A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let d = x.mapv(|v| {
                        let u = C * (v + A * v * v * v);
                        let t = u.tanh();
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                    });
                    g * &d
                }),
            )],
            out,
        )
    }

    /// Natural log, elementwise. Caller guarantees positive inputs.
    pub fn ln(&self) -> Var<'t> {
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(f64::ln);
        self.tape.push(
            vec![(self.id, Box::new(move |g: &ArrayD<f64>| g / &*x))],
            out,
        )
    }

    /// max(x, lo) with zero gradient where the floor is active.
    pub fn clamp_min_detach(&self, lo: f64) -> Var<'t> {
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| v.max(lo));
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let mask = x.mapv(|v| if v > lo { 1.0 } else { 0.0 });
                    g * &mask
                }),
            )],
            out,
        )
    }

    /// Symmetric clamp to [-bound, bound] with gradient detached beyond the
    /// bound. Returns the clamped var and the number of clamped entries.
    pub fn clamp_sym_detach(&self, bound: f64) -> (Var<'t>, usize) {
        let x = Rc::clone(&self.data);
        let mut clipped = 0usize;
        let out = self.data.mapv(|v| {
            if v > bound {
                clipped += 1;
                bound
            } else if v < -bound {
                clipped += 1;
                -bound
            } else {
                v
            }
        });
        let var = self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let mask = x.mapv(|v| if v.abs() < bound || bound.is_infinite() { 1.0 } else { 0.0 });
                    g * &mask
                }),
            )],
            out,
        );
        (var, clipped)
    }

    /// Row-wise softmax of a rank-2 var.
    pub fn softmax_rows(&self) -> Var<'t> {
        let y = softmax_rows_arr(&as2(&self.data));
        let y2 = y.clone();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dx = Array2::zeros(g.raw_dim());
                    for i in 0..g.nrows() {
                        let gr = g.row(i);
                        let yr = y2.row(i);
                        let dot = gr.dot(&yr);
                        for j in 0..g.ncols() {
                            dx[[i, j]] = yr[j] * (gr[j] - dot);
                        }
                    }
                    dx.into_dyn()
                }),
            )],
            y.into_dyn(),
        )
    }

    /// Row-wise log-softmax of a rank-2 var.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = as2(&self.data);
        let sm = softmax_rows_arr(&x);
        let mut y = x;
        for (mut row, srow) in y.rows_mut().into_iter().zip(sm.rows()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + srow
                .iter()
                .zip(row.iter())
                .map(|(_, &v)| (v - m).exp())
                .sum::<f64>()
                .ln();
            row.mapv_inplace(|v| v - lse);
        }
        let sm2 = sm.clone();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dx = g.clone();
                    for i in 0..g.nrows() {
                        let gsum: f64 = g.row(i).sum();
                        for j in 0..g.ncols() {
                            dx[[i, j]] -= sm2[[i, j]] * gsum;
                        }
                    }
                    dx.into_dyn()
                }),
            )],
            y.into_dyn(),
        )
    }

    /// Row-wise causal softmax of a square score matrix: row i is a softmax
    /// over columns 0..=i, zero elsewhere.
    pub fn causal_softmax_rows(&self) -> Var<'t> {
        let x = as2(&self.data);
        assert_eq!(x.nrows(), x.ncols(), "causal softmax needs a square matrix");
        let n = x.nrows();
        let mut y = Array2::zeros((n, n));
        for i in 0..n {
            let m = (0..=i).map(|j| x[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..=i {
                let e = (x[[i, j]] - m).exp();
                y[[i, j]] = e;
                s += e;
            }
            for j in 0..=i {
                y[[i, j]] /= s;
            }
        }
        let y2 = y.clone();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dx = Array2::zeros(g.raw_dim());
                    for i in 0..g.nrows() {
                        let dot: f64 = (0..=i).map(|j| g[[i, j]] * y2[[i, j]]).sum();
                        for j in 0..=i {
                            dx[[i, j]] = y2[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    dx.into_dyn()
                }),
            )],
            y.into_dyn(),
        )
    }

    /// Row-wise layer normalization (zero mean, unit variance per row).
    pub fn layernorm_rows(&self, eps: f64) -> Var<'t> {
        let x = as2(&self.data);
        let n = x.ncols() as f64;
        let mut y = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mu = row.sum() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                y[[i, j]] = (v - mu) * is;
            }
        }
        let y2 = y.clone();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dx = Array2::zeros(g.raw_dim());
                    for i in 0..g.nrows() {
                        let gmean: f64 = g.row(i).sum() / n;
                        let gymean: f64 = g
                            .row(i)
                            .iter()
                            .zip(y2.row(i).iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / n;
                        for j in 0..g.ncols() {
                            dx[[i, j]] = inv_std[i] * (g[[i, j]] - gmean - y2[[i, j]] * gymean);
                        }
                    }
                    dx.into_dyn()
                }),
            )],
            y.into_dyn(),
        )
    }

    /// Gather rows of a rank-2 var by index (embedding lookup).
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'t> {
        let table = as2(&self.data);
        let shape = table.raw_dim();
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&table.row(id));
        }
        let ids2 = ids.to_vec();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dt = Array2::zeros(shape);
                    for (i, &id) in ids2.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(i);
                    }
                    dt.into_dyn()
                }),
            )],
            out.into_dyn(),
        )
    }

    /// Contiguous row slice of a rank-2 var.
    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let m = as2(&self.data);
        assert!(start <= end && end <= m.nrows(), "slice_rows out of range");
        let shape = m.raw_dim();
        let out = m.slice(ndarray::s![start..end, ..]).to_owned();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as2(g);
                    let mut dx = Array2::zeros(shape);
                    dx.slice_mut(ndarray::s![start..end, ..]).assign(&g);
                    dx.into_dyn()
                }),
            )],
            out.into_dyn(),
        )
    }

    /// Pick individual (row, col) entries of a rank-2 var into a vector.
    pub fn gather_entries(&self, idx: &[(usize, usize)]) -> Var<'t> {
        let m = as2(&self.data);
        let shape = m.raw_dim();
        let out = Array1::from_iter(idx.iter().map(|&(r, c)| m[[r, c]]));
        let idx2 = idx.to_vec();
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    let g = as1(g);
                    let mut dx = Array2::zeros(shape);
                    for (i, &(r, c)) in idx2.iter().enumerate() {
                        dx[[r, c]] += g[i];
                    }
                    dx.into_dyn()
                }),
            )],
            out.into_dyn(),
        )
    }

    /// Sum of all entries as a scalar var.
    pub fn sum(&self) -> Var<'t> {
        let shape = self.data.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), self.data.sum());
        self.tape.push(
            vec![(
                self.id,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(shape.clone(), *g.iter().next().unwrap())
                }),
            )],
            out,
        )
    }

    /// Mean of all entries as a scalar var.
    pub fn mean(&self) -> Var<'t> {
        let n = self.data.len() as f64;
        self.sum().scale(1.0 / n)
    }
}

/// Sum a list of scalar vars; `zero` is returned when the list is empty.
pub fn sum_vars<'t>(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
    match vars.split_first() {
        None => tape.scalar(0.0),
        Some((first, rest)) => rest.iter().fold(first.clone(), |acc, v| acc.add(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn finite_diff<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn check_grad<F, G>(x: Array2<f64>, diff: F, plain: G)
    where
        F: for<'t> Fn(&Var<'t>) -> Var<'t>,
        G: Fn(&Array2<f64>) -> f64,
    {
        let tape = Tape::new();
        let v = tape.leaf2(x.clone());
        let out = diff(&v);
        let grads = tape.backward(&out);
        let got = as2(&grads.get(&v));
        let want = finite_diff(plain, &x, 1e-5);
        for (a, b) in got.iter().zip(want.iter()) {
            let denom = b.abs().max(1e-6);
            assert!(
                (a - b).abs() / denom < 1e-4,
                "grad mismatch: ad={a} fd={b}"
            );
        }
    }

    #[test]
    fn grad_softmax_rows() {
        let x = arr2(&[[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]]);
        let w = arr2(&[[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]]);
        let w2 = w.clone();
        check_grad(
            x,
            move |v| v.softmax_rows().mul_const(&w.clone().into_dyn()).sum(),
            move |x| (&softmax_rows_arr(x) * &w2).sum(),
        );
    }

    #[test]
    fn grad_layernorm_gelu_matmul() {
        let x = arr2(&[[0.3, -1.2, 2.0], [1.0, 0.1, -0.5]]);
        let w = arr2(&[[1.0, -2.0], [0.5, 0.3], [0.7, -1.1]]);
        let w2 = w.clone();
        check_grad(
            x,
            move |v| {
                let tape_w = v.tape.leaf2(w.clone());
                v.layernorm_rows(1e-5).gelu().matmul(&tape_w).sum()
            },
            move |x| {
                // plain re-implementation
                let n = x.ncols() as f64;
                let mut y = x.clone();
                for mut row in y.rows_mut() {
                    let mu = row.sum() / n;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let is = 1.0 / (var + 1e-5).sqrt();
                    row.mapv_inplace(|v| (v - mu) * is);
                }
                y.mapv_inplace(|v| {
                    let u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
                    0.5 * v * (1.0 + u.tanh())
                });
                y.dot(&w2).sum()
            },
        );
    }

    #[test]
    fn grad_causal_softmax() {
        let x = arr2(&[[0.5, 9.0, -3.0], [0.2, -0.4, 7.0], [1.0, 2.0, 3.0]]);
        let w = arr2(&[[1.0, 0.0, 0.0], [-1.0, 2.0, 0.0], [0.3, -0.2, 0.9]]);
        let w2 = w.clone();
        check_grad(
            x,
            move |v| v.causal_softmax_rows().mul_const(&w.clone().into_dyn()).sum(),
            move |x| {
                let n = x.nrows();
                let mut total = 0.0;
                for i in 0..n {
                    let m = (0..=i).map(|j| x[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = (0..=i).map(|j| (x[[i, j]] - m).exp()).sum();
                    for j in 0..=i {
                        total += w2[[i, j]] * (x[[i, j]] - m).exp() / s;
                    }
                }
                total
            },
        );
    }

    #[test]
    fn grad_log_softmax_gather() {
        let x = arr2(&[[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]]);
        check_grad(
            x,
            |v| v.log_softmax_rows().gather_entries(&[(0, 2), (1, 0)]).sum(),
            |x| {
                let mut total = 0.0;
                for (i, j) in [(0usize, 2usize), (1, 0)] {
                    let row = x.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                    total += x[[i, j]] - lse;
                }
                total
            },
        );
    }

    #[test]
    fn detach_kills_gradient() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let loss = x.detach().mul(&x.detach()).sum();
        let grads = tape.backward(&loss);
        assert!(grads.get(&x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unconnected_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[1.0, 2.0]]));
        let y = tape.leaf2(arr2(&[[3.0, 4.0]]));
        let loss = y.sum();
        let grads = tape.backward(&loss);
        assert!(grads.get(&x).iter().all(|&g| g == 0.0));
        assert!(grads.get_opt(&x).is_none());
    }

    #[test]
    fn clamp_sym_detach_counts_and_masks() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[0.2, -0.1, 0.01]]));
        let (c, n) = x.clamp_sym_detach(0.05);
        assert_eq!(n, 2);
        let vals: Vec<f64> = c.data().iter().cloned().collect();
        assert_eq!(vals, vec![0.05, -0.05, 0.01]);
        let grads = tape.backward(&c.sum());
        let g = grads.get(&x);
        let gv: Vec<f64> = g.iter().cloned().collect();
        assert_eq!(gv, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_sym_infinite_bound_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[123.0, -456.0]]));
        let (c, n) = x.clamp_sym_detach(f64::INFINITY);
        assert_eq!(n, 0);
        assert_eq!(c.data(), x.data());
        let grads = tape.backward(&c.sum());
        assert!(grads.get(&x).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let tape = Tape::new();
        let table = tape.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let picked = table.gather_rows(&[2, 0, 2]);
        let grads = tape.backward(&picked.sum());
        let g = as2(&grads.get(&table));
        assert_eq!(g, arr2(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]));
    }
}
