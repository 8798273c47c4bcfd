//! Reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] walks it in reverse and returns
//! gradients keyed by [`ParamId`]. Tapes borrow the parameter store
//! immutably, so independent tapes (one per batch sample) can run in
//! parallel against shared weights.

use ndarray::{Array1, Array2, Axis};

use super::params::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(usize);

const MASK_NEG: f64 = -1e9;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Tx, Tx),
    Transpose(Tx),
    Add(Tx, Tx),
    /// [m,n] + broadcast [1,n]
    AddRow(Tx, Tx),
    Mul(Tx, Tx),
    Scale(Tx, f64),
    Gelu(Tx),
    /// Row-wise softmax.
    Softmax(Tx),
    LayerNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Select rows of `src` (duplicates allowed); backward scatter-adds.
    Gather {
        src: Tx,
        rows: Vec<usize>,
    },
    SliceCols {
        src: Tx,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Tx>),
    ConcatRows(Vec<Tx>),
    Dropout {
        src: Tx,
        mask: Array2<f64>,
    },
    MeanAll(Tx),
    /// Weighted-mean cross-entropy of rows of logits against target indices.
    CeRows {
        logits: Tx,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
    /// Weighted-mean squared error of a column vector against targets.
    MseMean {
        pred: Tx,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Weighted-mean asymmetric squared error; residual u = target - pred
    /// gets weight alpha when u >= 0 and (1 - alpha) when u < 0.
    ExpectileMean {
        pred: Tx,
        targets: Vec<f64>,
        alpha: f64,
        weights: Vec<f64>,
    },
    StopGrad,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, t: Tx) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn scalar(&self, t: Tx) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.dim(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Tx {
        self.nodes.push(Node { value, op });
        Tx(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Tx {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Tx {
        self.push(self.params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Tx) -> Tx {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Tx, row: Tx) -> Tx {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Tx, k: f64) -> Tx {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Tx) -> Tx {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: Tx) -> Tx {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx) -> Tx {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + 1e-5).sqrt();
            inv_std[i] = istd;
            row.mapv_inplace(|v| (v - mean) * istd);
        }
        let v = &xhat * &self.value(gain).row(0) + &self.value(bias).row(0);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather(&mut self, src: Tx, rows: Vec<usize>) -> Tx {
        let s = self.value(src);
        let mut v = Array2::zeros((rows.len(), s.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&s.row(r));
        }
        self.push(v, Op::Gather { src, rows })
    }

    pub fn slice_cols(&mut self, src: Tx, start: usize, len: usize) -> Tx {
        let v = self
            .value(src)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { src, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<Tx>) -> Tx {
        let views: Vec<_> = parts.iter().map(|t| self.value(*t).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("column concat");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Tx>) -> Tx {
        let views: Vec<_> = parts.iter().map(|t| self.value(*t).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("row concat");
        self.push(v, Op::ConcatRows(parts))
    }

    /// `mask` entries are 0 (dropped) or 1/(1-p) (kept, inverted scaling).
    pub fn dropout(&mut self, src: Tx, mask: Array2<f64>) -> Tx {
        debug_assert_eq!(self.value(src).dim(), mask.dim());
        let v = self.value(src) * &mask;
        self.push(v, Op::Dropout { src, mask })
    }

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    /// Adds a pre-softmax causal/pad mask: disallowed entries get a large
    /// negative offset. `allowed[q][k]` true means position q may attend to k.
    pub fn attn_mask(&mut self, scores: Tx, allowed: &Array2<bool>) -> Tx {
        let offsets = allowed.mapv(|a| if a { 0.0 } else { MASK_NEG });
        let off = self.input(offsets);
        self.add(scores, off)
    }

    pub fn ce_rows(&mut self, logits: Tx, targets: Vec<usize>, weights: Vec<f64>) -> Tx {
        let lv = self.value(logits);
        debug_assert_eq!(lv.nrows(), targets.len());
        debug_assert_eq!(lv.nrows(), weights.len());
        let probs = softmax_rows(lv);
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                if w != 0.0 {
                    loss -= w * probs[(i, t)].max(1e-300).ln();
                }
            }
            loss /= wsum;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CeRows {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    pub fn mse_mean(&mut self, pred: Tx, targets: Vec<f64>, weights: Vec<f64>) -> Tx {
        let pv = self.value(pred);
        debug_assert_eq!(pv.ncols(), 1);
        debug_assert_eq!(pv.nrows(), targets.len());
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            for i in 0..targets.len() {
                let d = targets[i] - pv[(i, 0)];
                loss += weights[i] * d * d;
            }
            loss /= wsum;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MseMean {
                pred,
                targets,
                weights,
            },
        )
    }

    pub fn expectile_mean(
        &mut self,
        pred: Tx,
        targets: Vec<f64>,
        alpha: f64,
        weights: Vec<f64>,
    ) -> Tx {
        let pv = self.value(pred);
        debug_assert_eq!(pv.ncols(), 1);
        debug_assert_eq!(pv.nrows(), targets.len());
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            for i in 0..targets.len() {
                let u = targets[i] - pv[(i, 0)];
                let w = if u >= 0.0 { alpha } else { 1.0 - alpha };
                loss += weights[i] * w * u * u;
            }
            loss /= wsum;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::ExpectileMean {
                pred,
                targets,
                alpha,
                weights,
            },
        )
    }

    pub fn stop_grad(&mut self, a: Tx) -> Tx {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad)
    }

    /// Affine map: x @ w + b with b a [1, n] row.
    pub fn affine(&mut self, x: Tx, w: ParamId, b: ParamId) -> Tx {
        let wt = self.param(w);
        let bt = self.param(b);
        let xw = self.matmul(x, wt);
        self.add_row(xw, bt)
    }

    /// Backpropagate from a scalar root; returns per-parameter gradients.
    pub fn backward(&mut self, root: Tx) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Grads::zeros(self.params.len());

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Split borrows: grads of earlier nodes vs this node's op/value.
            let (head, tail) = self.nodes.split_at(i);
            let node = &tail[0];
            let mut acc = |t: Tx, add: Array2<f64>| {
                debug_assert!(t.0 < i);
                match &mut grads[t.0] {
                    Some(slot) => *slot += &add,
                    slot @ None => *slot = Some(add),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let av = &head[a.0].value;
                    let bv = &head[b.0].value;
                    acc(*a, g.dot(&bv.t()));
                    acc(*b, av.t().dot(&g));
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let rsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, g);
                    acc(*row, rsum);
                }
                Op::Mul(a, b) => {
                    let av = &head[a.0].value;
                    let bv = &head[b.0].value;
                    acc(*a, &g * bv);
                    acc(*b, &g * av);
                }
                Op::Scale(a, k) => acc(*a, &g * *k),
                Op::Gelu(a) => {
                    let av = &head[a.0].value;
                    acc(*a, &g * &av.mapv(gelu_grad_scalar));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for c in 0..y.ncols() {
                            dx[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &head[gain.0].value;
                    let n_cols = xhat.ncols() as f64;
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> =
                            (0..xh.len()).map(|c| gr[c] * gv[(0, c)]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n_cols;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(xh.iter())
                            .map(|(d, x)| d * x)
                            .sum::<f64>()
                            / n_cols;
                        for c in 0..xh.len() {
                            dx[(r, c)] =
                                inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                }
                Op::Gather { src, rows } => {
                    let sv = &head[src.0].value;
                    let mut ds = Array2::zeros(sv.dim());
                    for (i_row, &r) in rows.iter().enumerate() {
                        let mut dst = ds.row_mut(r);
                        dst += &g.row(i_row);
                    }
                    acc(*src, ds);
                }
                Op::SliceCols { src, start, len } => {
                    let sv = &head[src.0].value;
                    let mut ds = Array2::zeros(sv.dim());
                    ds.slice_mut(ndarray::s![.., *start..start + len])
                        .assign(&g);
                    acc(*src, ds);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = head[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        acc(p, gp);
                        col += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let h = head[p.0].value.nrows();
                        let gp = g.slice(ndarray::s![row..row + h, ..]).to_owned();
                        acc(p, gp);
                        row += h;
                    }
                }
                Op::Dropout { src, mask } => acc(*src, &g * mask),
                Op::MeanAll(a) => {
                    let av = &head[a.0].value;
                    let k = g[(0, 0)] / av.len() as f64;
                    acc(*a, Array2::from_elem(av.dim(), k));
                }
                Op::CeRows {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let wsum: f64 = weights.iter().sum();
                    if wsum > 0.0 {
                        let scale = g[(0, 0)] / wsum;
                        let mut dl = probs.clone();
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                dl.row_mut(r).fill(0.0);
                                continue;
                            }
                            dl[(r, t)] -= 1.0;
                            let mut row = dl.row_mut(r);
                            row *= w * scale;
                        }
                        acc(*logits, dl);
                    }
                }
                Op::MseMean {
                    pred,
                    targets,
                    weights,
                } => {
                    let pv = &head[pred.0].value;
                    let wsum: f64 = weights.iter().sum();
                    if wsum > 0.0 {
                        let scale = g[(0, 0)] / wsum;
                        let mut dp = Array2::zeros(pv.dim());
                        for i in 0..targets.len() {
                            let u = targets[i] - pv[(i, 0)];
                            dp[(i, 0)] = -2.0 * weights[i] * u * scale;
                        }
                        acc(*pred, dp);
                    }
                }
                Op::ExpectileMean {
                    pred,
                    targets,
                    alpha,
                    weights,
                } => {
                    let pv = &head[pred.0].value;
                    let wsum: f64 = weights.iter().sum();
                    if wsum > 0.0 {
                        let scale = g[(0, 0)] / wsum;
                        let mut dp = Array2::zeros(pv.dim());
                        for i in 0..targets.len() {
                            let u = targets[i] - pv[(i, 0)];
                            let w = if u >= 0.0 { *alpha } else { 1.0 - *alpha };
                            dp[(i, 0)] = -2.0 * w * weights[i] * u * scale;
                        }
                        acc(*pred, dp);
                    }
                }
                Op::StopGrad => {}
            }
        }
        out
    }
}
