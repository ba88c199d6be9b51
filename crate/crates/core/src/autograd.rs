//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Loss terms
//! are evaluated outside the tape; their gradients are fed back in as seeds
//! to [`Graph::backward`], which returns one accumulated gradient per
//! network parameter.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub struct BackwardCtx<'a> {
    pub grad: &'a Mat,
    pub out: &'a Mat,
    pub inputs: Vec<&'a Mat>,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Mat>> + Send + Sync>;

struct Node {
    value: Arc<Mat>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<usize>,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that evaluates values only; nothing is differentiable.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: &Arc<Mat>) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.record,
            param: Some(index),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Mat, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates the seed gradients back to parameter leaves.
    ///
    /// Returns a vector of length `n_params`; slots of parameters that did
    /// not take part in the graph are `None`.
    pub fn backward(&self, seeds: &[(Var, Mat)], n_params: usize) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.dim(),
                self.nodes[v.0].value.dim(),
                "seed gradient shape must match its variable"
            );
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], g.clone());
            }
        }
        let mut param_grads: Vec<Option<Mat>> = (0..n_params).map(|_| None).collect();
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(p) = node.param {
                accumulate(&mut param_grads[p], grad);
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|p| &*self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if self.nodes[parent.0].requires_grad {
                        accumulate(&mut grads[parent.0], g);
                    }
                }
            }
        }
        param_grads
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(
            out,
            vec![a, b],
            Box::new(|c| {
                let (a, b) = (c.inputs[0], c.inputs[1]);
                vec![
                    c.needs[0].then(|| c.grad.dot(&b.t())),
                    c.needs[1].then(|| a.t().dot(c.grad)),
                ]
            }),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(
            out,
            vec![a, b],
            Box::new(|c| {
                let (a, b) = (c.inputs[0], c.inputs[1]);
                vec![
                    c.needs[0].then(|| c.grad.dot(b)),
                    c.needs[1].then(|| c.grad.t().dot(a)),
                ]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(
            out,
            vec![a],
            Box::new(|c| vec![Some(c.grad.t().as_standard_layout().into_owned())]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(
            out,
            vec![a, b],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]),
        )
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        self.push(
            out,
            vec![a, row],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.clone()),
                    c.needs[1].then(|| c.grad.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    /// Adds an `m × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let out = self.value(a) + self.value(col);
        self.push(
            out,
            vec![a, col],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.clone()),
                    c.needs[1].then(|| c.grad.sum_axis(Axis(1)).insert_axis(Axis(1))),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, vec![a], Box::new(move |c| vec![Some(c.grad * k)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(
            out,
            vec![a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad * c.inputs[1]),
                    c.needs[1].then(|| c.grad * c.inputs[0]),
                ]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(
            out,
            vec![a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                g.zip_mut_with(c.inputs[0], |g, &x| *g *= gelu_grad(x));
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(
            out,
            vec![a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                g.zip_mut_with(c.out, |g, &y| *g *= y * (1.0 - y));
                vec![Some(g)]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(
            out,
            vec![a],
            Box::new(|c| {
                let y = c.out;
                let mut g = c.grad * y;
                let dots = g.sum_axis(Axis(1));
                for (mut row, (yr, d)) in g.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots.iter())) {
                    row.zip_mut_with(&yr, |gi, &yi| *gi -= yi * d);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Row-wise layer norm with `1 × D` affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        let mut xhat = Mat::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |c| {
                let gamma = c.inputs[1];
                let g = c.grad;
                let gx = c.needs[0].then(|| {
                    let gxhat = g * gamma;
                    let mut gx = Mat::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let n = gh.len() as f64;
                        let m1 = gh.sum() / n;
                        let m2 = gh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, a), b) in gx.row_mut(r).iter_mut().zip(gh.iter()).zip(xh.iter()) {
                            *o = inv_std[r] * (a - m1 - b * m2);
                        }
                    }
                    gx
                });
                let gg = c.needs[1].then(|| (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gb = c.needs[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                vec![gx, gg, gb]
            }),
        )
    }

    /// Group norm over a `C × (H·W)` feature map with `C × 1` affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (ch, hw) = xv.dim();
        assert!(groups > 0 && ch % groups == 0, "group_norm: {ch} channels, {groups} groups");
        let per = ch / groups;
        let n = (per * hw) as f64;
        let mut xhat = Mat::zeros((ch, hw));
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let block = xv.slice(s![gi * per..(gi + 1) * per, ..]);
            let mean = block.sum() / n;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            xhat.slice_mut(s![gi * per..(gi + 1) * per, ..])
                .zip_mut_with(&block, |o, &v| *o = (v - mean) * is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |c| {
                let g = c.grad;
                let gamma = c.inputs[1];
                let gx = c.needs[0].then(|| {
                    let gxhat = g * gamma;
                    let mut gx = Mat::zeros(g.dim());
                    for gi in 0..groups {
                        let rows = gi * per..(gi + 1) * per;
                        let gh = gxhat.slice(s![rows.clone(), ..]);
                        let xh = xhat.slice(s![rows.clone(), ..]);
                        let m1 = gh.sum() / n;
                        let m2 = (&gh * &xh).sum() / n;
                        let is = inv_std[gi];
                        let mut dst = gx.slice_mut(s![rows, ..]);
                        ndarray::Zip::from(&mut dst)
                            .and(&gh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = is * (a - m1 - b * m2));
                    }
                    gx
                });
                let gg = c.needs[1].then(|| (g * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)));
                let gb = c.needs[2].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                vec![gx, gg, gb]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let cols = self.value(a).ncols();
        self.push(
            out,
            vec![a],
            Box::new(move |c| {
                let mut g = Mat::zeros((c.grad.nrows(), cols));
                g.slice_mut(s![.., start..end]).assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let rows = self.value(a).nrows();
        self.push(
            out,
            vec![a],
            Box::new(move |c| {
                let mut g = Mat::zeros((rows, c.grad.ncols()));
                g.slice_mut(s![start..end, ..]).assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |c| {
                let mut at = 0;
                widths
                    .iter()
                    .zip(&c.needs)
                    .map(|(&w, &need)| {
                        let g = need.then(|| c.grad.slice(s![.., at..at + w]).to_owned());
                        at += w;
                        g
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |c| {
                let mut at = 0;
                heights
                    .iter()
                    .zip(&c.needs)
                    .map(|(&h, &need)| {
                        let g = need.then(|| c.grad.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (out, norms) = normalize_rows(self.value(a), eps);
        self.push(
            out,
            vec![a],
            Box::new(move |c| {
                let y = c.out;
                let mut g = c.grad.clone();
                for (r, &n) in norms.iter().enumerate() {
                    if n > eps {
                        let dot: f64 = g.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| a * b).sum();
                        let yr = y.row(r).to_owned();
                        g.row_mut(r).zip_mut_with(&yr, |gi, &yi| *gi = (*gi - yi * dot) / n);
                    } else {
                        g.row_mut(r).mapv_inplace(|gi| gi / eps);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Divides each column by `max(‖col‖₂, eps)`.
    pub fn l2_normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let t = self.transpose(a);
        let n = self.l2_normalize_rows(t, eps);
        self.transpose(n)
    }

    /// 3×3 convolution, stride 1, padding 1.
    ///
    /// `x` is `C_in × (h·w)` in raster order, `weight` is `C_out × (C_in·9)`
    /// and `bias` is `C_out × 1`.
    pub fn conv3x3(&mut self, x: Var, h: usize, w: usize, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cin = xv.nrows();
        assert_eq!(xv.ncols(), h * w, "conv3x3: input is not {h}x{w}");
        assert_eq!(self.value(weight).ncols(), cin * 9, "conv3x3: weight/input channel mismatch");
        let geom = ConvGeom { channels: cin, h, w, stride: 1, out_h: h, out_w: w };
        let cols = im2col(xv, geom);
        let out = self.value(weight).dot(&cols) + self.value(bias);
        self.push(
            out,
            vec![x, weight, bias],
            Box::new(move |c| {
                let g = c.grad;
                let wt = c.inputs[1];
                let gx = c.needs[0].then(|| col2im(&wt.t().dot(g), geom));
                let gw = c.needs[1].then(|| g.dot(&cols.t()));
                let gb = c.needs[2].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                vec![gx, gw, gb]
            }),
        )
    }

    /// 3×3 transposed convolution, stride 2, padding 1, output padding 1:
    /// an `h × w` map becomes `2h × 2w`.
    ///
    /// `weight` is `(C_out·9) × C_in`; row `(o·9 + ky·3 + kx)` holds the
    /// tap that input pixel `(i, j)` adds to output `(2i−1+ky, 2j−1+kx)`.
    pub fn conv_transpose3x3_s2(&mut self, x: Var, h: usize, w: usize, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        assert_eq!(xv.ncols(), h * w, "conv_transpose: input is not {h}x{w}");
        assert_eq!(wv.ncols(), xv.nrows(), "conv_transpose: weight/input channel mismatch");
        assert_eq!(wv.nrows() % 9, 0);
        let cout = wv.nrows() / 9;
        let geom = ConvGeom { channels: cout, h: 2 * h, w: 2 * w, stride: 2, out_h: h, out_w: w };
        let cols = wv.dot(xv);
        let out = col2im(&cols, geom) + self.value(bias);
        self.push(
            out,
            vec![x, weight, bias],
            Box::new(move |c| {
                let g = c.grad;
                let (x, wt) = (c.inputs[0], c.inputs[1]);
                let gcols = im2col(g, geom);
                let gx = c.needs[0].then(|| wt.t().dot(&gcols));
                let gw = c.needs[1].then(|| gcols.dot(&x.t()));
                let gb = c.needs[2].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                vec![gx, gw, gb]
            }),
        )
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn normalize_rows(a: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = n.max(eps);
        row.mapv_inplace(|v| v / d);
        norms.push(n);
    }
    (out, norms)
}

/// Geometry of a 3×3, padding-1 convolution reading a `channels × (h·w)`
/// map and producing an `out_h × out_w` grid.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    h: usize,
    w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

fn im2col(x: &Mat, g: ConvGeom) -> Mat {
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let ncols = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * 9 * ncols];
    for ch in 0..g.channels {
        let plane = &src[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ncols;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Mat::from_shape_vec((g.channels * 9, ncols), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
fn col2im(cols: &Mat, g: ConvGeom) -> Mat {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let ncols = g.out_h * g.out_w;
    let mut out = vec![0.0; g.channels * g.h * g.w];
    for ch in 0..g.channels {
        let plane = &mut out[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ncols;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    Mat::from_shape_vec((g.channels, g.h * g.w), out).expect("col2im shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter gradient of `build` against central differences
    /// of `<seed, output>` for a random seed.
    fn check(params: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let arcs: Vec<Arc<Mat>> = params.iter().cloned().map(Arc::new).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = arcs.iter().enumerate().map(|(i, a)| g.param(i, a)).collect();
        let out = build(&mut g, &vars);
        let seed = random(&mut rng, g.value(out).nrows(), g.value(out).ncols());
        let grads = g.backward(&[(out, seed.clone())], params.len());

        let eval = |ps: &[Mat]| {
            let arcs: Vec<Arc<Mat>> = ps.iter().cloned().map(Arc::new).collect();
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = arcs.iter().enumerate().map(|(i, a)| g.param(i, a)).collect();
            let out = build(&mut g, &vars);
            (g.value(out) * &seed).sum()
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads[pi].as_ref().expect("param has gradient");
            for idx in 0..p.len() {
                let (r, c) = (idx / p.ncols(), idx % p.ncols());
                let mut plus = params.clone();
                plus[pi][[r, c]] += h;
                let mut minus = params.clone();
                minus[pi][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-5, "param {pi} [{r},{c}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |g, v| g.matmul(v[0], v[1]));
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |g, v| g.matmul_nt(v[0], v[1]));
        check(vec![random(&mut rng, 3, 4)], |g, v| g.transpose(v[0]));
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4)], |g, v| g.add_row(v[0], v[1]));
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 3, 1)], |g, v| g.add_col(v[0], v[1]));
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4)], |g, v| {
            let m = g.mul(v[0], v[1]);
            let a = g.add(m, v[0]);
            g.scale(a, -0.7)
        });
        check(vec![random(&mut rng, 3, 4)], |g, v| g.gelu(v[0]));
        check(vec![random(&mut rng, 3, 4)], |g, v| g.sigmoid(v[0]));
        check(vec![random(&mut rng, 3, 4)], |g, v| g.softmax_rows(v[0]));
    }

    #[test]
    fn normalization_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)],
            |g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-6),
        );
        check(
            vec![random(&mut rng, 4, 6), random(&mut rng, 4, 1), random(&mut rng, 4, 1)],
            |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5),
        );
        check(vec![random(&mut rng, 3, 4)], |g, v| g.l2_normalize_rows(v[0], 1e-12));
        check(vec![random(&mut rng, 3, 4)], |g, v| g.l2_normalize_cols(v[0], 1e-12));
    }

    #[test]
    fn slicing_and_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 3, 6)], |g, v| {
            let a = g.slice_cols(v[0], 1, 3);
            let b = g.slice_cols(v[0], 4, 6);
            let c = g.concat_cols(&[b, a]);
            let r = g.slice_rows(c, 1, 3);
            g.concat_rows(&[r, c])
        });
    }

    #[test]
    fn convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            vec![random(&mut rng, 2, 12), random(&mut rng, 3, 18), random(&mut rng, 3, 1)],
            |g, v| g.conv3x3(v[0], 3, 4, v[1], v[2]),
        );
        check(
            vec![random(&mut rng, 2, 6), random(&mut rng, 27, 2), random(&mut rng, 3, 1)],
            |g, v| g.conv_transpose3x3_s2(v[0], 2, 3, v[1], v[2]),
        );
    }

    #[test]
    fn conv3x3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let x = random(&mut rng, cin, h * w);
        let wt = random(&mut rng, cout, cin * 9);
        let b = random(&mut rng, cout, 1);
        let mut g = Graph::no_grad();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let out = g.conv3x3(xv, h, w, wv, bv);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[[o, 0]];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += wt[[o, c * 9 + ky * 3 + kx]] * x[[c, iy as usize * w + ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((g.value(out)[[o, y * w + xx]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cin, cout, h, w) = (2, 2, 3, 2);
        let x = random(&mut rng, cin, h * w);
        let wt = random(&mut rng, cout * 9, cin);
        let b = Mat::zeros((cout, 1));
        let mut expected = Mat::zeros((cout, 4 * h * w));
        for c in 0..cin {
            for i in 0..h {
                for j in 0..w {
                    for o in 0..cout {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (y, xx) = (2 * i as isize - 1 + ky as isize, 2 * j as isize - 1 + kx as isize);
                                if y >= 0 && y < 2 * h as isize && xx >= 0 && xx < 2 * w as isize {
                                    expected[[o, y as usize * 2 * w + xx as usize]] +=
                                        x[[c, i * w + j]] * wt[[o * 9 + ky * 3 + kx, c]];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut g = Graph::no_grad();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let out = g.conv_transpose3x3_s2(xv, h, w, wv, bv);
        let diff = (g.value(out) - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Mat::ones((2, 2)));
        let p = Arc::new(Mat::ones((2, 2)));
        let pv = g.param(0, &p);
        let prod = g.matmul(a, pv);
        assert!(!g.requires_grad(a));
        assert!(g.requires_grad(prod));
        let grads = g.backward(&[(prod, Mat::ones((2, 2)))], 1);
        assert_eq!(grads[0].as_ref().unwrap(), &Mat::from_elem((2, 2), 2.0));
    }
}
