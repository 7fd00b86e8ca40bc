//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass together
//! with whatever the backward rule needs (normalized activations, softmax
//! probabilities). [`Graph::backward`] then walks the tape in reverse.
//!
//! Matrices are rank-2 tensors in row-major order. Kernels may split work
//! across rows with rayon, but every output element is always reduced in the
//! same order, so results do not depend on the thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{cst, Real, Tensor};

/// Work (multiply-adds) above which matrix kernels fan out over rows.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which parameter leaves track gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Only parameters flagged `trainable`.
    Trainable,
    /// Every parameter, regardless of its flag (gradient checks).
    All,
    /// Nothing; pure inference.
    None,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent along one axis; errors unless the kernel tiles the padded input exactly.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let padded = input + 2 * padding;
        if kernel == 0 || kernel > padded {
            return Err(Error::Geometry(format!(
                "kernel {kernel} does not fit padded extent {padded}"
            )));
        }
        if (padded - kernel) % stride != 0 {
            return Err(Error::Geometry(format!(
                "extent {input} with padding {padding} is not tiled by kernel {kernel} at stride {stride}"
            )));
        }
        Ok((padded - kernel) / stride + 1)
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel_height) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel_width) / self.stride + 1
    }
}

/// Batch statistics produced by a train-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: GradMode,
    bound: HashMap<ParamId, Var>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get<'a>(&self, graph: &'a Graph<T>, v: Var) -> Option<Tensor<T>> {
        let shape = graph.value(v).shape().to_vec();
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Stores the gradient of every bound parameter into `store`.
    pub fn write_param_grads(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (&id, &var) in &graph.bound {
            if let Some(g) = self.get(graph, var) {
                store.param_mut(id).grad = Some(g);
            }
        }
    }
}

fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let kernel = |(i, row): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ -> [m×n]`
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let kernel = |(i, row): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    out
}

/// `a[m×k]ᵀ · b[m×n] -> [k×n]`
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let kernel = |(p, row): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    let half = cst::<T>(0.5);
    half * x * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = cst::<T>(0.5);
    let cdf = half * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * cst(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: GradMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            bound: HashMap::new(),
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// Free variable that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.param(id);
        let rg = match self.mode {
            GradMode::All => true,
            GradMode::Trainable => p.trainable,
            GradMode::None => false,
        };
        let v = self.push_leaf(p.tensor.clone(), rg);
        self.bound.insert(id, v);
        v
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "row bias of {} values for {m}x{n} matrix",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().expect("non-scalar");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().expect("non-scalar");
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!("layer norm affine must have {d} values")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.numel() / d;
        let dn = cst::<T>(d as f64);
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + cst(eps)).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Train-mode batch norm over the rows of a `batch×D` matrix.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, d) = self.mat(x)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!("batch norm affine must have {d} values")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nn = cst::<T>(n as f64);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for i in 0..n {
            add_into(&mut mean, &src[i * d..(i + 1) * d]);
        }
        mean.iter_mut().for_each(|m| *m = *m / nn);
        for i in 0..n {
            for j in 0..d {
                let c = src[i * d + j] - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        let rstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / nn + cst(eps)).sqrt())
            .collect();
        let unbiased: Vec<T> = var.iter().map(|&v| v / cst((n - 1) as f64)).collect();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (src[i * d + j] - mean[j]) * rstd[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, d) = self.mat(x)?;
        if self.value(gamma).numel() != d
            || self.value(beta).numel() != d
            || running_mean.len() != d
            || running_var.len() != d
        {
            return Err(Error::dim(format!("batch norm statistics must have {d} values")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + cst(eps)).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (src[i * d + j] - running_mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2D convolution of a `C×H×W` input with an `O×C×KH×KW` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = match *self.value(x).shape() {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (o, kc, kh, kw) = match *self.value(kernel).shape() {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => return Err(Error::dim(format!("conv2d kernel must be rank 4, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} channels, input has {c}"
            )));
        }
        let oh = ConvGeometry::out_extent(h, kh, stride, padding)?;
        let ow = ConvGeometry::out_extent(w, kw, stride, padding)?;
        let geom = ConvGeometry {
            in_channels: c,
            in_height: h,
            in_width: w,
            out_channels: o,
            kernel_height: kh,
            kernel_width: kw,
            stride,
            padding,
        };
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![T::zero(); o * oh * ow];
        let plane = |(oc, dst): (usize, &mut [T])| {
            for ci in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = ks[((oc * c + ci) * kh + i) * kw + j];
                        for y in 0..oh {
                            let yy = (y * stride + i) as isize - padding as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for xo in 0..ow {
                                let xx = (xo * stride + j) as isize - padding as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let idx = (ci * h + yy as usize) * w + xx as usize;
                                dst[y * ow + xo] = dst[y * ow + xo] + wv * xs[idx];
                            }
                        }
                    }
                }
            }
        };
        if o * oh * ow * c * kh * kw >= PAR_THRESHOLD {
            out.par_chunks_mut(oh * ow).enumerate().for_each(plane);
        } else {
            out.chunks_mut(oh * ow).enumerate().for_each(plane);
        }
        let value = Tensor::new(vec![o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim(format!("rows {start}..{} out of 0..{m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, n], out)?,
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("cols {start}..{} out of 0..{n}", start + len)));
        }
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero parts"));
        };
        let (_, n) = self.mat(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.mat(p)?;
            if pn != n {
                return Err(Error::dim(format!("concat_rows: {pn} columns, expected {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero parts"));
        };
        let (m, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p)?;
            if pm != m {
                return Err(Error::dim(format!("concat_cols: {pm} rows, expected {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &pn) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            add_into(&mut out, row);
        }
        let mm = cst::<T>(m as f64);
        out.iter_mut().for_each(|v| *v = *v / mm);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / cst(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat(logits)?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + (lse - row[label]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = total / cst(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = out.shape()[1];
                if rg(*a) {
                    let da = mm_nt(g, val(*b), m, n, k);
                    add_into(self.acc(grads, *a), &da);
                }
                if rg(*b) {
                    let db = mm_tn(val(*a), g, m, k, n);
                    add_into(self.acc(grads, *b), &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("matrix");
                let da = self.acc(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(self.acc(grads, *a), g);
                }
                if rg(*b) {
                    add_into(self.acc(grads, *b), g);
                }
            }
            Op::AddRow(x, bias) => {
                let n = out.shape()[1];
                if rg(*x) {
                    add_into(self.acc(grads, *x), g);
                }
                if rg(*bias) {
                    let db = self.acc(grads, *bias);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                if rg(*a) {
                    add_into(self.acc(grads, *a), &da);
                }
                if rg(*b) {
                    add_into(self.acc(grads, *b), &db);
                }
            }
            Op::Scale(a, c) => {
                let da = self.acc(grads, *a);
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d = *d + gv * *c;
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let da = self.acc(grads, *a);
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let da = self.acc(grads, *a);
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    *d = *d + gv * gelu_grad(xv);
                }
            }
            Op::Softmax(a) => {
                let c = *out.shape().last().expect("non-scalar");
                let da = self.acc(grads, *a);
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gv, &yv)| s + gv * yv);
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = val(*gamma);
                let rows = g.len() / d;
                if rg(*x) {
                    let dn = cst::<T>(d as f64);
                    let dx = self.acc(grads, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let v = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                            dx[r * d + j] = dx[r * d + j] + v;
                        }
                    }
                }
                if rg(*gamma) {
                    let dg = self.acc(grads, *gamma);
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] = dg[i % d] + gv * h;
                    }
                }
                if rg(*beta) {
                    let db = self.acc(grads, *beta);
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = out.dims2().expect("matrix");
                let gam = val(*gamma);
                if rg(*x) {
                    let nn = cst::<T>(n as f64);
                    let mut s1 = vec![T::zero(); d];
                    let mut s2 = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            let dh = g[i * d + j] * gam[j];
                            s1[j] = s1[j] + dh;
                            s2[j] = s2[j] + dh * xhat[i * d + j];
                        }
                    }
                    let dx = self.acc(grads, *x);
                    for i in 0..n {
                        for j in 0..d {
                            let dh = g[i * d + j] * gam[j];
                            let v = rstd[j] / nn * (nn * dh - s1[j] - xhat[i * d + j] * s2[j]);
                            dx[i * d + j] = dx[i * d + j] + v;
                        }
                    }
                }
                self.affine_param_grads(*gamma, *beta, g, xhat, d, grads);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let gam = val(*gamma);
                if rg(*x) {
                    let dx = self.acc(grads, *x);
                    for (i, (dv, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        let j = i % d;
                        *dv = *dv + gv * gam[j] * inv_std[j];
                    }
                }
                self.affine_param_grads(*gamma, *beta, g, xhat, d, grads);
            }
            Op::Conv2d { x, kernel, geom } => {
                let ConvGeometry {
                    in_channels: c,
                    in_height: h,
                    in_width: w,
                    out_channels: o,
                    kernel_height: kh,
                    kernel_width: kw,
                    stride,
                    padding,
                } = *geom;
                let (oh, ow) = (geom.out_height(), geom.out_width());
                let xs = val(*x);
                let ks = val(*kernel);
                let tap = |y: usize, i: usize, xo: usize, j: usize| -> Option<(usize, usize)> {
                    let yy = (y * stride + i) as isize - padding as isize;
                    let xx = (xo * stride + j) as isize - padding as isize;
                    (yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize)
                        .then_some((yy as usize, xx as usize))
                };
                if rg(*kernel) {
                    let mut dk = vec![T::zero(); o * c * kh * kw];
                    dk.par_chunks_mut(c * kh * kw).enumerate().for_each(|(oc, dst)| {
                        let gp = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let mut s = T::zero();
                                    for y in 0..oh {
                                        for xo in 0..ow {
                                            if let Some((yy, xx)) = tap(y, i, xo, j) {
                                                s = s + gp[y * ow + xo] * xs[(ci * h + yy) * w + xx];
                                            }
                                        }
                                    }
                                    dst[(ci * kh + i) * kw + j] = s;
                                }
                            }
                        }
                    });
                    add_into(self.acc(grads, *kernel), &dk);
                }
                if rg(*x) {
                    let dx = self.acc(grads, *x);
                    for oc in 0..o {
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let wv = ks[((oc * c + ci) * kh + i) * kw + j];
                                    for y in 0..oh {
                                        for xo in 0..ow {
                                            if let Some((yy, xx)) = tap(y, i, xo, j) {
                                                let idx = (ci * h + yy) * w + xx;
                                                dx[idx] = dx[idx] + wv * g[(oc * oh + y) * ow + xo];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), g),
            Op::SliceRows { x, start } => {
                let n = out.shape()[1];
                let dx = self.acc(grads, *x);
                add_into(&mut dx[start * n..start * n + g.len()], g);
            }
            Op::SliceCols { x, start } => {
                let (_, n) = self.value(*x).dims2().expect("matrix");
                let len = out.shape()[1];
                let dx = self.acc(grads, *x);
                for (i, grow) in g.chunks(len).enumerate() {
                    add_into(&mut dx[i * n + start..i * n + start + len], grow);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if rg(p) {
                        add_into(self.acc(grads, p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, pn) = self.value(p).dims2().expect("matrix");
                    if rg(p) {
                        let dp = self.acc(grads, p);
                        for i in 0..m {
                            add_into(
                                &mut dp[i * pn..(i + 1) * pn],
                                &g[i * total + col..i * total + col + pn],
                            );
                        }
                    }
                    col += pn;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2().expect("matrix");
                let inv = T::one() / cst(m as f64);
                let dx = self.acc(grads, *x);
                for row in dx.chunks_mut(n) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d = *d + gv * inv;
                    }
                }
            }
            Op::Sum(x) => {
                let dx = self.acc(grads, *x);
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::Mean(x) => {
                let dx = self.acc(grads, *x);
                let s = g[0] / cst(dx.len() as f64);
                dx.iter_mut().for_each(|d| *d = *d + s);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / cst(b as f64);
                let dl = self.acc(grads, *logits);
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        dl[i * c + j] = dl[i * c + j] + s * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn affine_param_grads(
        &self,
        gamma: Var,
        beta: Var,
        g: &[T],
        xhat: &[T],
        d: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        if self.requires_grad(gamma) {
            let dg = grads[gamma.0].get_or_insert_with(|| vec![T::zero(); d]);
            for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                dg[i % d] = dg[i % d] + gv * h;
            }
        }
        if self.requires_grad(beta) {
            let db = grads[beta.0].get_or_insert_with(|| vec![T::zero(); d]);
            for row in g.chunks(d) {
                add_into(db, row);
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}
