//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! for every node on a path to a leaf. All values are `f64` and every
//! operation is single-threaded, so runs are bitwise reproducible.
//!
//! The op set is deliberately small: dense matrix products, elementwise
//! arithmetic, a handful of activations, row softmax / layer norm, row
//! gather/scatter, and `im2col` so convolutions lower to matrix products.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2D convolution lowered through [`Tape::im2col`].
///
/// Input tensors are `[channels, height, width]`; patch rows are ordered by
/// output position (row-major) and patch columns by `(channel, ky, kx)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul(usize, usize),
    /// `[m,k] @ [n,k]^T -> [m,n]`
    MatMulNT(usize, usize),
    /// `[m,n] + [n]` broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Sqrt(usize),
    MaxElem(usize, usize),
    MinElem(usize, usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    SumAll(usize),
    SumRows(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Column {
        x: usize,
        col: usize,
    },
    Reshape {
        x: usize,
    },
    /// `[m,n] -> [n,m]`
    Transpose2(usize),
    Im2Col {
        x: usize,
        spec: ConvSpec,
    },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn needs(&self, a: usize) -> bool {
        self.needs_grad[a]
    }

    /// Differentiable input (model parameter or anything whose gradient is read).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never propagates into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::from_elem(IxDyn(&[1]), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.values[v.0];
        assert_eq!(t.len(), 1, "scalar() on node of len {}", t.len());
        t.iter().next().copied().unwrap()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Mul(a.0, b.0), n)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] / &self.values[b.0];
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Div(a.0, b.0), n)
    }

    /// Elementwise maximum; on ties the gradient routes to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| x.max(y));
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MaxElem(a.0, b.0), n)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| x.min(y));
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MinElem(a.0, b.0), n)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        let v = av.dot(&bv).into_dyn();
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMul(a.0, b.0), n)
    }

    /// `a @ b.T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        let v = av.dot(&bv.t()).into_dyn();
        let n = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMulNT(a.0, b.0), n)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let rv = as1(&self.values[row.0]);
        let v = (&av + &rv).into_dyn();
        let n = self.needs(a.0) || self.needs(row.0);
        self.push(v, Op::AddRow(a.0, row.0), n)
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        let n = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), n)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] + c;
        let n = self.needs(a.0);
        self.push(v, Op::AddConst(a.0, c), n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        let n = self.needs(a.0);
        self.push(v, Op::Relu(a.0), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid);
        let n = self.needs(a.0);
        self.push(v, Op::Sigmoid(a.0), n)
    }

    /// `ln(1 + e^x)`, evaluated in the overflow-safe form.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(softplus);
        let n = self.needs(a.0);
        self.push(v, Op::Softplus(a.0), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        let n = self.needs(a.0);
        self.push(v, Op::Exp(a.0), n)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        let n = self.needs(a.0);
        self.push(v, Op::Ln(a.0), n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        let n = self.needs(a.0);
        self.push(v, Op::Abs(a.0), n)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::sqrt);
        let n = self.needs(a.0);
        self.push(v, Op::Sqrt(a.0), n)
    }

    // ---- row-structured ops ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let n = self.needs(a.0);
        self.push(v.into_dyn(), Op::SoftmaxRows(a.0), n)
    }

    /// Per-row layer normalization with learnable gain and bias vectors.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = as2(&self.values[x.0]);
        let g = as1(&self.values[gain.0]);
        let b = as1(&self.values[bias.0]);
        let mut v = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let (mean, inv_std) = row_moments(&row.to_owned(), eps);
            for (j, &xj) in row.iter().enumerate() {
                v[[i, j]] = (xj - mean) * inv_std * g[j] + b[j];
            }
        }
        let n = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            v.into_dyn(),
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            n,
        )
    }

    // ---- reductions / reshaping ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem(IxDyn(&[1]), self.values[a.0].sum());
        let n = self.needs(a.0);
        self.push(v, Op::SumAll(a.0), n)
    }

    /// `[m,n] -> [m]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let v = av.sum_axis(Axis(1)).into_dyn();
        let n = self.needs(a.0);
        self.push(v, Op::SumRows(a.0), n)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = as2(&self.values[a.0]);
        let mut v = Array2::<f64>::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        let n = self.needs(a.0);
        self.push(
            v.into_dyn(),
            Op::GatherRows {
                x: a.0,
                idx: idx.to_vec(),
            },
            n,
        )
    }

    /// `[m,n] -> [m]`, extracting one column.
    pub fn column(&mut self, a: Var, col: usize) -> Var {
        let av = as2(&self.values[a.0]);
        let v = av.column(col).to_owned().into_dyn();
        let n = self.needs(a.0);
        self.push(v, Op::Column { x: a.0, col }, n)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(&self.values[a.0])
            .t()
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let n = self.needs(a.0);
        self.push(v, Op::Transpose2(a.0), n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let n = self.needs(a.0);
        self.push(v, Op::Reshape { x: a.0 }, n)
    }

    /// Unfold a `[c,h,w]` tensor into convolution patches `[oh*ow, k*k*c]`.
    pub fn im2col(&mut self, a: Var, spec: ConvSpec) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.shape(), [spec.in_ch, spec.in_h, spec.in_w]);
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let mut v = Array2::<f64>::zeros((oh * ow, spec.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                let mut col = 0;
                for c in 0..spec.in_ch {
                    for ky in 0..spec.kernel {
                        for kx in 0..spec.kernel {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < spec.in_h
                                && (ix as usize) < spec.in_w
                            {
                                v[[row, col]] = x[[c, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        let n = self.needs(a.0);
        self.push(v.into_dyn(), Op::Im2Col { x: a.0, spec }, n)
    }

    // ---- backward ----

    /// Accumulate `d root / d node` for every grad-requiring node.
    ///
    /// `root` must be a single-element tensor. Gradients from a previous
    /// `backward` call on the same tape are cleared first.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let shape = self.values[root.0].raw_dim();
        self.grads[root.0] = Some(Tensor::from_elem(shape, 1.0));

        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
    }

    fn accumulate(&mut self, node: usize, delta: &Tensor) {
        if !self.needs_grad[node] {
            return;
        }
        match &mut self.grads[node] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    fn propagate(&mut self, i: usize, gy: &Tensor) {
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, gy);
                self.accumulate(b, gy);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, gy);
                let d = gy * -1.0;
                self.accumulate(b, &d);
            }
            &Op::Mul(a, b) => {
                let da = gy * &self.values[b];
                let db = gy * &self.values[a];
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Div(a, b) => {
                let da = gy / &self.values[b];
                let db = -(gy * &self.values[a]) / (&self.values[b] * &self.values[b]);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::MatMul(a, b) => {
                let g = as2(gy);
                let av = as2(&self.values[a]);
                let bv = as2(&self.values[b]);
                let da = g.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g).into_dyn();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::MatMulNT(a, b) => {
                let g = as2(gy);
                let av = as2(&self.values[a]);
                let bv = as2(&self.values[b]);
                let da = g.dot(&bv).into_dyn();
                let db = g.t().dot(&av).into_dyn();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::AddRow(a, row) => {
                self.accumulate(a, gy);
                let g = as2(gy);
                let dr = g.sum_axis(Axis(0)).into_dyn();
                self.accumulate(row, &dr);
            }
            &Op::Scale(a, c) => {
                let d = gy * c;
                self.accumulate(a, &d);
            }
            &Op::AddConst(a, _) => {
                self.accumulate(a, gy);
            }
            &Op::Relu(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(&self.values[a])
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(a, &d);
            }
            &Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(&self.values[i])
                    .map_collect(|&g, &s| g * s * (1.0 - s));
                self.accumulate(a, &d);
            }
            &Op::Softplus(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(&self.values[a])
                    .map_collect(|&g, &x| g * sigmoid(x));
                self.accumulate(a, &d);
            }
            &Op::Exp(a) => {
                let d = gy * &self.values[i];
                self.accumulate(a, &d);
            }
            &Op::Ln(a) => {
                let d = gy / &self.values[a];
                self.accumulate(a, &d);
            }
            &Op::Abs(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(&self.values[a])
                    .map_collect(|&g, &x| if x >= 0.0 { g } else { -g });
                self.accumulate(a, &d);
            }
            &Op::Sqrt(a) => {
                let d = ndarray::Zip::from(gy)
                    .and(&self.values[i])
                    .map_collect(|&g, &s| g / (2.0 * s));
                self.accumulate(a, &d);
            }
            &Op::MaxElem(a, b) => {
                let (va, vb) = (&self.values[a], &self.values[b]);
                let da = ndarray::Zip::from(gy)
                    .and(va)
                    .and(vb)
                    .map_collect(|&g, &x, &y| if x >= y { g } else { 0.0 });
                let db = ndarray::Zip::from(gy)
                    .and(va)
                    .and(vb)
                    .map_collect(|&g, &x, &y| if x < y { g } else { 0.0 });
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::MinElem(a, b) => {
                let (va, vb) = (&self.values[a], &self.values[b]);
                let da = ndarray::Zip::from(gy)
                    .and(va)
                    .and(vb)
                    .map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                let db = ndarray::Zip::from(gy)
                    .and(va)
                    .and(vb)
                    .map_collect(|&g, &x, &y| if x > y { g } else { 0.0 });
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::SoftmaxRows(a) => {
                let y = as2(&self.values[i]);
                let g = as2(gy);
                let mut d = Array2::<f64>::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(&v, &w)| v * w).sum();
                    for c in 0..y.ncols() {
                        d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                self.accumulate(a, &d.into_dyn());
            }
            &Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = as2(&self.values[x]);
                let g = as1(&self.values[gain]);
                let gyv = as2(gy);
                let n = xv.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                let mut dgain = Array1::<f64>::zeros(xv.ncols());
                let mut dbias = Array1::<f64>::zeros(xv.ncols());
                for r in 0..xv.nrows() {
                    let row = xv.row(r).to_owned();
                    let (mean, inv_std) = row_moments(&row, eps);
                    let xhat = row.mapv(|v| (v - mean) * inv_std);
                    let dy = gyv.row(r);
                    let dxhat: Array1<f64> =
                        dy.iter().zip(g.iter()).map(|(&d, &gj)| d * gj).collect();
                    let m1 = dxhat.sum() / n;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / n;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = inv_std * (dxhat[c] - m1 - xhat[c] * m2);
                        dgain[c] += dy[c] * xhat[c];
                        dbias[c] += dy[c];
                    }
                }
                self.accumulate(x, &dx.into_dyn());
                self.accumulate(gain, &dgain.into_dyn());
                self.accumulate(bias, &dbias.into_dyn());
            }
            &Op::SumAll(a) => {
                let d = Tensor::from_elem(self.values[a].raw_dim(), gy.iter().next().unwrap() * 1.0);
                self.accumulate(a, &d);
            }
            &Op::SumRows(a) => {
                let av = as2(&self.values[a]);
                let g = as1(gy);
                let mut d = Array2::<f64>::zeros(av.raw_dim());
                for r in 0..av.nrows() {
                    d.row_mut(r).fill(g[r]);
                }
                self.accumulate(a, &d.into_dyn());
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let av = as2(&self.values[x]);
                let g = as2(gy);
                let mut d = Array2::<f64>::zeros(av.raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(x, &d.into_dyn());
            }
            &Op::Column { x, col } => {
                let av = as2(&self.values[x]);
                let g = as1(gy);
                let mut d = Array2::<f64>::zeros(av.raw_dim());
                for r in 0..av.nrows() {
                    d[[r, col]] = g[r];
                }
                self.accumulate(x, &d.into_dyn());
            }
            &Op::Reshape { x } => {
                let d = gy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.values[x].raw_dim())
                    .expect("reshape backward");
                self.accumulate(x, &d);
            }
            &Op::Transpose2(x) => {
                let d = as2(gy).t().as_standard_layout().into_owned().into_dyn();
                self.accumulate(x, &d);
            }
            &Op::Im2Col { x, spec } => {
                let g = as2(gy);
                let mut d = Tensor::zeros(IxDyn(&[spec.in_ch, spec.in_h, spec.in_w]));
                let (oh, ow) = (spec.out_h(), spec.out_w());
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = oy * ow + ox;
                        let mut col = 0;
                        for c in 0..spec.in_ch {
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < spec.in_h
                                        && (ix as usize) < spec.in_w
                                    {
                                        d[[c, iy as usize, ix as usize]] += g[[row, col]];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &d);
            }
        }
    }
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 tensor")
}

fn as1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view()
        .into_dimensionality::<Ix1>()
        .expect("expected rank-1 tensor")
}

fn row_moments(row: &Array1<f64>, eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn matmul_forward() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.leaf(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn backward_of_chained_ops() {
        // f(x) = sum(relu(x * 2 + 1)) at x = [-3, 0.5]: relu active only on x=0.5.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_shape_vec(IxDyn(&[2]), vec![-3.0, 0.5]).unwrap());
        let y = t.scale(x, 2.0);
        let z = t.add_const(y, 1.0);
        let r = t.relu(z);
        let s = t.sum_all(r);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap().as_slice().unwrap(), &[0.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_elem(IxDyn(&[2]), 1.0));
        let c = t.constant(Tensor::from_elem(IxDyn(&[2]), 3.0));
        let y = t.mul(x, c);
        let s = t.sum_all(y);
        t.backward(s);
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn im2col_shapes_and_identity_kernel() {
        let spec = ConvSpec {
            in_ch: 1,
            in_h: 4,
            in_w: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((spec.out_h(), spec.out_w()), (2, 2));
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_shape_vec(
            IxDyn(&[1, 4, 4]),
            (0..16).map(|v| v as f64).collect(),
        )
        .unwrap());
        let cols = t.im2col(x, spec);
        assert_eq!(t.value(cols).shape(), [4, 9]);
        // center tap of the first patch is pixel (0,0)
        assert_eq!(t.value(cols)[[0, 4]], 0.0);
        // center tap of the last patch is pixel (2,2) = 10
        assert_eq!(t.value(cols)[[3, 4]], 10.0);
    }
}
