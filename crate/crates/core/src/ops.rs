//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure: it reads tensors and returns new ones. The
//! [`Tape`](crate::tape::Tape) strings them together for reverse-mode
//! differentiation. Convolutions are cross-correlations (no kernel flip),
//! valid padding, stride 1.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!("{what}: expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Single-channel valid cross-correlation of an H×W input with a k×k kernel.
pub fn conv2d_valid<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 2, "conv2d_valid input")?;
    expect_rank(kernel, 2, "conv2d_valid kernel")?;
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    if kh > h || kw > w {
        return Err(Error::dim(format!("kernel {kh}×{kw} larger than input {h}×{w}")));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![T::zero(); oh * ow];
    for a in 0..oh {
        for b in 0..ow {
            let mut acc = T::zero();
            for p in 0..kh {
                let row = &x[(a + p) * w + b..(a + p) * w + b + kw];
                for (q, &v) in row.iter().enumerate() {
                    acc += v * k[p * kw + q];
                }
            }
            out[a * ow + b] = acc;
        }
    }
    Tensor::from_vec(&[oh, ow], out)
}

/// Gradients of [`conv2d_valid`] with respect to `(input, kernel)`.
pub fn conv2d_valid_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if grad_out.shape() != [oh, ow] {
        return Err(Error::dim(format!("conv2d_valid grad shape {:?}", grad_out.shape())));
    }
    let (x, k, g) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![T::zero(); h * w];
    let mut gk = vec![T::zero(); kh * kw];
    for a in 0..oh {
        for b in 0..ow {
            let go = g[a * ow + b];
            if go == T::zero() {
                continue;
            }
            for p in 0..kh {
                for q in 0..kw {
                    gx[(a + p) * w + b + q] += go * k[p * kw + q];
                    gk[p * kw + q] += go * x[(a + p) * w + b + q];
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[h, w], gx)?, Tensor::from_vec(&[kh, kw], gk)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward shape")
}

/// Row-wise and column-wise maxima of a square matrix, with the winning
/// positions recorded for gradient routing.
#[derive(Clone, Debug)]
pub struct RowColMax<T> {
    pub row_max: Vec<T>,
    pub col_max: Vec<T>,
    /// Column index of the maximum in each row.
    pub row_arg: Vec<usize>,
    /// Row index of the maximum in each column.
    pub col_arg: Vec<usize>,
}

/// Ties break to the lowest index.
pub fn row_col_max<T: Scalar>(c: &Tensor<T>) -> Result<RowColMax<T>> {
    expect_rank(c, 2, "row_col_max")?;
    let (r, s) = (c.shape()[0], c.shape()[1]);
    if r != s {
        return Err(Error::dim(format!("row_col_max needs a square matrix, got {r}×{s}")));
    }
    Ok(row_col_max_slice(c.data(), s))
}

pub(crate) fn row_col_max_slice<T: Scalar>(m: &[T], s: usize) -> RowColMax<T> {
    let mut row_max = vec![T::neg_infinity(); s];
    let mut col_max = vec![T::neg_infinity(); s];
    let mut row_arg = vec![0; s];
    let mut col_arg = vec![0; s];
    for i in 0..s {
        for j in 0..s {
            let v = m[i * s + j];
            if v > row_max[i] {
                row_max[i] = v;
                row_arg[i] = j;
            }
            if v > col_max[j] {
                col_max[j] = v;
                col_arg[j] = i;
            }
        }
    }
    RowColMax { row_max, col_max, row_arg, col_arg }
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn row_col_max_backward<T: Scalar>(s: usize, pooled: &RowColMax<T>, grad_row: &[T], grad_col: &[T]) -> Tensor<T> {
    let mut g = vec![T::zero(); s * s];
    row_col_max_backward_into(&mut g, s, &pooled.row_arg, &pooled.col_arg, grad_row, grad_col);
    Tensor::from_vec(&[s, s], g).expect("row_col_max_backward shape")
}

pub(crate) fn row_col_max_backward_into<T: Scalar>(
    g: &mut [T],
    s: usize,
    row_arg: &[usize],
    col_arg: &[usize],
    grad_row: &[T],
    grad_col: &[T],
) {
    for i in 0..s {
        g[i * s + row_arg[i]] += grad_row[i];
    }
    for j in 0..s {
        g[col_arg[j] * s + j] += grad_col[j];
    }
}

/// `W·x + b`. `x` is a length-n vector or a B×n batch (rows are samples).
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(w, 2, "affine weight")?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let batch = affine_batch(x, n)?;
    if b.shape() != [m] {
        return Err(Error::dim(format!("affine bias {:?}, expected [{m}]", b.shape())));
    }
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    // out (B×m) += x (B×n) · Wᵀ (n×m)
    T::gemm(batch, n, m, T::one(), x.data(), n as isize, 1, w.data(), 1, n as isize, T::one(), &mut out, m as isize, 1);
    let shape = if x.rank() == 1 { vec![m] } else { vec![batch, m] };
    Tensor::from_vec(&shape, out)
}

fn affine_batch<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<usize> {
    match x.shape() {
        [len] if *len == n => Ok(1),
        [b, len] if *len == n => Ok(*b),
        s => Err(Error::dim(format!("affine input {s:?} does not conform to weight width {n}"))),
    }
}

/// Gradients of [`affine`] with respect to `(x, W, b)`.
pub fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let batch = affine_batch(x, n)?;
    if grad_out.len() != batch * m {
        return Err(Error::dim(format!("affine grad shape {:?}", grad_out.shape())));
    }
    let g = grad_out.data();
    let mut gx = vec![T::zero(); batch * n];
    // gx (B×n) = g (B×m) · W (m×n)
    T::gemm(batch, m, n, T::one(), g, m as isize, 1, w.data(), n as isize, 1, T::zero(), &mut gx, n as isize, 1);
    let mut gw = vec![T::zero(); m * n];
    // gW (m×n) = gᵀ (m×B) · x (B×n)
    T::gemm(m, batch, n, T::one(), g, 1, m as isize, x.data(), n as isize, 1, T::zero(), &mut gw, n as isize, 1);
    let mut gb = vec![T::zero(); m];
    for row in g.chunks(m) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((Tensor::from_vec(x.shape(), gx)?, Tensor::from_vec(&[m, n], gw)?, Tensor::from_vec(&[m], gb)?))
}

/// Mean softmax cross-entropy over a batch of logits and its gradient.
///
/// `logits` is a length-C vector (one label) or a B×C batch.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = match logits.shape() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        s => return Err(Error::dim(format!("logits shape {s:?}"))),
    };
    if labels.len() != batch {
        return Err(Error::dim(format!("{} labels for batch of {batch}", labels.len())));
    }
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); batch * classes];
    for ((row, g), &label) in logits.data().chunks(classes).zip(grad.chunks_mut(classes)).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z += *gi;
        }
        loss += z.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_batch;
        }
        g[label] -= inv_batch;
    }
    Ok((loss * inv_batch, Tensor::from_vec(logits.shape(), grad)?))
}

/// Softmax of a vector.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Geometry of a batched multi-channel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Batched valid convolution `B×C×H×W ⊛ O×C×k×k + bias → B×O×H'×W'`.
///
/// Lowered to one GEMM over an im2col matrix of shape (C·k²) × (B·H'·W').
/// The column matrix is returned for reuse by the backward pass.
pub fn conv2d_layer<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGeom, Vec<T>)> {
    expect_rank(input, 4, "conv2d_layer input")?;
    expect_rank(weight, 4, "conv2d_layer weight")?;
    let &[batch, in_ch, h, w] = input.shape() else { unreachable!() };
    let &[out_ch, wc, kh, kw] = weight.shape() else { unreachable!() };
    if wc != in_ch || kh != kw {
        return Err(Error::dim(format!("weight {:?} for input {:?}", weight.shape(), input.shape())));
    }
    if kh > h || kw > w {
        return Err(Error::dim(format!("kernel {kh}×{kw} larger than input {h}×{w}")));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::dim(format!("bias {:?}, expected [{out_ch}]", bias.shape())));
    }
    let geom = ConvGeom { batch, in_ch, h, w, out_ch, k: kh };
    let cols = im2col(input.data(), &geom);
    let (patch, pos) = (geom.patch(), geom.positions());
    let cols_w = batch * pos;
    let mut tmp = vec![T::zero(); out_ch * cols_w];
    T::gemm(
        out_ch,
        patch,
        cols_w,
        T::one(),
        weight.data(),
        patch as isize,
        1,
        &cols,
        cols_w as isize,
        1,
        T::zero(),
        &mut tmp,
        cols_w as isize,
        1,
    );
    let mut out = vec![T::zero(); batch * out_ch * pos];
    for o in 0..out_ch {
        let bo = bias.data()[o];
        for b in 0..batch {
            let src = &tmp[o * cols_w + b * pos..o * cols_w + (b + 1) * pos];
            let dst = &mut out[(b * out_ch + o) * pos..(b * out_ch + o + 1) * pos];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    let out = Tensor::from_vec(&[batch, out_ch, geom.out_h(), geom.out_w()], out)?;
    Ok((out, geom, cols))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, pos) = (g.out_h(), g.out_w(), g.positions());
    let cols_w = g.batch * pos;
    let mut cols = vec![T::zero(); g.patch() * cols_w];
    for c in 0..g.in_ch {
        for p in 0..g.k {
            for q in 0..g.k {
                let row = (c * g.k + p) * g.k + q;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.h * g.w..];
                    let dst = &mut dst_row[b * pos..(b + 1) * pos];
                    for a in 0..oh {
                        let src = &plane[(a + p) * g.w + q..(a + p) * g.w + q + ow];
                        dst[a * ow..(a + 1) * ow].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, pos) = (g.out_h(), g.out_w(), g.positions());
    let cols_w = g.batch * pos;
    let mut x = vec![T::zero(); g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for p in 0..g.k {
            for q in 0..g.k {
                let row = (c * g.k + p) * g.k + q;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                    let src = &src_row[b * pos..(b + 1) * pos];
                    for a in 0..oh {
                        let dst = &mut plane[(a + p) * g.w + q..(a + p) * g.w + q + ow];
                        for (d, &s) in dst.iter_mut().zip(&src[a * ow..(a + 1) * ow]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gradients of a convolution layer: input (if requested), weight, bias.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d_layer`] with respect to `(input, weight, bias)`.
///
/// `need_input_grad = false` skips the col2im pass (first layer).
pub fn conv2d_layer_backward<T: Scalar>(
    geom: &ConvGeom,
    cols: &[T],
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (patch, pos) = (geom.patch(), geom.positions());
    let (batch, out_ch) = (geom.batch, geom.out_ch);
    if grad_out.len() != batch * out_ch * pos {
        return Err(Error::dim(format!("conv2d_layer grad shape {:?}", grad_out.shape())));
    }
    let cols_w = batch * pos;
    // Rearrange B×O×P → O×(B·P) and reduce the bias gradient on the way.
    let mut g = vec![T::zero(); out_ch * cols_w];
    let mut gb = vec![T::zero(); out_ch];
    for b in 0..batch {
        for o in 0..out_ch {
            let src = &grad_out.data()[(b * out_ch + o) * pos..(b * out_ch + o + 1) * pos];
            g[o * cols_w + b * pos..o * cols_w + (b + 1) * pos].copy_from_slice(src);
            gb[o] += src.iter().copied().sum::<T>();
        }
    }
    let mut gw = vec![T::zero(); out_ch * patch];
    // gW (O×patch) = g (O×BP) · colsᵀ (BP×patch)
    T::gemm(
        out_ch,
        cols_w,
        patch,
        T::one(),
        &g,
        cols_w as isize,
        1,
        cols,
        1,
        cols_w as isize,
        T::zero(),
        &mut gw,
        patch as isize,
        1,
    );
    let gx = if need_input_grad {
        let mut gcols = vec![T::zero(); patch * cols_w];
        // gcols (patch×BP) = Wᵀ (patch×O) · g (O×BP)
        T::gemm(
            patch,
            out_ch,
            cols_w,
            T::one(),
            weight.data(),
            1,
            patch as isize,
            &g,
            cols_w as isize,
            1,
            T::zero(),
            &mut gcols,
            cols_w as isize,
            1,
        );
        Some(Tensor::from_vec(&[batch, geom.in_ch, geom.h, geom.w], col2im(&gcols, geom))?)
    } else {
        None
    };
    Ok((gx, Tensor::from_vec(weight.shape(), gw)?, Tensor::from_vec(&[out_ch], gb)?))
}

/// 2×2 max-pool with stride 2 over a B×C×H×W tensor; odd trailing rows and
/// columns are dropped. Returns the pooled tensor and, per output element,
/// the flat input index of the winning value (lowest index on ties).
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank(input, 4, "max_pool2")?;
    let &[batch, ch, h, w] = input.shape() else { unreachable!() };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("max_pool2 on {h}×{w}")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(batch * ch * oh * ow);
    let mut arg = Vec::with_capacity(batch * ch * oh * ow);
    for plane in 0..batch * ch {
        let base = plane * h * w;
        for a in 0..oh {
            for b in 0..ow {
                let mut best = base + 2 * a * w + 2 * b;
                for idx in [best + 1, best + w, best + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[batch, ch, oh, ow], out)?, arg))
}

/// Gap between the largest and second largest value. Values tied at
/// exactly zero count as ReLU floors and report no gap limit.
pub(crate) fn top_gap<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (mut best, mut second) = (T::neg_infinity(), T::neg_infinity());
    for v in values {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    if second == T::neg_infinity() || (best == T::zero() && second == T::zero()) {
        T::infinity()
    } else {
        best - second
    }
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_valid(&x, &t(&[1, 1], &[1.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sum_kernel() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_valid(&x, &t(&[2, 2], &[1.0; 4])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_selects_bottom_right() {
        let x = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let y = conv2d_valid(&x, &t(&[2, 2], &[0.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(conv2d_valid(&x, &t(&[3, 3], &[0.0; 9])), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        assert!(relu(&t(&[4], &[-1.0, -2.0, -0.5, -9.0])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_col_max_examples() {
        let r = row_col_max(&t(&[2, 2], &[1.0, 5.0, 3.0, 2.0])).unwrap();
        assert_eq!(r.row_max, vec![5.0, 3.0]);
        assert_eq!(r.col_max, vec![3.0, 5.0]);
        let r = row_col_max(&t(&[1, 1], &[7.0])).unwrap();
        assert_eq!((r.row_max[0], r.col_max[0]), (7.0, 7.0));
        // ties to the lowest index
        let tie = row_col_max_slice(&[2.0, 2.0, 2.0, 2.0], 2);
        assert_eq!(tie.row_max[0], 2.0);
        assert_eq!(tie.row_arg, vec![0, 0]);
        assert_eq!(tie.col_arg, vec![0, 0]);
        assert!(row_col_max(&t(&[2, 3], &[0.0; 6])).is_err());
    }

    #[test]
    fn row_col_max_backward_routes_to_argmax() {
        let c = t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let r = row_col_max(&c).unwrap();
        let g = row_col_max_backward(2, &r, &[1.0, 10.0], &[100.0, 1000.0]);
        // row 0 → (0,1); row 1 → (1,0); col 0 → (1,0); col 1 → (0,1)
        assert_eq!(g.data(), &[0.0, 1001.0, 110.0, 0.0]);
    }

    #[test]
    fn affine_examples() {
        let x = t(&[2], &[1.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        assert_eq!(affine(&x, &w, &zero).unwrap().data(), &[3.0, 7.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x2 = t(&[2], &[-3.0, 0.5]);
        assert_eq!(affine(&x2, &eye, &zero).unwrap().data(), x2.data());
        let b = t(&[2], &[4.0, -1.0]);
        assert_eq!(affine(&x2, &t(&[2, 2], &[0.0; 4]), &b).unwrap().data(), b.data());
        assert!(affine(&t(&[3], &[0.0; 3]), &w, &zero).is_err());
    }

    #[test]
    fn softmax_ce_examples() {
        let (loss, _) = softmax_cross_entropy(&t(&[10], &[0.0; 10]), &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        let (_, g) = softmax_cross_entropy(&t(&[2], &[0.0, 0.0]), &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
        let (loss, _) = softmax_cross_entropy(&t(&[3], &[100.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(loss < 1e-40);
        assert!(matches!(
            softmax_cross_entropy(&t(&[2], &[0.0, 0.0]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn conv_layer_matches_single_channel_sum() {
        // 1 sample, 2 input channels, 2 output channels
        let x: Vec<f64> = (0..2 * 4 * 5).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5).collect();
        let input = t(&[1, 2, 4, 5], &x);
        let weight = t(&[2, 2, 3, 3], &w);
        let bias = t(&[2], &[0.5, -1.0]);
        let (out, _, _) = conv2d_layer(&input, &weight, &bias).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 3]);
        for o in 0..2 {
            let mut expect = vec![bias.data()[o]; 6];
            for c in 0..2 {
                let plane = t(&[4, 5], &x[c * 20..(c + 1) * 20]);
                let kern = t(&[3, 3], &w[(o * 2 + c) * 9..(o * 2 + c + 1) * 9]);
                for (e, v) in expect.iter_mut().zip(conv2d_valid(&plane, &kern).unwrap().data()) {
                    *e += v;
                }
            }
            let got = &out.data()[o * 6..(o + 1) * 6];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_floors_odd_dims_and_breaks_ties_low() {
        let x = t(&[1, 1, 3, 3], &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 9.0, 9.0, 9.0]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(arg, vec![0]);
        assert!(max_pool2(&t(&[1, 1, 1, 4], &[0.0; 4])).is_err());
    }
}
