//! The quantum-inspired mechanism (QIM) block.
//!
//! Feature maps are flattened into length-d vectors, turned into density
//! matrices, convolved by `c` learned k×k kernels (plus bias and ReLU) into
//! s×s maps with `s = d − k + 1`, max-pooled along rows and columns, and the
//! pooled vectors are concatenated as `[co₁; ro₁; co₂; ro₂; …; co_c; ro_c]`.
//!
//! Two readings of how inputs meet filters are supported:
//!
//! * [`QimMode::Paired`]: filter j convolves the dyad of input vector j, so
//!   the number of inputs must equal `c`.
//! * [`QimMode::Summed`]: all inputs are mixed into one density matrix with
//!   softmax-normalized learned weights, which every filter convolves.
//!
//! Two kernels compute the same function. [`QimKernel::Dense`] materializes
//! the d×d matrices; [`QimKernel::Fused`] never does, using
//! `Z[a,b] = Σ_p m[a+p]·V[p,b]` with `V[p,b] = Σ_q K[p,q]·m[b+q]`, which costs
//! `O(k²s + ks²)` per (vector, filter) pair instead of `O(d² + k²s²)`.

use rand::Rng;

use crate::density::{add_dyad, normalize_vec};
use crate::error::{Error, Result};
use crate::ops::{row_col_max_backward_into, row_col_max_slice, softmax};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum QimMode {
    Paired,
    #[default]
    Summed,
}

impl QimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QimMode::Paired => "paired",
            QimMode::Summed => "summed",
        }
    }
}

impl std::str::FromStr for QimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(QimMode::Paired),
            "summed" => Ok(QimMode::Summed),
            other => Err(Error::InvalidArgument(format!("unknown QIM mode `{other}`"))),
        }
    }
}

/// Hyperparameters of a QIM block before the input dimension is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QimConfig {
    /// Number of filters `c`.
    pub filters: usize,
    /// Requested side `s` of each density feature map.
    pub size: usize,
    pub mode: QimMode,
    /// Unit-normalize each vector before its outer product.
    pub normalize: bool,
}

impl QimConfig {
    pub fn new(filters: usize, size: usize) -> Self {
        Self { filters, size, mode: QimMode::Summed, normalize: true }
    }

    pub fn with_mode(mut self, mode: QimMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// Resolves the kernel side for input vectors of length `d`.
    ///
    /// A requested size larger than `d` is clamped to `d` (1×1 kernels) and
    /// the clamp is recorded in [`BoundQim::warning`].
    pub fn bind(&self, d: usize) -> Result<BoundQim> {
        if self.filters == 0 || self.size == 0 {
            return Err(Error::InvalidArgument("QIM filters and size must be positive".into()));
        }
        if d == 0 {
            return Err(Error::dim("QIM input dimension must be positive"));
        }
        let (s, warning) = if self.size > d {
            (d, Some(format!("density map size {} exceeds input dimension {d}; clamped to {d}", self.size)))
        } else {
            (self.size, None)
        };
        Ok(BoundQim { config: *self, d, s, k: d - s + 1, warning })
    }
}

/// A [`QimConfig`] resolved against an input dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundQim {
    pub config: QimConfig,
    /// Input vector length.
    pub d: usize,
    /// Side of each density feature map.
    pub s: usize,
    /// Kernel side, `d − s + 1`.
    pub k: usize,
    pub warning: Option<String>,
}

impl BoundQim {
    pub fn filters(&self) -> usize {
        self.config.filters
    }

    /// Length of the concatenated feature vector, `2·c·s`.
    pub fn output_len(&self) -> usize {
        2 * self.config.filters * self.s
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.config.mode == QimMode::Paired && channels != self.config.filters {
            return Err(Error::ChannelMismatch { expected: self.config.filters, found: channels });
        }
        if channels == 0 {
            return Err(Error::dim("QIM needs at least one input vector"));
        }
        Ok(())
    }
}

/// Learnable QIM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QimParams<T> {
    /// c×k×k.
    pub kernels: Tensor<T>,
    /// Length c.
    pub biases: Tensor<T>,
    /// One logit per input channel, summed mode only.
    pub logits: Option<Tensor<T>>,
}

impl<T: Scalar> QimParams<T> {
    /// Kernels uniform in `±√(6/(k²+s²))`, zero biases, zero logits.
    pub fn init<R: Rng>(bound: &BoundQim, channels: usize, rng: &mut R) -> Result<Self> {
        bound.check_channels(channels)?;
        let (c, k, s) = (bound.filters(), bound.k, bound.s);
        let limit = (6.0 / (k * k + s * s) as f64).sqrt();
        let kernels: Vec<f64> = (0..c * k * k).map(|_| rng.random_range(-limit..limit)).collect();
        Ok(Self {
            kernels: Tensor::from_f64(&[c, k, k], &kernels)?,
            biases: Tensor::zeros(&[c]),
            logits: (bound.config.mode == QimMode::Summed).then(|| Tensor::zeros(&[channels])),
        })
    }

    fn check(&self, bound: &BoundQim, channels: usize) -> Result<()> {
        let (c, k) = (bound.filters(), bound.k);
        if self.kernels.shape() != [c, k, k] || self.biases.shape() != [c] {
            return Err(Error::dim(format!(
                "QIM params {:?}/{:?} do not match c={c}, k={k}",
                self.kernels.shape(),
                self.biases.shape()
            )));
        }
        match (bound.config.mode, &self.logits) {
            (QimMode::Summed, Some(l)) if l.shape() == [channels] => Ok(()),
            (QimMode::Summed, _) => Err(Error::dim(format!("summed mode needs {channels} mixture logits"))),
            (QimMode::Paired, _) => Ok(()),
        }
    }

    /// `softmax(logits)`, the mixture weights of summed mode.
    pub fn mixture_weights(&self) -> Option<Vec<T>> {
        self.logits.as_ref().map(|l| softmax(l.data()))
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len() + self.logits.as_ref().map_or(0, |l| l.len())
    }
}

/// Which forward/backward algorithm evaluates the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QimKernel {
    /// Materialize each d×d density matrix and convolve it.
    #[default]
    Dense,
    /// Never materialize a d×d matrix.
    Fused,
}

impl QimKernel {
    /// The cheaper kernel for this shape, by multiply-add count.
    pub fn cheapest(bound: &BoundQim, channels: usize) -> Self {
        let (d, s, k, c) = (bound.d, bound.s, bound.k, bound.filters());
        let conv = c * s * s * k * k;
        let per_pair = k * k * s + k * s * s;
        let (dense, fused) = match bound.config.mode {
            QimMode::Paired => (c * d * d + conv, c * per_pair),
            QimMode::Summed => (channels * d * d + conv, channels * c * per_pair),
        };
        if fused < dense {
            QimKernel::Fused
        } else {
            QimKernel::Dense
        }
    }
}

/// Forward state needed by [`qim_backward`].
#[derive(Clone, Debug)]
pub struct QimState<T> {
    kernel: QimKernel,
    channels: usize,
    /// Normalized (or raw) input vectors, channels×d.
    unit: Vec<T>,
    /// Input norms; zero marks a zeroed vector.
    norms: Vec<T>,
    weights: Option<Vec<T>>,
    /// Pre-activation maps, c×s×s.
    pre: Vec<T>,
    /// Row argmax per filter, c×s.
    row_arg: Vec<usize>,
    /// Column argmax per filter, c×s.
    col_arg: Vec<usize>,
    /// The mixture density matrix (dense summed mode only).
    rho: Option<Vec<T>>,
}

/// Output of one QIM evaluation.
#[derive(Clone, Debug)]
pub struct QimOutput<T> {
    /// `[co₁; ro₁; …; co_c; ro_c]`, length `2·c·s`.
    pub features: Tensor<T>,
    /// Post-ReLU density feature maps, c×s×s.
    pub maps: Tensor<T>,
    pub state: Option<QimState<T>>,
}

impl<T: Scalar> QimOutput<T> {
    /// Distance from the nearest point where the block is not
    /// differentiable: the smallest `|pre-activation|` and the smallest gap
    /// between a positive row or column maximum and its runner-up. `None`
    /// without retained state.
    pub fn kink_margin(&self) -> Option<T> {
        let state = self.state.as_ref()?;
        let s = self.maps.shape()[1];
        let mut margin = state.pre.iter().fold(T::infinity(), |m, &z| m.min(z.abs()));
        for map in self.maps.data().chunks(s * s) {
            for a in 0..s {
                margin = margin.min(crate::ops::top_gap((0..s).map(|b| map[a * s + b])));
                margin = margin.min(crate::ops::top_gap((0..s).map(|b| map[b * s + a])));
            }
        }
        Some(margin)
    }
}

/// Gradients of a QIM evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct QimGrads<T> {
    /// channels×d.
    pub vectors: Tensor<T>,
    pub kernels: Tensor<T>,
    pub biases: Tensor<T>,
    pub logits: Option<Tensor<T>>,
}

/// Row-major flattening of c maps of shape h×w into c vectors of length h·w.
pub fn flatten_maps<T: Scalar>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::dim("no feature maps"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("feature map shape {shape:?} is not 2-D")));
    }
    let mut data = Vec::with_capacity(maps.len() * first.len());
    for m in maps {
        if m.shape() != shape.as_slice() {
            return Err(Error::dim(format!("ragged feature maps: {:?} vs {shape:?}", m.shape())));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::from_vec(&[maps.len(), first.len()], data)
}

/// Reference evaluation that materializes every density matrix.
pub fn qim_forward<T: Scalar>(vectors: &Tensor<T>, params: &QimParams<T>, bound: &BoundQim) -> Result<QimOutput<T>> {
    qim_eval(vectors, params, bound, QimKernel::Dense, true)
}

/// Evaluation that never materializes a d×d matrix.
pub fn qim_fused<T: Scalar>(vectors: &Tensor<T>, params: &QimParams<T>, bound: &BoundQim) -> Result<QimOutput<T>> {
    qim_eval(vectors, params, bound, QimKernel::Fused, true)
}

/// Evaluates the block on `vectors` (channels×d).
///
/// With `retain` off no backward state is kept.
pub fn qim_eval<T: Scalar>(
    vectors: &Tensor<T>,
    params: &QimParams<T>,
    bound: &BoundQim,
    kernel: QimKernel,
    retain: bool,
) -> Result<QimOutput<T>> {
    let (channels, d) = match vectors.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::dim(format!("QIM input must be channels×d, got {s:?}"))),
    };
    if d != bound.d {
        return Err(Error::dim(format!("QIM bound to d={}, got vectors of length {d}", bound.d)));
    }
    bound.check_channels(channels)?;
    params.check(bound, channels)?;

    let (c, s, k) = (bound.filters(), bound.s, bound.k);
    let mut unit = Vec::with_capacity(channels * d);
    let mut norms = Vec::with_capacity(channels);
    for v in vectors.data().chunks(d) {
        if bound.config.normalize {
            let (u, zero) = normalize_vec(v);
            let norm = if zero { T::zero() } else { v.iter().map(|&x| x * x).sum::<T>().sqrt() };
            unit.extend(u);
            norms.push(norm);
        } else {
            unit.extend_from_slice(v);
            norms.push(T::one());
        }
    }
    let weights = params.mixture_weights();
    let kernels = params.kernels.data();
    let mut pre = vec![T::zero(); c * s * s];
    let mut rho = None;

    match (bound.config.mode, kernel) {
        (QimMode::Summed, QimKernel::Dense) => {
            let w = weights.as_ref().expect("summed mode has weights");
            let mut mix = vec![T::zero(); d * d];
            for (v, &wi) in unit.chunks(d).zip(w) {
                add_dyad(&mut mix, v, wi);
            }
            for j in 0..c {
                corr_valid(&mix, d, &kernels[j * k * k..(j + 1) * k * k], k, &mut pre[j * s * s..(j + 1) * s * s]);
            }
            rho = Some(mix);
        }
        (QimMode::Paired, QimKernel::Dense) => {
            let mut r = vec![T::zero(); d * d];
            for j in 0..c {
                r.iter_mut().for_each(|x| *x = T::zero());
                add_dyad(&mut r, &unit[j * d..(j + 1) * d], T::one());
                corr_valid(&r, d, &kernels[j * k * k..(j + 1) * k * k], k, &mut pre[j * s * s..(j + 1) * s * s]);
            }
        }
        (mode, QimKernel::Fused) => {
            let mut scratch = vec![T::zero(); k * s];
            for j in 0..c {
                let kern = &kernels[j * k * k..(j + 1) * k * k];
                let out = &mut pre[j * s * s..(j + 1) * s * s];
                match mode {
                    QimMode::Paired => {
                        fused_dyad_conv(&unit[j * d..(j + 1) * d], kern, k, s, T::one(), &mut scratch, out)
                    }
                    QimMode::Summed => {
                        let w = weights.as_ref().expect("summed mode has weights");
                        for (v, &wi) in unit.chunks(d).zip(w) {
                            fused_dyad_conv(v, kern, k, s, wi, &mut scratch, out);
                        }
                    }
                }
            }
        }
    }

    let biases = params.biases.data();
    let mut maps = vec![T::zero(); c * s * s];
    let mut features = Vec::with_capacity(2 * c * s);
    let mut row_arg = Vec::with_capacity(c * s);
    let mut col_arg = Vec::with_capacity(c * s);
    for j in 0..c {
        let z = &mut pre[j * s * s..(j + 1) * s * s];
        let m = &mut maps[j * s * s..(j + 1) * s * s];
        for (zi, mi) in z.iter_mut().zip(m.iter_mut()) {
            *zi += biases[j];
            *mi = if *zi > T::zero() { *zi } else { T::zero() };
        }
        let pooled = row_col_max_slice(m, s);
        features.extend_from_slice(&pooled.col_max);
        features.extend_from_slice(&pooled.row_max);
        row_arg.extend(pooled.row_arg);
        col_arg.extend(pooled.col_arg);
    }

    let features = Tensor::from_vec(&[2 * c * s], features)?;
    let maps = Tensor::from_vec(&[c, s, s], maps)?;
    let state = retain.then_some(QimState { kernel, channels, unit, norms, weights, pre, row_arg, col_arg, rho });
    Ok(QimOutput { features, maps, state })
}

/// Gradients with respect to input vectors, kernels, biases and logits,
/// given `∂L/∂f`.
pub fn qim_backward<T: Scalar>(
    grad_features: &Tensor<T>,
    output: &QimOutput<T>,
    params: &QimParams<T>,
    bound: &BoundQim,
) -> Result<QimGrads<T>> {
    let state = output.state.as_ref().ok_or(Error::MissingForwardState)?;
    let (c, s, k, d) = (bound.filters(), bound.s, bound.k, bound.d);
    if grad_features.len() != 2 * c * s {
        return Err(Error::dim(format!("QIM grad length {}, expected {}", grad_features.len(), 2 * c * s)));
    }
    let channels = state.channels;
    let kernels = params.kernels.data();
    let g = grad_features.data();

    // ∂L/∂Z per filter: pooling routes to argmax, ReLU gates.
    let mut gz = vec![T::zero(); c * s * s];
    let mut gb = vec![T::zero(); c];
    for j in 0..c {
        let gzj = &mut gz[j * s * s..(j + 1) * s * s];
        let col = &g[2 * j * s..(2 * j + 1) * s];
        let row = &g[(2 * j + 1) * s..(2 * j + 2) * s];
        row_col_max_backward_into(
            gzj,
            s,
            &state.row_arg[j * s..(j + 1) * s],
            &state.col_arg[j * s..(j + 1) * s],
            row,
            col,
        );
        for (gi, &zi) in gzj.iter_mut().zip(&state.pre[j * s * s..(j + 1) * s * s]) {
            if zi <= T::zero() {
                *gi = T::zero();
            }
        }
        gb[j] = gzj.iter().copied().sum();
    }

    let mut gk = vec![T::zero(); c * k * k];
    let mut gunit = vec![T::zero(); channels * d];
    let mut gw = vec![T::zero(); channels];

    match (bound.config.mode, state.kernel) {
        (QimMode::Summed, QimKernel::Dense) => {
            let rho = state.rho.as_ref().ok_or(Error::MissingForwardState)?;
            let mut grho = vec![T::zero(); d * d];
            for j in 0..c {
                let kern = &kernels[j * k * k..(j + 1) * k * k];
                let gzj = &gz[j * s * s..(j + 1) * s * s];
                corr_valid_grads(rho, d, kern, k, gzj, &mut grho, &mut gk[j * k * k..(j + 1) * k * k]);
            }
            let w = state.weights.as_ref().expect("summed mode has weights");
            for i in 0..channels {
                let v = &state.unit[i * d..(i + 1) * d];
                let (gv, quad) = sym_apply(&grho, v);
                gw[i] = quad;
                for (o, x) in gunit[i * d..(i + 1) * d].iter_mut().zip(gv) {
                    *o = w[i] * x;
                }
            }
        }
        (QimMode::Paired, QimKernel::Dense) => {
            let mut r = vec![T::zero(); d * d];
            let mut grho = vec![T::zero(); d * d];
            for j in 0..c {
                let v = &state.unit[j * d..(j + 1) * d];
                r.iter_mut().for_each(|x| *x = T::zero());
                grho.iter_mut().for_each(|x| *x = T::zero());
                add_dyad(&mut r, v, T::one());
                let kern = &kernels[j * k * k..(j + 1) * k * k];
                corr_valid_grads(
                    &r,
                    d,
                    kern,
                    k,
                    &gz[j * s * s..(j + 1) * s * s],
                    &mut grho,
                    &mut gk[j * k * k..(j + 1) * k * k],
                );
                let (gv, _) = sym_apply(&grho, v);
                gunit[j * d..(j + 1) * d].copy_from_slice(&gv);
            }
        }
        (mode, QimKernel::Fused) => {
            let mut scratch = FusedScratch::new(k, s, d);
            for j in 0..c {
                let kern = &kernels[j * k * k..(j + 1) * k * k];
                let gzj = &gz[j * s * s..(j + 1) * s * s];
                let gkj = &mut gk[j * k * k..(j + 1) * k * k];
                match mode {
                    QimMode::Paired => {
                        let v = &state.unit[j * d..(j + 1) * d];
                        fused_dyad_conv_backward(
                            v,
                            kern,
                            k,
                            s,
                            T::one(),
                            gzj,
                            &mut scratch,
                            gkj,
                            &mut gunit[j * d..(j + 1) * d],
                        );
                    }
                    QimMode::Summed => {
                        let w = state.weights.as_ref().expect("summed mode has weights");
                        for i in 0..channels {
                            let v = &state.unit[i * d..(i + 1) * d];
                            gw[i] += fused_dyad_conv_backward(
                                v,
                                kern,
                                k,
                                s,
                                w[i],
                                gzj,
                                &mut scratch,
                                gkj,
                                &mut gunit[i * d..(i + 1) * d],
                            );
                        }
                    }
                }
            }
        }
    }

    // Undo the normalization m̂ = m/‖m‖.
    let mut gvec = vec![T::zero(); channels * d];
    for i in 0..channels {
        let gu = &gunit[i * d..(i + 1) * d];
        let out = &mut gvec[i * d..(i + 1) * d];
        if !bound.config.normalize {
            out.copy_from_slice(gu);
            continue;
        }
        let norm = state.norms[i];
        if norm == T::zero() {
            continue;
        }
        let u = &state.unit[i * d..(i + 1) * d];
        let proj: T = u.iter().zip(gu).map(|(&a, &b)| a * b).sum();
        for ((o, &gi), &ui) in out.iter_mut().zip(gu).zip(u) {
            *o = (gi - ui * proj) / norm;
        }
    }

    let logits = state.weights.as_ref().map(|w| {
        let mean: T = w.iter().zip(&gw).map(|(&a, &b)| a * b).sum();
        let gl: Vec<T> = w.iter().zip(&gw).map(|(&wi, &gi)| wi * (gi - mean)).collect();
        Tensor::from_vec(&[channels], gl).expect("logit grad shape")
    });

    Ok(QimGrads {
        vectors: Tensor::from_vec(&[channels, d], gvec)?,
        kernels: Tensor::from_vec(&[c, k, k], gk)?,
        biases: Tensor::from_vec(&[c], gb)?,
        logits,
    })
}

/// `out[a,b] = Σ_{p,q} x[a+p, b+q]·kern[p,q]` for a d×d input.
fn corr_valid<T: Scalar>(x: &[T], d: usize, kern: &[T], k: usize, out: &mut [T]) {
    let s = d - k + 1;
    for a in 0..s {
        for b in 0..s {
            let mut acc = T::zero();
            for p in 0..k {
                let row = &x[(a + p) * d + b..(a + p) * d + b + k];
                for (&xv, &kv) in row.iter().zip(&kern[p * k..(p + 1) * k]) {
                    acc += xv * kv;
                }
            }
            out[a * s + b] = acc;
        }
    }
}

/// Accumulates `∂L/∂x` into `gx` and `∂L/∂kern` into `gk` for [`corr_valid`].
fn corr_valid_grads<T: Scalar>(x: &[T], d: usize, kern: &[T], k: usize, gz: &[T], gx: &mut [T], gk: &mut [T]) {
    let s = d - k + 1;
    for a in 0..s {
        for b in 0..s {
            let go = gz[a * s + b];
            if go == T::zero() {
                continue;
            }
            for p in 0..k {
                for q in 0..k {
                    gx[(a + p) * d + b + q] += go * kern[p * k + q];
                    gk[p * k + q] += go * x[(a + p) * d + b + q];
                }
            }
        }
    }
}

/// For the gradient `G` of a dyad `v·vᵀ`, returns `((G + Gᵀ)·v, vᵀ·G·v)`.
fn sym_apply<T: Scalar>(g: &[T], v: &[T]) -> (Vec<T>, T) {
    let d = v.len();
    let mut out = vec![T::zero(); d];
    let mut quad = T::zero();
    for x in 0..d {
        let mut gv = T::zero();
        for y in 0..d {
            gv += g[x * d + y] * v[y];
            out[y] += g[x * d + y] * v[x];
        }
        out[x] += gv;
        quad += v[x] * gv;
    }
    (out, quad)
}

/// `out += weight · ((v·vᵀ) ⊛ kern)` without forming `v·vᵀ`.
///
/// `scratch` holds `V[p,b] = Σ_q kern[p,q]·v[b+q]` (k×s).
fn fused_dyad_conv<T: Scalar>(v: &[T], kern: &[T], k: usize, s: usize, weight: T, scratch: &mut [T], out: &mut [T]) {
    for p in 0..k {
        let kp = &kern[p * k..(p + 1) * k];
        for b in 0..s {
            scratch[p * s + b] = kp.iter().zip(&v[b..b + k]).map(|(&kq, &vq)| kq * vq).sum();
        }
    }
    for a in 0..s {
        let o = &mut out[a * s..(a + 1) * s];
        for p in 0..k {
            let coef = weight * v[a + p];
            if coef == T::zero() {
                continue;
            }
            for (ob, &vb) in o.iter_mut().zip(&scratch[p * s..(p + 1) * s]) {
                *ob += coef * vb;
            }
        }
    }
}

struct FusedScratch<T> {
    /// V[p,b], k×s.
    v_kern: Vec<T>,
    /// W[a,q] = Σ_p v[a+p]·K[p,q], s×k.
    w_kern: Vec<T>,
    /// U[a,q] = Σ_b gz[a,b]·v[b+q], s×k.
    u: Vec<T>,
    /// G·v, length d.
    gv: Vec<T>,
}

impl<T: Scalar> FusedScratch<T> {
    fn new(k: usize, s: usize, d: usize) -> Self {
        Self {
            v_kern: vec![T::zero(); k * s],
            w_kern: vec![T::zero(); s * k],
            u: vec![T::zero(); s * k],
            gv: vec![T::zero(); d],
        }
    }
}

/// Backward of [`fused_dyad_conv`] for upstream gradient `gz` on the s×s
/// output, where `G` is the implied gradient on `v·vᵀ`:
///
/// * `gk[p,q] += weight · Σ_a v[a+p]·U[a,q]`
/// * `gv += weight · (G·v + Gᵀ·v)`, with `(G·v)[x] = Σ_p Σ_b gz[x−p,b]·V[p,b]`
///   and `(Gᵀ·v)[y] = Σ_q Σ_a gz[a,y−q]·W[a,q]`
///
/// Returns `vᵀ·G·v`, the gradient with respect to `weight`.
#[allow(clippy::too_many_arguments)]
fn fused_dyad_conv_backward<T: Scalar>(
    v: &[T],
    kern: &[T],
    k: usize,
    s: usize,
    weight: T,
    gz: &[T],
    sc: &mut FusedScratch<T>,
    gk: &mut [T],
    gv_out: &mut [T],
) -> T {
    let d = v.len();
    for p in 0..k {
        for b in 0..s {
            sc.v_kern[p * s + b] = (0..k).map(|q| kern[p * k + q] * v[b + q]).sum();
        }
    }
    for a in 0..s {
        for q in 0..k {
            sc.w_kern[a * k + q] = (0..k).map(|p| v[a + p] * kern[p * k + q]).sum();
            sc.u[a * k + q] = (0..s).map(|b| gz[a * s + b] * v[b + q]).sum();
        }
    }
    for p in 0..k {
        for q in 0..k {
            let acc: T = (0..s).map(|a| v[a + p] * sc.u[a * k + q]).sum();
            gk[p * k + q] += weight * acc;
        }
    }
    sc.gv.iter_mut().for_each(|x| *x = T::zero());
    // G·v via T[a,p] = Σ_b gz[a,b]·V[p,b], scattered to x = a + p.
    for a in 0..s {
        let gza = &gz[a * s..(a + 1) * s];
        for p in 0..k {
            let t: T = gza.iter().zip(&sc.v_kern[p * s..(p + 1) * s]).map(|(&g, &vv)| g * vv).sum();
            sc.gv[a + p] += t;
        }
    }
    let quad: T = v.iter().zip(&sc.gv).map(|(&a, &b)| a * b).sum();
    for (o, &g) in gv_out[..d].iter_mut().zip(&sc.gv) {
        *o += weight * g;
    }
    // Gᵀ·v via R[b,q] = Σ_a gz[a,b]·W[a,q], scattered to y = b + q.
    for b in 0..s {
        for q in 0..k {
            let r: T = (0..s).map(|a| gz[a * s + b] * sc.w_kern[a * k + q]).sum();
            gv_out[b + q] += weight * r;
        }
    }
    quad
}

/// Batched evaluation state for the tape.
#[derive(Clone, Debug)]
pub(crate) struct QimBatch<T> {
    pub outputs: Vec<QimOutput<T>>,
}

/// Runs the block on each sample of a B×channels×d tensor, returning B×2cs.
pub(crate) fn qim_batch_forward<T: Scalar>(
    vectors: &Tensor<T>,
    params: &QimParams<T>,
    bound: &BoundQim,
    kernel: QimKernel,
    retain: bool,
) -> Result<(Tensor<T>, QimBatch<T>)> {
    let (batch, channels, d) = match vectors.shape() {
        [b, n, d] => (*b, *n, *d),
        s => return Err(Error::dim(format!("batched QIM input must be B×channels×d, got {s:?}"))),
    };
    let mut features = Vec::with_capacity(batch * bound.output_len());
    let mut outputs = Vec::with_capacity(if retain { batch } else { 0 });
    for sample in vectors.data().chunks(channels * d) {
        let v = Tensor::from_vec(&[channels, d], sample.to_vec())?;
        let out = qim_eval(&v, params, bound, kernel, retain)?;
        features.extend_from_slice(out.features.data());
        if retain {
            outputs.push(out);
        }
    }
    Ok((Tensor::from_vec(&[batch, bound.output_len()], features)?, QimBatch { outputs }))
}

pub(crate) fn qim_batch_backward<T: Scalar>(
    grad: &Tensor<T>,
    state: &QimBatch<T>,
    params: &QimParams<T>,
    bound: &BoundQim,
) -> Result<QimGrads<T>> {
    let len = bound.output_len();
    if state.outputs.is_empty() {
        return Err(Error::MissingForwardState);
    }
    let mut vectors = Vec::new();
    let mut total: Option<QimGrads<T>> = None;
    for (out, g) in state.outputs.iter().zip(grad.data().chunks(len)) {
        let gs = qim_backward(&Tensor::from_vec(&[len], g.to_vec())?, out, params, bound)?;
        vectors.extend_from_slice(gs.vectors.data());
        match total.as_mut() {
            None => total = Some(gs),
            Some(t) => {
                t.kernels.add_assign(&gs.kernels)?;
                t.biases.add_assign(&gs.biases)?;
                if let (Some(a), Some(b)) = (t.logits.as_mut(), gs.logits.as_ref()) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let mut total = total.expect("non-empty batch");
    let channels = total.vectors.shape()[0];
    total.vectors = Tensor::from_vec(&[state.outputs.len(), channels, bound.d], vectors)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ops::conv2d_valid;

    fn vecs(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn bind_derives_kernel_and_clamps() {
        let b = QimConfig::new(2, 3).bind(4).unwrap();
        assert_eq!((b.s, b.k, b.output_len()), (3, 2, 12));
        assert!(b.warning.is_none());
        let b = QimConfig::new(32, 10).bind(9).unwrap();
        assert_eq!((b.s, b.k), (9, 1));
        assert!(b.warning.as_deref().unwrap().contains("clamped to 9"));
        assert!(QimConfig::new(0, 3).bind(4).is_err());
    }

    #[test]
    fn flatten_is_row_major_and_rejects_ragged() {
        let m = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(flatten_maps(std::slice::from_ref(&m)).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = Tensor::<f64>::full(&[2, 2], 1.0);
        let b = Tensor::<f64>::full(&[2, 2], 2.0);
        let f = flatten_maps(&[a, b, m.clone()]).unwrap();
        assert_eq!(f.shape(), &[3, 4]);
        assert_eq!(&f.data()[4..8], &[2.0; 4]);
        let one = Tensor::<f64>::full(&[1, 1], 5.0);
        assert_eq!(flatten_maps(&[one]).unwrap().shape(), &[1, 1]);
        let ragged = Tensor::<f64>::zeros(&[1, 4]);
        assert!(flatten_maps(&[m, ragged]).is_err());
    }

    #[test]
    fn paired_basis_vector_example() {
        let bound = QimConfig::new(1, 2).with_mode(QimMode::Paired).bind(3).unwrap();
        let params = QimParams { kernels: Tensor::full(&[1, 2, 2], 1.0), biases: Tensor::zeros(&[1]), logits: None };
        let m = vecs(&[&[1.0, 0.0, 0.0]]);
        // naive oracle: materialize ρ, convolve, pool
        let rho = crate::density::dyad(&[1.0f64, 0.0, 0.0], true).unwrap();
        let c = conv2d_valid(rho.entries(), &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
        for out in [qim_forward(&m, &params, &bound).unwrap(), qim_fused(&m, &params, &bound).unwrap()] {
            assert_eq!(out.maps.data(), &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(out.features.data(), &[1.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn zero_input_gives_constant_relu_bias() {
        let bound = QimConfig::new(2, 3).bind(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = QimParams::<f64>::init(&bound, 3, &mut rng).unwrap();
        params.biases = Tensor::from_f64(&[2], &[0.25, -0.5]).unwrap();
        let zero = Tensor::zeros(&[3, 4]);
        let dense = qim_forward(&zero, &params, &bound).unwrap();
        let fused = qim_fused(&zero, &params, &bound).unwrap();
        assert_eq!(dense.features, fused.features);
        assert_eq!(&dense.features.data()[..6], &[0.25; 6]);
        assert_eq!(&dense.features.data()[6..], &[0.0; 6]);
    }

    #[test]
    fn paired_requires_matching_channels() {
        let bound = QimConfig::new(2, 2).with_mode(QimMode::Paired).bind(3).unwrap();
        let params = QimParams::<f64> { kernels: Tensor::zeros(&[2, 2, 2]), biases: Tensor::zeros(&[2]), logits: None };
        let three = Tensor::zeros(&[3, 3]);
        assert!(matches!(qim_forward(&three, &params, &bound), Err(Error::ChannelMismatch { expected: 2, found: 3 })));
    }

    #[test]
    fn backward_without_state_fails() {
        let bound = QimConfig::new(1, 2).bind(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = QimParams::<f64>::init(&bound, 2, &mut rng).unwrap();
        let v = Tensor::full(&[2, 3], 0.5);
        let out = qim_eval(&v, &params, &bound, QimKernel::Dense, false).unwrap();
        assert!(matches!(qim_backward(&Tensor::zeros(&[4]), &out, &params, &bound), Err(Error::MissingForwardState)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let bound = QimConfig::new(3, 4).bind(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = QimParams::<f64>::init(&bound, 2, &mut rng).unwrap();
        let v = Tensor::from_f64(&[2, 6], &[0.1, 0.9, -0.3, 0.4, 0.2, -0.7, 1.0, 0.5, 0.0, -0.2, 0.3, 0.8]).unwrap();
        for kernel in [QimKernel::Dense, QimKernel::Fused] {
            let out = qim_eval(&v, &params, &bound, kernel, true).unwrap();
            let g = qim_backward(&Tensor::zeros(&[24]), &out, &params, &bound).unwrap();
            assert!(g.vectors.data().iter().all(|&x| x == 0.0));
            assert!(g.kernels.data().iter().all(|&x| x == 0.0));
            assert!(g.biases.data().iter().all(|&x| x == 0.0));
            assert!(g.logits.unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cheapest_kernel_prefers_dense_for_wide_mixtures() {
        let b = QimConfig::new(128, 10).bind(16).unwrap();
        assert_eq!(QimKernel::cheapest(&b, 128), QimKernel::Dense);
        let b = QimConfig::new(3, 60).with_mode(QimMode::Paired).bind(64).unwrap();
        assert_eq!(QimKernel::cheapest(&b, 3), QimKernel::Fused);
    }
}
