//! Training loop, optimizers, evaluation and checkpoints.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{make_batches, Batch, BatchPlan, Dataset};
use crate::error::{CheckpointError, Error, Result};
use crate::models::{build_model, ModelSpec, Network};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QIM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd-momentum" | "sgd" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds initialization and the per-epoch shuffles.
    pub seed: u64,
    /// SGD momentum μ.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Adam, lr: 0.0005, batch_size: 64, epochs: 1, seed: 0, momentum: 0.9 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Shuffle seed used for epoch `epoch` (zero-based).
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
    }

    pub fn optimizer<T: Scalar>(&self) -> Optimizer<T> {
        match self.optimizer {
            OptimizerKind::SgdMomentum => Optimizer::sgd(self.lr, self.momentum),
            OptimizerKind::Adam => Optimizer::adam(self.lr),
        }
    }
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    momentum: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    /// `v ← μv − ηg`, `θ ← θ + v`.
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::with(OptimizerKind::SgdMomentum, lr, momentum)
    }

    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn adam(lr: f64) -> Self {
        Self::with(OptimizerKind::Adam, lr, 0.0)
    }

    fn with(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// Applies one update. `grads` pairs with `params` by position.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = self.momentum * *vi - self.lr * gi;
                        *pi += *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let one = T::one();
                let c1 = one - self.beta1.powi(self.step);
                let c2 = one - self.beta2.powi(self.step);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((pi, &gi), mi), vi) in it {
                        *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn offending_param<T: Scalar>(net: &Network<T>, grads: Option<&[Tensor<T>]>) -> String {
    let params = net.params();
    if let Some(p) = params.iter().find(|p| !p.value.is_finite()) {
        return p.name.clone();
    }
    if let Some(grads) = grads {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return params[i].name.clone();
        }
    }
    params
        .iter()
        .max_by(|a, b| {
            let ma = a.value.data().iter().fold(0.0f64, |m, x| m.max(x.to_f64_lossy().abs()));
            let mb = b.value.data().iter().fold(0.0f64, |m, x| m.max(x.to_f64_lossy().abs()));
            ma.total_cmp(&mb)
        })
        .map(|p| p.name.clone())
        .unwrap_or_default()
}

/// One optimizer step on a batch. Returns the batch's mean loss.
///
/// A non-finite loss or gradient aborts with [`Error::NonFiniteParam`]
/// naming the first parameter tensor that is (or would become) non-finite.
pub fn train_step<T: Scalar>(net: &mut Network<T>, batch: &Batch<T>, opt: &mut Optimizer<T>) -> Result<f64> {
    let (loss, grads) = match net.loss_and_grads(&batch.images, &batch.labels) {
        Ok(r) => r,
        Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteParam { param: offending_param(net, None) }),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteParam { param: offending_param(net, Some(&grads)) });
    }
    let mut values: Vec<Tensor<T>> =
        net.params_mut().iter_mut().map(|p| std::mem::replace(&mut p.value, Tensor::scalar(T::zero()))).collect();
    let stepped = opt.step(&mut values, &grads);
    for (p, v) in net.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    stepped?;
    Ok(loss.to_f64_lossy())
}

/// One pass over `batches`. Returns the mean of the per-batch mean losses.
pub fn train_epoch<T: Scalar, I>(net: &mut Network<T>, batches: I, opt: &mut Optimizer<T>) -> Result<f64>
where
    I: IntoIterator<Item = Batch<T>>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        total += train_step(net, &batch, opt)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(crate::error::DataError::Empty));
    }
    Ok(total / count as f64)
}

/// Correct predictions over a test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn percent(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

/// Percent with four decimals, e.g. `97.2622`.
impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.percent())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Counts argmax hits batch by batch, in order.
pub fn evaluate<T: Scalar, I>(net: &Network<T>, batches: I) -> Result<Accuracy>
where
    I: IntoIterator<Item = Batch<T>>,
{
    let classes = net.spec().classes;
    let mut acc = Accuracy { correct: 0, total: 0 };
    for batch in batches {
        let logits = net.forward(&batch.images)?;
        for (row, &label) in logits.data().chunks(classes).zip(&batch.labels) {
            acc.correct += usize::from(argmax(row) == label);
            acc.total += 1;
        }
    }
    if acc.total == 0 {
        return Err(Error::Data(crate::error::DataError::Empty));
    }
    Ok(acc)
}

/// Accuracy on a whole dataset in sequential order.
pub fn evaluate_dataset<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<Accuracy> {
    evaluate(net, make_batches::<T>(data, BatchPlan::sequential(batch_size))?)
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub epoch_losses: Vec<f64>,
    pub accuracy: Accuracy,
    pub wall_seconds: f64,
}

/// Trains `net` on `train` for `config.epochs` epochs, then evaluates on
/// `test`. `on_epoch` sees the zero-based epoch and its mean loss.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Metrics> {
    config.validate()?;
    let start = Instant::now();
    let mut opt = config.optimizer::<T>();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let plan = BatchPlan::shuffled(config.batch_size, config.epoch_seed(epoch));
        let loss = train_epoch(net, make_batches::<T>(train, plan)?, &mut opt)?;
        on_epoch(epoch, loss);
        epoch_losses.push(loss);
    }
    let accuracy = evaluate_dataset(net, test, config.batch_size.max(256))?;
    Ok(Metrics { epoch_losses, accuracy, wall_seconds: start.elapsed().as_secs_f64() })
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

/// Writes `net` as: magic `QIM1`, version (u32), descriptor, parameter
/// count, then per parameter its name, rank, dims and little-endian f32
/// values. Lengths and counts are little-endian u32.
pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    path: impl AsRef<Path>,
) -> std::result::Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_str(&mut w, &net.spec().descriptor())?;
    write_u32(&mut w, net.params().len() as u32)?;
    for p in net.params() {
        write_str(&mut w, &p.name)?;
        write_u32(&mut w, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for &x in p.value.data() {
            w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(CheckpointError::Malformed(format!("string length {n}")));
        }
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(truncated)?;
        String::from_utf8(b).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

fn truncated(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Malformed("unexpected end of file".into())
    } else {
        CheckpointError::Io(e)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic).map_err(truncated)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let descriptor = r.string()?;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.0.read_exact(&mut bytes).map_err(truncated)?;
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        params.push((name, dims, values));
    }
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint { descriptor, params })
}

/// Rebuilds a network for `spec` from a checkpoint. The stored descriptor
/// must equal `spec.descriptor()`.
pub fn load_checkpoint<T: Scalar>(spec: &ModelSpec, path: impl AsRef<Path>) -> Result<Network<T>> {
    let ckpt = read_checkpoint(path)?;
    let expected = spec.descriptor();
    if ckpt.descriptor != expected {
        return Err(CheckpointError::DescriptorMismatch { expected, found: ckpt.descriptor }.into());
    }
    let mut net = build_model::<T>(spec, 0)?;
    if ckpt.params.len() != net.params().len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors, model has {}",
            ckpt.params.len(),
            net.params().len()
        ))
        .into());
    }
    for p in net.params_mut() {
        let (_, dims, values) = ckpt
            .params
            .iter()
            .find(|(n, _, _)| *n == p.name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor `{}`", p.name)))?;
        if dims.as_slice() != p.value.shape() {
            return Err(CheckpointError::Malformed(format!(
                "`{}` stored as {dims:?}, model has {:?}",
                p.name,
                p.value.shape()
            ))
            .into());
        }
        for (dst, &v) in p.value.data_mut().iter_mut().zip(values) {
            *dst = T::lit(v as f64);
        }
    }
    Ok(net)
}
