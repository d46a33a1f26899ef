//! Backbone CNNs with an optional QIM block in front of the classifier head.
//!
//! | backbone      | feature extractor                                         | head              |
//! |---------------|-----------------------------------------------------------|-------------------|
//! | `standardcnn` | conv(32,3×3) pool conv(64,3×3) pool conv(128,3×3) pool    | FC(128) FC(classes) |
//! | `lenet5`      | conv(6,5×5) pool conv(16,5×5) pool                        | FC(84) FC(classes)  |
//!
//! Convolutions are valid, stride 1, followed by ReLU; pools are 2×2 max with
//! floor division on odd sides. Without QIM the last feature maps are
//! flattened into the head. With QIM the feature extractor is cut after
//! layer `insert_after` (by default the last convolution, so the trailing
//! pool is replaced by the block's own row/column pooling); each channel's
//! map is flattened into one vector and the `2·c·s` QIM features feed the
//! head instead.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::qim::{BoundQim, QimConfig, QimKernel, QimMode, QimParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    StandardCnn,
    LeNet5,
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::StandardCnn => "standardcnn",
            Backbone::LeNet5 => "lenet5",
        }
    }

    pub fn feature_layers(&self) -> Vec<FeatureLayer> {
        use FeatureLayer::*;
        match self {
            Backbone::StandardCnn => {
                vec![Conv { out: 32, k: 3 }, Pool, Conv { out: 64, k: 3 }, Pool, Conv { out: 128, k: 3 }, Pool]
            }
            Backbone::LeNet5 => vec![Conv { out: 6, k: 5 }, Pool, Conv { out: 16, k: 5 }, Pool],
        }
    }

    pub fn hidden_width(&self) -> usize {
        match self {
            Backbone::StandardCnn => 128,
            Backbone::LeNet5 => 84,
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standardcnn" => Ok(Backbone::StandardCnn),
            "lenet5" | "lenet-5" | "lenet" => Ok(Backbone::LeNet5),
            _ => Err(Error::UnknownBackbone(s.to_string())),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    /// Valid convolution with `out` channels and a k×k kernel, then ReLU.
    Conv { out: usize, k: usize },
    /// 2×2 max-pool, stride 2.
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl InputShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QimSpec {
    pub config: QimConfig,
    /// Index of the feature layer after which QIM runs; `None` means after
    /// the last convolution.
    pub insert_after: Option<usize>,
}

/// Declarative model description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub input: InputShape,
    pub classes: usize,
    pub qim: Option<QimSpec>,
}

impl ModelSpec {
    pub fn new(backbone: Backbone, input: InputShape, classes: usize) -> Self {
        Self { backbone, input, classes, qim: None }
    }

    pub fn with_qim(mut self, config: QimConfig) -> Self {
        self.qim = Some(QimSpec { config, insert_after: None });
        self
    }

    pub fn with_qim_at(mut self, config: QimConfig, insert_after: usize) -> Self {
        self.qim = Some(QimSpec { config, insert_after: Some(insert_after) });
        self
    }

    /// Canonical one-line description, stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let mut s = format!("{}/{}x{}x{}/{}", self.backbone, self.input.h, self.input.w, self.input.c, self.classes);
        if let Some(q) = &self.qim {
            let at = q.insert_after.map_or_else(|| "last-conv".to_string(), |i| i.to_string());
            s.push_str(&format!(
                "/qim:{},c={},s={},norm={},at={}",
                q.config.mode.as_str(),
                q.config.filters,
                q.config.size,
                u8::from(q.config.normalize),
                at
            ));
        }
        s
    }

    /// Human-readable approach label, e.g. `standardcnn+qim`.
    pub fn approach(&self) -> String {
        match self.qim {
            Some(_) => format!("{}+qim", self.backbone),
            None => self.backbone.to_string(),
        }
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { weight: usize, bias: usize },
    Pool,
    Flatten,
    Qim { kernels: usize, biases: usize, logits: Option<usize>, bound: BoundQim, kernel: QimKernel },
    Dense { weight: usize, bias: usize, relu: bool },
}

/// Resolved per-sample output shape of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub output_shape: Vec<usize>,
}

/// An instantiated model.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    shapes: Vec<LayerInfo>,
    qim: Option<BoundQim>,
}

fn uniform<R: Rng>(rng: &mut R, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Builds and initializes `spec` deterministically from `seed`.
///
/// Convolution and hidden dense weights are He-uniform, the output layer is
/// Glorot-uniform, biases start at zero.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Network<T>> {
    if spec.classes == 0 {
        return Err(Error::InvalidArgument("class count must be positive".into()));
    }
    let InputShape { h, w, c } = spec.input;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::dim(format!("input shape {h}×{w}×{c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Param<T>> = Vec::new();
    let mut layers = Vec::new();
    let mut shapes = Vec::new();
    let add = |params: &mut Vec<Param<T>>, name: String, shape: &[usize], data: &[f64]| -> Result<usize> {
        params.push(Param { name, value: Tensor::from_f64(shape, data)? });
        Ok(params.len() - 1)
    };

    let features = spec.backbone.feature_layers();
    let cut = match spec.qim {
        Some(QimSpec { insert_after: Some(i), .. }) => {
            if i >= features.len() {
                return Err(Error::InvalidArgument(format!(
                    "QIM insertion index {i} beyond {} feature layers",
                    features.len()
                )));
            }
            i + 1
        }
        Some(QimSpec { insert_after: None, .. }) => {
            features.iter().rposition(|l| matches!(l, FeatureLayer::Conv { .. })).expect("backbone has a conv") + 1
        }
        None => features.len(),
    };

    let (mut ch, mut hh, mut ww) = (c, h, w);
    for (i, layer) in features[..cut].iter().enumerate() {
        match *layer {
            FeatureLayer::Conv { out, k } => {
                if hh < k || ww < k {
                    return Err(Error::SpatialUnderflow { layer: i, detail: format!("{k}×{k} conv on {hh}×{ww}") });
                }
                let limit = (6.0 / (ch * k * k) as f64).sqrt();
                let weight = add(
                    &mut params,
                    format!("{i}.conv.weight"),
                    &[out, ch, k, k],
                    &uniform(&mut rng, out * ch * k * k, limit),
                )?;
                let bias = add(&mut params, format!("{i}.conv.bias"), &[out], &vec![0.0; out])?;
                layers.push(Layer::Conv { weight, bias });
                ch = out;
                hh -= k - 1;
                ww -= k - 1;
                shapes.push(LayerInfo { name: format!("{i}.conv"), output_shape: vec![ch, hh, ww] });
            }
            FeatureLayer::Pool => {
                if hh < 2 || ww < 2 {
                    return Err(Error::SpatialUnderflow { layer: i, detail: format!("2×2 pool on {hh}×{ww}") });
                }
                layers.push(Layer::Pool);
                hh /= 2;
                ww /= 2;
                shapes.push(LayerInfo { name: format!("{i}.pool"), output_shape: vec![ch, hh, ww] });
            }
        }
    }

    let mut idx = cut;
    let (head_in, qim) = match spec.qim {
        None => {
            layers.push(Layer::Flatten);
            shapes.push(LayerInfo { name: format!("{idx}.flatten"), output_shape: vec![ch * hh * ww] });
            (ch * hh * ww, None)
        }
        Some(q) => {
            let bound = q.config.bind(hh * ww)?;
            if q.config.mode == QimMode::Paired && ch != q.config.filters {
                return Err(Error::ChannelMismatch { expected: q.config.filters, found: ch });
            }
            let qp = QimParams::<f64>::init(&bound, ch, &mut rng)?;
            let kernels = add(&mut params, format!("{idx}.qim.kernels"), qp.kernels.shape(), qp.kernels.data())?;
            let biases = add(&mut params, format!("{idx}.qim.biases"), qp.biases.shape(), qp.biases.data())?;
            let logits = match &qp.logits {
                Some(l) => Some(add(&mut params, format!("{idx}.qim.logits"), l.shape(), l.data())?),
                None => None,
            };
            let kernel = QimKernel::cheapest(&bound, ch);
            let out = bound.output_len();
            layers.push(Layer::Qim { kernels, biases, logits, bound: bound.clone(), kernel });
            shapes.push(LayerInfo { name: format!("{idx}.qim"), output_shape: vec![out] });
            (out, Some(bound))
        }
    };
    idx += 1;

    let hidden = spec.backbone.hidden_width();
    let limit = (6.0 / head_in as f64).sqrt();
    let weight = add(
        &mut params,
        format!("{idx}.dense.weight"),
        &[hidden, head_in],
        &uniform(&mut rng, hidden * head_in, limit),
    )?;
    let bias = add(&mut params, format!("{idx}.dense.bias"), &[hidden], &vec![0.0; hidden])?;
    layers.push(Layer::Dense { weight, bias, relu: true });
    shapes.push(LayerInfo { name: format!("{idx}.dense"), output_shape: vec![hidden] });
    idx += 1;

    let classes = spec.classes;
    let limit = (6.0 / (hidden + classes) as f64).sqrt();
    let weight = add(
        &mut params,
        format!("{idx}.dense.weight"),
        &[classes, hidden],
        &uniform(&mut rng, classes * hidden, limit),
    )?;
    let bias = add(&mut params, format!("{idx}.dense.bias"), &[classes], &vec![0.0; classes])?;
    layers.push(Layer::Dense { weight, bias, relu: false });
    shapes.push(LayerInfo { name: format!("{idx}.dense"), output_shape: vec![classes] });

    Ok(Network { spec: *spec, layers, params, shapes, qim })
}

/// Total number of scalar parameters.
pub fn param_count<T: Scalar>(params: &[Param<T>]) -> usize {
    params.iter().map(|p| p.value.len()).sum()
}

/// Reorders a B×H×W×C batch into B×C×H×W.
pub fn nhwc_to_nchw<T: Scalar>(batch: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, h, w, c] = batch.shape() else {
        return Err(Error::dim(format!("expected a B×H×W×C batch, got {:?}", batch.shape())));
    };
    let src = batch.data();
    let mut out = vec![T::zero(); src.len()];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((n * c + ch) * h + y) * w + x] = src[((n * h + y) * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    /// Per-sample output shape of each layer, in order.
    pub fn layer_shapes(&self) -> &[LayerInfo] {
        &self.shapes
    }

    /// The bound QIM block, when enabled.
    pub fn qim(&self) -> Option<&BoundQim> {
        self.qim.as_ref()
    }

    /// Width of the first fully-connected layer's input.
    pub fn head_input_width(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense { weight, .. } => Some(self.params[*weight].value.shape()[1]),
                _ => None,
            })
            .expect("network has a dense head")
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            shapes: self.shapes.clone(),
            qim: self.qim.clone(),
        }
    }

    /// Records the forward pass of a B×H×W×C batch. Returns the B×classes
    /// logits and one tape variable per parameter, in [`Network::params`]
    /// order.
    pub fn forward_tape(&self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<(Var, Vec<Var>)> {
        let InputShape { h, w, c } = self.spec.input;
        match batch.shape() {
            [_, bh, bw, bc] if (*bh, *bw, *bc) == (h, w, c) => {}
            s => return Err(Error::dim(format!("batch {s:?} does not match input {h}×{w}×{c}"))),
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        self.forward_with_params(tape, batch, &vars)
    }

    /// Like [`Network::forward_tape`] but reads parameters from `vars`, which
    /// must pair with [`Network::params`] by position.
    pub fn forward_with_params(&self, tape: &mut Tape<T>, batch: &Tensor<T>, vars: &[Var]) -> Result<(Var, Vec<Var>)> {
        let InputShape { h, w, c } = self.spec.input;
        match batch.shape() {
            [_, bh, bw, bc] if (*bh, *bw, *bc) == (h, w, c) => {}
            s => return Err(Error::dim(format!("batch {s:?} does not match input {h}×{w}×{c}"))),
        }
        if vars.len() != self.params.len() {
            return Err(Error::dim(format!("{} parameter variables for {} parameters", vars.len(), self.params.len())));
        }
        let b = batch.shape()[0];
        let mut x = tape.constant(nhwc_to_nchw(batch)?);
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let y = tape.conv_layer(x, vars[*weight], vars[*bias])?;
                    tape.relu(y)?
                }
                Layer::Pool => tape.max_pool2(x)?,
                Layer::Flatten => {
                    let n = tape.value(x).len() / b;
                    tape.reshape(x, &[b, n])?
                }
                Layer::Qim { kernels, biases, logits, bound, kernel } => {
                    let &[_, ch, hh, ww] = tape.value(x).shape() else { unreachable!() };
                    let v = tape.reshape(x, &[b, ch, hh * ww])?;
                    tape.qim(v, vars[*kernels], vars[*biases], logits.map(|l| vars[l]), bound, *kernel)?
                }
                Layer::Dense { weight, bias, relu } => {
                    let y = tape.affine(x, vars[*weight], vars[*bias])?;
                    if *relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok((x, vars.to_vec()))
    }

    /// B×classes logits for a B×H×W×C batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let (logits, _) = self.forward_tape(&mut tape, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy on a batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let (logits, vars) = self.forward_tape(&mut tape, batch)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let grads = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Class probabilities per sample.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let logits = self.forward(batch)?;
        Ok(logits.data().chunks(self.spec.classes).map(softmax).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist() -> ModelSpec {
        ModelSpec::new(Backbone::StandardCnn, InputShape::new(28, 28, 1), 10)
    }

    #[test]
    fn unknown_backbone() {
        assert!(matches!("foo".parse::<Backbone>(), Err(Error::UnknownBackbone(n)) if n == "foo"));
        assert_eq!("LeNet-5".parse::<Backbone>().unwrap(), Backbone::LeNet5);
    }

    #[test]
    fn standardcnn_shapes_on_mnist() {
        let net = build_model::<f32>(&mnist(), 0).unwrap();
        let shapes: Vec<Vec<usize>> = net.layer_shapes().iter().map(|l| l.output_shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![32, 26, 26],
                vec![32, 13, 13],
                vec![64, 11, 11],
                vec![64, 5, 5],
                vec![128, 3, 3],
                vec![128, 1, 1],
                vec![128],
                vec![128],
                vec![10],
            ]
        );
    }

    #[test]
    fn qim_replaces_last_pool_by_default() {
        let spec = mnist().with_qim(QimConfig::new(32, 8));
        let net = build_model::<f32>(&spec, 0).unwrap();
        let bound = net.qim().unwrap();
        assert_eq!((bound.d, bound.s, bound.k), (9, 8, 2));
        assert_eq!(net.head_input_width(), 2 * 32 * 8);
    }

    #[test]
    fn paired_mode_checks_channels() {
        let spec = mnist().with_qim(QimConfig::new(32, 8).with_mode(QimMode::Paired));
        assert!(matches!(build_model::<f64>(&spec, 0), Err(Error::ChannelMismatch { expected: 32, found: 128 })));
        let ok = mnist().with_qim(QimConfig::new(128, 8).with_mode(QimMode::Paired));
        assert!(build_model::<f64>(&ok, 0).is_ok());
    }

    #[test]
    fn underflow_is_reported() {
        let spec = ModelSpec::new(Backbone::StandardCnn, InputShape::new(8, 8, 1), 3);
        assert!(matches!(build_model::<f64>(&spec, 0), Err(Error::SpatialUnderflow { layer: 3, .. })));
    }

    #[test]
    fn nhwc_reorder() {
        // 1×1×2×3: pixels (r,g,b) = (0,1,2), (3,4,5)
        let t = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let r = nhwc_to_nchw(&t).unwrap();
        assert_eq!(r.shape(), &[1, 3, 1, 2]);
        assert_eq!(r.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn descriptor_distinguishes_specs() {
        let a = mnist();
        let b = mnist().with_qim(QimConfig::new(32, 10));
        let c = ModelSpec::new(Backbone::LeNet5, InputShape::new(28, 28, 1), 10);
        assert_ne!(a.descriptor(), b.descriptor());
        assert_ne!(a.descriptor(), c.descriptor());
        assert_eq!(b.descriptor(), "standardcnn/28x28x1/10/qim:summed,c=32,s=10,norm=1,at=last-conv");
    }

    #[test]
    fn empty_param_list_counts_zero() {
        assert_eq!(param_count::<f32>(&[]), 0);
    }
}
