//! Network description, parameter initialization and whole-model
//! forward/backward passes.
//!
//! A [`ModelSpec`] is a plain list of layer descriptors; [`Model::new`]
//! validates that the shapes compose and precomputes the per-layer
//! activation shapes. Parameters live outside the model in a
//! [`ParamStore`], so the same `Model` can run any compatible weight set
//! (baseline, fine-tuned, resampled, ensemble members).

pub mod activation;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Element, ParamStore, Tensor};

pub use activation::{dropout_backward, dropout_infer, dropout_train, relu_backward, relu_forward};
pub use conv::{conv2d_backward, conv2d_forward};
pub use dense::{dense_backward, dense_forward};
pub use loss::{count_correct, softmax_probs, softmax_xent};
pub use pool::{maxpool_backward, maxpool_forward};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kh: usize, kw: usize },
    MaxPool { ph: usize, pw: usize },
    Relu,
    Flatten,
    Dense { out: usize },
    Dropout { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Input activation shape per sample: [channels, height, width].
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The MNIST classifier used throughout the experiments:
    /// two 5x5 conv/pool blocks into a 512-wide hidden layer, optional
    /// dropout 0.5 on the hidden activations, 10-way softmax head.
    /// 28x28 input shrinks to 4x4x64 = 1024 features before flatten.
    pub fn lenet(dropout: bool) -> Self {
        let mut layers = vec![
            LayerSpec::Conv2d { out_channels: 32, kh: 5, kw: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { ph: 2, pw: 2 },
            LayerSpec::Conv2d { out_channels: 64, kh: 5, kw: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { ph: 2, pw: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 512 },
            LayerSpec::Relu,
        ];
        if dropout {
            layers.push(LayerSpec::Dropout { rate: 0.5 });
        }
        layers.push(LayerSpec::Dense { out: 10 });
        ModelSpec { input: [1, 28, 28], layers }
    }

    pub fn by_name(name: &str, dropout: bool) -> Result<Self> {
        match name {
            "lenet" => Ok(Self::lenet(dropout)),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Activation shape between layers: either an image stack or a flat vector.
#[derive(Clone, Debug, PartialEq)]
enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

/// Name, shape and Glorot fan counts for one parameter tensor.
struct ParamDef {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    /// Index into `ModelSpec::layers`; biases share the layer of their weight.
    layer: usize,
    is_bias: bool,
}

/// A validated model: spec plus derived shapes and parameter layout.
pub struct Model {
    spec: ModelSpec,
    defs: Vec<ParamDef>,
    classes: usize,
    has_dropout: bool,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let [c, h, w] = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", spec.input)));
        }
        let mut shape = Shape::Chw(c, h, w);
        let mut defs = Vec::new();
        let mut conv_idx = 0usize;
        let mut dense_idx = 0usize;
        let mut has_dropout = false;

        for (li, layer) in spec.layers.iter().enumerate() {
            shape = match (layer, &shape) {
                (&LayerSpec::Conv2d { out_channels, kh, kw }, &Shape::Chw(c, h, w)) => {
                    if kh == 0 || kw == 0 || out_channels == 0 {
                        return Err(Error::Config(format!("layer {li}: empty conv geometry")));
                    }
                    if kh > h || kw > w {
                        return Err(Error::Config(format!(
                            "layer {li}: conv kernel {kh}x{kw} larger than input {h}x{w}"
                        )));
                    }
                    conv_idx += 1;
                    let name = format!("conv{conv_idx}");
                    defs.push(ParamDef {
                        name: format!("{name}.weight"),
                        shape: vec![out_channels, c, kh, kw],
                        fan_in: c * kh * kw,
                        fan_out: out_channels * kh * kw,
                        layer: li,
                        is_bias: false,
                    });
                    defs.push(ParamDef {
                        name: format!("{name}.bias"),
                        shape: vec![out_channels],
                        fan_in: 0,
                        fan_out: 0,
                        layer: li,
                        is_bias: true,
                    });
                    Shape::Chw(out_channels, h - kh + 1, w - kw + 1)
                }
                (&LayerSpec::MaxPool { ph, pw }, &Shape::Chw(c, h, w)) => {
                    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                        return Err(Error::Config(format!(
                            "layer {li}: pool {ph}x{pw} does not tile {h}x{w}"
                        )));
                    }
                    Shape::Chw(c, h / ph, w / pw)
                }
                (LayerSpec::Relu, s) => s.clone(),
                (LayerSpec::Flatten, &Shape::Chw(c, h, w)) => Shape::Flat(c * h * w),
                (LayerSpec::Flatten, &Shape::Flat(d)) => Shape::Flat(d),
                (&LayerSpec::Dense { out }, &Shape::Flat(d)) => {
                    if out == 0 {
                        return Err(Error::Config(format!("layer {li}: dense with 0 outputs")));
                    }
                    dense_idx += 1;
                    let name = format!("fc{dense_idx}");
                    defs.push(ParamDef {
                        name: format!("{name}.weight"),
                        shape: vec![d, out],
                        fan_in: d,
                        fan_out: out,
                        layer: li,
                        is_bias: false,
                    });
                    defs.push(ParamDef {
                        name: format!("{name}.bias"),
                        shape: vec![out],
                        fan_in: 0,
                        fan_out: 0,
                        layer: li,
                        is_bias: true,
                    });
                    Shape::Flat(out)
                }
                (&LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "layer {li}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    has_dropout = true;
                    s.clone()
                }
                (layer, shape) => {
                    return Err(Error::Config(format!(
                        "layer {li}: {layer:?} cannot follow activation shape {shape:?}"
                    )));
                }
            };
        }

        let classes = match shape {
            Shape::Flat(d) => d,
            other => {
                return Err(Error::Config(format!(
                    "model must end in a flat class vector, got {other:?}"
                )));
            }
        };
        match spec.layers.last() {
            Some(LayerSpec::Dense { .. }) => {}
            other => {
                return Err(Error::Config(format!(
                    "model must end with a dense layer feeding the softmax head, got {other:?}"
                )));
            }
        }

        Ok(Model { spec, defs, classes, has_dropout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn has_dropout(&self) -> bool {
        self.has_dropout
    }

    /// Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases.
    /// Draw order is parameter order then flat element order, so a seed
    /// fully determines the initialization.
    pub fn init_params<E: Element>(&self, seed: u64) -> ParamStore<E> {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        for def in &self.defs {
            let tensor = if def.is_bias {
                Tensor::zeros(&def.shape)
            } else {
                let limit = (6.0 / (def.fan_in + def.fan_out) as f64).sqrt();
                let mut t = Tensor::zeros(&def.shape);
                for x in t.data_mut() {
                    *x = E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit);
                }
                t
            };
            store.insert(def.name.clone(), tensor, true).unwrap();
        }
        store
    }

    /// Verify a parameter store matches this model's layout (names and
    /// shapes); useful before running weights loaded from disk.
    pub fn check_params<E: Element>(&self, params: &ParamStore<E>) -> Result<()> {
        for def in &self.defs {
            match params.get(&def.name) {
                None => {
                    return Err(Error::Config(format!("parameter `{}` missing", def.name)));
                }
                Some(t) if t.shape() != def.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        def.name,
                        t.shape(),
                        def.shape
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn weight_names(&self, layer: usize) -> (&str, &str) {
        let mut w = "";
        let mut b = "";
        for def in &self.defs {
            if def.layer == layer {
                if def.is_bias {
                    b = &def.name;
                } else {
                    w = &def.name;
                }
            }
        }
        (w, b)
    }

    fn check_input<E: Element>(&self, images: &Tensor<E>) -> Result<usize> {
        let [c, h, w] = self.spec.input;
        match images.shape() {
            [n, ic, ih, iw] if *ic == c && *ih == h && *iw == w => Ok(*n),
            other => Err(Error::Config(format!(
                "input shape {other:?}, model expects [N, {c}, {h}, {w}]"
            ))),
        }
    }

    /// One forward pass plus, in [`Phase::Train`], the backward pass.
    ///
    /// Returns mean loss, number of correct argmax predictions and (train
    /// only) gradients aligned with the trainable parameters. The dropout
    /// stream `rng` is only consumed in training mode.
    pub fn forward_backward<E: Element>(
        &self,
        params: &ParamStore<E>,
        images: &Tensor<E>,
        labels: &[u8],
        phase: Phase,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<E>> {
        self.check_params(params)?;
        let n = self.check_input(images)?;
        let train = phase == Phase::Train;
        let mut rng = rng;
        if train && self.has_dropout && rng.is_none() {
            return Err(Error::Config(
                "training a model with dropout requires an rng".into(),
            ));
        }

        enum Tape<E> {
            Conv { input: Tensor<E> },
            Pool { in_shape: Vec<usize>, argmax: Vec<u32> },
            Relu { input: Tensor<E> },
            Flatten { in_shape: Vec<usize> },
            Dense { input: Tensor<E> },
            Dropout { mask: Vec<E> },
            Identity,
        }

        let mut act = images.clone();
        let mut tape: Vec<Tape<E>> = Vec::with_capacity(self.spec.layers.len());
        for (li, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    let out = conv2d_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                    tape.push(Tape::Conv { input: act });
                    act = out;
                }
                &LayerSpec::MaxPool { ph, pw } => {
                    let (out, argmax) = maxpool_forward(&act, ph, pw)?;
                    tape.push(Tape::Pool { in_shape: act.shape().to_vec(), argmax });
                    act = out;
                }
                LayerSpec::Relu => {
                    let out = relu_forward(&act);
                    tape.push(Tape::Relu { input: act });
                    act = out;
                }
                LayerSpec::Flatten => {
                    let in_shape = act.shape().to_vec();
                    let flat: usize = in_shape[1..].iter().product();
                    act = act.reshaped(&[n, flat])?;
                    tape.push(Tape::Flatten { in_shape });
                }
                LayerSpec::Dense { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    let out = dense_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                    tape.push(Tape::Dense { input: act });
                    act = out;
                }
                &LayerSpec::Dropout { rate } => {
                    if train {
                        let (out, mask) = dropout_train(&act, rate, rng.as_mut().unwrap())?;
                        tape.push(Tape::Dropout { mask });
                        act = out;
                    } else {
                        act = dropout_infer(&act, rate)?;
                        tape.push(Tape::Identity);
                    }
                }
            }
        }

        let (loss, grad_logits) = softmax_xent(&act, labels)?;
        let correct = count_correct(&act, labels)?;
        if !train {
            return Ok(StepOutput { loss, correct, batch: n, grads: None });
        }

        let mut grads = ParamStore::new();
        for def in &self.defs {
            grads.insert(def.name.clone(), Tensor::zeros(&def.shape), true).unwrap();
        }

        let mut g = grad_logits;
        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            g = match (layer, tape.pop().unwrap()) {
                (LayerSpec::Conv2d { .. }, Tape::Conv { input }) => {
                    let (wn, bn) = self.weight_names(li);
                    let (gi, gw, gb) = conv2d_backward(&input, params.get(wn).unwrap(), &g)?;
                    *grads.get_mut(wn).unwrap() = gw;
                    *grads.get_mut(bn).unwrap() = gb;
                    gi
                }
                (LayerSpec::MaxPool { .. }, Tape::Pool { in_shape, argmax }) => {
                    maxpool_backward(&in_shape, &argmax, &g)?
                }
                (LayerSpec::Relu, Tape::Relu { input }) => relu_backward(&input, &g)?,
                (LayerSpec::Flatten, Tape::Flatten { in_shape }) => g.reshaped(&in_shape)?,
                (LayerSpec::Dense { .. }, Tape::Dense { input }) => {
                    let (wn, bn) = self.weight_names(li);
                    let (gi, gw, gb) = dense_backward(&input, params.get(wn).unwrap(), &g)?;
                    *grads.get_mut(wn).unwrap() = gw;
                    *grads.get_mut(bn).unwrap() = gb;
                    gi
                }
                (LayerSpec::Dropout { .. }, Tape::Dropout { mask }) => {
                    dropout_backward(&mask, &g)?
                }
                (LayerSpec::Dropout { .. }, Tape::Identity) => g,
                _ => unreachable!("tape out of sync with layer list"),
            };
        }

        Ok(StepOutput { loss, correct, batch: n, grads: Some(grads) })
    }

    /// Inference-mode class probabilities, [N, classes].
    pub fn predict_probs<E: Element>(
        &self,
        params: &ParamStore<E>,
        images: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.check_params(params)?;
        let n = self.check_input(images)?;
        let mut act = images.clone();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    act = conv2d_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                }
                &LayerSpec::MaxPool { ph, pw } => {
                    act = maxpool_forward(&act, ph, pw)?.0;
                }
                LayerSpec::Relu => act = relu_forward(&act),
                LayerSpec::Flatten => {
                    let flat: usize = act.shape()[1..].iter().product();
                    act = act.reshaped(&[n, flat])?;
                }
                LayerSpec::Dense { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    act = dense_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                }
                &LayerSpec::Dropout { rate } => act = dropout_infer(&act, rate)?,
            }
        }
        softmax_probs(&act)
    }

    /// Inference-mode logits, [N, classes]. Used when ensemble members are
    /// combined before the softmax.
    pub fn predict_logits<E: Element>(
        &self,
        params: &ParamStore<E>,
        images: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.check_params(params)?;
        let n = self.check_input(images)?;
        let mut act = images.clone();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    act = conv2d_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                }
                &LayerSpec::MaxPool { ph, pw } => {
                    act = maxpool_forward(&act, ph, pw)?.0;
                }
                LayerSpec::Relu => act = relu_forward(&act),
                LayerSpec::Flatten => {
                    let flat: usize = act.shape()[1..].iter().product();
                    act = act.reshaped(&[n, flat])?;
                }
                LayerSpec::Dense { .. } => {
                    let (wn, bn) = self.weight_names(li);
                    act = dense_forward(&act, params.get(wn).unwrap(), params.get(bn).unwrap())?;
                }
                &LayerSpec::Dropout { rate } => act = dropout_infer(&act, rate)?,
            }
        }
        Ok(act)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

pub struct StepOutput<E> {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
    /// Present in training mode only.
    pub grads: Option<ParamStore<E>>,
}

impl<E> StepOutput<E> {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.batch as f64
    }
}

/// Small conv+dense network used across the test suites; 8x8 inputs.
pub fn tiny_spec(dropout: bool) -> ModelSpec {
    let mut layers = vec![
        LayerSpec::Conv2d { out_channels: 4, kh: 3, kw: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { ph: 2, pw: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out: 16 },
        LayerSpec::Relu,
    ];
    if dropout {
        layers.push(LayerSpec::Dropout { rate: 0.5 });
    }
    layers.push(LayerSpec::Dense { out: 10 });
    ModelSpec { input: [1, 8, 8], layers }
}
