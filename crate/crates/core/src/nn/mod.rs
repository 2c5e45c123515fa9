//! Fixed-weight VGG-style feature network with tapped forward evaluation and a
//! reverse sweep from per-layer cotangents back to the input image.

pub mod ops;
mod topology;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use ops::ArgmaxMap;

pub use topology::{LayerKind, LayerSpec, PoolMode, Topology};

#[derive(Debug, Clone)]
struct ConvParams<T: Real> {
    kernel: Tensor<T>,
    bias: Vec<T>,
    /// Kernel prepared for the input-gradient pass.
    flipped: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    fn new(kernel: Tensor<T>, bias: Vec<T>) -> Self {
        let flipped = ops::transpose_flip_kernel(&kernel);
        ConvParams { kernel, bias, flipped }
    }
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone)]
pub struct Network<T: Real = f32> {
    id: String,
    topology: Topology,
    pool: PoolMode,
    /// Indexed like `topology.layers()`; `Some` exactly for conv layers.
    convs: Vec<Option<ConvParams<T>>>,
}

/// Activations recorded by [`Network::forward`], plus what the reverse sweep needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real = f32> {
    input_shape: [usize; 4],
    /// Tap name → index of the layer whose output it denotes.
    taps: BTreeMap<String, usize>,
    /// Retained layer outputs (ReLU outputs, and tapped pool outputs).
    outputs: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<ArgmaxMap>>,
    pool_inputs: Vec<Option<[usize; 4]>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn activation(&self, tap: &str) -> Option<&Tensor<T>> {
        self.taps.get(tap).and_then(|&i| self.outputs[i].as_ref())
    }

    pub fn taps(&self) -> impl Iterator<Item = &str> {
        self.taps.keys().map(String::as_str)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn argmax_maps(&self) -> impl Iterator<Item = &ArgmaxMap> {
        self.argmax.iter().flatten()
    }
}

impl Network<f32> {
    /// Loads an NSTW container, detecting VGG-19, VGG-16 or the tiny stack
    /// from the tensor names present.
    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let container = Container::from_bytes(&bytes)?;
        let topology = detect_topology(&container);
        let digest = hex::encode(Sha256::digest(&bytes));
        let id = format!("{}:sha256={}", topology.name(), &digest[..16]);
        Self::from_container(&container, topology, id)
    }

    pub fn from_container(container: &Container, topology: Topology, id: impl Into<String>) -> Result<Self> {
        let expected: std::collections::HashSet<String> = topology
            .conv_layers()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect();
        if let Some(extra) = container.tensors().iter().find(|t| !expected.contains(&t.name)) {
            return Err(Error::TopologyMismatch(format!(
                "tensor `{}` is not part of the {} topology",
                extra.name,
                topology.name()
            )));
        }
        let mut convs = Vec::with_capacity(topology.layers().len());
        for layer in topology.layers() {
            if layer.kind != LayerKind::Conv3x3 {
                convs.push(None);
                continue;
            }
            let w = container.require(&format!("{}.weight", layer.name))?;
            let b = container.require(&format!("{}.bias", layer.name))?;
            let want = [layer.out_channels, layer.in_channels, 3, 3];
            if w.shape != want {
                return Err(Error::TopologyMismatch(format!(
                    "{}.weight has shape {:?}, expected {want:?}",
                    layer.name, w.shape
                )));
            }
            if b.shape != [layer.out_channels] {
                return Err(Error::TopologyMismatch(format!(
                    "{}.bias has shape {:?}, expected [{}]",
                    layer.name, b.shape, layer.out_channels
                )));
            }
            let kernel = Tensor::from_vec(want, w.data.clone())?;
            convs.push(Some(ConvParams::new(kernel, b.data.clone())));
        }
        Ok(Network {
            id: id.into(),
            topology,
            pool: PoolMode::Max,
            convs,
        })
    }

    /// Seeded random weights: kernels i.i.d. N(0, 2/fan_in), biases N(0, 0.01²).
    pub fn random(topology: Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias_dist = Normal::new(0.0f32, 0.01).unwrap();
        let convs = topology
            .layers()
            .iter()
            .map(|layer| {
                (layer.kind == LayerKind::Conv3x3).then(|| {
                    let fan_in = layer.in_channels * 9;
                    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
                    let shape = [layer.out_channels, layer.in_channels, 3, 3];
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| dist.sample(&mut rng))
                        .collect();
                    let bias = (0..layer.out_channels).map(|_| bias_dist.sample(&mut rng)).collect();
                    ConvParams::new(Tensor::from_vec(shape, data).unwrap(), bias)
                })
            })
            .collect();
        Network {
            id: format!("{}:seed={seed}", topology.name()),
            topology,
            pool: PoolMode::Max,
            convs,
        }
    }

    /// `tiny:<seed>` selects seeded TinyVGG; anything else is a container path.
    pub fn open(spec: &str) -> Result<Self> {
        match spec.strip_prefix("tiny:") {
            Some(seed) => seed
                .parse()
                .map(Self::tiny)
                .map_err(|_| Error::InvalidConfig(format!("bad TinyVGG seed in `{spec}`"))),
            None => Self::load_weights(spec),
        }
    }

    /// The desk-scale stand-in network: [`Topology::tiny`] with seeded weights.
    pub fn tiny(seed: u64) -> Self {
        Self::random(Topology::tiny(), seed)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (layer, params) in self.topology.layers().iter().zip(&self.convs) {
            if let Some(p) = params {
                c.push(format!("{}.weight", layer.name), p.kernel.shape().to_vec(), p.kernel.data().to_vec())
                    .expect("unique names");
                c.push(format!("{}.bias", layer.name), vec![p.bias.len()], p.bias.clone())
                    .expect("unique names");
            }
        }
        c
    }
}

fn detect_topology(container: &Container) -> Topology {
    let has = |prefix: &str| container.tensors().iter().any(|t| t.name.starts_with(prefix));
    if ["conv3_4.", "conv4_4.", "conv5_4."].iter().any(|p| has(p)) {
        Topology::vgg19()
    } else if ["conv1_2.", "conv4_", "conv5_"].iter().any(|p| has(p)) {
        Topology::vgg16()
    } else {
        Topology::tiny()
    }
}

impl<T: Real> Network<T> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.pool
    }

    pub fn with_pool(mut self, pool: PoolMode) -> Self {
        if pool != self.pool {
            self.pool = pool;
            if pool == PoolMode::Avg {
                self.id.push_str("+avgpool");
            }
        }
        self
    }

    pub fn kernel(&self, conv: &str) -> Option<&Tensor<T>> {
        let i = self.topology.position(conv)?;
        self.convs[i].as_ref().map(|p| &p.kernel)
    }

    pub fn bias(&self, conv: &str) -> Option<&[T]> {
        let i = self.topology.position(conv)?;
        self.convs[i].as_ref().map(|p| p.bias.as_slice())
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            id: self.id.clone(),
            topology: self.topology.clone(),
            pool: self.pool,
            convs: self
                .convs
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        ConvParams::new(
                            p.kernel.cast(),
                            p.bias.iter().map(|b| U::from_f64_lossy(b.as_f64())).collect(),
                        )
                    })
                })
                .collect(),
        }
    }

    /// Index of the layer whose output a tap name refers to. Conv names denote
    /// the post-activation map, i.e. the output of the following ReLU.
    pub fn tap_index(&self, tap: &str) -> Result<usize> {
        let i = self
            .topology
            .position(tap)
            .ok_or_else(|| Error::UnknownLayer(tap.to_string()))?;
        Ok(match self.topology.layers()[i].kind {
            LayerKind::Conv3x3 => i + 1,
            _ => i,
        })
    }

    /// Runs the stack on a `1×3×H×W` normalized image, stopping after the
    /// deepest requested tap.
    pub fn forward<S: AsRef<str>>(&self, image: &Tensor<T>, taps: &[S]) -> Result<ForwardTrace<T>> {
        if image.channels() != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {}", image.channels())));
        }
        let mut tap_map = BTreeMap::new();
        for tap in taps {
            let tap = tap.as_ref();
            tap_map.insert(tap.to_string(), self.tap_index(tap)?);
        }
        let n_layers = self.topology.layers().len();
        let mut trace = ForwardTrace {
            input_shape: image.shape(),
            outputs: vec![None; n_layers],
            argmax: vec![None; n_layers],
            pool_inputs: vec![None; n_layers],
            taps: tap_map,
        };
        let Some(&deepest) = trace.taps.values().max() else {
            return Ok(trace);
        };

        let mut current: Option<Tensor<T>> = None;
        for (i, layer) in self.topology.layers()[..=deepest].iter().enumerate() {
            let input = current.as_ref().unwrap_or(image);
            let output = match layer.kind {
                LayerKind::Conv3x3 => {
                    let p = self.convs[i].as_ref().expect("conv weights bound");
                    ops::conv2d_forward(input, &p.kernel, &p.bias)?
                }
                LayerKind::Relu => {
                    let mut out = current.take().expect("relu follows a conv");
                    ops::relu_in_place(&mut out);
                    trace.outputs[i] = Some(out.clone());
                    out
                }
                LayerKind::Pool2x2 => {
                    trace.pool_inputs[i] = Some(input.shape());
                    let out = match self.pool {
                        PoolMode::Max => {
                            let (out, arg) = ops::maxpool_forward(input)?;
                            trace.argmax[i] = Some(arg);
                            out
                        }
                        PoolMode::Avg => ops::avgpool_forward(input)?,
                    };
                    if trace.taps.values().any(|&t| t == i) {
                        trace.outputs[i] = Some(out.clone());
                    }
                    out
                }
            };
            current = Some(output);
        }
        Ok(trace)
    }

    /// Gradient with respect to the input image of `Σ <cotangent, activation>`
    /// over the given taps, in one reverse sweep.
    pub fn backward(&self, trace: &ForwardTrace<T>, cotangents: &BTreeMap<String, Tensor<T>>) -> Result<Tensor<T>> {
        let mut injected: BTreeMap<usize, Vec<&Tensor<T>>> = BTreeMap::new();
        for (name, cot) in cotangents {
            let activation = trace
                .activation(name)
                .ok_or_else(|| Error::MissingTraceActivation(name.clone()))?;
            if activation.shape() != cot.shape() {
                return Err(Error::shape(format!(
                    "cotangent for `{name}` has shape {:?}, activation is {:?}",
                    cot.shape(),
                    activation.shape()
                )));
            }
            injected.entry(trace.taps[name]).or_default().push(cot);
        }
        let Some(&start) = injected.keys().next_back() else {
            return Ok(Tensor::zeros(trace.input_shape));
        };

        let mut grad: Option<Tensor<T>> = None;
        for i in (0..=start).rev() {
            if let Some(cots) = injected.get(&i) {
                for cot in cots {
                    match grad.as_mut() {
                        Some(g) => g.add_scaled(cot, T::one())?,
                        None => grad = Some((*cot).clone()),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            let layer = &self.topology.layers()[i];
            grad = Some(match layer.kind {
                LayerKind::Relu => {
                    let out = trace.outputs[i]
                        .as_ref()
                        .ok_or_else(|| Error::MissingTraceActivation(layer.name.clone()))?;
                    ops::relu_backward(&g, out)?
                }
                LayerKind::Conv3x3 => {
                    let p = self.convs[i].as_ref().expect("conv weights bound");
                    ops::conv2d_backward_input_with(&g, &p.flipped)?
                }
                LayerKind::Pool2x2 => match self.pool {
                    PoolMode::Max => {
                        let arg = trace.argmax[i]
                            .as_ref()
                            .ok_or_else(|| Error::MissingTraceActivation(layer.name.clone()))?;
                        ops::maxpool_backward(&g, arg)?
                    }
                    PoolMode::Avg => {
                        let shape = trace.pool_inputs[i]
                            .ok_or_else(|| Error::MissingTraceActivation(layer.name.clone()))?;
                        ops::avgpool_backward(&g, shape)?
                    }
                },
            });
        }
        Ok(grad.unwrap_or_else(|| Tensor::zeros(trace.input_shape)))
    }
}
