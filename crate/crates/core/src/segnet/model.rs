use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvParams, Graph, NodeId};
use crate::cca::{rcca_forward, reduced_channels, CcaNodes};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// How the decoder head brings logits back to input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentorConfig {
    /// `[H, W]` in pixels.
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Power of two; the encoder stacks `log2(encoder_stride)` stride-2 convolutions.
    #[serde(default = "default_encoder_stride")]
    pub encoder_stride: usize,
    #[serde(default = "default_cca_passes")]
    pub cca_passes: usize,
    #[serde(default)]
    pub upsample: Upsample,
    pub seed: u64,
}

fn default_input_size() -> [usize; 2] {
    [64, 64]
}
fn default_base_channels() -> usize {
    16
}
fn default_encoder_stride() -> usize {
    4
}
fn default_cca_passes() -> usize {
    2
}

impl SegmentorConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            input_size: default_input_size(),
            base_channels: default_base_channels(),
            encoder_stride: default_encoder_stride(),
            cca_passes: default_cca_passes(),
            upsample: Upsample::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        let s = self.encoder_stride;
        if s < 2 || !s.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("encoder_stride {s} must be a power of two >= 2")));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidConfig(format!("input size {h}x{w} is not divisible by encoder stride {s}")));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.cca_passes < 1 {
            return Err(Error::InvalidConfig("cca_passes must be >= 1".into()));
        }
        Ok(())
    }

    fn encoder_layers(&self) -> usize {
        self.encoder_stride.trailing_zeros() as usize
    }

    /// Channel count entering the attention stage.
    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.encoder_layers() - 1)
    }

    /// `(name, shape, fan_in)` of every parameter in forward order. Biases have fan-in 0.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for i in 0..self.encoder_layers() {
            let cout = self.base_channels << i;
            out.push((format!("encoder.{i}.weight"), vec![cout, cin, 3, 3], cin * 9));
            out.push((format!("encoder.{i}.bias"), vec![cout], 0));
            cin = cout;
        }
        let cr = reduced_channels(cin);
        out.push(("cca.query".into(), vec![cr, cin, 1, 1], cin));
        out.push(("cca.key".into(), vec![cr, cin, 1, 1], cin));
        out.push(("cca.value".into(), vec![cin, cin, 1, 1], cin));
        out.push(("head.weight".into(), vec![1, cin, 1, 1], cin));
        out.push(("head.bias".into(), vec![1], 0));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Sigmoid outputs, `N×1×H×W`, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Tensor,
}

impl ProbabilityMap {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A configured segmentor and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentor {
    config: SegmentorConfig,
    params: Vec<Param>,
}

pub fn build_segmentor(config: &SegmentorConfig) -> Result<Segmentor> {
    Segmentor::build(config)
}

impl Segmentor {
    /// Fresh parameters: fan-in scaled normal weights (`std = sqrt(2/fan_in)`), zero biases.
    pub fn build(config: &SegmentorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let value = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config: config.clone(), params })
    }

    /// Wraps existing parameters after checking them against the config's layout.
    pub fn from_params(config: &SegmentorConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(shape_err!("expected {} parameter tensors, got {}", layout.len(), params.len()));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.value.shape() {
                return Err(shape_err!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                ));
            }
        }
        Ok(Self { config: config.clone(), params })
    }

    pub fn config(&self) -> &SegmentorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a trainable leaf, in layout order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Builds the forward pass on `input` (`N×1×H×W`) and returns the probability node.
    pub fn forward(&self, g: &mut Graph, input: NodeId, nodes: &[NodeId]) -> Result<NodeId> {
        let (_, c, h, w) = g.value(input).dims4()?;
        let [eh, ew] = self.config.input_size;
        if c != 1 || (h, w) != (eh, ew) {
            return Err(shape_err!("segmentor expects N×1×{eh}×{ew} input, got {:?}", g.value(input).shape()));
        }
        if nodes.len() != self.params.len() {
            return Err(shape_err!("expected {} parameter nodes", self.params.len()));
        }
        let layers = self.config.encoder_layers();
        let enc = ConvParams { stride: 2, padding: 1, dilation: 1 };
        let mut x = input;
        for i in 0..layers {
            x = g.conv2d(x, nodes[2 * i], Some(nodes[2 * i + 1]), enc)?;
            x = g.relu(x);
        }
        let at = 2 * layers;
        let cca = CcaNodes { query: nodes[at], key: nodes[at + 1], value: nodes[at + 2] };
        x = rcca_forward(g, x, &cca, self.config.cca_passes)?;
        let logits = g.conv2d(x, nodes[at + 3], Some(nodes[at + 4]), ConvParams::default())?;
        let up = match self.config.upsample {
            Upsample::Nearest => g.upsample_nearest(logits, self.config.encoder_stride)?,
            Upsample::Bilinear => g.upsample_bilinear(logits, self.config.encoder_stride)?,
        };
        Ok(g.sigmoid(up))
    }

    /// Inference on an `N×1×H×W` batch.
    pub fn predict(&self, images: &Tensor) -> Result<ProbabilityMap> {
        let n = images.dims4()?.0;
        let mut parts = Vec::new();
        for start in (0..n).step_by(8) {
            let chunk =
                Tensor::stack(&(start..n.min(start + 8)).map(|i| images.sample(i)).collect::<Result<Vec<_>>>()?)?;
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
            let x = g.constant(chunk);
            let y = self.forward(&mut g, x, &nodes)?;
            parts.push(g.value(y).clone());
        }
        Ok(ProbabilityMap { values: Tensor::stack(&parts)? })
    }

    /// Predicts and binarizes each image of the batch.
    pub fn segment(&self, images: &Tensor, threshold: f64) -> Result<Vec<Mask>> {
        binarize(&self.predict(images)?, threshold)
    }
}

/// Foreground where `p >= threshold`.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<Vec<Mask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(arg_err!("threshold {threshold} must lie in (0, 1)"));
    }
    let (n, _, h, w) = p.values.dims4()?;
    (0..n)
        .map(|i| {
            let plane = &p.values.data()[i * h * w..(i + 1) * h * w];
            Mask::new(h, w, plane.iter().map(|&v| (v >= threshold) as u8).collect())
        })
        .collect()
}
