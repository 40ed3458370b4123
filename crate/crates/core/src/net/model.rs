//! The siamese overlap/yaw network: shared legs, a delta head regressing the
//! overlap and a correlation head estimating the relative yaw.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    argmax, conv2d_backward, conv2d_forward, correlation, correlation_backward, delta_backward,
    delta_conv_fused, delta_layer, logistic, ConvGrad, ConvLayer, ConvSpec, Dense,
};
use super::loss::{loss_combined, loss_overlap, loss_overlap_grad, loss_yaw, loss_yaw_grad, OverlapLossParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::projection::ScanImage;
use crate::tensor_blob::TensorBlob;

/// Input cue derived from a range image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Depth,
    Normals,
    Intensity,
    Semantics,
}

impl Channel {
    pub fn width(self) -> usize {
        match self {
            Channel::Depth | Channel::Intensity => 1,
            Channel::Normals | Channel::Semantics => 3,
        }
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "depth" | "range" => Ok(Channel::Depth),
            "normals" | "normal" => Ok(Channel::Normals),
            "intensity" | "remission" => Ok(Channel::Intensity),
            "semantics" | "semantic" => Ok(Channel::Semantics),
            other => Err(Error::Config(format!("unknown channel `{other}`"))),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Depth => "depth",
            Channel::Normals => "normals",
            Channel::Intensity => "intensity",
            Channel::Semantics => "semantics",
        })
    }
}

/// Non-empty, ordered, duplicate-free set of input cues.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Channel>", into = "Vec<Channel>")]
pub struct ChannelSet(Vec<Channel>);

impl ChannelSet {
    pub fn new(mut channels: Vec<Channel>) -> Result<Self> {
        channels.sort();
        channels.dedup();
        if channels.is_empty() {
            return Err(Error::Config("channel set must not be empty".into()));
        }
        Ok(ChannelSet(channels))
    }

    pub fn all() -> Self {
        ChannelSet(vec![Channel::Depth, Channel::Normals, Channel::Intensity, Channel::Semantics])
    }

    pub fn geometric() -> Self {
        ChannelSet(vec![Channel::Depth, Channel::Normals])
    }

    pub fn channels(&self) -> &[Channel] {
        &self.0
    }

    pub fn contains(&self, c: Channel) -> bool {
        self.0.contains(&c)
    }

    /// Number of tensor channels (`D`).
    pub fn depth(&self) -> usize {
        self.0.iter().map(|c| c.width()).sum()
    }
}

impl TryFrom<Vec<Channel>> for ChannelSet {
    type Error = Error;
    fn try_from(v: Vec<Channel>) -> Result<Self> {
        ChannelSet::new(v)
    }
}

impl From<ChannelSet> for Vec<Channel> {
    fn from(c: ChannelSet) -> Self {
        c.0
    }
}

impl FromStr for ChannelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ChannelSet::new(s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>()?)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

/// Stacks the selected cues into an `h × w × D` tensor. Invalid pixels are
/// zero in every channel; depth is divided by the projection's max range.
pub fn image_to_input(img: &ScanImage, channels: &ChannelSet) -> Result<Tensor> {
    let d = channels.depth();
    let (h, w) = (img.height(), img.width());
    let mut t = Tensor::zeros(h, w, d);
    if channels.contains(Channel::Semantics) && img.semantic.is_none() {
        return Err(Error::Config("semantics channel requested but the image has no semantic map".into()));
    }
    let inv_range = 1.0 / img.config.max_range;
    for i in 0..h * w {
        if !img.valid[i] {
            continue;
        }
        let px = &mut t.data[i * d..(i + 1) * d];
        let mut c = 0;
        for ch in channels.channels() {
            match ch {
                Channel::Depth => {
                    px[c] = img.range[i] * inv_range;
                }
                Channel::Normals => {
                    let n = img.normal[i];
                    px[c..c + 3].copy_from_slice(&[n.x, n.y, n.z]);
                }
                Channel::Intensity => {
                    px[c] = img.intensity[i];
                }
                Channel::Semantics => {
                    let s = img.semantic.as_ref().expect("checked above")[i];
                    px[c..c + 3].copy_from_slice(&s);
                }
            }
            c += ch.width();
        }
    }
    Ok(t)
}

/// Layer geometry of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Columns appended cyclically to the input before the first leg layer.
    pub wrap_columns: usize,
    pub leg: Vec<ConvSpec>,
    pub head: Vec<ConvSpec>,
}

/// Output shapes of every layer for a given architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub leg: Vec<[usize; 3]>,
    pub delta: [usize; 3],
    pub head: Vec<[usize; 3]>,
    pub dense_inputs: usize,
}

impl Architecture {
    /// The full-size network on `64 × 900 × D` inputs (11 leg layers, 3 head convolutions).
    pub fn full(input_channels: usize) -> Self {
        Architecture {
            input_height: 64,
            input_width: 900,
            input_channels,
            wrap_columns: 0,
            leg: vec![
                ConvSpec::new((2, 2), (5, 15), 16),
                ConvSpec::new((2, 1), (3, 15), 32),
                ConvSpec::new((2, 1), (3, 15), 64),
                ConvSpec::new((2, 1), (3, 12), 64),
                ConvSpec::new((2, 1), (2, 9), 128),
                ConvSpec::new((1, 1), (1, 9), 128),
                ConvSpec::new((1, 1), (1, 9), 128),
                ConvSpec::new((1, 1), (1, 9), 128),
                ConvSpec::new((1, 1), (1, 7), 128),
                ConvSpec::new((1, 1), (1, 5), 128),
                ConvSpec::new((1, 1), (1, 3), 128),
            ],
            head: vec![
                ConvSpec::new((1, 15), (1, 15), 64),
                ConvSpec::new((15, 1), (15, 1), 128),
                ConvSpec::new((1, 1), (3, 3), 256),
            ],
        }
    }

    /// Desk-scale variant on `16 × 360 × D` images: one image column per
    /// degree, cyclic input padding so that a column roll of the input is an
    /// exact column roll of the `1 × 360 × 8` feature volume. The head keeps
    /// the same stride pattern (360 → 24 → 24 → 22).
    pub fn compact(input_channels: usize) -> Self {
        Architecture {
            input_height: 16,
            input_width: 360,
            input_channels,
            wrap_columns: 10,
            leg: vec![
                ConvSpec::new((2, 1), (4, 5), 8),
                ConvSpec::new((2, 1), (3, 5), 8),
                ConvSpec::new((1, 1), (3, 3), 8),
            ],
            head: vec![
                ConvSpec::new((1, 15), (1, 15), 16),
                ConvSpec::new((15, 1), (15, 1), 16),
                ConvSpec::new((1, 1), (3, 3), 8),
            ],
        }
    }

    pub fn leg_input_shape(&self) -> [usize; 3] {
        [self.input_height, self.input_width + self.wrap_columns, self.input_channels]
    }

    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let mut shape = self.leg_input_shape();
        let mut leg = Vec::with_capacity(self.leg.len());
        for spec in &self.leg {
            shape = spec.output_shape(shape)?;
            leg.push(shape);
        }
        if self.leg.is_empty() || shape[0] != 1 {
            return Err(Error::Config(format!("leg output {shape:?} must be a single row")));
        }
        let n = shape[0] * shape[1];
        let delta = [n, n, shape[2]];
        let mut shape = delta;
        let mut head = Vec::with_capacity(self.head.len());
        for spec in &self.head {
            shape = spec.output_shape(shape)?;
            head.push(shape);
        }
        Ok(ShapeTrace { leg, delta, head, dense_inputs: shape.iter().product() })
    }

    /// Feature-volume columns; each column spans `360 / columns` degrees.
    pub fn feature_columns(&self) -> Result<usize> {
        Ok(self.shape_trace()?.leg.last().expect("non-empty leg")[1])
    }
}

/// Overlap and yaw estimate for an ordered scan pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub overlap: f64,
    /// Whole degrees in `0..360`.
    pub yaw: u16,
}

/// Trainable parameters plus the metadata needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: Architecture,
    pub channels: ChannelSet,
    pub leg: Vec<ConvLayer>,
    pub head: Vec<ConvLayer>,
    pub dense: Dense,
    /// Offset added to every scaled correlation value before the yaw loss.
    pub yaw_bias: f64,
    pub seed: u64,
    pub epoch: usize,
}

/// Correlation-head output: raw scores per column and the arg-max yaw.
pub fn correlation_head(l0: &Tensor, l1: &Tensor) -> Result<(Vec<f64>, u16)> {
    let corr = correlation(l0, l1)?;
    let k = argmax(&corr);
    Ok((corr.clone(), column_to_degrees(k, corr.len())))
}

fn column_to_degrees(k: usize, columns: usize) -> u16 {
    ((k as f64 * 360.0 / columns as f64).round() as u64 % 360) as u16
}

fn degrees_to_column(deg: u16, columns: usize) -> usize {
    ((deg as f64 * columns as f64 / 360.0).round() as usize) % columns
}

/// Supervision for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTarget {
    pub overlap: f64,
    /// Present only when the pair should contribute a yaw loss.
    pub yaw: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub alpha: f64,
    pub overlap: OverlapLossParams,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { alpha: 5.0, overlap: OverlapLossParams::default() }
    }
}

/// Loss terms and predictions from a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub total: f64,
    pub overlap_loss: f64,
    pub yaw_loss: Option<f64>,
    pub predicted_overlap: f64,
    pub predicted_yaw: u16,
}

struct LegTrace {
    /// Padded input followed by every layer output.
    activations: Vec<Tensor>,
}

impl LegTrace {
    fn features(&self) -> &Tensor {
        self.activations.last().expect("non-empty trace")
    }
}

impl ModelWeights {
    /// Seeded He initialization.
    pub fn init(arch: Architecture, channels: ChannelSet, seed: u64) -> Result<Self> {
        if channels.depth() != arch.input_channels {
            return Err(Error::Config(format!(
                "channel set {channels} has depth {} but the architecture expects {}",
                channels.depth(),
                arch.input_channels
            )));
        }
        let trace = arch.shape_trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = arch.input_channels;
        let mut leg = Vec::new();
        for spec in &arch.leg {
            leg.push(ConvLayer::he_init(*spec, in_c, &mut rng));
            in_c = spec.filters;
        }
        let mut head = Vec::new();
        let mut in_c = trace.delta[2];
        for spec in &arch.head {
            head.push(ConvLayer::he_init(*spec, in_c, &mut rng));
            in_c = spec.filters;
        }
        let dense = Dense::init(trace.dense_inputs, &mut rng);
        // start the yaw logits near the one-in-W prior
        let columns = trace.leg.last().expect("non-empty leg")[1];
        let yaw_bias = -((columns.max(2) - 1) as f64).ln();
        Ok(ModelWeights { arch, channels, leg, head, dense, yaw_bias, seed, epoch: 0 })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let a = &self.arch;
        if input.channels != a.input_channels {
            return Err(Error::Config(format!(
                "input has {} channels but the model was built for {} ({})",
                input.channels, a.input_channels, self.channels
            )));
        }
        if input.height != a.input_height || input.width != a.input_width {
            return Err(Error::Shape(format!(
                "input is {}×{} but the model expects {}×{}",
                input.height, input.width, a.input_height, a.input_width
            )));
        }
        Ok(())
    }

    fn leg_trace(&self, input: &Tensor) -> Result<LegTrace> {
        self.check_input(input)?;
        let mut activations = vec![input.wrap_pad_columns(self.arch.wrap_columns)];
        for layer in &self.leg {
            let next = conv2d_forward(activations.last().unwrap(), layer)?;
            activations.push(next);
        }
        Ok(LegTrace { activations })
    }

    /// Feature volume of one input; cacheable per scan.
    pub fn leg_forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.wrap_pad_columns(self.arch.wrap_columns);
        for layer in &self.leg {
            x = conv2d_forward(&x, layer)?;
        }
        Ok(x)
    }

    /// Overlap estimate in `[0, 1]` from two feature volumes. The delta tensor
    /// is never materialized here.
    pub fn delta_head_forward(&self, l0: &Tensor, l1: &Tensor) -> Result<f64> {
        let mut x = delta_conv_fused(l0, l1, &self.head[0])?;
        for layer in &self.head[1..] {
            x = conv2d_forward(&x, layer)?;
        }
        Ok(logistic(self.dense.forward(&x.data)?))
    }

    /// Delta head applied to an explicit delta tensor (materialized path).
    pub fn delta_head_from_delta(&self, delta: &Tensor) -> Result<f64> {
        let mut x = delta.clone();
        for layer in &self.head {
            x = conv2d_forward(&x, layer)?;
        }
        Ok(logistic(self.dense.forward(&x.data)?))
    }

    /// Prediction from cached leg features of scans `a` and `b`. The yaw
    /// follows the convention of `T_a⁻¹·T_b`.
    pub fn predict_from_features(&self, features_a: &Tensor, features_b: &Tensor) -> Result<PairPrediction> {
        let overlap = self.delta_head_forward(features_a, features_b)?;
        let (_, yaw) = correlation_head(features_b, features_a)?;
        Ok(PairPrediction { overlap, yaw })
    }

    pub fn infer_pair(&self, img_a: &ScanImage, img_b: &ScanImage) -> Result<PairPrediction> {
        let fa = self.leg_forward(&image_to_input(img_a, &self.channels)?)?;
        let fb = self.leg_forward(&image_to_input(img_b, &self.channels)?)?;
        self.predict_from_features(&fa, &fb)
    }

    /// Forward pass with loss; when `grad` is given, gradients of the total
    /// loss are accumulated into it.
    pub fn pair_loss(
        &self,
        input_a: &Tensor,
        input_b: &Tensor,
        target: &PairTarget,
        params: &LossParams,
        grad: Option<&mut ModelWeights>,
    ) -> Result<PairLoss> {
        let trace_a = self.leg_trace(input_a)?;
        let trace_b = self.leg_trace(input_b)?;
        let (fa, fb) = (trace_a.features(), trace_b.features());

        let delta = delta_layer(fa, fb)?;
        let mut head_acts = vec![delta];
        for layer in &self.head {
            let next = conv2d_forward(head_acts.last().unwrap(), layer)?;
            head_acts.push(next);
        }
        let flat = &head_acts.last().unwrap().data;
        let z = self.dense.forward(flat)?;
        let pred = logistic(z);
        let overlap_loss = loss_overlap(pred, target.overlap, &params.overlap);

        let columns = fa.width;
        let corr = correlation(fb, fa)?;
        // logits are the correlation divided by the column count, plus a bias
        let scale = 1.0 / columns as f64;
        let logits: Vec<f64> = corr.iter().map(|c| c * scale + self.yaw_bias).collect();
        let predicted_yaw = column_to_degrees(argmax(&corr), columns);
        let yaw_bin = target.yaw.map(|y| degrees_to_column(y, columns));
        let yaw_loss = yaw_bin.map(|bin| loss_yaw(&logits, bin));
        let result = PairLoss {
            total: loss_combined(overlap_loss, yaw_loss, params.alpha),
            overlap_loss,
            yaw_loss,
            predicted_overlap: pred,
            predicted_yaw,
        };

        let Some(grad) = grad else { return Ok(result) };

        // delta head
        let dz = loss_overlap_grad(pred, target.overlap, &params.overlap) * pred * (1.0 - pred);
        let last = head_acts.last().unwrap();
        let mut upstream = Tensor::from_vec(last.height, last.width, last.channels, self.dense.backward(flat, dz, &mut grad.dense))?;
        for (i, layer) in self.head.iter().enumerate().rev() {
            let mut cg = ConvGrad {
                weights: std::mem::take(&mut grad.head[i].weights),
                bias: std::mem::take(&mut grad.head[i].bias),
            };
            let gx = conv2d_backward(&head_acts[i], &head_acts[i + 1], &upstream, layer, &mut cg, true);
            grad.head[i].weights = cg.weights;
            grad.head[i].bias = cg.bias;
            upstream = gx.expect("input gradient requested");
        }
        let (mut dfa, mut dfb) = delta_backward(fa, fb, &upstream);

        // correlation head
        if let Some(bin) = yaw_bin {
            let g: Vec<f64> = loss_yaw_grad(&logits, bin).into_iter().map(|v| v * params.alpha).collect();
            grad.yaw_bias += g.iter().sum::<f64>();
            let g: Vec<f64> = g.into_iter().map(|v| v * scale).collect();
            let (dfb_c, dfa_c) = correlation_backward(fb, fa, &g);
            dfa.add_assign(&dfa_c);
            dfb.add_assign(&dfb_c);
        }

        self.leg_backward(&trace_a, dfa, grad);
        self.leg_backward(&trace_b, dfb, grad);
        Ok(result)
    }

    fn leg_backward(&self, trace: &LegTrace, grad_features: Tensor, grad: &mut ModelWeights) {
        let mut upstream = grad_features;
        for (i, layer) in self.leg.iter().enumerate().rev() {
            let mut cg = ConvGrad {
                weights: std::mem::take(&mut grad.leg[i].weights),
                bias: std::mem::take(&mut grad.leg[i].bias),
            };
            let gx = conv2d_backward(&trace.activations[i], &trace.activations[i + 1], &upstream, layer, &mut cg, i > 0);
            grad.leg[i].weights = cg.weights;
            grad.leg[i].bias = cg.bias;
            match gx {
                Some(g) => upstream = g,
                None => break,
            }
        }
    }

    /// Same layout with every parameter set to zero (gradient accumulator).
    pub fn zeros_like(&self) -> ModelWeights {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every trainable parameter block in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.leg.iter().chain(&self.head) {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.dense.weights);
        out.push(std::slice::from_ref(&self.dense.bias));
        out.push(std::slice::from_ref(&self.yaw_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.leg.iter_mut().chain(self.head.iter_mut()) {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.dense.weights);
        out.push(std::slice::from_mut(&mut self.dense.bias));
        out.push(std::slice::from_mut(&mut self.yaw_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, layers) in [("leg", &self.leg), ("head", &self.head)] {
            for i in 0..layers.len() {
                names.push(format!("{prefix}.{i}.weights"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        names.extend(["dense.weights", "dense.bias", "yaw_bias"].map(String::from));
        names
    }

    /// Writes `<stem>.tnsr` (all parameters, flat) and `<stem>.json` (manifest).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut data = Vec::with_capacity(self.param_count());
        let mut blocks = Vec::new();
        for (name, p) in self.block_names().into_iter().zip(self.params()) {
            blocks.push(BlockEntry { name, offset: data.len(), len: p.len() });
            data.extend(p.iter().map(|v| *v as f32));
        }
        let manifest = WeightsManifest {
            architecture: self.arch.clone(),
            channels: self.channels.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tangent_note: None,
            blocks,
        };
        let n = data.len();
        TensorBlob::new(vec![n], vec![], data)?.save(stem.with_extension("tnsr"))?;
        let json_path = stem.with_extension("json");
        std::fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<ModelWeights> {
        let stem = stem.as_ref();
        let json_path = stem.with_extension("json");
        let bytes = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: WeightsManifest = serde_json::from_slice(&bytes)?;
        let blob = TensorBlob::load(stem.with_extension("tnsr"))?;
        let mut w = ModelWeights::init(manifest.architecture, manifest.channels, manifest.seed)?;
        w.epoch = manifest.epoch;
        let names = w.block_names();
        if names.len() != manifest.blocks.len() {
            return Err(Error::malformed(&json_path, "parameter block count does not match the architecture"));
        }
        for ((name, dst), entry) in names.iter().zip(w.params_mut()).zip(&manifest.blocks) {
            if *name != entry.name || dst.len() != entry.len || entry.offset + entry.len > blob.data.len() {
                return Err(Error::malformed(&json_path, format!("block `{}` does not match the architecture", entry.name)));
            }
            for (d, s) in dst.iter_mut().zip(&blob.data[entry.offset..entry.offset + entry.len]) {
                *d = *s as f64;
            }
        }
        Ok(w)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    architecture: Architecture,
    channels: ChannelSet,
    seed: u64,
    epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tangent_note: Option<String>,
    blocks: Vec<BlockEntry>,
}
