//! The implicit segmentation model: a strided CNN encoder producing a feature
//! pyramid, per-point feature assembly by trilinear interpolation, and a
//! two-layer MLP decoding class probabilities at continuous coordinates.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{combined_loss, Adam, Graph, LossReport, LossWeights, NodeId, Parameter};
use crate::tensor::{Real, Tensor};
use crate::volume::{random_coords, uniform_grid_coords, CoordBatch, LabelGrid, TrilinearStencil, Volume};

/// Points per inference chunk; bounds memory, never changes results.
pub const CHUNK: usize = 8192;
/// Default number of sampled training points per step (16³).
pub const DEFAULT_POINTS: usize = 4096;
pub const DEFAULT_HIDDEN: usize = 128;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 stage; the stem uses the first width.
    pub widths: Vec<usize>,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, widths: Vec<usize>) -> Result<Self> {
        let cfg = Self { in_channels, widths };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_channels(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("encoder needs at least one input channel"));
        }
        if self.widths.len() < 2 {
            return Err(Error::invalid("encoder needs at least two pyramid levels"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        Ok(())
    }

    /// Width of a point encoding: all pyramid channels plus `(x, y, z)`.
    pub fn feature_width(&self) -> usize {
        self.widths.iter().sum::<usize>() + 3
    }

    /// `(c_in, c_out, stride)` of every convolution, stem first.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut layers = vec![(self.in_channels, self.widths[0], 1)];
        let mut prev = self.widths[0];
        for &w in &self.widths {
            layers.push((prev, w, 2));
            prev = w;
        }
        layers
    }

    /// Spatial extents of the pyramid levels for an input extent.
    pub fn pyramid_extents(&self, extent: [usize; 3]) -> Vec<[usize; 3]> {
        let mut e = extent;
        self.widths
            .iter()
            .map(|_| {
                e = e.map(|n| n.div_ceil(2));
                e
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::with_channels(in_channels),
            hidden: DEFAULT_HIDDEN,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 {
            return Err(Error::invalid("decoder hidden width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }
}

/// Encoder outputs `F_1..F_n`, each `(c_i, d_i, h_i, w_i)`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn to_volumes(&self) -> Result<Vec<Volume>> {
        self.levels.iter().map(Volume::from_tensor).collect()
    }
}

/// Convolution weights and bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
}

impl<T: Real> ConvLayer<T> {
    pub(crate) fn he<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::he_normal(&[c_out, c_in, k, k, k], c_in * k * k * k, rng),
            bias: Parameter::zeros(&[c_out]),
            stride,
        }
    }

    pub(crate) fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            weight: Parameter::zeros(&[c_out, c_in, k, k, k]),
            bias: Parameter::zeros(&[c_out]),
            stride,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv3d(x, &self.weight.value, &self.bias.value, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> DenseLayer<T> {
    fn he<R: Rng + ?Sized>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::he_normal(&[f_in, f_out], f_in, rng),
            bias: Parameter::zeros(&[f_out]),
        }
    }

    fn zeros(f_in: usize, f_out: usize) -> Self {
        Self {
            weight: Parameter::zeros(&[f_in, f_out]),
            bias: Parameter::zeros(&[f_out]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    /// Stem first, then one stride-2 layer per pyramid level.
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers()
            .into_iter()
            .map(|(ci, co, s)| ConvLayer::he(ci, co, KERNEL, s, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers()
            .into_iter()
            .map(|(ci, co, s)| ConvLayer::zeros(ci, co, KERNEL, s))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn count_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(
                "encoder input channels",
                self.config.in_channels,
                x.channels(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Volume) -> Result<FeaturePyramid<T>> {
        self.check_input(x)?;
        let mut h = x.to_tensor::<T>();
        let mut levels = Vec::with_capacity(self.layers.len() - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&h)?;
            h = Tensor::new(out.shape(), ops::relu(out.data()))?;
            if i > 0 {
                levels.push(h.clone());
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// Records the encoder in `g`; `ids` holds weight/bias node pairs in
    /// layer order. Returns the pyramid level nodes.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: NodeId, ids: &[NodeId]) -> Result<Vec<NodeId>> {
        encode_graph(&self.config, g, x, ids)
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = layer_name(i);
            out.push((format!("encoder.{name}.weight"), &l.weight));
            out.push((format!("encoder.{name}.bias"), &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn layer_name(i: usize) -> String {
    if i == 0 {
        "stem".to_string()
    } else {
        format!("stage{}", i - 1)
    }
}

fn encode_graph<T: Real>(config: &EncoderConfig, g: &mut Graph<T>, x: NodeId, ids: &[NodeId]) -> Result<Vec<NodeId>> {
    let layers = config.layers();
    if ids.len() != 2 * layers.len() {
        return Err(Error::shape("encoder parameter nodes", 2 * layers.len(), ids.len()));
    }
    let mut h = x;
    let mut levels = Vec::with_capacity(layers.len() - 1);
    for (i, &(_, _, stride)) in layers.iter().enumerate() {
        let c = g.conv3d(h, ids[2 * i], ids[2 * i + 1], stride)?;
        h = g.relu(c);
        if i > 0 {
            levels.push(h);
        }
    }
    Ok(levels)
}

/// Encoder `f` plus MLP decoder `g`.
#[derive(Clone, Debug)]
pub struct ImpulseModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub fc1: DenseLayer<T>,
    pub fc2: DenseLayer<T>,
}

impl<T: Real> ImpulseModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone(), rng)?;
        let f = config.encoder.feature_width();
        let fc1 = DenseLayer::he(f, config.hidden, rng);
        let fc2 = DenseLayer::he(config.hidden, config.num_classes, rng);
        Ok(Self {
            config,
            encoder,
            fc1,
            fc2,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::zeros(config.encoder.clone())?;
        let f = config.encoder.feature_width();
        Ok(Self {
            fc1: DenseLayer::zeros(f, config.hidden),
            fc2: DenseLayer::zeros(config.hidden, config.num_classes),
            encoder,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn count_params(&self) -> ParamCounts {
        let encoder = self.encoder.count_params();
        let decoder = [&self.fc1, &self.fc2]
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum();
        ParamCounts {
            encoder,
            decoder,
            total: encoder + decoder,
        }
    }

    pub fn encode(&self, x: &Volume) -> Result<FeaturePyramid<T>> {
        self.encoder.encode(x)
    }

    /// Point encodings `[F_1(p); ...; F_n(p); x; y; z]`, one row per point.
    pub fn point_features(&self, pyramid: &FeaturePyramid<T>, batch: &CoordBatch) -> Result<Tensor<T>> {
        point_features(pyramid, batch)
    }

    /// Class probabilities for every point of `batch`, `|batch| x K`.
    pub fn predict(&self, x: &Volume, batch: &CoordBatch) -> Result<Tensor<T>> {
        let pyramid = self.encode(x)?;
        self.predict_from(&pyramid, batch)
    }

    /// Like [`predict`](Self::predict) with a precomputed pyramid.
    pub fn predict_from(&self, pyramid: &FeaturePyramid<T>, batch: &CoordBatch) -> Result<Tensor<T>> {
        if batch.is_empty() {
            return Err(Error::invalid("cannot predict an empty batch"));
        }
        let k = self.num_classes();
        let mut out = Vec::with_capacity(batch.len() * k);
        let mut start = 0;
        while start < batch.len() {
            let end = (start + CHUNK).min(batch.len());
            let chunk = batch.slice(start..end);
            let feats = point_features(pyramid, &chunk)?;
            let h = ops::linear(&feats, &self.fc1.weight.value, &self.fc1.bias.value)?;
            let h = Tensor::new(h.shape(), ops::relu(h.data()))?;
            let logits = ops::linear(&h, &self.fc2.weight.value, &self.fc2.bias.value)?;
            out.extend_from_slice(ops::softmax_rows(&logits)?.data());
            start = end;
        }
        Tensor::new(&[batch.len(), k], out)
    }

    /// Argmax labels on the align-corners lattice of `out_extent`,
    /// independent of the input extent.
    pub fn reconstruct(&self, x: &Volume, out_extent: [usize; 3]) -> Result<LabelGrid> {
        let batch = uniform_grid_coords(out_extent)?;
        let probs = self.predict(x, &batch)?;
        let k = self.num_classes();
        let labels = ops::argmax_rows(probs.data(), k).into_iter().map(|c| c as u8).collect();
        LabelGrid::new(out_extent, k, labels)
    }

    /// Named parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = self.encoder.params();
        out.push(("decoder.fc1.weight".into(), &self.fc1.weight));
        out.push(("decoder.fc1.bias".into(), &self.fc1.bias));
        out.push(("decoder.fc2.weight".into(), &self.fc2.weight));
        out.push(("decoder.fc2.bias".into(), &self.fc2.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend([
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]);
        out
    }

    pub fn cast<U: Real>(&self) -> ImpulseModel<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
        };
        let dense = |l: &DenseLayer<T>| DenseLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ImpulseModel {
            config: self.config.clone(),
            encoder: Encoder {
                config: self.encoder.config.clone(),
                layers: self.encoder.layers.iter().map(conv).collect(),
            },
            fc1: dense(&self.fc1),
            fc2: dense(&self.fc2),
        }
    }
}

pub fn point_features<T: Real>(pyramid: &FeaturePyramid<T>, batch: &CoordBatch) -> Result<Tensor<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("point_features of an empty batch"));
    }
    let n = batch.len();
    let mut blocks = Vec::with_capacity(pyramid.len() + 1);
    for level in &pyramid.levels {
        let (c, extent) = level.dims4()?;
        let stencil = TrilinearStencil::<T>::new(extent, batch.coords());
        blocks.push((c, stencil.sample(level.data(), c)));
    }
    blocks.push((3, batch.to_matrix::<T>().into_data()));
    let width: usize = blocks.iter().map(|b| b.0).sum();
    let mut out = vec![T::ZERO; n * width];
    let mut offset = 0;
    for (c, data) in &blocks {
        for i in 0..n {
            out[i * width + offset..i * width + offset + c].copy_from_slice(&data[i * c..(i + 1) * c]);
        }
        offset += c;
    }
    Tensor::new(&[n, width], out)
}

/// Records encoder and decoder for one batch of points and returns the
/// logit node. `ids` are the parameter nodes in [`ImpulseModel::params`]
/// order.
pub fn logits_graph<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    x: NodeId,
    batch: &CoordBatch,
    ids: &[NodeId],
) -> Result<NodeId> {
    let n_enc = 2 * config.encoder.layers().len();
    if ids.len() != n_enc + 4 {
        return Err(Error::shape("model parameter nodes", n_enc + 4, ids.len()));
    }
    let levels = encode_graph(&config.encoder, g, x, &ids[..n_enc])?;
    let mut parts = Vec::with_capacity(levels.len() + 1);
    for level in levels {
        let (_, extent) = g.value(level).dims4()?;
        let stencil = Rc::new(TrilinearStencil::new(extent, batch.coords()));
        parts.push(g.trilinear(level, stencil)?);
    }
    parts.push(g.constant(batch.to_matrix()));
    let feats = g.concat_cols(&parts)?;
    let h = g.linear(feats, ids[n_enc], ids[n_enc + 1])?;
    let h = g.relu(h);
    g.linear(h, ids[n_enc + 2], ids[n_enc + 3])
}

/// Combined training loss of the model on `batch` with the given targets.
/// Returns `(ce, dice, total)` nodes.
pub fn loss_graph<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    x: NodeId,
    batch: &CoordBatch,
    targets: Rc<[usize]>,
    weights: LossWeights,
    ids: &[NodeId],
) -> Result<(NodeId, NodeId, NodeId)> {
    let logits = logits_graph(config, g, x, batch, ids)?;
    combined_loss(g, logits, targets, weights)
}

/// Random-point training state: model, optimizer, loss weights and the
/// sampling generator.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ImpulseModel<T>,
    pub adam: Adam,
    pub weights: LossWeights,
    pub points: usize,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ImpulseModel<T>, adam: Adam, weights: LossWeights, points: usize, seed: u64) -> Result<Self> {
        if points == 0 {
            return Err(Error::invalid("points per step must be at least 1"));
        }
        Ok(Self {
            model,
            adam,
            weights,
            points,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Coordinates touched by one optimization step.
    pub fn points_per_step(&self) -> usize {
        self.points
    }

    /// One step: sample points, look up nearest GT, backpropagate the
    /// combined loss and apply Adam.
    pub fn step(&mut self, x: &Volume, gt: &LabelGrid) -> Result<LossReport> {
        if gt.num_classes() > self.model.num_classes() {
            return Err(Error::shape(
                "ground-truth classes",
                self.model.num_classes(),
                gt.num_classes(),
            ));
        }
        self.model.encoder.check_input(x)?;
        let batch = random_coords(self.points, &mut self.rng)?;
        let targets: Rc<[usize]> = gt.nearest_label(&batch).into_iter().map(usize::from).collect();
        let mut g = Graph::new();
        let xi = g.constant(x.to_tensor());
        let ids: Vec<NodeId> = self.model.params().iter().map(|(_, p)| g.param(p)).collect();
        let (ce, dice, total) = loss_graph(&self.model.config, &mut g, xi, &batch, targets, self.weights, &ids)?;
        let grads = g.backward(total)?;
        let mut params = self.model.params_mut();
        for (p, &id) in params.iter_mut().zip(&ids) {
            grads.write_to(id, p);
        }
        self.adam.step(&mut params);
        Ok(LossReport {
            ce: g.value(ce).item().to_f64(),
            dice: g.value(dice).item().to_f64(),
            total: g.value(total).item().to_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use crate::volume::NormCoord;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn noise_volume(c: usize, extent: [usize; 3], seed: u64) -> Volume {
        let mut r = rng(seed);
        let n = c * extent.iter().product::<usize>();
        let data = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        Volume::from_f32([c, extent[0], extent[1], extent[2]], data).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(0)).unwrap();
        let p = m.encode(&noise_volume(1, [32; 3], 1)).unwrap();
        let shapes: Vec<&[usize]> = p.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![&[16, 16, 16, 16][..], &[32, 8, 8, 8], &[64, 4, 4, 4]]);
        assert_eq!(m.config.encoder.pyramid_extents([32; 3]), vec![[16; 3], [8; 3], [4; 3]]);
    }

    #[test]
    fn zero_encoder_gives_zero_pyramid() {
        let m = ImpulseModel::<f32>::zeros(ModelConfig::new(2, 5)).unwrap();
        let p = m.encode(&noise_volume(2, [8; 3], 2)).unwrap();
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(4, 19), &mut rng(0)).unwrap();
        assert!(m.encode(&noise_volume(1, [8; 3], 0)).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(3)).unwrap();
        let x = noise_volume(1, [16; 3], 4);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    }

    #[test]
    fn decoder_parameter_count() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(0)).unwrap();
        let c = m.count_params();
        assert_eq!(c.decoder, 115 * 128 + 128 + 128 * 19 + 19);
        assert_eq!(c.decoder, 17_299);
        assert_eq!(c.total, c.encoder + c.decoder);
        let manual: usize = m.params().iter().map(|(_, p)| p.len()).sum();
        assert_eq!(manual, c.total);
    }

    #[test]
    fn point_features_layout_and_node_exactness() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(5)).unwrap();
        let pyr = m.encode(&noise_volume(1, [16; 3], 6)).unwrap();
        // Corners are nodes of every level.
        let batch = CoordBatch::from_coords(vec![NormCoord::new(1.0, -1.0, 1.0), NormCoord::new(-1.0, -1.0, -1.0)]);
        let f = m.point_features(&pyr, &batch).unwrap();
        assert_eq!(f.shape(), &[2, 115]);
        let row = &f.data()[..115];
        assert_eq!(&row[112..], &[1.0, -1.0, 1.0]);
        let mut offset = 0;
        for level in &pyr.levels {
            let (c, [d, h, w]) = level.dims4().unwrap();
            let vox = d * h * w;
            for ch in 0..c {
                // (z=1, y=-1, x=1) → (d-1, 0, w-1)
                let node = ((d - 1) * h) * w + (w - 1);
                assert_eq!(row[offset + ch], level.data()[ch * vox + node]);
            }
            offset += c;
        }
    }

    #[test]
    fn rows_permute_with_batch() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(7)).unwrap();
        let x = noise_volume(1, [8; 3], 8);
        let batch = random_coords(20, &mut rng(9)).unwrap();
        let mut rev = batch.coords().to_vec();
        rev.reverse();
        let a = m.predict(&x, &batch).unwrap();
        let b = m.predict(&x, &CoordBatch::from_coords(rev)).unwrap();
        for i in 0..20 {
            assert_eq!(a.data()[i * 19..(i + 1) * 19], b.data()[(19 - i) * 19..(20 - i) * 19]);
        }
    }

    #[test]
    fn predict_rows_are_distributions_and_chunk_invariant() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(10)).unwrap();
        let x = noise_volume(1, [16; 3], 11);
        let batch = random_coords(1000, &mut rng(12)).unwrap();
        let all = m.predict(&x, &batch).unwrap();
        for row in all.data().chunks(19) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let mut parts = Vec::new();
        for i in 0..10 {
            parts.extend_from_slice(m.predict(&x, &batch.slice(i * 100..(i + 1) * 100)).unwrap().data());
        }
        assert_eq!(parts, all.data());
    }

    #[test]
    fn reconstruct_matches_direct_prediction() {
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng(13)).unwrap();
        let x = noise_volume(1, [8; 3], 14);
        let out = m.reconstruct(&x, [20, 20, 20]).unwrap();
        assert_eq!(out.extent(), [20; 3]);
        let probs = m.predict(&x, &uniform_grid_coords([20; 3]).unwrap()).unwrap();
        let direct: Vec<u8> = ops::argmax_rows(probs.data(), 19).into_iter().map(|c| c as u8).collect();
        assert_eq!(out.data(), &direct[..]);
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_weights() {
        let x = noise_volume(1, [8; 3], 15);
        let gt = LabelGrid::new([8; 3], 3, (0..512).map(|i| (i % 3) as u8).collect()).unwrap();
        let run = || {
            let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 3), &mut rng(16)).unwrap();
            let mut t = Trainer::new(m, Adam::default(), LossWeights::default(), 64, 17).unwrap();
            (0..3).map(|_| t.step(&x, &gt).unwrap().total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert!(LossWeights::new(0.0, 0.0).is_err());
    }

    #[test]
    fn single_class_ground_truth_keeps_losses_finite() {
        let x = noise_volume(1, [8; 3], 18);
        let gt = LabelGrid::zeros([8; 3], 3);
        let m = ImpulseModel::<f32>::new(ModelConfig::new(1, 3), &mut rng(19)).unwrap();
        let mut t = Trainer::new(m, Adam::default(), LossWeights::default(), 32, 20).unwrap();
        let r = t.step(&x, &gt).unwrap();
        assert!(r.ce.is_finite() && r.dice.is_finite() && r.total.is_finite());
    }

    #[test]
    fn composed_loss_gradient() {
        let mut config = ModelConfig::new(1, 4);
        config.encoder.widths = vec![2, 3];
        config.hidden = 6;
        let model = ImpulseModel::<f64>::new(config.clone(), &mut rng(21)).unwrap();
        let x = noise_volume(1, [8; 3], 22).to_tensor::<f64>();
        let batch = random_coords(32, &mut rng(23)).unwrap();
        let targets: Rc<[usize]> = (0..32).map(|i| i % 4).collect();
        let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
        let report = grad_check(
            &params,
            |g, ids| {
                let xi = g.constant(x.clone());
                let (_, _, total) = loss_graph(&config, g, xi, &batch, targets.clone(), LossWeights::default(), ids)?;
                Ok(total)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 0);
    }
}
