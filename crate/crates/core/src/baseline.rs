//! Dense fully-convolutional counterpart: the same encoder, a pyramid fusion
//! head classifying every voxel of the input grid, trained on the full grid.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::impulse::{ConvLayer, Encoder, EncoderConfig};
use crate::nn::{combined_loss, ops, Adam, Graph, LossReport, LossWeights, NodeId, Parameter};
use crate::tensor::Real;
use crate::volume::{LabelGrid, Volume};

/// Channel width of the fused pyramid.
pub const HEAD_WIDTH: usize = 32;

/// Per-level 1×1×1 projections, coarse-to-fine nearest-upsample-and-add
/// fusion, ReLU and a final 3³ convolution to `K` channels.
#[derive(Clone, Debug)]
pub struct DenseHead<T> {
    pub proj: Vec<ConvLayer<T>>,
    pub out: ConvLayer<T>,
    pub num_classes: usize,
}

impl<T: Real> DenseHead<T> {
    pub fn new<R: Rng + ?Sized>(encoder: &EncoderConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        encoder.validate()?;
        let proj = encoder
            .widths
            .iter()
            .map(|&w| ConvLayer::he(w, HEAD_WIDTH, 1, 1, rng))
            .collect();
        Ok(Self {
            proj,
            out: ConvLayer::he(HEAD_WIDTH, num_classes, 3, 1, rng),
            num_classes,
        })
    }

    pub fn count_params(&self) -> usize {
        self.proj
            .iter()
            .chain(std::iter::once(&self.out))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.proj.iter().enumerate() {
            out.push((format!("head.proj{i}.weight"), &l.weight));
            out.push((format!("head.proj{i}.bias"), &l.bias));
        }
        out.push(("head.out.weight".into(), &self.out.weight));
        out.push(("head.out.bias".into(), &self.out.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.proj
            .iter_mut()
            .chain(std::iter::once(&mut self.out))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Records the head on top of pyramid level nodes; returns `(K, d, h, w)`
/// logits at `extent`. `ids` follow [`DenseHead::params`] order.
pub fn head_graph<T: Real>(g: &mut Graph<T>, levels: &[NodeId], extent: [usize; 3], ids: &[NodeId]) -> Result<NodeId> {
    let n = levels.len();
    if ids.len() != 2 * n + 2 {
        return Err(Error::shape("dense head parameter nodes", 2 * n + 2, ids.len()));
    }
    let mut acc = g.conv3d(levels[n - 1], ids[2 * (n - 1)], ids[2 * (n - 1) + 1], 1)?;
    for i in (0..n - 1).rev() {
        let p = g.conv3d(levels[i], ids[2 * i], ids[2 * i + 1], 1)?;
        let (_, e) = g.value(p).dims4()?;
        let up = g.upsample_nearest(acc, e)?;
        acc = g.add(up, p)?;
    }
    let up = g.upsample_nearest(acc, extent)?;
    let h = g.relu(up);
    g.conv3d(h, ids[2 * n], ids[2 * n + 1], 1)
}

/// Encoder plus dense head.
#[derive(Clone, Debug)]
pub struct DenseModel<T> {
    pub encoder: Encoder<T>,
    pub head: DenseHead<T>,
}

impl<T: Real> DenseModel<T> {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(encoder, rng)?;
        let head = DenseHead::new(&encoder.config, num_classes, rng)?;
        Ok(Self { encoder, head })
    }

    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = self.encoder.params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    fn logits(&self, g: &mut Graph<T>, x: &Volume, ids: &[NodeId]) -> Result<NodeId> {
        if x.channels() != self.encoder.config.in_channels {
            return Err(Error::shape(
                "encoder input channels",
                self.encoder.config.in_channels,
                x.channels(),
            ));
        }
        let n_enc = self.encoder.layers.len() * 2;
        let xi = g.constant(x.to_tensor());
        let levels = self.encoder.encode_graph(g, xi, &ids[..n_enc])?;
        head_graph(g, &levels, x.extent(), &ids[n_enc..])
    }

    /// Per-voxel class probabilities `(K, d, h, w)` at the input resolution.
    pub fn predict(&self, x: &Volume) -> Result<Volume> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params().iter().map(|(_, p)| g.constant(p.value.clone())).collect();
        let logits = self.logits(&mut g, x, &ids)?;
        let rows = g.channels_to_rows(logits)?;
        let (n, k) = g.value(rows).dims2()?;
        let probs = ops::softmax_rows_raw(g.value(rows).data(), k);
        let mut out = vec![0f32; n * k];
        for i in 0..n {
            for c in 0..k {
                out[c * n + i] = probs[i * k + c].to_f64() as f32;
            }
        }
        let [d, h, w] = x.extent();
        Volume::from_f32([k, d, h, w], out)
    }

    /// Voxelwise argmax at the input resolution.
    pub fn predict_labels(&self, x: &Volume) -> Result<LabelGrid> {
        let probs = self.predict(x)?;
        let [k, d, h, w] = probs.shape();
        let n = d * h * w;
        let data = probs.to_f32();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if data[c * n + i] > data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelGrid::new([d, h, w], k, labels)
    }
}

/// Full-grid training of a [`DenseModel`].
#[derive(Clone, Debug)]
pub struct DenseTrainer<T> {
    pub model: DenseModel<T>,
    pub adam: Adam,
    pub weights: LossWeights,
    rng: ChaCha8Rng,
}

impl<T: Real> DenseTrainer<T> {
    pub fn new(model: DenseModel<T>, adam: Adam, weights: LossWeights, seed: u64) -> Self {
        Self {
            model,
            adam,
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Voxels touched by one step on an input of this extent.
    pub fn points_per_step(extent: [usize; 3]) -> usize {
        extent.iter().product()
    }

    /// One step on every voxel of the grid.
    pub fn step(&mut self, x: &Volume, gt: &LabelGrid) -> Result<LossReport> {
        if gt.extent() != x.extent() {
            return Err(Error::shape("dense ground-truth extent", x.extent(), gt.extent()));
        }
        if gt.num_classes() > self.model.head.num_classes {
            return Err(Error::shape("ground-truth classes", self.model.head.num_classes, gt.num_classes()));
        }
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.model.params().iter().map(|(_, p)| g.param(p)).collect();
        let logits = self.model.logits(&mut g, x, &ids)?;
        let rows = g.channels_to_rows(logits)?;
        let targets: Rc<[usize]> = gt.data().iter().map(|&l| l as usize).collect();
        let (ce, dice, total) = combined_loss(&mut g, rows, targets, self.weights)?;
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
