//! Pipeline plumbing shared by the command line and the acceptance suite:
//! input-channel assembly, seeded datasets with a 7:1:2 split, training,
//! evaluation, the input ablation, the efficiency benchmark and the
//! gradient-check suite.

use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{DenseModel, DenseTrainer, HEAD_WIDTH};
use crate::error::{Error, Result};
use crate::impulse::{loss_graph, EncoderConfig, ImpulseModel, ModelConfig, Trainer, DEFAULT_HIDDEN, DEFAULT_POINTS};
use crate::io;
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{grad_check_with, Adam, Fault, GradCheckOptions, GradCheckReport, Graph, LossReport, LossWeights, NodeId, DICE_SMOOTH};
use crate::phantom::{mix_seed, normalize_intensity, validate_phantom, Phantom, PhantomConfig, RuleReport};
use crate::tensor::Tensor;
use crate::volume::{random_coords, TrilinearStencil, Volume};

/// One input channel of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    /// Normalized image intensity.
    I,
    /// Lobe id scaled to (0, 1].
    L,
    /// Binary airway mask.
    B,
    /// Binary artery mask.
    A,
    /// Binary vein mask.
    V,
}

impl Channel {
    pub const ALL: [Channel; 5] = [Channel::I, Channel::L, Channel::B, Channel::A, Channel::V];

    pub fn letter(self) -> char {
        match self {
            Channel::I => 'I',
            Channel::L => 'L',
            Channel::B => 'B',
            Channel::A => 'A',
            Channel::V => 'V',
        }
    }

    /// Whether the channel is derived from a structure mask (and therefore
    /// subject to corruption).
    pub fn is_mask(self) -> bool {
        self != Channel::I
    }
}

/// Nonempty set of input channels, kept in the canonical order I, L, B, A, V.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InputSet(Vec<Channel>);

impl InputSet {
    pub fn channels(&self) -> &[Channel] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.0.iter().any(|c| c.is_mask())
    }

    /// Default ablation columns.
    pub fn default_combos() -> Vec<InputSet> {
        ["L", "BAV", "LBAV", "I", "IBAV"].iter().map(|s| s.parse().unwrap()).collect()
    }

    /// Comma-separated list, e.g. `"L,BAV,IBAV"`.
    pub fn parse_list(s: &str) -> Result<Vec<InputSet>> {
        let combos: Vec<InputSet> = s.split(',').map(|c| c.trim().parse()).collect::<Result<_>>()?;
        for (i, c) in combos.iter().enumerate() {
            if combos[..i].contains(c) {
                return Err(Error::invalid(format!("input combination {c} listed twice")));
            }
        }
        Ok(combos)
    }
}

impl FromStr for InputSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = Vec::new();
        for ch in s.trim().chars() {
            let c = Channel::ALL
                .into_iter()
                .find(|c| c.letter() == ch.to_ascii_uppercase())
                .ok_or_else(|| Error::invalid(format!("unknown input channel {ch:?} (expected letters from I, L, B, A, V)")))?;
            if set.contains(&c) {
                return Err(Error::invalid(format!("input channel {} given twice", c.letter())));
            }
            set.push(c);
        }
        if set.is_empty() {
            return Err(Error::invalid("input channel selection is empty"));
        }
        set.sort_unstable();
        Ok(Self(set))
    }
}

impl TryFrom<String> for InputSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InputSet> for String {
    fn from(s: InputSet) -> Self {
        s.to_string()
    }
}

impl fmt::Display for InputSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|c| write!(f, "{}", c.letter()))
    }
}

fn binary(grid: &crate::volume::LabelGrid) -> Vec<f32> {
    grid.data().iter().map(|&l| f32::from(l != 0)).collect()
}

/// Flips `round(rate · |foreground|)` foreground voxels of a binary mask to
/// background and the same number of in-lung background voxels to
/// foreground.
fn corrupt_binary(mask: &mut [f32], lung: &[u8], rate: f64, rng: &mut ChaCha8Rng) {
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0.0).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0.0 && lung[i] != 0).collect();
    let n = (rate * fg.len() as f64).round() as usize;
    let off = sample(rng, fg.len(), n.min(fg.len()));
    let on = sample(rng, bg.len(), n.min(bg.len()));
    for i in off {
        mask[fg[i]] = 0.0;
    }
    for i in on {
        mask[bg[i]] = 1.0;
    }
}

/// Reassigns `round(rate · |lung|)` lung voxels to a different lobe.
fn corrupt_lobes(lobes: &mut [u8], n_lobes: usize, rate: f64, rng: &mut ChaCha8Rng) {
    let lung: Vec<usize> = (0..lobes.len()).filter(|&i| lobes[i] != 0).collect();
    if n_lobes < 2 {
        return;
    }
    let n = (rate * lung.len() as f64).round() as usize;
    for i in sample(rng, lung.len(), n.min(lung.len())) {
        let old = lobes[lung[i]];
        let mut new = rng.random_range(1..n_lobes as u8);
        if new >= old {
            new += 1;
        }
        lobes[lung[i]] = new;
    }
}

/// Stacks the selected channels of a phantom into the model input. With
/// `corruption = Some((rate, seed))` the mask channels are perturbed;
/// each channel draws from its own stream so that a channel's corruption
/// does not depend on which other channels are selected.
pub fn assemble_inputs(p: &Phantom, inputs: &InputSet, corruption: Option<(f64, u64)>) -> Result<Volume> {
    if let Some((rate, _)) = corruption {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("corruption rate must lie in [0, 1], got {rate}")));
        }
    }
    let extent = p.segments.extent();
    let lung = p.lung_mask.data();
    let mut volumes = Vec::with_capacity(inputs.len());
    for &c in inputs.channels() {
        let mut rng = corruption.map(|(_, seed)| ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64)));
        let data = match c {
            Channel::I => {
                volumes.push(normalize_intensity(&p.image)?);
                continue;
            }
            Channel::L => {
                let mut lobes = p.lobe_labels.data().to_vec();
                let n = p.num_lobes();
                if let (Some((rate, _)), Some(rng)) = (corruption, rng.as_mut()) {
                    corrupt_lobes(&mut lobes, n, rate, rng);
                }
                lobes.iter().map(|&l| l as f32 / n as f32).collect()
            }
            Channel::B | Channel::A | Channel::V => {
                let grid = match c {
                    Channel::B => &p.bronchus_labels,
                    Channel::A => &p.artery_labels,
                    _ => &p.vein_kind,
                };
                let mut m = binary(grid);
                if let (Some((rate, _)), Some(rng)) = (corruption, rng.as_mut()) {
                    corrupt_binary(&mut m, lung, rate, rng);
                }
                m
            }
        };
        volumes.push(Volume::from_f32([1, extent[0], extent[1], extent[2]], data)?);
    }
    Volume::stack(&volumes)
}

/// Train/val/test sizes for `n` items in a 7:1:2 ratio.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let val = (n as f64 * 0.1).round() as usize;
    let test = (n as f64 * 0.2).round() as usize;
    [n - val - test, val, test]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
    pub rules_passed: bool,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Generation config; each phantom's seed is derived from `config.seed`.
    pub config: PhantomConfig,
    pub count: usize,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn rules_passed(&self) -> bool {
        self.entries.iter().all(|e| e.rules_passed)
    }
}

/// Generates `n` phantoms with seeds derived from `config.seed`, assigning
/// the first 70% to train, the next 10% to val and the rest to test.
pub fn generate_dataset(config: &PhantomConfig, n: usize) -> Result<(DatasetManifest, Vec<(Phantom, RuleReport)>)> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one phantom"));
    }
    config.validate()?;
    let [train, val, _] = split_sizes(n);
    let mut entries = Vec::with_capacity(n);
    let mut phantoms = Vec::with_capacity(n);
    for i in 0..n {
        let seed = mix_seed(config.seed, i as u64);
        let p = Phantom::generate(&PhantomConfig { seed, ..config.clone() })?;
        let rules = validate_phantom(&p);
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(DatasetEntry {
            name: format!("phantom_{i:03}"),
            seed,
            split,
            rules_passed: rules.passed(),
        });
        phantoms.push((p, rules));
    }
    let manifest = DatasetManifest {
        format_version: 1,
        config: config.clone(),
        count: n,
        entries,
    };
    Ok((manifest, phantoms))
}

/// Writes a generated dataset: one directory per phantom (with its rule
/// report as `rules.json`) and the manifest.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, phantoms: &[(Phantom, RuleReport)]) -> Result<()> {
    for (e, (p, rules)) in manifest.entries.iter().zip(phantoms) {
        let sub = dir.join(&e.name);
        io::save_phantom(&sub, p)?;
        io::write_json(&sub.join("rules.json"), rules)?;
    }
    io::write_json(&dir.join(DATASET_MANIFEST), manifest)
}

/// A dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Phantoms of a split in manifest order, at most `limit` of them.
    pub fn load_split(&self, split: Split, limit: Option<usize>) -> Result<Vec<Phantom>> {
        self.manifest
            .split(split)
            .take(limit.unwrap_or(usize::MAX))
            .map(|e| io::load_phantom(&self.dir.join(&e.name)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub inputs: InputSet,
    pub steps: usize,
    pub points: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub hidden: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            inputs: "I".parse().unwrap(),
            steps: 2000,
            points: DEFAULT_POINTS,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            widths: EncoderConfig::with_channels(1).widths,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainSettings {
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            encoder: EncoderConfig::new(self.inputs.len(), self.widths.clone())?,
            hidden: self.hidden,
            num_classes,
        };
        config.validate()?;
        Ok(config)
    }
}

fn check_training_set(phantoms: &[Phantom]) -> Result<usize> {
    let first = phantoms.first().ok_or_else(|| Error::invalid("no training phantoms"))?;
    let s = first.num_segments();
    if let Some(p) = phantoms.iter().find(|p| p.num_segments() != s) {
        return Err(Error::invalid(format!(
            "training phantoms disagree on segment count ({s} vs {})",
            p.num_segments()
        )));
    }
    Ok(s + 1)
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<LossReport>,
    pub wall_secs: f64,
    pub points_per_step: usize,
}

/// Trains an implicit model, visiting the phantoms round-robin (one per
/// step). `on_step` sees the 1-based step and its losses.
pub fn train_implicit(
    phantoms: &[Phantom],
    s: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome<ImpulseModel<f32>>> {
    let k = check_training_set(phantoms)?;
    let config = s.model_config(k)?;
    let xs: Vec<Volume> = phantoms.iter().map(|p| assemble_inputs(p, &s.inputs, None)).collect::<Result<_>>()?;
    let model = ImpulseModel::new(config, &mut ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 1)))?;
    let mut trainer = Trainer::new(model, Adam::with_lr(s.lr), s.weights, s.points, mix_seed(s.seed, 2))?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let i = step % phantoms.len();
        let r = trainer.step(&xs[i], &phantoms[i].segments)?;
        on_step(step + 1, &r);
        log.push(r);
    }
    Ok(TrainOutcome {
        points_per_step: trainer.points_per_step(),
        model: trainer.model,
        log,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Full-grid counterpart of [`train_implicit`] with the same encoder.
pub fn train_dense(
    phantoms: &[Phantom],
    s: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome<DenseModel<f32>>> {
    let k = check_training_set(phantoms)?;
    let config = s.model_config(k)?;
    let xs: Vec<Volume> = phantoms.iter().map(|p| assemble_inputs(p, &s.inputs, None)).collect::<Result<_>>()?;
    let model = DenseModel::new(config.encoder, k, &mut ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 1)))?;
    let mut trainer = DenseTrainer::new(model, Adam::with_lr(s.lr), s.weights, mix_seed(s.seed, 2));
    let start = Instant::now();
    let mut log = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let i = step % phantoms.len();
        let r = trainer.step(&xs[i], &phantoms[i].segments)?;
        on_step(step + 1, &r);
        log.push(r);
    }
    Ok(TrainOutcome {
        points_per_step: DenseTrainer::<f32>::points_per_step(xs[0].extent()),
        model: trainer.model,
        log,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// CSV of per-step losses with a header row.
pub fn loss_csv(log: &[LossReport]) -> String {
    let mut out = String::from("step,ce,dice,total\n");
    for (i, r) in log.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, r.ce, r.dice, r.total));
    }
    out
}

/// Reconstructs at the phantom's extent and scores it.
pub fn evaluate_implicit(model: &ImpulseModel<f32>, p: &Phantom, inputs: &InputSet, corruption: Option<(f64, u64)>) -> Result<MetricsReport> {
    let x = assemble_inputs(p, inputs, corruption)?;
    evaluate(&model.reconstruct(&x, p.segments.extent())?, p)
}

pub fn evaluate_dense(model: &DenseModel<f32>, p: &Phantom, inputs: &InputSet) -> Result<MetricsReport> {
    let x = assemble_inputs(p, inputs, None)?;
    evaluate(&model.predict_labels(&x)?, p)
}

/// Per-metric means over phantoms; a metric undefined on every phantom
/// stays undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice_o: Option<f64>,
    pub dice_b: Option<f64>,
    pub dice_a: Option<f64>,
    pub dice_v: Option<f64>,
    pub dice_inter: Option<f64>,
    pub dice_intra: Option<f64>,
}

impl MetricSummary {
    pub fn mean_of(reports: &[MetricsReport]) -> Self {
        let mean = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            dice_o: mean(|r| r.dice_o),
            dice_b: mean(|r| r.dice_b),
            dice_a: mean(|r| r.dice_a),
            dice_v: mean(|r| r.dice_v),
            dice_inter: mean(|r| r.dice_inter),
            dice_intra: mean(|r| r.dice_intra),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub inputs: InputSet,
    /// Evaluated with ground-truth masks as inputs.
    pub clean: MetricSummary,
    /// Evaluated with corrupted masks; absent for image-only inputs.
    pub corrupted: Option<MetricSummary>,
    pub final_loss: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub corrupt_rate: f64,
    pub steps: usize,
    pub train_phantoms: usize,
    pub test_phantoms: usize,
    pub columns: Vec<AblationColumn>,
}

impl AblationReport {
    pub fn column(&self, inputs: &str) -> Option<&AblationColumn> {
        let key: InputSet = inputs.parse().ok()?;
        self.columns.iter().find(|c| c.inputs == key)
    }

    /// Aligned table: one column per input set, rows Dice_o/b/a in percent.
    /// Cells read `corrupted (clean)`, or `clean (n/a)` without masks.
    pub fn table(&self) -> String {
        type Pick = fn(&MetricSummary) -> Option<f64>;
        let rows: [(&str, Pick); 3] = [("Dice_o", |m| m.dice_o), ("Dice_b", |m| m.dice_b), ("Dice_a", |m| m.dice_a)];
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut grid = vec![std::iter::once("Inputs".to_string())
            .chain(self.columns.iter().map(|c| c.inputs.to_string()))
            .collect::<Vec<_>>()];
        for (name, pick) in rows {
            let mut row = vec![name.to_string()];
            for c in &self.columns {
                row.push(match &c.corrupted {
                    Some(bad) => format!("{} ({})", pct(pick(bad)), pct(pick(&c.clean))),
                    None => format!("{} (n/a)", pct(pick(&c.clean))),
                });
            }
            grid.push(row);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Trains one model per input set on `train` and scores each on `test`
/// with clean and corrupted masks. `progress` receives one line per
/// finished column.
pub fn run_ablation(
    train: &[Phantom],
    test: &[Phantom],
    combos: &[InputSet],
    corrupt_rate: f64,
    base: &TrainSettings,
    mut progress: impl FnMut(&AblationColumn),
) -> Result<AblationReport> {
    if combos.is_empty() {
        return Err(Error::invalid("no input combinations to ablate"));
    }
    if test.is_empty() {
        return Err(Error::invalid("ablation needs at least one test phantom"));
    }
    let mut columns = Vec::with_capacity(combos.len());
    for inputs in combos {
        let s = TrainSettings {
            inputs: inputs.clone(),
            ..base.clone()
        };
        let out = train_implicit(train, &s, |_, _| {})?;
        let score = |corrupt: bool| -> Result<MetricSummary> {
            let reports = test
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let c = corrupt.then(|| (corrupt_rate, mix_seed(base.seed ^ 0xC0, i as u64)));
                    evaluate_implicit(&out.model, p, inputs, c)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricSummary::mean_of(&reports))
        };
        let column = AblationColumn {
            inputs: inputs.clone(),
            clean: score(false)?,
            corrupted: if inputs.has_masks() { Some(score(true)?) } else { None },
            final_loss: out.log.last().map_or(f64::NAN, |r| r.total),
            wall_secs: out.wall_secs,
        };
        progress(&column);
        columns.push(column);
    }
    Ok(AblationReport {
        corrupt_rate,
        steps: base.steps,
        train_phantoms: train.len(),
        test_phantoms: test.len(),
        columns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBench {
    pub encoder_params: usize,
    /// Implicit decoder or dense head.
    pub head_params: usize,
    pub total_params: usize,
    pub points_per_step: usize,
    pub wall_secs: f64,
    pub final_loss: f64,
    pub val_dice_o: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub inputs: InputSet,
    pub steps: usize,
    pub head_width: usize,
    pub implicit: ModelBench,
    pub dense: ModelBench,
}

impl BenchReport {
    /// The asserted orderings: a smaller decoder and fewer points per step.
    pub fn orderings_hold(&self) -> bool {
        self.implicit.head_params < self.dense.head_params && self.implicit.points_per_step < self.dense.points_per_step
    }
}

/// Trains both models for the same number of steps and scores them on `val`.
pub fn run_bench(train: &[Phantom], val: &[Phantom], s: &TrainSettings) -> Result<BenchReport> {
    let implicit = train_implicit(train, s, |_, _| {})?;
    let dense = train_dense(train, s, |_, _| {})?;
    let mean_o = |reports: Vec<MetricsReport>| MetricSummary::mean_of(&reports).dice_o;
    let imp_val = mean_o(val.iter().map(|p| evaluate_implicit(&implicit.model, p, &s.inputs, None)).collect::<Result<_>>()?);
    let dense_val = mean_o(val.iter().map(|p| evaluate_dense(&dense.model, p, &s.inputs)).collect::<Result<_>>()?);
    let counts = implicit.model.count_params();
    let enc = dense.model.encoder.count_params();
    let head = dense.model.head.count_params();
    Ok(BenchReport {
        inputs: s.inputs.clone(),
        steps: s.steps,
        head_width: HEAD_WIDTH,
        implicit: ModelBench {
            encoder_params: counts.encoder,
            head_params: counts.decoder,
            total_params: counts.total,
            points_per_step: implicit.points_per_step,
            wall_secs: implicit.wall_secs,
            final_loss: implicit.log.last().map_or(f64::NAN, |r| r.total),
            val_dice_o: imp_val,
        },
        dense: ModelBench {
            encoder_params: enc,
            head_params: head,
            total_params: enc + head,
            points_per_step: dense.points_per_step,
            wall_secs: dense.wall_secs,
            final_loss: dense.log.last().map_or(f64::NAN, |r| r.total),
            val_dice_o: dense_val,
        },
    })
}

/// Largest relative error the gradient suite accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Runs every gradient check in 64-bit. `fault` corrupts the backward pass
/// on purpose so the suite can be shown to fail.
pub fn gradcheck_suite(fault: Option<Fault>) -> Result<Vec<GradCheckEntry>> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        let passed = report.checked > 0 && report.max_rel_error < GRADCHECK_TOLERANCE;
        out.push(GradCheckEntry { name, report, passed });
    };

    let labels = |n: usize, k: usize| -> Rc<[usize]> { (0..n).map(|i| (i * 7 + 3) % k).collect() };

    let params = vec![
        random_tensor(&[2, 5, 5, 5], &mut rng),
        random_tensor(&[3, 2, 3, 3, 3], &mut rng),
        random_tensor(&[3], &mut rng),
    ];
    for (name, stride, n) in [("conv3d", 1, 125), ("conv3d_stride2", 2, 27)] {
        let t = labels(n, 3);
        let r = grad_check_with(
            &params,
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let y = g.conv3d(ids[0], ids[1], ids[2], stride)?;
                let rows = g.channels_to_rows(y)?;
                g.cross_entropy(rows, t.clone())
            },
            &opts,
            fault,
        )?;
        push(name, r);
    }

    let params = vec![random_tensor(&[6, 5], &mut rng), random_tensor(&[5, 4], &mut rng), random_tensor(&[4], &mut rng)];
    let t = labels(6, 4);
    push(
        "linear",
        grad_check_with(
            &params,
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let y = g.linear(ids[0], ids[1], ids[2])?;
                g.cross_entropy(y, t.clone())
            },
            &opts,
            fault,
        )?,
    );

    let params = vec![random_tensor(&[8, 5], &mut rng)];
    let t = labels(8, 5);
    push(
        "softmax_cross_entropy",
        grad_check_with(&params, |g: &mut Graph<f64>, ids: &[NodeId]| g.cross_entropy(ids[0], t.clone()), &opts, fault)?,
    );
    push(
        "dice_loss",
        grad_check_with(
            &params,
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let p = g.softmax_rows(ids[0])?;
                g.dice_loss(p, t.clone(), DICE_SMOOTH)
            },
            &opts,
            fault,
        )?,
    );

    let params = vec![random_tensor(&[3, 4, 5, 6], &mut rng)];
    let coords = random_coords(24, &mut rng)?;
    let stencil = Rc::new(TrilinearStencil::new([4, 5, 6], coords.coords()));
    let t = labels(24, 3);
    push(
        "trilinear",
        grad_check_with(
            &params,
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let f = g.trilinear(ids[0], stencil.clone())?;
                g.cross_entropy(f, t.clone())
            },
            &opts,
            fault,
        )?,
    );

    let mut config = ModelConfig::new(2, 4);
    config.encoder.widths = vec![3, 4];
    config.hidden = 8;
    let model = ImpulseModel::<f64>::new(config.clone(), &mut rng)?;
    let x = random_tensor(&[2, 8, 8, 8], &mut rng);
    let batch = random_coords(32, &mut rng)?;
    let t = labels(32, 4);
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    push(
        "composed_loss",
        grad_check_with(
            &params,
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let xi = g.constant(x.clone());
                let (_, _, total) = loss_graph(&config, g, xi, &batch, t.clone(), LossWeights::default(), ids)?;
                Ok(total)
            },
            &opts,
            fault,
        )?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_sets_parse_canonically() {
        let s: InputSet = "vabi".parse().unwrap();
        assert_eq!(s.to_string(), "IBAV");
        assert_eq!(s.len(), 4);
        assert!("".parse::<InputSet>().is_err());
        assert!("IX".parse::<InputSet>().is_err());
        assert!("II".parse::<InputSet>().is_err());
        let combos = InputSet::default_combos();
        assert_eq!(combos.iter().map(|c| c.to_string()).collect::<Vec<_>>(), ["L", "BAV", "LBAV", "I", "IBAV"]);
        assert_eq!(InputSet::parse_list("I").unwrap().len(), 1);
        assert!(InputSet::parse_list("I,I").is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"IBAV\"");
        assert_eq!(serde_json::from_str::<InputSet>(&json).unwrap(), s);
    }

    #[test]
    fn split_ratio() {
        assert_eq!(split_sizes(10), [7, 1, 2]);
        assert_eq!(split_sizes(20), [14, 2, 4]);
        assert_eq!(split_sizes(1), [1, 0, 0]);
        for n in 1..50 {
            assert_eq!(split_sizes(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn assembled_channels() {
        let p = Phantom::generate(&PhantomConfig::default()).unwrap();
        let x = assemble_inputs(&p, &"IBAV".parse().unwrap(), None).unwrap();
        assert_eq!(x.shape(), [4, 32, 32, 32]);
        let data = x.to_f32();
        let n = p.segments.len();
        assert!(data[..n].iter().all(|v| (0.0..=1.0).contains(v)));
        for (c, grid) in [&p.bronchus_labels, &p.artery_labels, &p.vein_kind].into_iter().enumerate() {
            let ch = &data[(c + 1) * n..(c + 2) * n];
            assert!(ch.iter().zip(grid.data()).all(|(&v, &l)| v == f32::from(l != 0)));
        }
        let l = assemble_inputs(&p, &"L".parse().unwrap(), None).unwrap().to_f32();
        let max = l.iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn corruption_flips_the_requested_fraction() {
        let p = Phantom::generate(&PhantomConfig::default()).unwrap();
        let set: InputSet = "IB".parse().unwrap();
        let clean = assemble_inputs(&p, &set, None).unwrap().to_f32();
        let bad = assemble_inputs(&p, &set, Some((0.05, 9))).unwrap().to_f32();
        let n = p.segments.len();
        assert_eq!(clean[..n], bad[..n]);
        let fg = clean[n..].iter().filter(|&&v| v != 0.0).count();
        let flips = clean[n..].iter().zip(&bad[n..]).filter(|(a, b)| a != b).count();
        assert_eq!(flips, 2 * (0.05 * fg as f64).round() as usize);
        assert_eq!(bad, assemble_inputs(&p, &set, Some((0.05, 9))).unwrap().to_f32());
        // A channel's corruption does not depend on the other selected channels.
        let alone = assemble_inputs(&p, &"B".parse().unwrap(), Some((0.05, 9))).unwrap().to_f32();
        assert_eq!(alone, bad[n..]);
        assert!(assemble_inputs(&p, &set, Some((1.5, 0))).is_err());
    }

    #[test]
    fn dataset_splits_and_seeds() {
        let config = PhantomConfig {
            seed: 5,
            ..PhantomConfig::default()
        };
        let (m, phantoms) = generate_dataset(&config, 10).unwrap();
        let count = |s| m.split(s).count();
        assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [7, 1, 2]);
        assert!(m.rules_passed());
        assert_eq!(phantoms.len(), 10);
        assert_ne!(phantoms[0].0.segments, phantoms[1].0.segments);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &m, &phantoms).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let test = ds.load_split(Split::Test, None).unwrap();
        assert_eq!(test[1], phantoms[9].0);
    }

    #[test]
    fn ablation_table_layout() {
        let p = Phantom::generate(&PhantomConfig::default()).unwrap();
        let s = TrainSettings {
            steps: 2,
            points: 64,
            widths: vec![4, 4],
            hidden: 8,
            ..TrainSettings::default()
        };
        let combos = InputSet::parse_list("L,I").unwrap();
        let mut seen = 0;
        let r = run_ablation(std::slice::from_ref(&p), std::slice::from_ref(&p), &combos, 0.05, &s, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert!(r.column("L").unwrap().corrupted.is_some());
        assert!(r.column("I").unwrap().corrupted.is_none());
        let table = r.table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Inputs"));
        assert!(lines[3].starts_with("Dice_a"));
        assert!(lines[1].ends_with("(n/a)"));
    }

    #[test]
    fn gradient_suite_passes_and_detects_fault() {
        let ok = gradcheck_suite(None).unwrap();
        assert_eq!(ok.len(), 7);
        for e in &ok {
            assert!(e.passed, "{}: {:?}", e.name, e.report);
        }
        let bad = gradcheck_suite(Some(Fault::ConvWeightGrad)).unwrap();
        assert!(!bad.iter().find(|e| e.name == "conv3d").unwrap().passed);
        assert!(bad.iter().find(|e| e.name == "linear").unwrap().passed);
    }
}
