//! Multi-class Dice restricted to structure masks.
//!
//! Every metric is the macro average of per-segment Dice over the classes
//! that occur (in ground truth or prediction) inside the mask. Background
//! never counts, and an empty mask yields no value rather than 0 or 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{Phantom, VEIN_INTER, VEIN_INTRA};
use crate::volume::LabelGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDice {
    /// Dice of class `s` at index `s - 1`; `None` when the class occurs in
    /// neither grid within the mask.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Per-class Dice `2|Y∩Ŷ| / (|Y| + |Ŷ|)` over the voxels selected by `mask`
/// (all voxels when `None`).
pub fn dice_per_class(gt: &LabelGrid, pred: &LabelGrid, mask: Option<&[bool]>) -> Result<ClassDice> {
    if gt.extent() != pred.extent() {
        return Err(Error::shape("dice extent", gt.extent(), pred.extent()));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::shape("dice mask length", gt.len(), m.len()));
        }
    }
    let k = gt.num_classes().max(pred.num_classes());
    let mut inter = vec![0usize; k];
    let mut size_gt = vec![0usize; k];
    let mut size_pred = vec![0usize; k];
    for (i, (&g, &p)) in gt.data().iter().zip(pred.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        size_gt[g as usize] += 1;
        size_pred[p as usize] += 1;
        if g == p {
            inter[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (1..k)
        .map(|s| {
            let den = size_gt[s] + size_pred[s];
            (den > 0).then(|| 2.0 * inter[s] as f64 / den as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(ClassDice { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_o: Option<f64>,
    pub dice_b: Option<f64>,
    pub dice_a: Option<f64>,
    pub dice_v: Option<f64>,
    pub dice_inter: Option<f64>,
    pub dice_intra: Option<f64>,
    /// Segment Dice over the lung, keyed by class id.
    pub per_class: BTreeMap<u8, Option<f64>>,
}

impl MetricsReport {
    pub const KEYS: [&'static str; 7] = [
        "dice_o",
        "dice_b",
        "dice_a",
        "dice_v",
        "dice_inter",
        "dice_intra",
        "per_class",
    ];
}

/// Evaluates a segment prediction against a phantom: overall Dice over the
/// lung and the same Dice restricted to segmental bronchi, segmental
/// arteries, all veins, intersegmental and intrasegmental veins.
pub fn evaluate(pred: &LabelGrid, phantom: &Phantom) -> Result<MetricsReport> {
    let gt = &phantom.segments;
    if pred.extent() != gt.extent() {
        return Err(Error::shape("prediction extent", gt.extent(), pred.extent()));
    }
    let s = phantom.num_segments() as u8;
    let segmental = |grid: &LabelGrid| -> Vec<bool> { grid.mask_where(|l| l >= 1 && l <= s) };
    let kind = &phantom.vein_kind;
    let masked = |m: &[bool]| dice_per_class(gt, pred, Some(m));
    let overall = masked(&phantom.lung_mask.mask_where(|l| l != 0))?;
    Ok(MetricsReport {
        dice_o: overall.mean,
        dice_b: masked(&segmental(&phantom.bronchus_labels))?.mean,
        dice_a: masked(&segmental(&phantom.artery_labels))?.mean,
        dice_v: masked(&kind.mask_where(|k| k != 0))?.mean,
        dice_inter: masked(&kind.mask_where(|k| k == VEIN_INTER))?.mean,
        dice_intra: masked(&kind.mask_where(|k| k == VEIN_INTRA))?.mean,
        per_class: overall
            .per_class
            .iter()
            .enumerate()
            .map(|(i, d)| (i as u8 + 1, *d))
            .collect(),
    })
}
