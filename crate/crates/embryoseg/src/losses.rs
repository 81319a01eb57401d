//! Soft Dice loss (squared-denominator variant), multi-class aggregation,
//! and the evaluation DSC metric.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grad::{Tape, Tensor, Var};
use crate::vol::{Grid3, LabelVolume, ProbMap};

/// How per-class Dice losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceConfig {
    pub eps: f64,
    pub aggregation: Aggregation,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig {
            eps: 1e-5,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Smoothed soft Dice loss: `1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)`.
pub fn soft_dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(SegError::InvalidArgument(format!(
            "dice shape mismatch: {} vs {} voxels",
            pred.len(),
            target.len()
        )));
    }
    let mut pg = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in pred.iter().zip(target) {
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    Ok(1.0 - (2.0 * pg + eps) / (pp + gg + eps))
}

/// Multi-class soft Dice loss of a softmax probability map against an
/// integer label volume: one-hot encodes the target, computes the smoothed
/// per-class loss, and aggregates per `cfg.aggregation`. A class absent from
/// the target stays well-defined through the smoothing term.
pub fn multiclass_dice_loss(pred: &ProbMap, target: &LabelVolume, cfg: &DiceConfig) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(SegError::InvalidArgument(format!(
            "dice shape mismatch: {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let mut total = 0.0;
    for c in 0..pred.channels {
        let mask = target.mask_of(c as u8);
        total += soft_dice_loss(pred.channel_slice(c), &mask.data, cfg.eps)?;
    }
    Ok(match cfg.aggregation {
        Aggregation::Mean => total / pred.channels as f64,
        Aggregation::Sum => total,
    })
}

/// Dice Similarity Coefficient `2|A∩B| / (|A| + |B|)` of two binary masks.
/// Two empty masks score 1 so an empty early prediction cannot poison an
/// epoch average with NaN.
pub fn dsc_metric(a: &Grid3, b: &Grid3) -> f64 {
    debug_assert_eq!(a.shape, b.shape);
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let xa = x != 0.0;
        let yb = y != 0.0;
        na += xa as usize;
        nb += yb as usize;
        inter += (xa && yb) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// DSC between one class of two label volumes.
pub fn dsc_of_class(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> f64 {
    dsc_metric(&pred.mask_of(class), &truth.mask_of(class))
}

/// Tape node for the multi-class Dice loss of a softmax output `(C, D, H, W)`
/// against an integer label target.
pub fn tape_multiclass_dice(
    tape: &Tape,
    pred: Var,
    target: &LabelVolume,
    cfg: &DiceConfig,
) -> Var {
    let channels = tape.shape(pred)[0];
    let shape = tape.shape(pred);
    let per_class: Vec<Var> = (0..channels)
        .map(|c| {
            let mask = target.mask_of(c as u8);
            let t = Tensor::from_vec(&[1, shape[1], shape[2], shape[3]], mask.data);
            let ch = tape.select_channel(pred, c);
            tape.soft_dice_loss(ch, t, cfg.eps)
        })
        .collect();
    let sum = tape.add_scalars(&per_class);
    match cfg.aggregation {
        Aggregation::Mean => tape.scale(sum, 1.0 / channels as f64),
        Aggregation::Sum => sum,
    }
}

/// Tape node for the binary Dice loss of a `(1, D, H, W)` sigmoid output
/// against one class of a label volume.
pub fn tape_binary_dice(
    tape: &Tape,
    pred: Var,
    target: &LabelVolume,
    class: u8,
    eps: f64,
) -> Var {
    let shape = tape.shape(pred);
    let mask = target.mask_of(class);
    let t = Tensor::from_vec(&shape, mask.data);
    tape.soft_dice_loss(pred, t, eps)
}
