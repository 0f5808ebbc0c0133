//! Pixel cross-entropy, soft Dice and the combined text + mask objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::LossConfig;
use crate::error::{LiraError, Result};
use crate::image::{BinaryMask, MaskMap};
use crate::tensor::Tensor;

/// One step's loss terms. `total = text + alpha * mask` and
/// `mask = ce_weight * ce + dice_weight * dice`, with `ce`, `dice` and
/// `mask` averaged over regions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub text: f64,
    pub mask: f64,
    pub ce: f64,
    pub dice: f64,
}

fn check_dims(pred: (usize, usize), gt: &BinaryMask) -> Result<()> {
    if pred != gt.dims() {
        return Err(LiraError::shape("mask loss", &[pred.0, pred.1], &[gt.height(), gt.width()]));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[c, 1 - c]`.
pub fn mask_ce(pred: &MaskMap, gt: &BinaryMask, clamp: f64) -> Result<f64> {
    check_dims((pred.height(), pred.width()), gt)?;
    let n = pred.values().len() as f64;
    let s: f64 = pred
        .values()
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if g {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / n)
}

/// `1 - (2 Σ p·g + eps) / (Σ p + Σ g + eps)`.
pub fn dice_loss(pred: &MaskMap, gt: &BinaryMask, eps: f64) -> Result<f64> {
    check_dims((pred.height(), pred.width()), gt)?;
    let (mut inter, mut sp) = (0.0, 0.0);
    for (&p, &g) in pred.values().iter().zip(gt.bits()) {
        sp += p;
        if g {
            inter += p;
        }
    }
    Ok(1.0 - (2.0 * inter + eps) / (sp + gt.area() as f64 + eps))
}

pub fn combined_loss(text: f64, masks: &[(MaskMap, BinaryMask)], cfg: &LossConfig) -> Result<LossReport> {
    let mut ce = 0.0;
    let mut dice = 0.0;
    for (p, g) in masks {
        ce += mask_ce(p, g, cfg.ce_clamp)?;
        dice += dice_loss(p, g, cfg.dice_eps)?;
    }
    if !masks.is_empty() {
        ce /= masks.len() as f64;
        dice /= masks.len() as f64;
    }
    Ok(report(text, ce, dice, cfg))
}

pub fn report(text: f64, ce: f64, dice: f64, cfg: &LossConfig) -> LossReport {
    let mask = cfg.ce_weight * ce + cfg.dice_weight * dice;
    LossReport {
        total: text + cfg.alpha * mask,
        text,
        mask,
        ce,
        dice,
    }
}

fn gt_tensor(gt: &BinaryMask) -> Tensor {
    Tensor::new(
        vec![gt.height(), gt.width()],
        gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask dims are positive")
}

pub fn mask_ce_on(tape: &mut Tape, pred: Var, gt: &BinaryMask, clamp: f64) -> Result<Var> {
    check_dims((tape.shape(pred)[0], tape.value(pred).cols()), gt)?;
    let g = tape.constant(gt_tensor(gt));
    let inv_g = tape.constant(gt_tensor(gt).map(|v| 1.0 - v));
    let p = tape.clamp(pred, clamp, 1.0 - clamp);
    let lp = tape.log(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.log(q);
    let a = tape.mul(g, lp)?;
    let b = tape.mul(inv_g, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

pub fn dice_on(tape: &mut Tape, pred: Var, gt: &BinaryMask, eps: f64) -> Result<Var> {
    check_dims((tape.shape(pred)[0], tape.value(pred).cols()), gt)?;
    let g = tape.constant(gt_tensor(gt));
    let pg = tape.mul(pred, g)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let sp = tape.sum(pred);
    let den = tape.add_scalar(sp, gt.area() as f64 + eps);
    let r = tape.div(num, den)?;
    let r = tape.scale(r, -1.0);
    Ok(tape.add_scalar(r, 1.0))
}

/// Per-region mask loss `w_ce * ce + w_dice * dice` on the tape, returning
/// the combined node and the two components.
pub fn region_mask_loss_on(tape: &mut Tape, pred: Var, gt: &BinaryMask, cfg: &LossConfig) -> Result<(Var, Var, Var)> {
    let ce = mask_ce_on(tape, pred, gt, cfg.ce_clamp)?;
    let dice = dice_on(tape, pred, gt, cfg.dice_eps)?;
    let a = tape.scale(ce, cfg.ce_weight);
    let b = tape.scale(dice, cfg.dice_weight);
    Ok((tape.add(a, b)?, ce, dice))
}
