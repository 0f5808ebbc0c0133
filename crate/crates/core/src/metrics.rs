//! IoU and its dataset aggregates.
//!
//! cIoU is total intersection over total union; gIoU is the mean of the
//! per-sample IoUs. mIoU is reported as an alias of gIoU.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::image::BinaryMask;

/// Intersection and union pixel counts of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    /// Empty-versus-empty counts as a perfect match.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    if pred.dims() != gt.dims() {
        return Err(LiraError::shape("iou", &[pred.height(), pred.width()], &[gt.height(), gt.width()]));
    }
    let (mut i, mut u) = (0, 0);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        i += (a && b) as usize;
        u += (a || b) as usize;
    }
    Ok(Overlap {
        intersection: i,
        union: u,
    })
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.iou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample_iou: Vec<f64>,
    pub ciou: f64,
    pub giou: f64,
    pub miou: f64,
    pub count: usize,
    pub total_intersection: usize,
    pub total_union: usize,
}

impl MetricReport {
    pub fn from_overlaps(overlaps: &[Overlap]) -> Result<Self> {
        if overlaps.is_empty() {
            return Err(LiraError::invalid("cannot aggregate zero samples"));
        }
        let per_sample_iou: Vec<f64> = overlaps.iter().map(|o| o.iou()).collect();
        let ti: usize = overlaps.iter().map(|o| o.intersection).sum();
        let tu: usize = overlaps.iter().map(|o| o.union).sum();
        let giou = per_sample_iou.iter().sum::<f64>() / per_sample_iou.len() as f64;
        Ok(MetricReport {
            ciou: Overlap {
                intersection: ti,
                union: tu,
            }
            .iou(),
            giou,
            miou: giou,
            count: overlaps.len(),
            total_intersection: ti,
            total_union: tu,
            per_sample_iou,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,iou\n");
        for (i, v) in self.per_sample_iou.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

pub fn aggregate(pairs: &[(BinaryMask, BinaryMask)]) -> Result<MetricReport> {
    let overlaps = pairs.iter().map(|(p, g)| overlap(p, g)).collect::<Result<Vec<_>>>()?;
    MetricReport::from_overlaps(&overlaps)
}
