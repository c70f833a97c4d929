//! Intersection-over-union metrics on label maps.

use std::collections::BTreeMap;

use ifss_core::casm::LabelMap;
use ifss_core::featext::BinaryMask;
use ifss_core::membank::ClassId;

use crate::{BenchError, Result};

fn check_extent(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(BenchError::Metric(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn counts(pred: &LabelMap, gt: &LabelMap, class: ClassId) -> (u64, u64) {
    let (mut inter, mut union) = (0, 0);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p == Some(class), *g == Some(class));
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    (inter, union)
}

/// IoU of one class, `None` when the class is absent from both maps.
pub fn iou(pred: &LabelMap, gt: &LabelMap, class: ClassId) -> Result<Option<f64>> {
    check_extent(pred, gt)?;
    let (inter, union) = counts(pred, gt, class);
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Unweighted mean of the defined per-class values.
pub fn miou<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Ground-truth label map of a single-object sample.
pub fn label_from_mask(mask: &BinaryMask, class: ClassId) -> LabelMap {
    let data = mask.data().iter().map(|&m| m.then_some(class)).collect();
    LabelMap::new(mask.height(), mask.width(), data).expect("mask extent is valid")
}

/// Per-class intersection and union summed over a whole query set.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    totals: BTreeMap<ClassId, (u64, u64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, classes: &[ClassId]) -> Result<()> {
        check_extent(pred, gt)?;
        for &c in classes {
            let (i, u) = counts(pred, gt, c);
            let t = self.totals.entry(c).or_default();
            t.0 += i;
            t.1 += u;
        }
        Ok(())
    }

    pub fn iou(&self, class: ClassId) -> Option<f64> {
        self.totals
            .get(&class)
            .and_then(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
    }
}
