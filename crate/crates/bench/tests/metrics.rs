use std::collections::BTreeSet;

use ifss_bench::metrics::{iou, miou, IouAccumulator};
use ifss_core::casm::LabelMap;
use ifss_core::membank::ClassId;
use proptest::prelude::*;

fn labels(h: usize, w: usize, cells: &[Option<u32>]) -> LabelMap {
    LabelMap::new(h, w, cells.iter().map(|c| c.map(ClassId)).collect()).unwrap()
}

fn cell() -> impl Strategy<Value = Option<u32>> {
    prop_oneof![Just(None), (0u32..4).prop_map(Some)]
}

fn set_of(cells: &[Option<u32>], class: u32) -> BTreeSet<usize> {
    cells.iter().enumerate().filter(|(_, c)| **c == Some(class)).map(|(i, _)| i).collect()
}

proptest! {
    #[test]
    fn iou_matches_set_definition(cells in prop::collection::vec((cell(), cell()), 1..40), class in 0u32..4) {
        let (p, g): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
        let n = p.len();
        let (ps, gs) = (set_of(&p, class), set_of(&g, class));
        let union = ps.union(&gs).count();
        let expected = (union > 0).then(|| ps.intersection(&gs).count() as f64 / union as f64);
        let got = iou(&labels(1, n, &p), &labels(1, n, &g), ClassId(class)).unwrap();
        prop_assert_eq!(got, expected);
        if let Some(v) = got {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn miou_of_a_singleton_is_the_value(v in 0.0f64..=1.0) {
        prop_assert_eq!(miou([Some(v)]), Some(v));
    }

    #[test]
    fn miou_stays_in_unit_interval(values in prop::collection::vec(prop::option::of(0.0f64..=1.0), 0..10)) {
        if let Some(m) = miou(values.clone()) {
            prop_assert!((0.0..=1.0).contains(&m));
        } else {
            prop_assert!(values.iter().all(Option::is_none));
        }
    }

    #[test]
    fn accumulated_iou_pools_counts(frames in prop::collection::vec(prop::collection::vec((cell(), cell()), 6), 1..5)) {
        let classes: Vec<ClassId> = (0..4).map(ClassId).collect();
        let mut acc = IouAccumulator::new();
        let (mut inter, mut union) = ([0usize; 4], [0usize; 4]);
        for frame in &frames {
            let (p, g): (Vec<_>, Vec<_>) = frame.iter().copied().unzip();
            acc.add(&labels(2, 3, &p), &labels(2, 3, &g), &classes).unwrap();
            for c in 0..4u32 {
                let (ps, gs) = (set_of(&p, c), set_of(&g, c));
                inter[c as usize] += ps.intersection(&gs).count();
                union[c as usize] += ps.union(&gs).count();
            }
        }
        for c in 0..4 {
            let expected = (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64);
            prop_assert_eq!(acc.iou(ClassId(c as u32)), expected);
        }
    }
}

#[test]
fn two_cell_overlap_of_one_is_a_third() {
    let p = labels(2, 2, &[Some(0), Some(0), None, None]);
    let g = labels(2, 2, &[None, Some(0), Some(0), None]);
    assert_eq!(iou(&p, &g, ClassId(0)).unwrap(), Some(1.0 / 3.0));
}

#[test]
fn extent_mismatch_is_an_error() {
    assert!(iou(&labels(2, 2, &[None; 4]), &labels(1, 4, &[None; 4]), ClassId(0)).is_err());
}
