use ifss_core::membank::{kmeans, raw_hyperclass, ClassId, Embedding, MemoryPool};
use proptest::prelude::*;

fn sse_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
    }
    total
}

/// Minimum SSE over every labelling into at most two non-empty clusters.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    if k == 1 {
        return sse_of(points, &vec![0; n], 1);
    }
    (1..(1u32 << n) - 1)
        .map(|mask| {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            sse_of(points, &labels, 2)
        })
        .fold(f64::INFINITY, f64::min)
}

fn point_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=2, 2usize..=8).prop_flat_map(|(dim, n)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), n))
}

#[test]
fn exhaustive_oracle_example() {
    let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
    assert!((exhaustive_optimum(&pts, 2) - 0.5).abs() < 1e-15);
    let c = kmeans(&pts, 2, 50, 0).unwrap();
    assert!((c.sse - exhaustive_optimum(&pts, 2)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kmeans_reaches_exhaustive_optimum(points in point_sets(), k in 1usize..=2, seed in any::<u64>()) {
        let c = kmeans(&points, k, 50, seed).unwrap();
        let reported = sse_of(&points, &c.assignments, k);
        prop_assert!((reported - c.sse).abs() < 1e-9);
        prop_assert!((c.sse - exhaustive_optimum(&points, k)).abs() < 1e-9);
    }

    #[test]
    fn raw_hyperclass_ignores_record_order(
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 3..10),
        query in prop::collection::vec(-5.0f64..5.0, 3),
        k in 1usize..=3,
        shuffle_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let build = |order: &[usize]| {
            let mut pool = MemoryPool::new();
            for &i in order {
                let e = Embedding::new(points[i].clone()).unwrap();
                pool.insert_class(ClassId(i as u32), e.clone(), e.clone(), e.clone(), e, 0).unwrap();
            }
            pool
        };
        let identity: Vec<usize> = (0..points.len()).collect();
        let mut shuffled = identity.clone();
        let mut s = shuffle_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let q = Embedding::new(query).unwrap();
        let a = raw_hyperclass(&q, &build(&identity), k, 8, seed).unwrap();
        let b = raw_hyperclass(&q, &build(&shuffled), k, 8, seed).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
