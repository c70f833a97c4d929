//! Class memory: per-class category / hyper-class embeddings, hyper-class
//! construction by k-means over the base classes, and the gated
//! cross-information module that aligns the two embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::Rng as _;

use crate::numkit::{seeded_rng, sigmoid_scalar, ActKind, AffineParams, ParamSet, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fixed-length embedding vector with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("embedding must be non-empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl core::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One learned class.
///
/// `hyper` never changes after insertion unless the pool was explicitly
/// built with mutable hyper-class embeddings for ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    class_id: ClassId,
    session_id: u32,
    raw_category: Embedding,
    raw_hyper: Embedding,
    category: Embedding,
    hyper: Embedding,
}

impl ClassRecord {
    pub fn new(
        class_id: ClassId,
        session_id: u32,
        raw_category: Embedding,
        raw_hyper: Embedding,
        category: Embedding,
        hyper: Embedding,
    ) -> Result<Self> {
        let d = category.dim();
        for (name, e) in [("raw category", &raw_category), ("raw hyper", &raw_hyper), ("hyper", &hyper)] {
            if e.dim() != d {
                return Err(Error::Shape {
                    op: "class record",
                    detail: format!("{name} has dim {} but category has {d}", e.dim()),
                });
            }
        }
        Ok(Self {
            class_id,
            session_id,
            raw_category,
            raw_hyper,
            category,
            hyper,
        })
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }
    pub fn session_id(&self) -> u32 {
        self.session_id
    }
    pub fn raw_category(&self) -> &Embedding {
        &self.raw_category
    }
    pub fn raw_hyper(&self) -> &Embedding {
        &self.raw_hyper
    }
    pub fn category(&self) -> &Embedding {
        &self.category
    }
    pub fn hyper(&self) -> &Embedding {
        &self.hyper
    }
}

/// Ordered set of class records keyed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryPool {
    records: Vec<ClassRecord>,
    mutable_hyper: bool,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// A pool whose hyper-class embeddings may be rewritten; only used to
    /// ablate the fixed-memory design.
    pub fn with_mutable_hyper() -> Self {
        Self {
            records: Vec::new(),
            mutable_hyper: true,
        }
    }

    pub fn hyper_is_mutable(&self) -> bool {
        self.mutable_hyper
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ClassRecord] {
        &self.records
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.category.dim())
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.records.iter().position(|r| r.class_id == id)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassRecord> {
        self.records.iter().find(|r| r.class_id == id)
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    /// Adds a record; ids must be unique and dimensions consistent.
    pub fn insert_record(&mut self, record: ClassRecord) -> Result<()> {
        if self.index_of(record.class_id).is_some() {
            return Err(Error::DuplicateClass(record.class_id));
        }
        if let Some(d) = self.dim() {
            if record.category.dim() != d {
                return Err(Error::Dimension {
                    op: "insert_class",
                    expected: d,
                    got: record.category.dim(),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Stores a new class with its aligned embeddings.
    pub fn insert_class(
        &mut self,
        class_id: ClassId,
        raw_category: Embedding,
        raw_hyper: Embedding,
        category: Embedding,
        hyper: Embedding,
        session_id: u32,
    ) -> Result<()> {
        let record = ClassRecord::new(class_id, session_id, raw_category, raw_hyper, category, hyper)?;
        self.insert_record(record)
    }

    pub fn categories(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.category.0.clone()).collect()
    }

    pub fn hypers(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.hyper.0.clone()).collect()
    }

    pub(crate) fn set_categories(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        assert_eq!(values.len(), self.records.len());
        for (r, v) in self.records.iter_mut().zip(values) {
            r.category = Embedding::new(v)?;
        }
        Ok(())
    }

    pub(crate) fn set_category(&mut self, index: usize, value: Vec<f64>) -> Result<()> {
        self.records[index].category = Embedding::new(value)?;
        Ok(())
    }

    pub(crate) fn set_hypers(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        if !self.mutable_hyper {
            return Err(Error::Invalid("hyper-class embeddings are immutable in this pool".into()));
        }
        assert_eq!(values.len(), self.records.len());
        for (r, v) in self.records.iter_mut().zip(values) {
            r.hyper = Embedding::new(v)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// k-means

/// Result of [`kmeans`]; `assignments[i]` indexes `centroids`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared Euclidean distances.
    pub sse: f64,
}

pub const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Order-independent FNV-1a digest of a point set (points pre-sorted).
fn point_set_hash(sorted: &[&[f64]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in sorted {
        for v in *p {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Lloyd's k-means, best of `restarts` k-means++ initialisations by SSE.
///
/// Points are processed in a canonical (lexicographic) order and each
/// restart's generator is derived from `seed`, the restart index and a
/// digest of the point set, so the result does not depend on input order.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::ClusterCount {
            clusters: k,
            points: points.len(),
        });
    }
    let dim = points[0].as_ref().len();
    for p in points {
        if p.as_ref().len() != dim {
            return Err(Error::Dimension {
                op: "kmeans",
                expected: dim,
                got: p.as_ref().len(),
            });
        }
        if !p.as_ref().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("kmeans point"));
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lexicographic(points[a].as_ref(), points[b].as_ref()));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_ref()).collect();
    let digest = point_set_hash(&sorted);

    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seeded_rng(splitmix(seed ^ splitmix(digest ^ splitmix(r as u64))));
        let (assign, centroids, sse) = lloyd(&sorted, k, &mut rng);
        if best.as_ref().is_none_or(|b| sse < b.2) {
            best = Some((assign, centroids, sse));
        }
    }
    let (sorted_assign, centroids, sse) = best.expect("at least one restart");
    let mut assignments = vec![0; points.len()];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = sorted_assign[pos];
    }
    Ok(Clustering {
        assignments,
        centroids,
        sse,
    })
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Reseeds empty clusters with the point farthest from its centroid.
fn repair_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], assign: &mut Vec<usize>) {
    let k = centroids.len();
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(points[a], &centroids[assign[a]])
                    .total_cmp(&sq_dist(points[b], &centroids[assign[b]]))
                    .then(b.cmp(&a))
            });
        let Some(far) = far else { return };
        centroids[empty] = points[far].to_vec();
        assign[far] = empty;
    }
}

fn means(points: &[&[f64]], assign: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    sums.iter_mut()
        .zip(&counts)
        .enumerate()
        .map(|(j, (s, &c))| {
            if c == 0 {
                previous[j].clone()
            } else {
                s.iter().map(|v| v / c as f64).collect()
            }
        })
        .collect()
}

fn lloyd(points: &[&[f64]], k: usize, rng: &mut Rng) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assign = assign_all(points, &centroids);
    repair_empty(points, &mut centroids, &mut assign);
    for _ in 0..KMEANS_MAX_ITERS {
        centroids = means(points, &assign, k, &centroids);
        let mut next = assign_all(points, &centroids);
        repair_empty(points, &mut centroids, &mut next);
        if next == assign {
            break;
        }
        assign = next;
    }
    centroids = means(points, &assign, k, &centroids);
    let sse = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
    (assign, centroids, sse)
}

/// Centroid (of the k-means clustering of `base`) nearest to `query`.
pub fn nearest_centroid<P: AsRef<[f64]>>(query: &[f64], base: &[P], k: usize, restarts: usize, seed: u64) -> Result<Vec<f64>> {
    if base.is_empty() {
        return Err(Error::EmptyPool);
    }
    if base[0].as_ref().len() != query.len() {
        return Err(Error::Dimension {
            op: "raw_hyperclass",
            expected: base[0].as_ref().len(),
            got: query.len(),
        });
    }
    let clustering = kmeans(base, k, restarts, seed)?;
    let (j, _) = nearest(query, &clustering.centroids);
    Ok(clustering.centroids[j].clone())
}

/// Raw hyper-class embedding for `ec_raw`: the centroid of the base-class
/// cluster nearest to it, clustering the raw category embeddings of the
/// session-0 records into `k` groups.
pub fn raw_hyperclass(ec_raw: &Embedding, pool: &MemoryPool, k: usize, restarts: usize, seed: u64) -> Result<Embedding> {
    let base: Vec<&[f64]> = pool
        .records
        .iter()
        .filter(|r| r.session_id == 0)
        .map(|r| r.raw_category.as_slice())
        .collect();
    Embedding::new(nearest_centroid(ec_raw, &base, k, restarts, seed)?)
}

// ---------------------------------------------------------------------------
// Cross-information module

/// Two two-layer gate branches, one per embedding kind. Every layer maps
/// `D -> D`.
#[derive(Clone, Debug, PartialEq)]
pub struct CimParams {
    pub hyper: [AffineParams; 2],
    pub category: [AffineParams; 2],
}

impl CimParams {
    pub fn zeros(dim: usize) -> Self {
        let z = || AffineParams::zeros(dim, dim, true);
        Self {
            hyper: [z(), z()],
            category: [z(), z()],
        }
    }

    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let mut layer = || AffineParams::init(dim, dim, true, rng);
        Self {
            hyper: [layer(), layer()],
            category: [layer(), layer()],
        }
    }

    pub fn dim(&self) -> usize {
        self.hyper[0].in_dim()
    }
}

impl ParamSet for CimParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.hyper.iter().chain(&self.category).flat_map(|a| a.slices()).collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.hyper.iter_mut().chain(&mut self.category).flat_map(|a| a.slices_mut()).collect()
    }
}

/// Hidden activation between the two gate layers.
pub const CIM_ACT: ActKind = ActKind::Silu;

#[derive(Clone, Debug)]
struct GateCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

fn gate_forward(layers: &[AffineParams; 2], x: &[f64]) -> GateCache {
    let pre1 = layers[0].forward_unchecked(x);
    let hidden = CIM_ACT.apply_slice(&pre1);
    let gate = layers[1].forward_unchecked(&hidden).into_iter().map(sigmoid_scalar).collect();
    GateCache {
        input: x.to_vec(),
        pre1,
        hidden,
        gate,
    }
}

fn gate_backward(layers: &[AffineParams; 2], cache: &GateCache, dgate: &[f64], grads: &mut [AffineParams; 2]) -> Vec<f64> {
    let dz2: Vec<f64> = dgate.iter().zip(&cache.gate).map(|(d, g)| d * g * (1.0 - g)).collect();
    let mut dh = layers[1].backward(&cache.hidden, &dz2, &mut grads[1]);
    CIM_ACT.backward_in_place(&cache.pre1, &mut dh);
    layers[0].backward(&cache.input, &dh, &mut grads[0])
}

/// Values kept for [`cim_backward`].
#[derive(Clone, Debug)]
pub struct CimCache {
    hyper: GateCache,
    category: GateCache,
    fused: Vec<f64>,
}

/// Aligned `(E_h, E_c)`: both raw embeddings are weighted by the product of
/// the two sigmoid gates.
pub fn cim_align(eh_raw: &Embedding, ec_raw: &Embedding, p: &CimParams) -> Result<(Embedding, Embedding)> {
    let (eh, ec, _) = cim_forward(eh_raw, ec_raw, p)?;
    Ok((Embedding::new(eh)?, Embedding::new(ec)?))
}

pub fn cim_forward(eh_raw: &[f64], ec_raw: &[f64], p: &CimParams) -> Result<(Vec<f64>, Vec<f64>, CimCache)> {
    let d = p.dim();
    for (e, name) in [(eh_raw, "cim hyper input"), (ec_raw, "cim category input")] {
        if e.len() != d {
            return Err(Error::Dimension {
                op: name,
                expected: d,
                got: e.len(),
            });
        }
    }
    let hyper = gate_forward(&p.hyper, eh_raw);
    let category = gate_forward(&p.category, ec_raw);
    let fused: Vec<f64> = hyper.gate.iter().zip(&category.gate).map(|(a, b)| a * b).collect();
    let eh = fused.iter().zip(eh_raw).map(|(f, e)| f * e).collect();
    let ec = fused.iter().zip(ec_raw).map(|(f, e)| f * e).collect();
    Ok((eh, ec, CimCache { hyper, category, fused }))
}

/// Parameter gradients plus `(dL/d eh_raw, dL/d ec_raw)`.
pub fn cim_backward(p: &CimParams, cache: &CimCache, d_eh: &[f64], d_ec: &[f64], grads: &mut CimParams) -> (Vec<f64>, Vec<f64>) {
    let eh_raw = &cache.hyper.input;
    let ec_raw = &cache.category.input;
    let dfused: Vec<f64> = (0..cache.fused.len())
        .map(|k| d_eh[k] * eh_raw[k] + d_ec[k] * ec_raw[k])
        .collect();
    let dgate_h: Vec<f64> = dfused.iter().zip(&cache.category.gate).map(|(d, g)| d * g).collect();
    let dgate_c: Vec<f64> = dfused.iter().zip(&cache.hyper.gate).map(|(d, g)| d * g).collect();
    let mut deh = gate_backward(&p.hyper, &cache.hyper, &dgate_h, &mut grads.hyper);
    let mut dec = gate_backward(&p.category, &cache.category, &dgate_c, &mut grads.category);
    for k in 0..cache.fused.len() {
        deh[k] += d_eh[k] * cache.fused[k];
        dec[k] += d_ec[k] * cache.fused[k];
    }
    (deh, dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{fd_grad, flatten, rel_error, unflatten_into};

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kmeans_one_dimensional_example() {
        let pts = [[0.0], [1.0], [10.0]];
        let c = kmeans(&pts, 2, 50, 0).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        assert!((c.sse - 0.5).abs() < 1e-12);
        let mut cents: Vec<f64> = c.centroids.iter().map(|v| v[0]).collect();
        cents.sort_by(f64::total_cmp);
        assert_eq!(cents, [0.5, 10.0]);
    }

    #[test]
    fn kmeans_degenerate_cluster_counts() {
        let pts = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [4.0, 4.0]];
        let one = kmeans(&pts, 1, 3, 9).unwrap();
        assert!((one.centroids[0][0] - 2.125).abs() < 1e-12);
        assert!((one.centroids[0][1] - 1.375).abs() < 1e-12);
        let all = kmeans(&pts, 4, 3, 9).unwrap();
        assert_eq!(all.sse, 0.0);
        let mut seen = all.assignments.clone();
        seen.sort();
        assert_eq!(seen, [0, 1, 2, 3]);
        assert!(matches!(kmeans(&pts, 5, 1, 0), Err(Error::ClusterCount { clusters: 5, points: 4 })));
        assert!(kmeans(&pts, 0, 1, 0).is_err());
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let pts = [[1.0], [1.0], [1.0], [2.0]];
        let c = kmeans(&pts, 3, 5, 1).unwrap();
        assert_eq!(c.sse, 0.0);
        let used: alloc::collections::BTreeSet<usize> = c.assignments.iter().copied().collect();
        assert!(used.len() >= 2);
    }

    #[test]
    fn kmeans_is_deterministic_and_order_free() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 1.7).sin() * 3.0, (i as f64).cos()]).collect();
        let a = kmeans(&pts, 3, 10, 42).unwrap();
        let b = kmeans(&pts, 3, 10, 42).unwrap();
        assert_eq!(a, b);
        let mut rev = pts.clone();
        rev.reverse();
        let c = kmeans(&rev, 3, 10, 42).unwrap();
        assert_eq!(a.centroids, c.centroids);
        assert_eq!(a.sse.to_bits(), c.sse.to_bits());
    }

    fn base_pool(raws: &[&[f64]]) -> MemoryPool {
        let mut pool = MemoryPool::new();
        for (i, r) in raws.iter().enumerate() {
            pool.insert_class(ClassId(i as u32), emb(r), emb(r), emb(r), emb(r), 0).unwrap();
        }
        pool
    }

    #[test]
    fn hyperclass_of_single_base_class_is_that_class() {
        let pool = base_pool(&[&[0.3, -1.2]]);
        let h = raw_hyperclass(&emb(&[5.0, 5.0]), &pool, 1, 4, 0).unwrap();
        assert_eq!(h.as_slice(), [0.3, -1.2]);
    }

    #[test]
    fn hyperclass_picks_the_nearby_group_mean() {
        let pool = base_pool(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[20.0, 20.0], &[21.0, 20.0]]);
        let h = raw_hyperclass(&emb(&[0.5, 0.2]), &pool, 2, 20, 3).unwrap();
        assert!((h[0] - 1.0 / 3.0).abs() < 1e-12 && (h[1] - 1.0 / 3.0).abs() < 1e-12);
        let h = raw_hyperclass(&emb(&[18.0, 19.0]), &pool, 2, 20, 3).unwrap();
        assert!((h[0] - 20.5).abs() < 1e-12 && (h[1] - 20.0).abs() < 1e-12);
        assert!(matches!(
            raw_hyperclass(&emb(&[0.0, 0.0]), &pool, 6, 5, 0),
            Err(Error::ClusterCount { .. })
        ));
        assert_eq!(raw_hyperclass(&emb(&[0.0, 0.0]), &MemoryPool::new(), 1, 5, 0), Err(Error::EmptyPool));
    }

    #[test]
    fn insert_rejects_duplicates_and_grows_pool() {
        let mut pool = base_pool(&[&[1.0], &[2.0]]);
        assert_eq!(pool.len(), 2);
        let e = emb(&[3.0]);
        assert_eq!(
            pool.insert_class(ClassId(1), e.clone(), e.clone(), e.clone(), e.clone(), 1),
            Err(Error::DuplicateClass(ClassId(1)))
        );
        pool.insert_class(ClassId(7), e.clone(), e.clone(), e.clone(), e, 1).unwrap();
        assert_eq!(pool.len(), 3);
        assert!(pool.insert_class(ClassId(8), emb(&[1.0, 2.0]), emb(&[1.0, 2.0]), emb(&[1.0, 2.0]), emb(&[1.0, 2.0]), 1).is_err());
    }

    #[test]
    fn hyper_is_locked_by_default() {
        let mut pool = base_pool(&[&[1.0]]);
        assert!(pool.set_hypers(vec![vec![2.0]]).is_err());
        let mut open = MemoryPool::with_mutable_hyper();
        open.insert_record(pool.records()[0].clone()).unwrap();
        open.set_hypers(vec![vec![2.0]]).unwrap();
        assert_eq!(open.records()[0].hyper().as_slice(), [2.0]);
    }

    #[test]
    fn zero_cim_halves_each_gate() {
        let p = CimParams::zeros(3);
        let (eh, ec) = cim_align(&emb(&[1.0, -2.0, 4.0]), &emb(&[8.0, 0.0, -4.0]), &p).unwrap();
        assert_eq!(eh.as_slice(), [0.25, -0.5, 1.0]);
        assert_eq!(ec.as_slice(), [2.0, 0.0, -1.0]);
        assert!(cim_align(&emb(&[1.0]), &emb(&[1.0, 2.0, 3.0]), &p).is_err());
    }

    #[test]
    fn cim_output_is_bounded_by_input() {
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let p = CimParams::init(6, &mut rng);
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (eh, ec) = cim_align(&emb(&a), &emb(&b), &p).unwrap();
            for k in 0..6 {
                assert!(eh[k].abs() <= a[k].abs() && ec[k].abs() <= b[k].abs());
            }
        }
    }

    #[test]
    fn cim_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(6);
        let p = CimParams::init(8, &mut rng);
        let eh: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ec: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wh: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &CimParams, eh: &[f64], ec: &[f64]| -> f64 {
            let (a, b, _) = cim_forward(eh, ec, p).unwrap();
            a.iter().zip(&wh).map(|(x, w)| w * x * x).sum::<f64>() + b.iter().zip(&wc).map(|(x, w)| w * x).sum::<f64>()
        };
        let (a, _, cache) = cim_forward(&eh, &ec, &p).unwrap();
        let da: Vec<f64> = a.iter().zip(&wh).map(|(x, w)| 2.0 * w * x).collect();
        let mut g = p.zeros_like();
        let (deh, dec) = cim_backward(&p, &cache, &da, &wc, &mut g);
        let fd = fd_grad(
            |t| {
                let mut q = p.clone();
                unflatten_into(&mut q, t);
                loss(&q, &eh, &ec)
            },
            &flatten(&p),
            1e-3,
        )
        .unwrap();
        assert!(rel_error(&flatten(&g), &fd) < 1e-4);
        assert!(rel_error(&deh, &fd_grad(|x| loss(&p, x, &ec), &eh, 1e-3).unwrap()) < 1e-4);
        assert!(rel_error(&dec, &fd_grad(|x| loss(&p, &eh, x), &ec, 1e-3).unwrap()) < 1e-4);
    }
}
