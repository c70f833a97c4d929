//! End-to-end model: parameter bundle, the incremental learner that owns the
//! memory pool, and episodic base-session training that replays the
//! incremental protocol on the base classes.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::casm::{bce_with_logits, casm_backward, casm_forward, nms_fuse, prepare_query, CasmParams, ConfidenceMap, LabelMap};
use crate::eaus::{
    apply_strategy, kshot_absorb, strategy_backward, strategy_forward, StrategyParams, StrategyTape, UpdateKind, UpdateStrategy,
    UpdateTarget, UpdateTrace,
};
use crate::featext::{extract_backward, extract_features, extract_with_cache, pyramid_backward, pyramid_embed, pyramid_embed_with_cache, BinaryMask, FeatExtParams, RasterImage};
use crate::membank::{cim_align, cim_backward, cim_forward, kmeans, nearest_centroid, ClassId, CimParams, Embedding, MemoryPool};
use crate::numkit::{seeded_rng, ActKind, LrSchedule, Optimizer, OptimizerKind, ParamSet, Rng};
use crate::{Error, Result};

/// An image with the mask of its single labelled object.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RasterImage,
    pub mask: BinaryMask,
}

/// Labelled samples of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub class_id: ClassId,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Extractor stage widths; the last one is the feature channel count.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    /// Width of the pyramid head in the segmentation module.
    pub hidden: usize,
    pub iterations: usize,
    pub act: ActKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            widths: vec![8, 16],
            embed_dim: 16,
            hidden: 6,
            iterations: crate::casm::DEFAULT_ITERATIONS,
            act: ActKind::Silu,
        }
    }
}

/// Every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub feat: FeatExtParams,
    pub cim: CimParams,
    pub strategy: StrategyParams,
    pub casm: CasmParams,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Invalid("embed_dim and hidden must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let feat = FeatExtParams::init(cfg.image_channels, &cfg.widths, cfg.embed_dim, cfg.act, &mut rng)?;
        let cim = CimParams::init(cfg.embed_dim, &mut rng);
        let strategy = StrategyParams::init(cfg.embed_dim, &mut rng);
        let casm = CasmParams::init(feat.feature_channels(), cfg.embed_dim, cfg.hidden, cfg.iterations, &mut rng);
        Ok(Self { feat, cim, strategy, casm })
    }

    pub fn embed_dim(&self) -> usize {
        self.feat.embed_dim()
    }
}

impl ParamSet for Model {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.feat.slices();
        v.extend(self.cim.slices());
        v.extend(self.strategy.slices());
        v.extend(self.casm.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.feat.slices_mut();
        v.extend(self.cim.slices_mut());
        v.extend(self.strategy.slices_mut());
        v.extend(self.casm.slices_mut());
        v
    }
}

/// Which embeddings reach the segmentation module. A removed embedding is
/// replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EmbeddingUse {
    pub hyper: bool,
    pub category: bool,
}

impl Default for EmbeddingUse {
    fn default() -> Self {
        Self {
            hyper: true,
            category: true,
        }
    }
}

/// Settings of the incremental protocol that do not involve gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnConfig {
    pub clusters: usize,
    pub restarts: usize,
    pub cluster_seed: u64,
    pub tau: f64,
    pub strategy: UpdateStrategy,
    pub embeddings: EmbeddingUse,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            restarts: 10,
            cluster_seed: 0,
            tau: crate::casm::DEFAULT_TAU,
            strategy: UpdateStrategy::EAUS,
            embeddings: EmbeddingUse::default(),
        }
    }
}

fn touches_category(t: UpdateTarget) -> bool {
    matches!(t, UpdateTarget::Category | UpdateTarget::Both)
}

fn touches_hyper(t: UpdateTarget) -> bool {
    matches!(t, UpdateTarget::Hyper | UpdateTarget::Both)
}

fn visible(e: &[f64], used: bool) -> Vec<f64> {
    if used {
        e.to_vec()
    } else {
        vec![0.0; e.len()]
    }
}

/// Raw category embedding of one support sample.
pub fn raw_embedding(feat: &FeatExtParams, sample: &Sample) -> Result<Vec<f64>> {
    let fmap = extract_features(&sample.image, feat)?;
    pyramid_embed(&fmap, &sample.mask, feat)
}

fn mean_embedding(feat: &FeatExtParams, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("class without support samples".into()));
    }
    let mut acc = vec![0.0; feat.embed_dim()];
    for s in samples {
        crate::numkit::add_into(&mut acc, &raw_embedding(feat, s)?);
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// A trained model plus the memory pool it builds session by session.
#[derive(Clone, Debug)]
pub struct Learner {
    model: Model,
    pool: MemoryPool,
    cfg: LearnConfig,
    session: Option<u32>,
}

impl Learner {
    pub fn new(model: Model, cfg: LearnConfig) -> Self {
        let pool = if touches_hyper(cfg.strategy.target) {
            MemoryPool::with_mutable_hyper()
        } else {
            MemoryPool::new()
        };
        Self {
            model,
            pool,
            cfg,
            session: None,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }
    pub fn config(&self) -> &LearnConfig {
        &self.cfg
    }
    /// Index of the last learned session, if any.
    pub fn session(&self) -> Option<u32> {
        self.session
    }

    /// Replaces the pool, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, pool: MemoryPool, session: u32) {
        self.pool = pool;
        self.session = Some(session);
    }

    /// Session 0: one record per base class from the mean raw embedding of
    /// all its support samples.
    pub fn learn_base(&mut self, supports: &[ClassSamples]) -> Result<UpdateTrace> {
        if self.session.is_some() {
            return Err(Error::Invalid("base session already learned".into()));
        }
        if self.cfg.clusters > supports.len() {
            return Err(Error::ClusterCount {
                clusters: self.cfg.clusters,
                points: supports.len(),
            });
        }
        let raws = supports
            .iter()
            .map(|c| mean_embedding(&self.model.feat, &c.samples))
            .collect::<Result<Vec<_>>>()?;
        for (c, raw) in supports.iter().zip(&raws) {
            let raw_h = nearest_centroid(raw, &raws, self.cfg.clusters, self.cfg.restarts, self.cfg.cluster_seed)?;
            self.insert(c.class_id, raw.clone(), raw_h, 0)?;
        }
        self.session = Some(0);
        self.apply(0)
    }

    /// One incremental session: insert every new class, fold extra shots,
    /// then apply the update strategy once.
    pub fn learn_session(&mut self, supports: &[ClassSamples]) -> Result<UpdateTrace> {
        let session = self.session.ok_or_else(|| Error::Invalid("learn the base session first".into()))? + 1;
        let absorb = self.cfg.strategy.kind == UpdateKind::Eaus && touches_category(self.cfg.strategy.target);
        for c in supports {
            if c.samples.is_empty() {
                return Err(Error::Invalid("class without support samples".into()));
            }
            let shots = if absorb {
                c.samples
                    .iter()
                    .map(|s| raw_embedding(&self.model.feat, s))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![mean_embedding(&self.model.feat, &c.samples)?]
            };
            let raw = Embedding::new(shots[0].clone())?;
            let raw_h = crate::membank::raw_hyperclass(&raw, &self.pool, self.cfg.clusters, self.cfg.restarts, self.cfg.cluster_seed)?;
            self.insert(c.class_id, shots[0].clone(), raw_h.as_slice().to_vec(), session)?;
            for shot in &shots[1..] {
                let (_, ec) = cim_align(&raw_h, &Embedding::new(shot.clone())?, &self.model.cim)?;
                self.pool = kshot_absorb(&self.pool, c.class_id, &ec, &self.model.strategy.eaus)?;
            }
        }
        self.session = Some(session);
        self.apply(session)
    }

    fn insert(&mut self, id: ClassId, raw_c: Vec<f64>, raw_h: Vec<f64>, session: u32) -> Result<()> {
        let raw_c = Embedding::new(raw_c)?;
        let raw_h = Embedding::new(raw_h)?;
        let (eh, ec) = cim_align(&raw_h, &raw_c, &self.model.cim)?;
        self.pool.insert_class(id, raw_c, raw_h, ec, eh, session)
    }

    fn apply(&mut self, session: u32) -> Result<UpdateTrace> {
        let (pool, trace) = apply_strategy(&self.pool, self.cfg.strategy, &self.model.strategy, session)?;
        self.pool = pool;
        Ok(trace)
    }

    /// Per-class confidence at image resolution.
    pub fn confidence_maps(&self, image: &RasterImage) -> Result<BTreeMap<ClassId, ConfidenceMap>> {
        let fmap = extract_features(image, &self.model.feat)?;
        let ctx = prepare_query(&fmap, &self.model.casm)?;
        let factor = self.model.feat.downsample();
        let use_ = self.cfg.embeddings;
        let mut out = BTreeMap::new();
        for r in self.pool.records() {
            let ec = visible(r.category(), use_.category);
            let eh = visible(r.hyper(), use_.hyper);
            let (z, _) = casm_forward(&ctx, &ec, &eh, &self.model.casm)?;
            let m = ConfidenceMap::from_logits(ctx.height(), ctx.width(), &z);
            out.insert(r.class_id(), m.upsample(factor));
        }
        Ok(out)
    }

    pub fn predict(&self, image: &RasterImage) -> Result<LabelMap> {
        if self.pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        nms_fuse(&self.confidence_maps(image)?, self.cfg.tau)
    }
}

/// Base-session optimisation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Base classes held out per episode to play the incremental classes.
    pub pseudo_new: usize,
    /// Largest number of simulated incremental rounds per episode.
    pub max_rounds: usize,
    pub queries: usize,
    /// Absent classes compared against each query.
    pub negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            episodes_per_epoch: 20,
            optimizer: OptimizerKind::ADAM,
            schedule: LrSchedule {
                initial: 2e-3,
                gamma: 0.9,
                every: 20,
            },
            pseudo_new: 3,
            max_rounds: 3,
            queries: 3,
            negatives: 2,
        }
    }
}

/// One episode: indices into the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    /// Data index per episode class; pseudo-base classes first, then the
    /// pseudo-new classes in round order.
    pub classes: Vec<usize>,
    /// Support sample index per episode class.
    pub supports: Vec<usize>,
    pub pseudo_base: usize,
    /// Number of pseudo-new classes inserted in each round.
    pub rounds: Vec<usize>,
    /// `(episode class, sample index, absent episode classes)`.
    pub queries: Vec<(usize, usize, Vec<usize>)>,
}

impl EpisodePlan {
    /// Round in which episode class `i` is inserted (0 for pseudo-base).
    fn round_of(&self, i: usize) -> u32 {
        let mut end = self.pseudo_base;
        if i < end {
            return 0;
        }
        for (r, &n) in self.rounds.iter().enumerate() {
            end += n;
            if i < end {
                return r as u32 + 1;
            }
        }
        unreachable!("class index beyond episode")
    }

    pub fn sample(data: &[ClassSamples], cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let n = data.len();
        if cfg.pseudo_new >= n {
            return Err(Error::Invalid("pseudo-new classes must leave at least one base class".into()));
        }
        if data.iter().any(|c| c.samples.len() < 2) {
            return Err(Error::Invalid("every training class needs at least two samples".into()));
        }
        let mut classes: Vec<usize> = (0..n).collect();
        classes.shuffle(rng);
        let pseudo_base = n - cfg.pseudo_new;
        let max_rounds = cfg.max_rounds.min(cfg.pseudo_new);
        let rounds_n = if max_rounds == 0 { 0 } else { rng.gen_range(1..=max_rounds) };
        let rounds: Vec<usize> = (0..rounds_n)
            .map(|r| cfg.pseudo_new / rounds_n + usize::from(r < cfg.pseudo_new % rounds_n))
            .collect();
        let supports: Vec<usize> = classes.iter().map(|&c| rng.gen_range(0..data[c].samples.len())).collect();
        let mut queries = Vec::with_capacity(cfg.queries);
        for _ in 0..cfg.queries {
            let k = rng.gen_range(0..n);
            let count = data[classes[k]].samples.len();
            let mut s = rng.gen_range(0..count - 1);
            if s >= supports[k] {
                s += 1;
            }
            let mut others: Vec<usize> = (0..n).filter(|&j| j != k).collect();
            others.shuffle(rng);
            others.truncate(cfg.negatives);
            queries.push((k, s, others));
        }
        Ok(Self {
            classes,
            supports,
            pseudo_base,
            rounds,
            queries,
        })
    }
}

struct RoundTape {
    len: usize,
    category: Option<StrategyTape>,
    hyper: Option<StrategyTape>,
}

/// Mean loss of one episode; accumulates parameter gradients into `grads`
/// when given.
pub fn run_episode(model: &Model, data: &[ClassSamples], plan: &EpisodePlan, learn: &LearnConfig, mut grads: Option<&mut Model>) -> Result<f64> {
    let n = plan.classes.len();
    let feat = &model.feat;
    let mut raws = Vec::with_capacity(n);
    let mut support_caches = Vec::with_capacity(n);
    for (&c, &s) in plan.classes.iter().zip(&plan.supports) {
        let sample = &data[c].samples[s];
        let (fmap, ecache) = extract_with_cache(&sample.image, feat)?;
        let (raw, pcache) = pyramid_embed_with_cache(&fmap, &sample.mask, feat)?;
        raws.push(raw);
        support_caches.push((ecache, pcache));
    }

    let base = &raws[..plan.pseudo_base];
    let clustering = kmeans(base, learn.clusters.min(plan.pseudo_base), learn.restarts, learn.cluster_seed)?;
    let cluster_of: Vec<usize> = (0..n)
        .map(|i| {
            if i < plan.pseudo_base {
                clustering.assignments[i]
            } else {
                let d = |c: &Vec<f64>| raws[i].iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (0..clustering.centroids.len())
                    .min_by(|&a, &b| d(&clustering.centroids[a]).total_cmp(&d(&clustering.centroids[b])).then(a.cmp(&b)))
                    .unwrap_or(0)
            }
        })
        .collect();

    let mut cim_caches = Vec::with_capacity(n);
    let mut cats = Vec::with_capacity(n);
    let mut hyps = Vec::with_capacity(n);
    for i in 0..n {
        let (eh, ec, cache) = cim_forward(&clustering.centroids[cluster_of[i]], &raws[i], &model.cim)?;
        cats.push(ec);
        hyps.push(eh);
        cim_caches.push(cache);
    }

    let strategy = learn.strategy;
    let rounds_total = plan.rounds.len();
    let mut tapes = Vec::with_capacity(rounds_total + 1);
    let mut state_c: Vec<Vec<f64>> = Vec::new();
    let mut state_h: Vec<Vec<f64>> = Vec::new();
    let mut len = plan.pseudo_base;
    for r in 0..=rounds_total {
        if r > 0 {
            len += plan.rounds[r - 1];
        }
        state_c.extend(cats[state_c.len()..len].iter().cloned());
        state_h.extend(hyps[state_h.len()..len].iter().cloned());
        let mask: Vec<bool> = (0..len).map(|i| strategy.scope.includes(plan.round_of(i), r as u32)).collect();
        let mut tape = RoundTape {
            len,
            category: None,
            hyper: None,
        };
        if touches_category(strategy.target) {
            let (out, t) = strategy_forward(&state_c, &mask, strategy.kind, &model.strategy)?;
            state_c = out;
            tape.category = Some(t);
        }
        if touches_hyper(strategy.target) {
            let (out, t) = strategy_forward(&state_h, &mask, strategy.kind, &model.strategy)?;
            state_h = out;
            tape.hyper = Some(t);
        }
        tapes.push(tape);
    }

    let use_ = learn.embeddings;
    let pairs: usize = plan.queries.iter().map(|q| 1 + q.2.len()).sum();
    let scale = 1.0 / pairs as f64;
    let factor = feat.downsample();
    let mut loss = 0.0;
    let mut d_cats = vec![vec![0.0; model.embed_dim()]; n];
    let mut d_hyps = vec![vec![0.0; model.embed_dim()]; n];
    for (k, s, absent) in &plan.queries {
        let sample = &data[plan.classes[*k]].samples[*s];
        let (qmap, qcache) = extract_with_cache(&sample.image, feat)?;
        let ctx = prepare_query(&qmap, &model.casm)?;
        let positive = sample.mask.coverage(factor)?;
        let negative = vec![0.0; positive.len()];
        let mut dq = vec![0.0; qmap.len()];
        for (j, target) in core::iter::once((*k, &positive)).chain(absent.iter().map(|&j| (j, &negative))) {
            let ec = visible(&state_c[j], use_.category);
            let eh = visible(&state_h[j], use_.hyper);
            let (z, tape) = casm_forward(&ctx, &ec, &eh, &model.casm)?;
            let (l, mut dz) = bce_with_logits(&z, target)?;
            loss += l * scale;
            if let Some(g) = grads.as_deref_mut() {
                dz.iter_mut().for_each(|v| *v *= scale);
                let (dec, deh) = casm_backward(&model.casm, &ctx, &tape, &dz, &mut g.casm, Some(&mut dq));
                if use_.category {
                    crate::numkit::add_into(&mut d_cats[j], &dec);
                }
                if use_.hyper {
                    crate::numkit::add_into(&mut d_hyps[j], &deh);
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            extract_backward(feat, &qcache, &dq, &mut g.feat);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("episode loss"));
    }
    let Some(g) = grads else {
        return Ok(loss);
    };

    let mut dec_in = vec![Vec::new(); n];
    let mut deh_in = vec![Vec::new(); n];
    for r in (0..=rounds_total).rev() {
        let tape = &tapes[r];
        if let Some(t) = &tape.category {
            d_cats = strategy_backward(&model.strategy, t, &d_cats[..tape.len], &mut g.strategy);
        }
        if let Some(t) = &tape.hyper {
            d_hyps = strategy_backward(&model.strategy, t, &d_hyps[..tape.len], &mut g.strategy);
        }
        let prev = if r > 0 { tapes[r - 1].len } else { 0 };
        for i in prev..tape.len {
            dec_in[i] = core::mem::take(&mut d_cats[i]);
            deh_in[i] = core::mem::take(&mut d_hyps[i]);
        }
        d_cats.truncate(prev);
        d_hyps.truncate(prev);
    }

    let mut d_raw = Vec::with_capacity(n);
    let mut d_centroid = vec![vec![0.0; model.embed_dim()]; clustering.centroids.len()];
    for i in 0..n {
        let (dh, dc) = cim_backward(&model.cim, &cim_caches[i], &deh_in[i], &dec_in[i], &mut g.cim);
        crate::numkit::add_into(&mut d_centroid[cluster_of[i]], &dh);
        d_raw.push(dc);
    }
    let mut members = vec![0usize; clustering.centroids.len()];
    for &a in &clustering.assignments {
        members[a] += 1;
    }
    for (i, &a) in clustering.assignments.iter().enumerate() {
        let inv = 1.0 / members[a] as f64;
        for (d, c) in d_raw[i].iter_mut().zip(&d_centroid[a]) {
            *d += c * inv;
        }
    }
    for (i, (ecache, pcache)) in support_caches.iter().enumerate() {
        let dfmap = pyramid_backward(feat, pcache, &d_raw[i], &mut g.feat);
        extract_backward(feat, ecache, &dfmap, &mut g.feat);
    }
    Ok(loss)
}

/// Mean episode loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Episodic base-session training of every parameter.
pub fn train_base(model: &mut Model, data: &[ClassSamples], train: &TrainConfig, learn: &LearnConfig, seed: u64) -> Result<TrainLog> {
    let iterations = model.casm.iterations;
    train_base_cycling(model, data, train, &[(*learn, iterations)], seed)
}

/// Like [`train_base`], but episode `i` runs with the learning configuration
/// and refinement iteration count of `variants[i % variants.len()]`. The
/// model keeps its own iteration count afterwards.
pub fn train_base_cycling(model: &mut Model, data: &[ClassSamples], train: &TrainConfig, variants: &[(LearnConfig, usize)], seed: u64) -> Result<TrainLog> {
    if variants.is_empty() {
        return Err(Error::Dimension {
            op: "train_base_cycling",
            expected: 1,
            got: 0,
        });
    }
    let iterations = model.casm.iterations;
    let mut rng = seeded_rng(seed);
    let mut opt = Optimizer::new(train.optimizer, model.num_params());
    let mut log = TrainLog::default();
    let mut episode = 0;
    let result = (|| {
        for epoch in 0..train.epochs {
            let lr = train.schedule.at_epoch(epoch);
            let mut total = 0.0;
            for _ in 0..train.episodes_per_epoch {
                let (learn, t) = &variants[episode % variants.len()];
                episode += 1;
                model.casm.iterations = *t;
                let plan = EpisodePlan::sample(data, train, &mut rng)?;
                let mut grads = model.zeros_like();
                total += run_episode(model, data, &plan, learn, Some(&mut grads))?;
                if !grads.slices().iter().all(|s| s.iter().all(|v| v.is_finite())) {
                    return Err(Error::NonFinite("episode gradient"));
                }
                opt.step(model, &grads, lr, None);
            }
            log.epoch_losses.push(total / train.episodes_per_epoch.max(1) as f64);
        }
        Ok(())
    })();
    model.casm.iterations = iterations;
    result.map(|()| log)
}
