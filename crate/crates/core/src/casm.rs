//! Class-agnostic segmentation: dense comparison of query features with one
//! class's embeddings, iterative refinement with a dilated pyramid head,
//! per-pixel fusion over classes, and the pixel-wise loss.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::featext::FeatureMap;
use crate::membank::{ClassId, ClassRecord};
use crate::numkit::{sigmoid_scalar, ActKind, AffineParams, ConvCache, ConvParams, ParamSet, Rng, Tensor};
use crate::{Error, Result};

/// Dilations of the three parallel pyramid branches.
pub const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];
pub const CASM_ACT: ActKind = ActKind::Silu;
pub const DEFAULT_ITERATIONS: usize = 4;
pub const DEFAULT_TAU: f64 = 0.5;

/// Query features concatenated with tiled embeddings, after the residual
/// comparison block: `C_feat + 2D` channels.
pub type DenseFeat = Tensor;

/// Per-pixel foreground probability for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension {
                op: "confidence map",
                expected: height * width,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("confidence values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub(crate) fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        Self {
            height,
            width,
            data: logits.iter().map(|&z| sigmoid_scalar(z)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear upsampling with half-pixel centres and edge clamping.
    pub fn upsample(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let src = |o: usize, n: usize| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let (y0, y1, fy) = src(y, self.height);
            for x in 0..w {
                let (x0, x1, fx) = src(x, self.width);
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
        Self { height: h, width: w, data }
    }
}

/// Per-pixel class label; `None` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<Option<ClassId>>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<Option<ClassId>>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension {
                op: "label map",
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![None; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[Option<ClassId>] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> Option<ClassId> {
        self.data[y * self.width + x]
    }
    pub fn set(&mut self, y: usize, x: usize, label: Option<ClassId>) {
        self.data[y * self.width + x] = label;
    }
}

/// Parameters of the segmentation head. `C = query_channels + 2 * embed_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct CasmParams {
    /// Residual comparison block, `C -> C`.
    pub compare: ConvParams,
    /// Mask-feedback convolution, `C + 1 -> C`; the last input channel is
    /// the previous mask.
    pub inner: ConvParams,
    /// Pyramid branches `C -> hidden`, one per entry of [`ASPP_DILATIONS`].
    pub aspp: [ConvParams; 3],
    /// Per-pixel projection `hidden -> 1` producing the mask logit.
    pub proj: AffineParams,
    pub iterations: usize,
    query_channels: usize,
    embed_dim: usize,
}

impl CasmParams {
    pub fn zeros(query_channels: usize, embed_dim: usize, hidden: usize, iterations: usize) -> Self {
        let c = query_channels + 2 * embed_dim;
        Self {
            compare: ConvParams::zeros(c, c),
            inner: ConvParams::zeros(c, c + 1),
            aspp: [ConvParams::zeros(hidden, c), ConvParams::zeros(hidden, c), ConvParams::zeros(hidden, c)],
            proj: AffineParams::zeros(1, hidden, true),
            iterations,
            query_channels,
            embed_dim,
        }
    }

    pub fn init(query_channels: usize, embed_dim: usize, hidden: usize, iterations: usize, rng: &mut Rng) -> Self {
        let c = query_channels + 2 * embed_dim;
        let compare = ConvParams::init(c, c, rng);
        let inner = ConvParams::init(c, c + 1, rng);
        let aspp = [ConvParams::init(hidden, c, rng), ConvParams::init(hidden, c, rng), ConvParams::init(hidden, c, rng)];
        let proj = AffineParams::init(1, hidden, true, rng);
        Self {
            compare,
            inner,
            aspp,
            proj,
            iterations,
            query_channels,
            embed_dim,
        }
    }

    pub fn query_channels(&self) -> usize {
        self.query_channels
    }
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
    pub fn channels(&self) -> usize {
        self.query_channels + 2 * self.embed_dim
    }
    pub fn hidden(&self) -> usize {
        self.proj.in_dim()
    }

    /// Sets the constant output logit of an otherwise zero head.
    pub fn with_output_bias(mut self, b: f64) -> Self {
        if let Some(bias) = &mut self.proj.bias {
            bias[0] = b;
        }
        self
    }
}

impl ParamSet for CasmParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.compare.slices();
        v.extend(self.inner.slices());
        for a in &self.aspp {
            v.extend(a.slices());
        }
        v.extend(self.proj.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.compare.slices_mut();
        v.extend(self.inner.slices_mut());
        for a in &mut self.aspp {
            v.extend(a.slices_mut());
        }
        v.extend(self.proj.slices_mut());
        v
    }
}

/// Query channels tiled with `E_c` and `E_h` at every position, before the
/// comparison block.
pub fn concat_embeddings(qmap: &FeatureMap, ec: &[f64], eh: &[f64]) -> Result<Tensor> {
    let (c, h, w) = qmap.dims3()?;
    if ec.len() != eh.len() {
        return Err(Error::Dimension {
            op: "concat_embeddings",
            expected: ec.len(),
            got: eh.len(),
        });
    }
    let hw = h * w;
    let mut data = qmap.data().to_vec();
    data.reserve((ec.len() + eh.len()) * hw);
    for &v in ec.iter().chain(eh) {
        data.extend(std::iter::repeat_n(v, hw));
    }
    Tensor::new(vec![c + ec.len() + eh.len(), h, w], data)
}

fn check_query(qmap: &FeatureMap, p: &CasmParams) -> Result<(usize, usize)> {
    let (c, h, w) = qmap.dims3()?;
    if c != p.query_channels {
        return Err(Error::Dimension {
            op: "casm query channels",
            expected: p.query_channels,
            got: c,
        });
    }
    Ok((h, w))
}

fn check_embeddings(ec: &[f64], eh: &[f64], p: &CasmParams) -> Result<()> {
    for e in [ec, eh] {
        if e.len() != p.embed_dim {
            return Err(Error::Dimension {
                op: "casm embedding",
                expected: p.embed_dim,
                got: e.len(),
            });
        }
    }
    Ok(())
}

/// Dense comparison: `X + act(conv(X))` with `X` the tiled concatenation.
pub fn dense_compare(qmap: &FeatureMap, record: &ClassRecord, p: &CasmParams) -> Result<DenseFeat> {
    dense_compare_embeddings(qmap, record.category(), record.hyper(), p)
}

pub fn dense_compare_embeddings(qmap: &FeatureMap, ec: &[f64], eh: &[f64], p: &CasmParams) -> Result<DenseFeat> {
    let (h, w) = check_query(qmap, p)?;
    check_embeddings(ec, eh, p)?;
    let x = concat_embeddings(qmap, ec, eh)?;
    let (pre, _) = p.compare.forward(x.data(), h, w, 1);
    let data = x.data().iter().zip(&pre).map(|(xi, &z)| xi + CASM_ACT.apply(z)).collect();
    Tensor::new(vec![p.channels(), h, w], data)
}

fn check_dense(f: &DenseFeat, p: &CasmParams) -> Result<(usize, usize)> {
    let (c, h, w) = f.dims3()?;
    if c != p.channels() {
        return Err(Error::Dimension {
            op: "casm dense features",
            expected: p.channels(),
            got: c,
        });
    }
    Ok((h, w))
}

/// Pyramid head on `G`: returns `(S, A, z)` (pre-activation, activation,
/// logit) and the branch caches.
fn head_forward(g: &[f64], h: usize, w: usize, p: &CasmParams) -> (Vec<f64>, Vec<f64>, Vec<f64>, [ConvCache; 3]) {
    let hw = h * w;
    let hidden = p.hidden();
    let mut s = vec![0.0; hidden * hw];
    let caches = core::array::from_fn(|i| {
        p.aspp[i].add_bias(&mut s, hw);
        p.aspp[i].forward_part(g, 0, p.channels(), h, w, ASPP_DILATIONS[i], &mut s)
    });
    let a = CASM_ACT.apply_slice(&s);
    let bias = p.proj.bias.as_ref().map_or(0.0, |b| b[0]);
    let mut z = vec![bias; hw];
    for (j, plane) in a.chunks_exact(hw).enumerate() {
        let wj = p.proj.weight[j];
        for (zi, ai) in z.iter_mut().zip(plane) {
            *zi += wj * ai;
        }
    }
    (s, a, z, caches)
}

/// One application of the refinement: `M' = f_A(F + conv(F || M))`.
pub fn refine_step(f: &DenseFeat, m: &ConfidenceMap, p: &CasmParams) -> Result<ConfidenceMap> {
    let (h, w) = check_dense(f, p)?;
    if m.height != h || m.width != w {
        return Err(Error::Shape {
            op: "refine_step",
            detail: format!("mask {}x{} vs features {h}x{w}", m.height, m.width),
        });
    }
    let mut input = f.data().to_vec();
    input.extend_from_slice(&m.data);
    let (conv, _) = p.inner.forward(&input, h, w, 1);
    let g: Vec<f64> = f.data().iter().zip(&conv).map(|(a, b)| a + b).collect();
    let (_, _, z, _) = head_forward(&g, h, w, p);
    Ok(ConfidenceMap::from_logits(h, w, &z))
}

#[derive(Clone, Debug)]
struct IterTape {
    mask_in: Vec<f64>,
    mask_cache: ConvCache,
    s: Vec<f64>,
    a: Vec<f64>,
    head: [ConvCache; 3],
}

/// Refinement loop from `M_0 = 0`: `iterations + 1` applications.
fn refine_loop(f: &[f64], h: usize, w: usize, p: &CasmParams) -> (Vec<f64>, ConvCache, Vec<IterTape>) {
    let hw = h * w;
    let c = p.channels();
    let mut base = f.to_vec();
    p.inner.add_bias(&mut base, hw);
    let f_cache = p.inner.forward_part(f, 0, c, h, w, 1, &mut base);
    let mut mask = vec![0.0; hw];
    let mut tapes = Vec::with_capacity(p.iterations + 1);
    let mut z = Vec::new();
    for _ in 0..=p.iterations {
        let mut g = base.clone();
        let mask_cache = p.inner.forward_part(&mask, c, 1, h, w, 1, &mut g);
        let (s, a, logits, head) = head_forward(&g, h, w, p);
        let next: Vec<f64> = logits.iter().map(|&v| sigmoid_scalar(v)).collect();
        tapes.push(IterTape {
            mask_in: core::mem::replace(&mut mask, next),
            mask_cache,
            s,
            a,
            head,
        });
        z = logits;
    }
    (z, f_cache, tapes)
}

/// Final confidence map of the refinement started from an all-zero mask.
pub fn segment_class(f: &DenseFeat, p: &CasmParams) -> Result<ConfidenceMap> {
    let (h, w) = check_dense(f, p)?;
    let (z, _, _) = refine_loop(f.data(), h, w, p);
    Ok(ConfidenceMap::from_logits(h, w, &z))
}

/// Comparison-block contribution of the query channels, shared by every
/// class compared against the same query.
#[derive(Clone, Debug)]
pub struct QueryContext {
    q: Vec<f64>,
    h: usize,
    w: usize,
    cache: ConvCache,
    contrib: Vec<f64>,
}

impl QueryContext {
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
}

pub fn prepare_query(qmap: &FeatureMap, p: &CasmParams) -> Result<QueryContext> {
    let (h, w) = check_query(qmap, p)?;
    let hw = h * w;
    let mut contrib = vec![0.0; p.channels() * hw];
    p.compare.add_bias(&mut contrib, hw);
    let cache = p.compare.forward_part(qmap.data(), 0, p.query_channels, h, w, 1, &mut contrib);
    Ok(QueryContext {
        q: qmap.data().to_vec(),
        h,
        w,
        cache,
        contrib,
    })
}

/// Intermediate values of [`casm_forward`].
#[derive(Clone, Debug)]
pub struct CasmTape {
    values: Vec<f64>,
    pre: Vec<f64>,
    f_cache: ConvCache,
    iters: Vec<IterTape>,
}

/// Final mask logits for one class. Same result as
/// `segment_class(dense_compare(..))` up to summation order.
pub fn casm_forward(ctx: &QueryContext, ec: &[f64], eh: &[f64], p: &CasmParams) -> Result<(Vec<f64>, CasmTape)> {
    check_embeddings(ec, eh, p)?;
    let (h, w) = (ctx.h, ctx.w);
    let hw = h * w;
    let cq = p.query_channels;
    let mut values = ec.to_vec();
    values.extend_from_slice(eh);
    let mut pre = ctx.contrib.clone();
    p.compare.forward_constant_part(&values, cq, h, w, &mut pre);
    let mut f = Vec::with_capacity(pre.len());
    for (c, plane) in pre.chunks_exact(hw).enumerate() {
        if c < cq {
            let q = &ctx.q[c * hw..(c + 1) * hw];
            f.extend(q.iter().zip(plane).map(|(x, &z)| x + CASM_ACT.apply(z)));
        } else {
            let v = values[c - cq];
            f.extend(plane.iter().map(|&z| v + CASM_ACT.apply(z)));
        }
    }
    let (z, f_cache, iters) = refine_loop(&f, h, w, p);
    Ok((
        z,
        CasmTape {
            values,
            pre,
            f_cache,
            iters,
        },
    ))
}

/// Backward of [`casm_forward`] for `dL/dz`. Accumulates parameter
/// gradients, adds `dL/dq` into `dq` when given, and returns
/// `(dL/dE_c, dL/dE_h)`.
pub fn casm_backward(
    p: &CasmParams,
    ctx: &QueryContext,
    tape: &CasmTape,
    dz: &[f64],
    grads: &mut CasmParams,
    dq: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (ctx.h, ctx.w);
    let hw = h * w;
    let c = p.channels();
    let cq = p.query_channels;
    let mut dg_sum = vec![0.0; c * hw];
    let mut dz = dz.to_vec();
    for (t, it) in tape.iters.iter().enumerate().rev() {
        let mut ds = vec![0.0; it.a.len()];
        for (j, (plane, dplane)) in it.a.chunks_exact(hw).zip(ds.chunks_exact_mut(hw)).enumerate() {
            let wj = p.proj.weight[j];
            let mut gw = 0.0;
            for k in 0..hw {
                gw += plane[k] * dz[k];
                dplane[k] = wj * dz[k];
            }
            grads.proj.weight[j] += gw;
        }
        if let Some(gb) = &mut grads.proj.bias {
            gb[0] += dz.iter().sum::<f64>();
        }
        CASM_ACT.backward_in_place(&it.s, &mut ds);
        let mut dg = vec![0.0; c * hw];
        for (i, cache) in it.head.iter().enumerate() {
            p.aspp[i].backward_part(cache, &ds, &mut grads.aspp[i], Some(&mut dg));
            ConvParams::backward_bias(&mut grads.aspp[i], &ds, hw);
        }
        for (a, b) in dg_sum.iter_mut().zip(&dg) {
            *a += b;
        }
        if t > 0 {
            let mut dm = vec![0.0; hw];
            p.inner.backward_part(&it.mask_cache, &dg, &mut grads.inner, Some(&mut dm));
            dz = dm.iter().zip(&it.mask_in).map(|(d, m)| d * m * (1.0 - m)).collect();
        }
    }
    let mut df = dg_sum.clone();
    p.inner.backward_part(&tape.f_cache, &dg_sum, &mut grads.inner, Some(&mut df));
    ConvParams::backward_bias(&mut grads.inner, &dg_sum, hw);

    let mut dpre = df.clone();
    CASM_ACT.backward_in_place(&tape.pre, &mut dpre);
    ConvParams::backward_bias(&mut grads.compare, &dpre, hw);
    if let Some(dq) = dq {
        p.compare.backward_part(&ctx.cache, &dpre, &mut grads.compare, Some(dq));
        for (d, g) in dq.iter_mut().zip(&df[..cq * hw]) {
            *d += g;
        }
    } else {
        p.compare.backward_part(&ctx.cache, &dpre, &mut grads.compare, None);
    }
    let mut dvalues = p.compare.backward_constant_part(&tape.values, cq, h, w, &dpre, &mut grads.compare);
    for (k, dv) in dvalues.iter_mut().enumerate() {
        *dv += df[(cq + k) * hw..(cq + k + 1) * hw].iter().sum::<f64>();
    }
    let deh = dvalues.split_off(p.embed_dim);
    (dvalues, deh)
}

/// Per-pixel argmax over classes; pixels whose best confidence is below
/// `tau` become background. Ties go to the smallest class id.
pub fn nms_fuse(conf: &BTreeMap<ClassId, ConfidenceMap>, tau: f64) -> Result<LabelMap> {
    let mut iter = conf.iter();
    let (_, first) = iter.next().ok_or_else(|| Error::Invalid("nms_fuse needs at least one class".into()))?;
    let (h, w) = (first.height, first.width);
    for (id, m) in conf {
        if m.height != h || m.width != w {
            return Err(Error::Shape {
                op: "nms_fuse",
                detail: format!("class {id} map {}x{} vs {h}x{w}", m.height, m.width),
            });
        }
    }
    let mut best: Vec<(f64, Option<ClassId>)> = vec![(f64::NEG_INFINITY, None); h * w];
    for (&id, m) in conf {
        for (b, &v) in best.iter_mut().zip(&m.data) {
            if v > b.0 {
                *b = (v, Some(id));
            }
        }
    }
    let data = best.into_iter().map(|(v, id)| if v >= tau { id } else { None }).collect();
    LabelMap::new(h, w, data)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(crate::numkit::exp(-z.abs()))
}

/// Mean binary cross-entropy of `sigmoid(z)` against soft targets in
/// `[0, 1]`, and its gradient with respect to `z`.
pub fn bce_with_logits(z: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != target.len() || z.is_empty() {
        return Err(Error::Dimension {
            op: "bce",
            expected: z.len(),
            got: target.len(),
        });
    }
    let n = z.len() as f64;
    let loss = z.iter().zip(target).map(|(&zi, &y)| softplus(zi) - y * zi).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("segmentation loss"));
    }
    let dz = z.iter().zip(target).map(|(&zi, &y)| (sigmoid_scalar(zi) - y) / n).collect();
    Ok((loss, dz))
}

/// Mean binary cross-entropy of probabilities against targets; probabilities
/// are clamped away from 0 and 1.
pub fn bce(pred: &ConfidenceMap, target: &[f64]) -> Result<f64> {
    if pred.data.len() != target.len() || target.is_empty() {
        return Err(Error::Dimension {
            op: "bce",
            expected: pred.data.len(),
            got: target.len(),
        });
    }
    let eps = 1e-15;
    let sum: f64 = pred
        .data
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// One gradient step on a single labelled query of a stored class.
///
/// The class's embeddings are rebuilt from its stored raw embeddings through
/// the alignment module and the update strategy (other records enter the
/// attention as constants), so the step trains the segmentation head, the
/// alignment gates, the strategy maps and the extractor's query path.
/// Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    image: &crate::featext::RasterImage,
    mask: &crate::featext::BinaryMask,
    class_id: ClassId,
    pool: &crate::membank::MemoryPool,
    model: &mut crate::pipeline::Model,
    opt: &mut crate::numkit::Optimizer,
    lr: f64,
    kind: crate::eaus::UpdateKind,
) -> Result<f64> {
    let mut grads = model.zeros_like();
    let loss = train_step_loss(image, mask, class_id, pool, model, kind, Some(&mut grads))?;
    opt.step(model, &grads, lr, None);
    Ok(loss)
}

/// Loss of [`train_step`] without updating; accumulates gradients when
/// `grads` is given.
pub fn train_step_loss(
    image: &crate::featext::RasterImage,
    mask: &crate::featext::BinaryMask,
    class_id: ClassId,
    pool: &crate::membank::MemoryPool,
    model: &crate::pipeline::Model,
    kind: crate::eaus::UpdateKind,
    grads: Option<&mut crate::pipeline::Model>,
) -> Result<f64> {
    use crate::eaus::{strategy_backward, strategy_forward};
    let i = pool.index_of(class_id).ok_or(Error::UnknownClass(class_id))?;
    let rec = &pool.records()[i];
    let (eh, ec, cim_cache) = crate::membank::cim_forward(rec.raw_hyper(), rec.raw_category(), &model.cim)?;
    let mut cats = pool.categories();
    cats[i] = ec;
    let (updated, stape) = strategy_forward(&cats, &vec![true; cats.len()], kind, &model.strategy)?;
    let (qmap, qcache) = crate::featext::extract_with_cache(image, &model.feat)?;
    let ctx = prepare_query(&qmap, &model.casm)?;
    let (z, tape) = casm_forward(&ctx, &updated[i], &eh, &model.casm)?;
    let target = mask.coverage(model.feat.downsample())?;
    let (loss, dz) = bce_with_logits(&z, &target)?;
    if let Some(g) = grads {
        let mut dq = vec![0.0; qmap.len()];
        let (dec, deh) = casm_backward(&model.casm, &ctx, &tape, &dz, &mut g.casm, Some(&mut dq));
        crate::featext::extract_backward(&model.feat, &qcache, &dq, &mut g.feat);
        let mut dcats = vec![vec![0.0; dec.len()]; cats.len()];
        dcats[i] = dec;
        let din = strategy_backward(&model.strategy, &stape, &dcats, &mut g.strategy);
        crate::membank::cim_backward(&model.cim, &cim_cache, &deh, &din[i], &mut g.cim);
    }
    Ok(loss)
}
