//! Feature extraction for support and query images.
//!
//! A small stack of `conv3x3 -> activation -> 2x2 average pool` stages maps
//! an image to a feature map at 1/4 resolution. Support maps are masked to
//! the object and pooled over a 1x1 / 2x2 / 4x4 pyramid of the unmasked
//! cells, then projected to the embedding dimension.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numkit::{ActKind, AffineParams, ConvCache, ConvParams, ParamSet, Rng, Tensor};
use crate::{Error, Result};

/// Side length of each pyramid level, in blocks.
pub const PYRAMID_SCALES: [usize; 3] = [1, 2, 4];

/// Number of pooled blocks across all pyramid levels.
pub const PYRAMID_BLOCKS: usize = 1 + 4 + 16;

/// Extractor output, `channels x (H/4) x (W/4)`.
pub type FeatureMap = Tensor;

/// Image with values in `[0, 1]`, layout `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "image",
                detail: format!("{channels}x{height}x{width}"),
            });
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "image",
                expected: channels * height * width,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    /// Copy with `f(index, value)` applied to every sample, clamped to `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i, v).clamp(0.0, 1.0))
            .collect();
        Self { data, ..*self }
    }
}

/// Per-pixel object mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension {
                op: "mask",
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour downsampling by an integer factor; each cell takes
    /// the pixel at its centre.
    pub fn downsample(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Shape {
                op: "mask downsample",
                detail: format!("{}x{} by {factor}", self.height, self.width),
            });
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(BinaryMask::from_fn(h, w, |y, x| {
            self.get(y * factor + factor / 2, x * factor + factor / 2)
        }))
    }

    /// Fraction of each `factor x factor` block covered by the mask.
    pub fn coverage(&self, factor: usize) -> Result<Vec<f64>> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Shape {
                op: "mask coverage",
                detail: format!("{}x{} by {factor}", self.height, self.width),
            });
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / factor) * w + x / factor] += 1.0 / norm;
                }
            }
        }
        Ok(out)
    }
}

/// One extractor stage: `conv3x3 -> act -> optional 2x2 average pool`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: ConvParams,
    pub act: ActKind,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatExtParams {
    pub stages: Vec<Stage>,
    /// Pyramid projection, `(channels * PYRAMID_BLOCKS) -> embed_dim`.
    pub proj: AffineParams,
}

impl FeatExtParams {
    /// Pooling stages with the given output widths; needs at least two
    /// stages, the first two of which pool.
    pub fn init(image_channels: usize, widths: &[usize], embed_dim: usize, act: ActKind, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Invalid("extractor needs at least two stages".into()));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut c_in = image_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            stages.push(Stage {
                conv: ConvParams::init(c_out, c_in, rng),
                act,
                pool: i < 2,
            });
            c_in = c_out;
        }
        let proj = AffineParams::init(embed_dim, c_in * PYRAMID_BLOCKS, true, rng);
        let p = Self { stages, proj };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 || self.downsample() != 4 {
            return Err(Error::Invalid(format!(
                "extractor needs >= 2 stages and total downsample 4, got {} stages / x{}",
                self.stages.len(),
                self.downsample()
            )));
        }
        for pair in self.stages.windows(2) {
            if pair[0].conv.c_out() != pair[1].conv.c_in() {
                return Err(Error::Dimension {
                    op: "extractor stages",
                    expected: pair[0].conv.c_out(),
                    got: pair[1].conv.c_in(),
                });
            }
        }
        if self.proj.in_dim() != self.feature_channels() * PYRAMID_BLOCKS {
            return Err(Error::Dimension {
                op: "pyramid projection",
                expected: self.feature_channels() * PYRAMID_BLOCKS,
                got: self.proj.in_dim(),
            });
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << self.stages.iter().filter(|s| s.pool).count()
    }

    pub fn image_channels(&self) -> usize {
        self.stages[0].conv.c_in()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.conv.c_out())
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }
}

impl ParamSet for FeatExtParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.stages.iter().flat_map(|s| s.conv.slices()).collect();
        v.extend(self.proj.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.stages.iter_mut().flat_map(|s| s.conv.slices_mut()).collect();
        v.extend(self.proj.slices_mut());
        v
    }
}

#[derive(Clone, Debug)]
struct StageCache {
    conv: ConvCache,
    pre: Vec<f64>,
    h: usize,
    w: usize,
}

/// Intermediate values needed to backpropagate through the extractor.
#[derive(Clone, Debug)]
pub struct ExtractCache {
    stages: Vec<StageCache>,
}

/// Feature map of `img`; errors if the extents are not divisible by the
/// extractor's downsample factor.
pub fn extract_features(img: &RasterImage, p: &FeatExtParams) -> Result<FeatureMap> {
    extract_with_cache(img, p).map(|(f, _)| f)
}

pub fn extract_with_cache(img: &RasterImage, p: &FeatExtParams) -> Result<(FeatureMap, ExtractCache)> {
    let factor = p.downsample();
    if !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::Shape {
            op: "extract_features",
            detail: format!("{}x{} not divisible by {factor}", img.height, img.width),
        });
    }
    if img.channels != p.image_channels() {
        return Err(Error::Dimension {
            op: "extract_features channels",
            expected: p.image_channels(),
            got: img.channels,
        });
    }
    let (mut h, mut w) = (img.height, img.width);
    let mut x = img.data.clone();
    let mut caches = Vec::with_capacity(p.stages.len());
    for stage in &p.stages {
        let (pre, conv) = stage.conv.forward(&x, h, w, 1);
        let act = stage.act.apply_slice(&pre);
        caches.push(StageCache { conv, pre, h, w });
        if stage.pool {
            x = avg_pool2(&act, stage.conv.c_out(), h, w);
            h /= 2;
            w /= 2;
        } else {
            x = act;
        }
    }
    let fmap = Tensor::new(vec![p.feature_channels(), h, w], x)?;
    Ok((fmap, ExtractCache { stages: caches }))
}

/// Accumulates parameter gradients for `dL/dfmap`.
pub fn extract_backward(p: &FeatExtParams, cache: &ExtractCache, dfmap: &[f64], grads: &mut FeatExtParams) {
    let mut d = dfmap.to_vec();
    for (i, (stage, sc)) in p.stages.iter().zip(&cache.stages).enumerate().rev() {
        let mut dact = if stage.pool {
            avg_pool2_backward(&d, stage.conv.c_out(), sc.h, sc.w)
        } else {
            d
        };
        stage.act.backward_in_place(&sc.pre, &mut dact);
        let g = &mut grads.stages[i].conv;
        if i == 0 {
            stage.conv.backward_part(&sc.conv, &dact, g, None);
            ConvParams::backward_bias(g, &dact, sc.h * sc.w);
            d = Vec::new();
        } else {
            d = stage.conv.backward(&sc.conv, &dact, g);
        }
    }
}

fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[(ch * oh + y) * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool2_backward(d: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = 0.25 * d[(ch * oh + y / 2) * ow + x / 2];
            }
        }
    }
    out
}

/// Downsampled mask matching `fmap`'s spatial extents.
fn feature_mask(fmap: &FeatureMap, mask: &BinaryMask) -> Result<BinaryMask> {
    let (_, h, w) = fmap.dims3()?;
    if !mask.height.is_multiple_of(h) || !mask.width.is_multiple_of(w) || mask.height / h != mask.width / w {
        return Err(Error::Shape {
            op: "mask_features",
            detail: format!("mask {}x{} vs map {h}x{w}", mask.height, mask.width),
        });
    }
    mask.downsample(mask.height / h)
}

/// Zeroes every feature cell outside the (downsampled) object mask.
pub fn mask_features(fmap: &FeatureMap, mask: &BinaryMask) -> Result<FeatureMap> {
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    let cells = feature_mask(fmap, mask)?;
    let (c, h, w) = fmap.dims3()?;
    let mut out = fmap.clone();
    let hw = h * w;
    for ch in 0..c {
        for (v, &keep) in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(cells.data()) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Adaptive block boundaries `[start, end)` for block `i` of `s` over `n` cells.
fn block_bounds(i: usize, s: usize, n: usize) -> (usize, usize) {
    ((i * n) / s, ((i + 1) * n).div_ceil(s))
}

/// Pooled pyramid values and the projection input.
#[derive(Clone, Debug)]
pub struct PyramidCache {
    pooled: Vec<f64>,
    cells: BinaryMask,
    c: usize,
    h: usize,
    w: usize,
}

/// Raw category embedding of a masked feature map.
pub fn pyramid_embed(fmap: &FeatureMap, mask: &BinaryMask, p: &FeatExtParams) -> Result<Vec<f64>> {
    pyramid_embed_with_cache(fmap, mask, p).map(|(e, _)| e)
}

/// Masked averages over the pyramid blocks, layout `[block][channel]`
/// with blocks ordered by scale then row-major. Blocks without unmasked
/// cells pool to zero.
pub fn pyramid_pool(fmap: &FeatureMap, cells: &BinaryMask) -> Result<Vec<f64>> {
    let (c, h, w) = fmap.dims3()?;
    if cells.height != h || cells.width != w {
        return Err(Error::Shape {
            op: "pyramid_pool",
            detail: format!("cells {}x{} vs map {h}x{w}", cells.height, cells.width),
        });
    }
    if cells.area() == 0 {
        return Err(Error::EmptyMask);
    }
    let data = fmap.data();
    let mut pooled = Vec::with_capacity(c * PYRAMID_BLOCKS);
    for &s in &PYRAMID_SCALES {
        for by in 0..s {
            let (y0, y1) = block_bounds(by, s, h);
            for bx in 0..s {
                let (x0, x1) = block_bounds(bx, s, w);
                let mut sums = vec![0.0; c];
                let mut count = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if !cells.get(y, x) {
                            continue;
                        }
                        count += 1;
                        for (ch, sum) in sums.iter_mut().enumerate() {
                            *sum += data[(ch * h + y) * w + x];
                        }
                    }
                }
                if count > 0 {
                    let inv = 1.0 / count as f64;
                    sums.iter_mut().for_each(|v| *v *= inv);
                }
                pooled.extend(sums);
            }
        }
    }
    Ok(pooled)
}

pub fn pyramid_embed_with_cache(fmap: &FeatureMap, mask: &BinaryMask, p: &FeatExtParams) -> Result<(Vec<f64>, PyramidCache)> {
    let (c, h, w) = fmap.dims3()?;
    if c != p.feature_channels() {
        return Err(Error::Dimension {
            op: "pyramid_embed channels",
            expected: p.feature_channels(),
            got: c,
        });
    }
    let cells = feature_mask(fmap, mask)?;
    let pooled = pyramid_pool(fmap, &cells)?;
    let emb = p.proj.forward(&pooled)?;
    Ok((emb, PyramidCache { pooled, cells, c, h, w }))
}

/// Projection gradients plus `dL/dfmap` (zero outside the mask).
pub fn pyramid_backward(p: &FeatExtParams, cache: &PyramidCache, demb: &[f64], grads: &mut FeatExtParams) -> Vec<f64> {
    let dpooled = p.proj.backward(&cache.pooled, demb, &mut grads.proj);
    let (c, h, w) = (cache.c, cache.h, cache.w);
    let mut dfmap = vec![0.0; c * h * w];
    let mut offset = 0;
    for &s in &PYRAMID_SCALES {
        for by in 0..s {
            let (y0, y1) = block_bounds(by, s, h);
            for bx in 0..s {
                let (x0, x1) = block_bounds(bx, s, w);
                let count = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                    .filter(|&(y, x)| cache.cells.get(y, x))
                    .count();
                if count > 0 {
                    let inv = 1.0 / count as f64;
                    let d = &dpooled[offset..offset + c];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if cache.cells.get(y, x) {
                                for (ch, dv) in d.iter().enumerate() {
                                    dfmap[(ch * h + y) * w + x] += dv * inv;
                                }
                            }
                        }
                    }
                }
                offset += c;
            }
        }
    }
    dfmap
}
