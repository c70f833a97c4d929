//! Procedural class taxonomy: groups of classes that share hue family and
//! texture frequency band, and differ in polygon shape and size.

use std::f64::consts::PI;

use ifss_core::featext::{BinaryMask, RasterImage};
use ifss_core::membank::ClassId;
use ifss_core::pipeline::Sample;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{mix_seed, BenchError, Result};

/// Largest polygon corner count handed out to a class.
pub const MAX_CORNERS: usize = 8;
/// Attempts before `render_sample` gives up on a class.
pub const RENDER_ATTEMPTS: u64 = 100;
/// Objects must stay visible on a grid this much coarser than the image.
pub const VISIBILITY_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaxonomySpec {
    pub groups: usize,
    pub classes_per_group: usize,
    pub image_size: usize,
    /// Object area range in pixels, split into one band per class of a group.
    pub area_range: (usize, usize),
    /// Stripe frequency range in cycles per pixel, split into one band per group.
    pub freq_range: (f64, f64),
}

impl Default for TaxonomySpec {
    fn default() -> Self {
        Self {
            groups: 4,
            classes_per_group: 4,
            image_size: 32,
            area_range: (48, 240),
            freq_range: (0.08, 0.46),
        }
    }
}

impl TaxonomySpec {
    pub fn class_count(&self) -> usize {
        self.groups * self.classes_per_group
    }
}

/// Attributes shared by every class of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDef {
    pub index: usize,
    pub hue: f64,
    pub hue_range: (f64, f64),
    pub freq_band: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDef {
    pub class_id: ClassId,
    pub group: usize,
    pub hue: f64,
    pub freq_band: (f64, f64),
    pub corners: usize,
    pub area_range: (usize, usize),
    pub image_size: usize,
}

impl ClassDef {
    /// Attribute vector normalised to roughly unit ranges: hue, frequency,
    /// corner count, area.
    pub fn attributes(&self, spec: &TaxonomySpec) -> [f64; 4] {
        let (f0, f1) = spec.freq_range;
        let (a0, a1) = spec.area_range;
        let freq = 0.5 * (self.freq_band.0 + self.freq_band.1);
        let area = 0.5 * (self.area_range.0 + self.area_range.1) as f64;
        [
            self.hue,
            (freq - f0) / (f1 - f0),
            (self.corners - 3) as f64 / (MAX_CORNERS - 3) as f64,
            (area - a0 as f64) / (a1 - a0) as f64,
        ]
    }
}

/// Euclidean distance between attribute vectors with hue taken on the circle.
pub fn attribute_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dh = (a[0] - b[0]).rem_euclid(1.0);
    let dh = dh.min(1.0 - dh);
    let rest: f64 = a[1..].iter().zip(&b[1..]).map(|(x, y)| (x - y) * (x - y)).sum();
    (dh * dh + rest).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    pub spec: TaxonomySpec,
    pub groups: Vec<GroupDef>,
    pub classes: Vec<ClassDef>,
}

impl Taxonomy {
    pub fn class(&self, id: ClassId) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn group_of(&self, id: ClassId) -> Option<usize> {
        self.class(id).map(|c| c.group)
    }
}

fn infeasible(msg: impl Into<String>) -> BenchError {
    BenchError::Taxonomy(msg.into())
}

/// Builds `groups * classes_per_group` class definitions. Group hues are
/// evenly spaced around the colour wheel from a seeded offset; corner counts
/// and area bands are shuffled within each group.
pub fn gen_taxonomy(seed: u64, spec: &TaxonomySpec) -> Result<Taxonomy> {
    let (g, l, size) = (spec.groups, spec.classes_per_group, spec.image_size);
    if g == 0 || l == 0 {
        return Err(infeasible("taxonomy needs at least one group and one class per group"));
    }
    if size < 2 * VISIBILITY_STRIDE || size % VISIBILITY_STRIDE != 0 {
        return Err(infeasible(format!("image size {size} must be a multiple of {VISIBILITY_STRIDE}, at least {}", 2 * VISIBILITY_STRIDE)));
    }
    if l > MAX_CORNERS - 2 {
        return Err(infeasible(format!("at most {} classes per group have distinct corner counts", MAX_CORNERS - 2)));
    }
    let (f0, f1) = spec.freq_range;
    let slot = (f1 - f0) / g as f64;
    if !(f0 > 0.0 && f1 <= 0.5 && slot * size as f64 >= 2.0) {
        return Err(infeasible(format!("frequency range {f0}..{f1} cannot hold {g} bands two spectral bins apart")));
    }
    let (a0, a1) = spec.area_range;
    let min_area = VISIBILITY_STRIDE * VISIBILITY_STRIDE * 2;
    let band = (a1.saturating_sub(a0)) / l;
    if a0 < min_area || band < 8 || a1 > size * size / 3 {
        return Err(infeasible(format!("area range {a0}..{a1} cannot hold {l} bands on a {size}x{size} image")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x7a78]));
    let hue_offset = rng.gen::<f64>() / g as f64;
    let hue_half = 0.3 / g as f64;
    let mut groups = Vec::with_capacity(g);
    let mut classes = Vec::with_capacity(g * l);
    for gi in 0..g {
        let hue = (hue_offset + gi as f64 / g as f64).rem_euclid(1.0);
        let centre = f0 + slot * (gi as f64 + 0.5);
        let freq_band = (centre - 0.2 * slot, centre + 0.2 * slot);
        groups.push(GroupDef {
            index: gi,
            hue,
            hue_range: (hue - hue_half, hue + hue_half),
            freq_band,
        });
        let mut corners: Vec<usize> = (3..=MAX_CORNERS).collect();
        corners.shuffle(&mut rng);
        let mut bands: Vec<usize> = (0..l).collect();
        bands.shuffle(&mut rng);
        for li in 0..l {
            let shift = if l == 1 { 0.0 } else { hue_half * (2.0 * li as f64 / (l - 1) as f64 - 1.0) };
            classes.push(ClassDef {
                class_id: ClassId((gi * l + li) as u32),
                group: gi,
                hue: (hue + shift).rem_euclid(1.0),
                freq_band,
                corners: corners[li],
                area_range: (a0 + bands[li] * band, a0 + (bands[li] + 1) * band),
                image_size: size,
            });
        }
    }
    Ok(Taxonomy {
        spec: spec.clone(),
        groups,
        classes,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn try_render(class: &ClassDef, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let size = class.image_size;
    let n = class.corners;
    let (lo, hi) = class.area_range;
    let area = rng.gen_range(lo as f64..hi as f64);
    let radius = (2.0 * area / (n as f64 * (2.0 * PI / n as f64).sin())).sqrt();
    let rotation = rng.gen_range(0.0..2.0 * PI);
    let mut poly = Vec::with_capacity(n);
    let mut reach = 0.0f64;
    for k in 0..n {
        let r = radius * rng.gen_range(0.9..1.1);
        let a = rotation + 2.0 * PI * (k as f64 + rng.gen_range(-0.1..0.1)) / n as f64;
        poly.push((r * a.cos(), r * a.sin()));
        reach = reach.max(r);
    }
    let margin = reach + 0.5;
    if 2.0 * margin >= size as f64 {
        return None;
    }
    let cx = rng.gen_range(margin..size as f64 - margin);
    let cy = rng.gen_range(margin..size as f64 - margin);
    for p in &mut poly {
        p.0 += cx;
        p.1 += cy;
    }
    let mask = BinaryMask::from_fn(size, size, |y, x| inside(&poly, x as f64 + 0.5, y as f64 + 0.5));
    let visible = mask.downsample(VISIBILITY_STRIDE).map_or(0, |m| m.area());
    if !(lo..=hi).contains(&mask.area()) || visible == 0 {
        return None;
    }

    let freq = rng.gen_range(class.freq_band.0..class.freq_band.1);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (kx, ky) = (2.0 * PI * freq * theta.cos(), 2.0 * PI * freq * theta.sin());
    let grey = rng.gen_range(0.35..0.65);
    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let rgb = if mask.get(y, x) {
                let v = 0.55 + 0.35 * (kx * x as f64 + ky * y as f64 + phase).sin();
                hsv_to_rgb(class.hue, 0.75, v)
            } else {
                [grey; 3]
            };
            for (c, base) in rgb.into_iter().enumerate() {
                let noise = rng.gen_range(-0.12..0.12);
                data[c * hw + y * size + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    let image = RasterImage::new(3, size, size, data).ok()?;
    Some(Sample { image, mask })
}

/// One textured polygon of `class` on a noisy grey background. Failed
/// geometry (area outside the class band, or invisible at the feature
/// stride) is retried with the next sub-seed.
pub fn render_sample(class: &ClassDef, seed: u64) -> Result<Sample> {
    for attempt in 0..RENDER_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[u64::from(class.class_id.0), attempt]));
        if let Some(s) = try_render(class, &mut rng) {
            return Ok(s);
        }
    }
    Err(BenchError::Render {
        class_id: class.class_id,
        attempts: RENDER_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_taxonomy_shape() {
        let t = gen_taxonomy(3, &TaxonomySpec::default()).unwrap();
        assert_eq!(t.classes.len(), 16);
        assert_eq!(t.groups.len(), 4);
        assert_eq!(t, gen_taxonomy(3, &TaxonomySpec::default()).unwrap());
        assert_ne!(t, gen_taxonomy(4, &TaxonomySpec::default()).unwrap());
        for g in &t.groups {
            let members: Vec<_> = t.classes.iter().filter(|c| c.group == g.index).collect();
            let mut corners: Vec<_> = members.iter().map(|c| c.corners).collect();
            corners.sort();
            corners.dedup();
            assert_eq!(corners.len(), members.len());
            assert!(members.iter().all(|c| c.freq_band == g.freq_band));
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let too_many = TaxonomySpec {
            classes_per_group: 7,
            ..TaxonomySpec::default()
        };
        assert!(gen_taxonomy(0, &too_many).is_err());
        let crowded = TaxonomySpec {
            groups: 20,
            ..TaxonomySpec::default()
        };
        assert!(gen_taxonomy(0, &crowded).is_err());
        let huge = TaxonomySpec {
            area_range: (48, 900),
            ..TaxonomySpec::default()
        };
        assert!(gen_taxonomy(0, &huge).is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn unit_square_membership() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(inside(&sq, 0.5, 0.5));
        assert!(!inside(&sq, 1.5, 0.5));
    }
}
