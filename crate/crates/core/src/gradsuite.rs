//! Seeded finite-difference checks of every trainable path, used by the
//! test suite and the command-line `gradcheck` tool.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::casm::{bce_with_logits, casm_backward, casm_forward, prepare_query, CasmParams};
use crate::eaus::{eaus_backward, eaus_forward, EausParams, UpdateKind, UpdateScope, UpdateStrategy};
use crate::featext::{BinaryMask, RasterImage};
use crate::membank::{cim_backward, cim_forward, CimParams, ClassId};
use crate::numkit::{
    fd_grad, flatten, rel_error, seeded_rng, sigmoid, unflatten_into, ActKind, AffineParams, ConvParams, ParamSet, Rng, Tensor,
};
use crate::pipeline::{run_episode, ClassSamples, EpisodePlan, LearnConfig, Model, ModelConfig, Sample};
use crate::Result;

/// Central-difference step used throughout the suite.
pub const STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 10;

/// Outcome of one checked path.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `sum_k w_k y_k^2 + v_k y_k`, a loss whose gradient exercises both signs.
fn probe_loss(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| b * a * a + 0.5 * a).sum()
}

fn probe_grad(y: &[f64], w: &[f64]) -> Vec<f64> {
    y.iter().zip(w).map(|(a, b)| 2.0 * b * a + 0.5).collect()
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

/// Parameter and input gradients against the oracle; returns the larger
/// relative error.
fn check<P: ParamSet + Clone>(
    params: &P,
    input: &[f64],
    loss: impl Fn(&P, &[f64]) -> f64,
    analytic_params: &P,
    analytic_input: &[f64],
) -> Result<f64> {
    let fd_p = fd_grad(
        |t| {
            let mut q = params.clone();
            unflatten_into(&mut q, t);
            loss(&q, input)
        },
        &flatten(params),
        STEP,
    )?;
    let fd_x = fd_grad(|x| loss(params, x), input, STEP)?;
    Ok(rel_error(&flatten(analytic_params), &fd_p).max(rel_error(analytic_input, &fd_x)))
}

pub fn check_affine(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let p = AffineParams::init(4, 5, true, &mut rng);
        let x = rand_vec(&mut rng, 5);
        let w = rand_vec(&mut rng, 4);
        let loss = |p: &AffineParams, x: &[f64]| probe_loss(&p.forward(x).unwrap(), &w);
        let mut g = p.zeros_like();
        let dx = p.backward(&x, &probe_grad(&p.forward(&x)?, &w), &mut g);
        errors.push(check(&p, &x, loss, &g, &dx)?);
    }
    Ok(GradReport {
        name: "affine",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

pub fn check_conv(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let dilation = [1, 2, 4][i as usize % 3];
        let (h, w) = (5, 6);
        let p = ConvParams::init(3, 2, &mut rng);
        let x = rand_vec(&mut rng, 2 * h * w);
        let wts = rand_vec(&mut rng, 3 * h * w);
        let loss = |p: &ConvParams, x: &[f64]| probe_loss(&p.forward(x, h, w, dilation).0, &wts);
        let (y, cache) = p.forward(&x, h, w, dilation);
        let mut g = p.zeros_like();
        let dx = p.backward(&cache, &probe_grad(&y, &wts), &mut g);
        errors.push(check(&p, &x, loss, &g, &dx)?);
    }
    Ok(GradReport {
        name: "conv3x3",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

pub fn check_sigmoid(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let w = rand_vec(&mut rng, 8);
        let analytic: Vec<f64> = sigmoid(&x).iter().zip(&w).map(|(s, b)| (2.0 * b * s + 0.5) * s * (1.0 - s)).collect();
        let fd = fd_grad(|x| probe_loss(&sigmoid(x), &w), &x, STEP)?;
        errors.push(rel_error(&analytic, &fd));
    }
    Ok(GradReport {
        name: "sigmoid",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

pub fn check_cim(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let d = 8;
        let p = CimParams::init(d, &mut rng);
        let x = rand_vec(&mut rng, 2 * d);
        let w = rand_vec(&mut rng, 2 * d);
        let loss = |p: &CimParams, x: &[f64]| {
            let (a, b, _) = cim_forward(&x[..d], &x[d..], p).unwrap();
            probe_loss(&[a, b].concat(), &w)
        };
        let (a, b, cache) = cim_forward(&x[..d], &x[d..], &p)?;
        let dy = probe_grad(&[a, b].concat(), &w);
        let mut g = p.zeros_like();
        let (dh, dc) = cim_backward(&p, &cache, &dy[..d], &dy[d..], &mut g);
        errors.push(check(&p, &x, loss, &g, &[dh, dc].concat())?);
    }
    Ok(GradReport {
        name: "cim",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

pub fn check_eaus(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    let (d, n) = (4, 3);
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let mut p = EausParams::init(d, &mut rng);
        p.w = AffineParams::init(d, d, false, &mut rng);
        let x = rand_vec(&mut rng, n * d);
        let mask: Vec<bool> = (0..n).map(|k| k != i as usize % (n + 1)).collect();
        let w = rand_vec(&mut rng, n * d);
        let split = |x: &[f64]| x.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let loss = |p: &EausParams, x: &[f64]| probe_loss(&eaus_forward(&split(x), &mask, p).unwrap().0.concat(), &w);
        let (out, tape) = eaus_forward(&split(&x), &mask, &p)?;
        let dy = split(&probe_grad(&out.concat(), &w));
        let mut g = p.zeros_like();
        let dx = eaus_backward(&p, &tape, &dy, &mut g);
        errors.push(check(&p, &x, loss, &g, &dx.concat())?);
    }
    Ok(GradReport {
        name: "eaus",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

pub fn check_casm(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let (cq, d, h, w) = (3, 2, 4, 4);
        let p = CasmParams::init(cq, d, 3, i as usize % 3, &mut rng);
        let x = rand_vec(&mut rng, cq * h * w + 2 * d);
        let target: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let qlen = cq * h * w;
        let loss = |p: &CasmParams, x: &[f64]| {
            let q = Tensor::new(vec![cq, h, w], x[..qlen].to_vec()).unwrap();
            let ctx = prepare_query(&q, p).unwrap();
            let (z, _) = casm_forward(&ctx, &x[qlen..qlen + d], &x[qlen + d..], p).unwrap();
            bce_with_logits(&z, &target).unwrap().0
        };
        let q = Tensor::new(vec![cq, h, w], x[..qlen].to_vec())?;
        let ctx = prepare_query(&q, &p)?;
        let (z, tape) = casm_forward(&ctx, &x[qlen..qlen + d], &x[qlen + d..], &p)?;
        let (_, dz) = bce_with_logits(&z, &target)?;
        let mut g = p.zeros_like();
        let mut dx = vec![0.0; qlen];
        let (dec, deh) = casm_backward(&p, &ctx, &tape, &dz, &mut g, Some(&mut dx));
        dx.extend(dec);
        dx.extend(deh);
        errors.push(check(&p, &x, loss, &g, &dx)?);
    }
    Ok(GradReport {
        name: "casm",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

/// Three toy classes of `3 x 8 x 8` images, each a coloured rectangle.
pub fn toy_classes(rng: &mut Rng, classes: usize, per_class: usize) -> Result<Vec<ClassSamples>> {
    let (h, w) = (8, 8);
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut samples = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let (y0, x0) = (rng.gen_range(0..3), rng.gen_range(0..3));
            let (y1, x1) = (y0 + rng.gen_range(4..6), x0 + rng.gen_range(4..6));
            let mask = BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));
            let mut data = vec![0.0; 3 * h * w];
            for ch in 0..3 {
                for k in 0..h * w {
                    let fg = mask.data()[k];
                    let base = if fg { ((c + ch) % 3) as f64 * 0.4 + 0.1 } else { 0.5 };
                    data[ch * h * w + k] = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                image: RasterImage::new(3, h, w, data)?,
                mask,
            });
        }
        out.push(ClassSamples {
            class_id: ClassId(c as u32),
            samples,
        });
    }
    Ok(out)
}

fn tiny_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        image_channels: 3,
        widths: vec![2, 3],
        embed_dim: 4,
        hidden: 2,
        iterations: 1,
        act: ActKind::Silu,
    };
    let mut model = Model::init(&cfg, seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed);
    model.strategy.eaus.w = AffineParams::init(4, 4, false, &mut rng);
    Ok(model)
}

/// Whole episode: extractor, pyramid, clustering centroid, alignment,
/// strategy rounds and segmentation head on `3 x 8 x 8` inputs with `D = 4`.
pub fn check_pipeline(seed: u64) -> Result<GradReport> {
    let mut errors = Vec::new();
    let kinds = [UpdateKind::Eaus, UpdateKind::LinearTransform, UpdateKind::NonUpdate];
    for i in 0..INSTANCES as u64 {
        let mut rng = seeded_rng(seed.wrapping_add(i));
        let model = tiny_model(seed.wrapping_add(i))?;
        let data = toy_classes(&mut rng, 3, 3)?;
        let plan = EpisodePlan {
            classes: vec![0, 1, 2],
            supports: vec![0, 0, 0],
            pseudo_base: 2,
            rounds: vec![1],
            queries: vec![(0, 1, vec![2]), (2, 2, vec![1])],
        };
        let learn = LearnConfig {
            clusters: 1,
            strategy: UpdateStrategy::new(kinds[i as usize % 3], UpdateScope::Both),
            ..LearnConfig::default()
        };
        let mut g = model.zeros_like();
        run_episode(&model, &data, &plan, &learn, Some(&mut g))?;
        let fd = fd_grad(
            |t| {
                let mut m = model.clone();
                unflatten_into(&mut m, t);
                run_episode(&m, &data, &plan, &learn, None).unwrap_or(f64::NAN)
            },
            &flatten(&model),
            STEP,
        )?;
        errors.push(rel_error(&flatten(&g), &fd));
    }
    Ok(GradReport {
        name: "pipeline",
        instances: INSTANCES,
        max_rel_error: worst(errors),
    })
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    Ok(vec![
        check_affine(seed)?,
        check_conv(seed)?,
        check_sigmoid(seed)?,
        check_cim(seed)?,
        check_eaus(seed)?,
        check_casm(seed)?,
        check_pipeline(seed)?,
    ])
}
