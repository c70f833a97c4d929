use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, ParamSet, Rng, Tensor};
use crate::{Error, Result};

/// 3x3 convolution kernels, layout `[c_out][c_in][3][3]`, plus a bias per
/// output channel.
///
/// All convolutions are correlations (no kernel flip) with stride 1 and zero
/// padding equal to the dilation, so spatial extents are preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    c_out: usize,
    c_in: usize,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

/// im2col buffer kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    channel_offset: usize,
    channels: usize,
    h: usize,
    w: usize,
    dilation: usize,
}

impl ConvParams {
    pub fn new(c_out: usize, c_in: usize, kernels: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if kernels.len() != c_out * c_in * 9 {
            return Err(Error::Dimension {
                op: "conv kernels",
                expected: c_out * c_in * 9,
                got: kernels.len(),
            });
        }
        if bias.len() != c_out {
            return Err(Error::Dimension {
                op: "conv bias",
                expected: c_out,
                got: bias.len(),
            });
        }
        Ok(Self {
            c_out,
            c_in,
            kernels,
            bias,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            c_out,
            c_in,
            kernels: vec![0.0; c_out * c_in * 9],
            bias: vec![0.0; c_out],
        }
    }

    pub fn init(c_out: usize, c_in: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * 9;
        Self {
            c_out,
            c_in,
            kernels: super::uniform_fan_in(rng, fan_in, c_out * c_in * 9),
            bias: super::uniform_fan_in(rng, fan_in, c_out),
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    #[inline]
    pub fn kernel(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.kernels[((o * self.c_in + c) * 3 + ky) * 3 + kx]
    }

    /// Full convolution of a `c_in x h x w` buffer, bias included.
    pub fn forward(&self, input: &[f64], h: usize, w: usize, dilation: usize) -> (Vec<f64>, ConvCache) {
        let mut out = vec![0.0; self.c_out * h * w];
        self.add_bias(&mut out, h * w);
        let cache = self.forward_part(input, 0, self.c_in, h, w, dilation, &mut out);
        (out, cache)
    }

    /// Adds the contribution of input channels
    /// `channel_offset..channel_offset + channels` to `out` (no bias).
    /// `input` holds exactly those channels.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_part(
        &self,
        input: &[f64],
        channel_offset: usize,
        channels: usize,
        h: usize,
        w: usize,
        dilation: usize,
        out: &mut [f64],
    ) -> ConvCache {
        assert!(channel_offset + channels <= self.c_in);
        assert_eq!(input.len(), channels * h * w);
        assert_eq!(out.len(), self.c_out * h * w);
        let cols = im2col(input, channels, h, w, dilation);
        let hw = h * w;
        let k = channels * 9;
        gemm(
            self.c_out,
            k,
            hw,
            &self.kernels[channel_offset * 9..],
            (self.c_in * 9, 1),
            &cols,
            (hw, 1),
            1.0,
            out,
            (hw, 1),
        );
        ConvCache {
            cols,
            channel_offset,
            channels,
            h,
            w,
            dilation,
        }
    }

    pub fn add_bias(&self, out: &mut [f64], hw: usize) {
        for (plane, b) in out.chunks_exact_mut(hw).zip(&self.bias) {
            for v in plane {
                *v += b;
            }
        }
    }

    /// Weight gradients for the cached channel slice, plus `dL/dinput`
    /// accumulated into `dinput` when given. Bias gradients are separate
    /// ([`ConvParams::backward_bias`]).
    pub fn backward_part(&self, cache: &ConvCache, dout: &[f64], grads: &mut ConvParams, dinput: Option<&mut [f64]>) {
        let hw = cache.h * cache.w;
        let k = cache.channels * 9;
        assert_eq!(dout.len(), self.c_out * hw);
        gemm(
            self.c_out,
            hw,
            k,
            dout,
            (hw, 1),
            &cache.cols,
            (1, hw),
            1.0,
            &mut grads.kernels[cache.channel_offset * 9..],
            (self.c_in * 9, 1),
        );
        if let Some(dinput) = dinput {
            let mut dcols = vec![0.0; k * hw];
            gemm(
                k,
                self.c_out,
                hw,
                &self.kernels[cache.channel_offset * 9..],
                (1, self.c_in * 9),
                dout,
                (hw, 1),
                0.0,
                &mut dcols,
                (hw, 1),
            );
            col2im_add(&dcols, cache.channels, cache.h, cache.w, cache.dilation, dinput);
        }
    }

    pub fn backward_bias(grads: &mut ConvParams, dout: &[f64], hw: usize) {
        for (plane, gb) in dout.chunks_exact(hw).zip(grads.bias.iter_mut()) {
            *gb += plane.iter().sum::<f64>();
        }
    }

    /// Full backward: weight and bias gradients, returns `dL/dinput`.
    pub fn backward(&self, cache: &ConvCache, dout: &[f64], grads: &mut ConvParams) -> Vec<f64> {
        let mut dinput = vec![0.0; cache.channels * cache.h * cache.w];
        self.backward_part(cache, dout, grads, Some(&mut dinput));
        Self::backward_bias(grads, dout, cache.h * cache.w);
        dinput
    }

    /// Adds the contribution of spatially constant input channels
    /// (`values[c]` everywhere on channel `channel_offset + c`) to `out`.
    /// Equivalent to [`ConvParams::forward_part`] on the tiled input at
    /// dilation 1.
    pub fn forward_constant_part(&self, values: &[f64], channel_offset: usize, h: usize, w: usize, out: &mut [f64]) {
        let taps = self.constant_tap_sums(values, channel_offset);
        let hw = h * w;
        for o in 0..self.c_out {
            let plane = &mut out[o * hw..(o + 1) * hw];
            let t = &taps[o * 9..(o + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ky, row) in t.chunks_exact(3).enumerate() {
                        if !tap_valid(y, ky, h) {
                            continue;
                        }
                        for (kx, v) in row.iter().enumerate() {
                            if tap_valid(x, kx, w) {
                                acc += v;
                            }
                        }
                    }
                    plane[y * w + x] += acc;
                }
            }
        }
    }

    fn constant_tap_sums(&self, values: &[f64], channel_offset: usize) -> Vec<f64> {
        let mut taps = vec![0.0; self.c_out * 9];
        for o in 0..self.c_out {
            for (c, &v) in values.iter().enumerate() {
                let base = ((o * self.c_in) + channel_offset + c) * 9;
                for (t, k) in taps[o * 9..(o + 1) * 9].iter_mut().zip(&self.kernels[base..base + 9]) {
                    *t += v * k;
                }
            }
        }
        taps
    }

    /// Backward of [`ConvParams::forward_constant_part`]: weight gradients
    /// and `dL/dvalues`.
    pub fn backward_constant_part(
        &self,
        values: &[f64],
        channel_offset: usize,
        h: usize,
        w: usize,
        dout: &[f64],
        grads: &mut ConvParams,
    ) -> Vec<f64> {
        let hw = h * w;
        // Sum of dout over the positions where each tap lands inside the map.
        let mut tap_dout = vec![0.0; self.c_out * 9];
        for o in 0..self.c_out {
            let plane = &dout[o * hw..(o + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for y in (0..h).filter(|&y| tap_valid(y, ky, h)) {
                        for x in (0..w).filter(|&x| tap_valid(x, kx, w)) {
                            acc += plane[y * w + x];
                        }
                    }
                    tap_dout[o * 9 + ky * 3 + kx] = acc;
                }
            }
        }
        let mut dvalues = vec![0.0; values.len()];
        for o in 0..self.c_out {
            let td = &tap_dout[o * 9..(o + 1) * 9];
            for (c, (&v, dv)) in values.iter().zip(dvalues.iter_mut()).enumerate() {
                let base = ((o * self.c_in) + channel_offset + c) * 9;
                for t in 0..9 {
                    grads.kernels[base + t] += v * td[t];
                    *dv += self.kernels[base + t] * td[t];
                }
            }
        }
        dvalues
    }
}

#[inline]
fn tap_valid(pos: usize, k: usize, extent: usize) -> bool {
    let p = pos + k;
    p >= 1 && p <= extent
}

impl ParamSet for ConvParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.kernels[..], &self.bias[..]]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.kernels[..], &mut self.bias[..]]
    }
}

/// Row `(c, ky, kx)` holds the input sample feeding each output position.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = Vec::with_capacity(channels * 9 * hw);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let (x_lo, x_hi) = valid_range(kx, d, w);
                let shift = (kx as isize - 1) * d as isize;
                for y in 0..h {
                    let sy = y as isize + (ky as isize - 1) * d as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let start = sy as usize * w;
                    let src = &plane[(start as isize + x_lo as isize + shift) as usize..][..x_hi - x_lo];
                    cols.resize(cols.len() + x_lo, 0.0);
                    cols.extend_from_slice(src);
                    cols.resize(cols.len() + (w - x_hi), 0.0);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, d: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = valid_range(kx, d, w);
                if x_lo >= x_hi {
                    continue;
                }
                let shift = (kx as isize - 1) * d as isize;
                for y in 0..h {
                    let sy = y as isize + (ky as isize - 1) * d as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let start = (sy as usize * w) as isize + x_lo as isize + shift;
                    let dst = &mut plane[start as usize..][..x_hi - x_lo];
                    for (o, v) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Output columns `x` whose tap `kx` reads inside `0..w`.
fn valid_range(kx: usize, d: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (d.min(w), w),
        1 => (0, w),
        _ => (0, w.saturating_sub(d)),
    }
}

/// Zero-padded 3x3 correlation of a `c_in x h x w` map.
pub fn conv3x3(fmap: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (c, h, w) = fmap.dims3()?;
    if c != p.c_in {
        return Err(Error::Dimension {
            op: "conv3x3 channels",
            expected: p.c_in,
            got: c,
        });
    }
    let (out, _) = p.forward(fmap.data(), h, w, 1);
    Tensor::new(vec![p.c_out, h, w], out)
}

/// Sliding-window reference implementation of a dilated 3x3 correlation.
pub fn conv3x3_naive(input: &[f64], h: usize, w: usize, p: &ConvParams, dilation: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.c_out * h * w];
    let d = dilation as isize;
    for o in 0..p.c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = p.bias[o];
                for c in 0..p.c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + (ky as isize - 1) * d;
                            let sx = x as isize + (kx as isize - 1) * d;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += p.kernel(o, c, ky, kx) * input[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{fd_grad, flatten, rel_error, seeded_rng, unflatten_into};
    use rand::Rng as _;

    fn random_input(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| i as f64);
        let y = conv3x3(&x, &ConvParams::zeros(3, 2)).unwrap();
        assert_eq!(y.shape(), [3, 4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_is_identity() {
        let mut p = ConvParams::zeros(1, 1);
        p.kernels[4] = 1.0;
        let x = Tensor::from_fn(&[1, 4, 4], |i| (i as f64).sin());
        assert_eq!(conv3x3(&x, &p).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[2, 3, 3]);
        assert!(matches!(
            conv3x3(&x, &ConvParams::zeros(1, 3)),
            Err(Error::Dimension { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn matches_naive_oracle_over_small_shapes() {
        let mut rng = seeded_rng(7);
        for c_in in 1..=4 {
            for c_out in 1..=4 {
                for h in 1..=8 {
                    for w in [1usize, 3, 8] {
                        let p = ConvParams::init(c_out, c_in, &mut rng);
                        let x = random_input(&mut rng, c_in * h * w);
                        let t = Tensor::new(vec![c_in, h, w], x.clone()).unwrap();
                        let fast = conv3x3(&t, &p).unwrap();
                        let slow = conv3x3_naive(&x, h, w, &p, 1);
                        for (a, b) in fast.data().iter().zip(&slow) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dilated_forward_matches_naive() {
        let mut rng = seeded_rng(8);
        for d in [1, 2, 4] {
            let p = ConvParams::init(3, 2, &mut rng);
            let x = random_input(&mut rng, 2 * 8 * 8);
            let (fast, _) = p.forward(&x, 8, 8, d);
            let slow = conv3x3_naive(&x, 8, 8, &p, d);
            assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn split_and_constant_paths_match_full_forward() {
        let mut rng = seeded_rng(9);
        let (h, w) = (5, 6);
        let p = ConvParams::init(4, 5, &mut rng);
        let head = random_input(&mut rng, 2 * h * w);
        let consts = random_input(&mut rng, 3);
        let mut full_input = head.clone();
        for &v in &consts {
            full_input.extend(std::iter::repeat_n(v, h * w));
        }
        let (full, _) = p.forward(&full_input, h, w, 1);
        let mut split = vec![0.0; 4 * h * w];
        p.add_bias(&mut split, h * w);
        p.forward_part(&head, 0, 2, h, w, 1, &mut split);
        p.forward_constant_part(&consts, 2, h, w, &mut split);
        assert!(full.iter().zip(&split).all(|(a, b)| (a - b).abs() < 1e-12));

        // Backward of the constant path against the full path.
        let dout = random_input(&mut rng, 4 * h * w);
        let (_, cache) = p.forward(&full_input, h, w, 1);
        let mut g_full = p.zeros_like();
        let dfull = p.backward(&cache, &dout, &mut g_full);
        let mut g_split = p.zeros_like();
        let cache_head = {
            let mut scratch = vec![0.0; 4 * h * w];
            p.forward_part(&head, 0, 2, h, w, 1, &mut scratch)
        };
        let mut dhead = vec![0.0; 2 * h * w];
        p.backward_part(&cache_head, &dout, &mut g_split, Some(&mut dhead));
        let dconst = p.backward_constant_part(&consts, 2, h, w, &dout, &mut g_split);
        ConvParams::backward_bias(&mut g_split, &dout, h * w);
        assert!(rel_error(&flatten(&g_full), &flatten(&g_split)) < 1e-13);
        assert!(rel_error(&dfull[..2 * h * w], &dhead) < 1e-13);
        for (c, dc) in dconst.iter().enumerate() {
            let s: f64 = dfull[(2 + c) * h * w..(3 + c) * h * w].iter().sum();
            assert!((s - dc).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(10);
        for d in [1, 2] {
            let p = ConvParams::init(2, 3, &mut rng);
            let x = random_input(&mut rng, 3 * 4 * 4);
            let wts = random_input(&mut rng, 2 * 4 * 4);
            let loss = |p: &ConvParams, x: &[f64]| -> f64 {
                let (y, _) = p.forward(x, 4, 4, d);
                y.iter().zip(&wts).map(|(a, b)| a * b + 0.5 * a * a).sum()
            };
            let (y, cache) = p.forward(&x, 4, 4, d);
            let dy: Vec<f64> = y.iter().zip(&wts).map(|(a, b)| b + a).collect();
            let mut g = p.zeros_like();
            let dx = p.backward(&cache, &dy, &mut g);
            let fd_x = fd_grad(|x| loss(&p, x), &x, 1e-3).unwrap();
            assert!(rel_error(&dx, &fd_x) < 1e-4);
            let fd_p = fd_grad(
                |t| {
                    let mut q = p.clone();
                    unflatten_into(&mut q, t);
                    loss(&q, &x)
                },
                &flatten(&p),
                1e-3,
            )
            .unwrap();
            assert!(rel_error(&flatten(&g), &fd_p) < 1e-4);
        }
    }
}
