//! Patch placement and the differentiable training-time augmentation pipeline.
//!
//! Every stage (bilinear resize, color jitter, perspective, rotation,
//! compositing) is a linear map in the patch pixel values once its random
//! draws are fixed, so gradients are exact hand-written transposes rather
//! than autograd tape replays.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Image;

/// Axis-aligned box in pixel coordinates (left, top, width, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "box must have positive extent, got w={w}, h={h}"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Where a patch goes: square of side `side` centered at (`center_x`, `center_y`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub center_x: f64,
    pub center_y: f64,
    pub side: f64,
}

/// The placement rule: a square of `scale` times the shorter box side,
/// centered on the box.
pub fn target_square(bbox: &BBox, scale: f64) -> Result<Placement> {
    if scale <= 0.0 {
        return Err(Error::invalid("placement scale must be positive"));
    }
    let (cx, cy) = bbox.center();
    Ok(Placement {
        center_x: cx,
        center_y: cy,
        side: scale * bbox.w.min(bbox.h),
    })
}

/// Training-time augmentation magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Resize factor range as fractions of the placement side.
    pub resize_lo: f64,
    pub resize_hi: f64,
    /// Symmetric rotation bound in degrees.
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift bound as a fraction of the full color circle.
    pub hue: f64,
    pub perspective_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            resize_lo: 0.75,
            resize_hi: 1.0,
            rotation_deg: 30.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            perspective_scale: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            resize_lo: 1.0,
            resize_hi: 1.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            perspective_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resize_lo > 0.0 && self.resize_lo <= self.resize_hi && self.resize_hi <= 1.0) {
            return Err(Error::invalid("resize range must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0..=90.0).contains(&self.rotation_deg) {
            return Err(Error::invalid("rotation bound must lie in [0, 90] degrees"));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("perspective_scale", self.perspective_scale),
        ] {
            if v < 0.0 {
                return Err(Error::invalid(format!("{name} delta must be nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum BorderMode {
    /// Replicate edge pixels; tap weights always sum to 1.
    Clamp,
    /// Taps outside the source contribute zero; gives fractional alpha at
    /// warped edges.
    Zero,
}

/// Precomputed bilinear sampling taps for one warp.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    /// Four (flat spatial source index, weight) taps per output pixel;
    /// index usize::MAX marks a dropped (out of bounds) tap.
    taps: Vec<[(usize, f64); 4]>,
}

impl WarpPlan {
    /// Build a plan from a mapping of output pixel centers to source
    /// coordinates (both in continuous pixel coordinates).
    fn from_mapping(
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
        border: BorderMode,
        map: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (sx, sy) = map(ox as f64 + 0.5, oy as f64 + 0.5);
                let fx = sx - 0.5;
                let fy = sy - 0.5;
                let x0 = fx.floor() as i64;
                let y0 = fy.floor() as i64;
                let wx1 = fx - x0 as f64;
                let wy1 = fy - y0 as f64;
                let mut cell = [(usize::MAX, 0.0); 4];
                let corners = [
                    (x0, y0, (1.0 - wx1) * (1.0 - wy1)),
                    (x0 + 1, y0, wx1 * (1.0 - wy1)),
                    (x0, y0 + 1, (1.0 - wx1) * wy1),
                    (x0 + 1, y0 + 1, wx1 * wy1),
                ];
                for (k, (cx, cy, w)) in corners.into_iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let (ix, iy) = match border {
                        BorderMode::Clamp => (
                            cx.clamp(0, in_w as i64 - 1),
                            cy.clamp(0, in_h as i64 - 1),
                        ),
                        BorderMode::Zero => {
                            if cx < 0 || cy < 0 || cx >= in_w as i64 || cy >= in_h as i64 {
                                continue;
                            }
                            (cx, cy)
                        }
                    };
                    cell[k] = ((iy as usize) * in_w + ix as usize, w);
                }
                taps.push(cell);
            }
        }
        WarpPlan { out_h, out_w, in_h, in_w, taps }
    }

    fn identity(h: usize, w: usize) -> Self {
        WarpPlan::from_mapping(h, w, h, w, BorderMode::Clamp, |x, y| (x, y))
    }

    pub fn apply(&self, src: &Image) -> Image {
        debug_assert_eq!(src.shape(), [self.in_h, self.in_w, 3]);
        let s = src.as_slice().expect("contiguous image");
        let mut out = Array3::zeros((self.out_h, self.out_w, 3));
        let o = out.as_slice_mut().unwrap();
        for (p, cell) in self.taps.iter().enumerate() {
            for &(idx, w) in cell {
                if idx != usize::MAX {
                    for ch in 0..3 {
                        o[p * 3 + ch] += w * s[idx * 3 + ch];
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`apply`]: scatter output-space gradients back to the source.
    pub fn apply_transpose(&self, grad_out: &Image) -> Image {
        debug_assert_eq!(grad_out.shape(), [self.out_h, self.out_w, 3]);
        let g = grad_out.as_slice().expect("contiguous image");
        let mut out = Array3::zeros((self.in_h, self.in_w, 3));
        let o = out.as_slice_mut().unwrap();
        for (p, cell) in self.taps.iter().enumerate() {
            for &(idx, w) in cell {
                if idx != usize::MAX {
                    for ch in 0..3 {
                        o[idx * 3 + ch] += w * g[p * 3 + ch];
                    }
                }
            }
        }
        out
    }

    fn apply_mask(&self, src: &Array2<f64>) -> Array2<f64> {
        let s = src.as_slice().expect("contiguous mask");
        let mut out = Array2::zeros((self.out_h, self.out_w));
        let o = out.as_slice_mut().unwrap();
        for (p, cell) in self.taps.iter().enumerate() {
            for &(idx, w) in cell {
                if idx != usize::MAX {
                    o[p] += w * s[idx];
                }
            }
        }
        out
    }
}

/// Bilinear resize with edge replication.
pub fn resize_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> WarpPlan {
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    WarpPlan::from_mapping(out_h, out_w, in_h, in_w, BorderMode::Clamp, |x, y| {
        (x * sx, y * sy)
    })
}

fn rotation_plan(side: usize, theta_deg: f64) -> WarpPlan {
    if theta_deg == 0.0 {
        return WarpPlan::identity(side, side);
    }
    let t = theta_deg.to_radians();
    let (sin, cos) = t.sin_cos();
    let c = side as f64 / 2.0;
    // inverse rotation about the canvas center
    WarpPlan::from_mapping(side, side, side, side, BorderMode::Zero, |x, y| {
        let dx = x - c;
        let dy = y - c;
        (c + cos * dx + sin * dy, c - sin * dx + cos * dy)
    })
}

/// Homography mapping output coordinates to source coordinates, solved from
/// four point correspondences.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Result<[f64; 8]> {
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        a[(2 * i, 6)] = -x * u;
        a[(2 * i, 7)] = -y * u;
        b[2 * i] = u;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        a[(2 * i + 1, 6)] = -x * v;
        a[(2 * i + 1, 7)] = -y * v;
        b[2 * i + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::invalid("degenerate perspective corner configuration"))?;
    Ok([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]])
}

fn perspective_plan(side: usize, corner_deltas: &[(f64, f64); 4]) -> Result<WarpPlan> {
    if corner_deltas.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0) {
        return Ok(WarpPlan::identity(side, side));
    }
    let s = side as f64;
    let out_corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let mut src_corners = out_corners;
    for i in 0..4 {
        src_corners[i].0 += corner_deltas[i].0;
        src_corners[i].1 += corner_deltas[i].1;
    }
    let h = homography(&out_corners, &src_corners)?;
    Ok(WarpPlan::from_mapping(
        side,
        side,
        side,
        side,
        BorderMode::Zero,
        move |x, y| {
            let d = h[6] * x + h[7] * y + 1.0;
            ((h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d)
        },
    ))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Color jitter as a chain of exact linear maps: brightness shift, contrast
/// blend toward the mean luminance, saturation blend toward per-pixel
/// luminance, and hue rotation about the gray axis.
#[derive(Debug, Clone, Copy)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation angle in radians.
    pub hue_theta: f64,
}

fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    [
        [
            0.213 + 0.787 * c - 0.213 * s,
            0.715 - 0.715 * c - 0.715 * s,
            0.072 - 0.072 * c + 0.928 * s,
        ],
        [
            0.213 - 0.213 * c + 0.143 * s,
            0.715 + 0.285 * c + 0.140 * s,
            0.072 - 0.072 * c - 0.283 * s,
        ],
        [
            0.213 - 0.213 * c - 0.787 * s,
            0.715 - 0.715 * c + 0.715 * s,
            0.072 + 0.928 * c + 0.072 * s,
        ],
    ]
}

impl ColorJitter {
    pub fn forward(&self, src: &Image) -> Image {
        let mut out = src.clone();
        if self.brightness != 0.0 {
            out.mapv_inplace(|v| v + self.brightness);
        }
        if self.contrast != 1.0 {
            let n = (out.len() / 3) as f64;
            let mut mean = 0.0;
            for px in out.rows() {
                mean += LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            }
            mean /= n;
            let c = self.contrast;
            out.mapv_inplace(|v| c * v + (1.0 - c) * mean);
        }
        if self.saturation != 1.0 {
            let s = self.saturation;
            for mut px in out.rows_mut() {
                let lum = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                for ch in 0..3 {
                    px[ch] = s * px[ch] + (1.0 - s) * lum;
                }
            }
        }
        if self.hue_theta != 0.0 {
            let m = hue_matrix(self.hue_theta);
            for mut px in out.rows_mut() {
                let (r, g, b) = (px[0], px[1], px[2]);
                for ch in 0..3 {
                    px[ch] = m[ch][0] * r + m[ch][1] * g + m[ch][2] * b;
                }
            }
        }
        out
    }

    /// Vector-Jacobian product; the jitter Jacobian does not depend on the
    /// input, so no activations are cached.
    pub fn backward(&self, grad_out: &Image) -> Image {
        let mut g = grad_out.clone();
        // reverse order of forward
        if self.hue_theta != 0.0 {
            let m = hue_matrix(self.hue_theta);
            for mut px in g.rows_mut() {
                let (r, gg, b) = (px[0], px[1], px[2]);
                for ch in 0..3 {
                    px[ch] = m[0][ch] * r + m[1][ch] * gg + m[2][ch] * b;
                }
            }
        }
        if self.saturation != 1.0 {
            let s = self.saturation;
            for mut px in g.rows_mut() {
                let total = px[0] + px[1] + px[2];
                for ch in 0..3 {
                    px[ch] = s * px[ch] + (1.0 - s) * LUMA[ch] * total;
                }
            }
        }
        if self.contrast != 1.0 {
            let n = (g.len() / 3) as f64;
            let c = self.contrast;
            let total: f64 = g.iter().sum();
            for mut px in g.rows_mut() {
                for ch in 0..3 {
                    px[ch] = c * px[ch] + (1.0 - c) * LUMA[ch] * total / n;
                }
            }
        }
        // brightness shift has identity Jacobian
        g
    }
}

/// One stage of the augmentation pipeline.
#[derive(Debug, Clone)]
pub enum Stage {
    Warp(WarpPlan),
    Jitter(ColorJitter),
}

impl Stage {
    fn forward(&self, src: &Image) -> Image {
        match self {
            Stage::Warp(p) => p.apply(src),
            Stage::Jitter(j) => j.forward(src),
        }
    }

    fn backward(&self, grad: &Image) -> Image {
        match self {
            Stage::Warp(p) => p.apply_transpose(grad),
            Stage::Jitter(j) => j.backward(grad),
        }
    }
}

/// Random draws made for one augmentation, recorded for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraws {
    pub resize_factor: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub corner_deltas: [(f64, f64); 4],
    pub rotation_deg: f64,
}

/// A fixed augmentation of one patch: the warped canvas, its alpha mask, and
/// the stage chain for gradient transport.
#[derive(Debug, Clone)]
pub struct AugmentChain {
    stages: Vec<Stage>,
    pub canvas: Image,
    pub mask: Array2<f64>,
    pub draws: AugmentDraws,
}

impl AugmentChain {
    /// Backpropagate a canvas-space gradient to the original patch pixels.
    pub fn backward(&self, grad_canvas: &Image) -> Image {
        let mut g = grad_canvas.clone();
        for stage in self.stages.iter().rev() {
            g = stage.backward(&g);
        }
        g
    }

    pub fn canvas_side(&self) -> usize {
        self.canvas.shape()[0]
    }
}

fn draw_symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

/// Apply the training-time augmentation pipeline to a patch:
/// resize -> color jitter -> perspective -> rotation.
///
/// Deterministic for a fixed rng state; every stage is differentiable with
/// respect to the patch pixel values.
pub fn augment_patch<R: Rng>(
    pixels: &Image,
    placement_side: f64,
    rng: &mut R,
    params: &AugmentParams,
) -> Result<AugmentChain> {
    params.validate()?;
    if placement_side < 1.0 {
        return Err(Error::invalid("placement side must be at least 1 px"));
    }
    let (in_h, in_w) = (pixels.shape()[0], pixels.shape()[1]);

    let factor = if params.resize_lo == params.resize_hi {
        params.resize_lo
    } else {
        rng.gen_range(params.resize_lo..=params.resize_hi)
    };
    let side = ((placement_side * factor).round() as usize).max(1);

    let jitter = ColorJitter {
        brightness: draw_symmetric(rng, params.brightness),
        contrast: 1.0 + draw_symmetric(rng, params.contrast),
        saturation: 1.0 + draw_symmetric(rng, params.saturation),
        hue_theta: draw_symmetric(rng, params.hue) * std::f64::consts::TAU,
    };

    let persp_bound = params.perspective_scale * side as f64 / 2.0;
    let mut corner_deltas = [(0.0, 0.0); 4];
    for d in &mut corner_deltas {
        d.0 = draw_symmetric(rng, persp_bound);
        d.1 = draw_symmetric(rng, persp_bound);
    }
    let rotation = draw_symmetric(rng, params.rotation_deg);

    let draws = AugmentDraws {
        resize_factor: factor,
        brightness: jitter.brightness,
        contrast: jitter.contrast,
        saturation: jitter.saturation,
        hue: jitter.hue_theta / std::f64::consts::TAU,
        corner_deltas,
        rotation_deg: rotation,
    };

    let stages = vec![
        Stage::Warp(resize_plan(in_h, in_w, side, side)),
        Stage::Jitter(jitter),
        Stage::Warp(perspective_plan(side, &corner_deltas)?),
        Stage::Warp(rotation_plan(side, rotation)),
    ];

    let mut canvas = pixels.clone();
    let mut mask = Array2::ones((in_h, in_w));
    for stage in &stages {
        canvas = stage.forward(&canvas);
        if let Stage::Warp(p) = stage {
            mask = p.apply_mask(&mask);
        }
    }
    Ok(AugmentChain { stages, canvas, mask, draws })
}

/// Composite a (possibly alpha-premultiplied) canvas over `image`, centered
/// at (`cx`, `cy`), clipping at the image border.
///
/// Returns true when the placement lies entirely outside the image (no-op).
pub fn composite(
    image: &mut Image,
    canvas: &Image,
    mask: &Array2<f64>,
    cx: f64,
    cy: f64,
) -> bool {
    let (img_h, img_w) = (image.shape()[0] as i64, image.shape()[1] as i64);
    let (can_h, can_w) = (canvas.shape()[0] as i64, canvas.shape()[1] as i64);
    let left = (cx - can_w as f64 / 2.0).round() as i64;
    let top = (cy - can_h as f64 / 2.0).round() as i64;
    if left >= img_w || top >= img_h || left + can_w <= 0 || top + can_h <= 0 {
        return true;
    }
    for py in 0..can_h {
        let y = top + py;
        if y < 0 || y >= img_h {
            continue;
        }
        for px in 0..can_w {
            let x = left + px;
            if x < 0 || x >= img_w {
                continue;
            }
            let a = mask[[py as usize, px as usize]];
            for ch in 0..3 {
                let base = image[[y as usize, x as usize, ch]];
                image[[y as usize, x as usize, ch]] =
                    base * (1.0 - a) + canvas[[py as usize, px as usize, ch]];
            }
        }
    }
    false
}

/// Transpose of [`composite`] with respect to the canvas: crop the
/// image-space gradient to the pasted region (zero where clipped).
pub fn composite_backward(
    grad_image: &Image,
    canvas_h: usize,
    canvas_w: usize,
    cx: f64,
    cy: f64,
) -> Image {
    let (img_h, img_w) = (grad_image.shape()[0] as i64, grad_image.shape()[1] as i64);
    let left = (cx - canvas_w as f64 / 2.0).round() as i64;
    let top = (cy - canvas_h as f64 / 2.0).round() as i64;
    let mut g = Array3::zeros((canvas_h, canvas_w, 3));
    for py in 0..canvas_h as i64 {
        let y = top + py;
        if y < 0 || y >= img_h {
            continue;
        }
        for px in 0..canvas_w as i64 {
            let x = left + px;
            if x < 0 || x >= img_w {
                continue;
            }
            for ch in 0..3 {
                g[[py as usize, px as usize, ch]] = grad_image[[y as usize, x as usize, ch]];
            }
        }
    }
    g
}

/// Evaluation-time embedding: bilinearly resample the patch to the placement
/// square and composite it over the image, with no augmentation.
///
/// Returns the patched image and a flag set when the placement fell entirely
/// outside the image (the embed is then a no-op).
pub fn embed_patch(image: &Image, patch: &Image, placement: &Placement) -> Result<(Image, bool)> {
    if placement.side < 1.0 {
        return Err(Error::invalid("placement side must be at least 1 px"));
    }
    let side = placement.side.round() as usize;
    let plan = resize_plan(patch.shape()[0], patch.shape()[1], side, side);
    let canvas = plan.apply(patch);
    let mask = Array2::ones((side, side));
    let mut out = image.clone();
    let oob = composite(&mut out, &canvas, &mask, placement.center_x, placement.center_y);
    Ok((out, oob))
}

/// Gradient of a scalar objective through [`embed_patch`] back to the patch.
pub fn embed_patch_backward(
    grad_image: &Image,
    patch_h: usize,
    patch_w: usize,
    placement: &Placement,
) -> Result<Image> {
    if placement.side < 1.0 {
        return Err(Error::invalid("placement side must be at least 1 px"));
    }
    let side = placement.side.round() as usize;
    let g_canvas =
        composite_backward(grad_image, side, side, placement.center_x, placement.center_y);
    let plan = resize_plan(patch_h, patch_w, side, side);
    Ok(plan.apply_transpose(&g_canvas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, 3), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn target_square_hand_cases() {
        let b = BBox::new(10.0, 20.0, 100.0, 200.0).unwrap();
        let p = target_square(&b, 0.75).unwrap();
        assert_eq!((p.center_x, p.center_y, p.side), (60.0, 120.0, 75.0));

        let b = BBox::new(0.0, 0.0, 50.0, 50.0).unwrap();
        let p = target_square(&b, 1.0).unwrap();
        assert_eq!((p.center_x, p.center_y, p.side), (25.0, 25.0, 50.0));

        let b = BBox::new(0.0, 0.0, 10.0, 40.0).unwrap();
        let p = target_square(&b, 0.75).unwrap();
        assert_eq!((p.center_x, p.center_y, p.side), (5.0, 20.0, 7.5));
    }

    #[test]
    fn embed_constant_patch_center() {
        let image = Array3::zeros((100, 100, 3));
        let patch = Array3::from_elem((32, 32, 3), 0.5);
        let placement = Placement { center_x: 50.0, center_y: 50.0, side: 50.0 };
        let (out, oob) = embed_patch(&image, &patch, &placement).unwrap();
        assert!(!oob);
        for y in 0..100 {
            for x in 0..100 {
                let inside = (25..75).contains(&y) && (25..75).contains(&x);
                let expect = if inside { 0.5 } else { 0.0 };
                assert_eq!(out[[y, x, 0]], expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn embed_clips_to_quadrant() {
        let image = Array3::zeros((100, 100, 3));
        let patch = Array3::from_elem((32, 32, 3), 1.0);
        let placement = Placement { center_x: 0.0, center_y: 0.0, side: 50.0 };
        let (out, oob) = embed_patch(&image, &patch, &placement).unwrap();
        assert!(!oob);
        let touched: usize = out.iter().step_by(3).filter(|&&v| v != 0.0).count();
        assert_eq!(touched, 25 * 25);
    }

    #[test]
    fn embed_fully_outside_is_noop() {
        let image = random_image(1, 50, 50);
        let patch = Array3::from_elem((16, 16, 3), 1.0);
        let placement = Placement { center_x: 200.0, center_y: 200.0, side: 20.0 };
        let (out, oob) = embed_patch(&image, &patch, &placement).unwrap();
        assert!(oob);
        assert_eq!(out, image);
    }

    #[test]
    fn composite_zero_mask_is_identity() {
        let mut image = random_image(2, 40, 40);
        let orig = image.clone();
        let canvas = Array3::zeros((10, 10, 3));
        let mask = Array2::zeros((10, 10));
        composite(&mut image, &canvas, &mask, 20.0, 20.0);
        assert_eq!(image, orig);
    }

    #[test]
    fn embed_untouched_pixels_bit_identical() {
        let image = random_image(3, 64, 64);
        let patch = random_image(4, 16, 16);
        let placement = Placement { center_x: 30.0, center_y: 22.0, side: 20.0 };
        let (out, _) = embed_patch(&image, &patch, &placement).unwrap();
        let left = (30.0 - 10.0) as usize;
        let top = (22.0 - 10.0) as usize;
        let mut untouched = 0;
        for y in 0..64 {
            for x in 0..64 {
                if (top..top + 20).contains(&y) && (left..left + 20).contains(&x) {
                    continue;
                }
                for ch in 0..3 {
                    assert_eq!(out[[y, x, ch]], image[[y, x, ch]]);
                }
                untouched += 1;
            }
        }
        assert_eq!(untouched, 64 * 64 - 400);
    }

    #[test]
    fn identity_pipeline_is_exact() {
        let patch = random_image(5, 24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chain =
            augment_patch(&patch, 24.0, &mut rng, &AugmentParams::identity()).unwrap();
        assert_eq!(chain.canvas, patch);
        assert!(chain.mask.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn augment_reproducible_for_fixed_seed() {
        let patch = random_image(6, 16, 16);
        let params = AugmentParams::default();
        let a = augment_patch(&patch, 40.0, &mut ChaCha8Rng::seed_from_u64(9), &params).unwrap();
        let b = augment_patch(&patch, 40.0, &mut ChaCha8Rng::seed_from_u64(9), &params).unwrap();
        assert_eq!(a.canvas, b.canvas);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn rotation_draws_cover_bound() {
        let patch = random_image(7, 8, 8);
        let params = AugmentParams { rotation_deg: 30.0, ..AugmentParams::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            let chain = augment_patch(&patch, 8.0, &mut rng, &params).unwrap();
            let theta = chain.draws.rotation_deg;
            assert!((-30.0..=30.0).contains(&theta));
            lo = lo.min(theta);
            hi = hi.max(theta);
        }
        assert!(lo <= -29.0 && hi >= 29.0, "span [{lo}, {hi}]");
    }

    #[test]
    fn resize_range_respected() {
        let patch = random_image(8, 32, 32);
        let params = AugmentParams { resize_lo: 0.75, resize_hi: 1.0, ..AugmentParams::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let chain = augment_patch(&patch, 100.0, &mut rng, &params).unwrap();
            let side = chain.canvas_side();
            assert!((75..=100).contains(&side), "side {side}");
        }
    }

    #[test]
    fn zero_jitter_rotation_perspective_are_identity() {
        let patch = random_image(9, 20, 20);
        let jitter = ColorJitter { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue_theta: 0.0 };
        assert_eq!(jitter.forward(&patch), patch);
        let plan = perspective_plan(20, &[(0.0, 0.0); 4]).unwrap();
        let warped = plan.apply(&patch);
        for (a, b) in warped.iter().zip(patch.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let plan = rotation_plan(20, 0.0);
        let warped = plan.apply(&patch);
        for (a, b) in warped.iter().zip(patch.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let image = random_image(20, 40, 40);
        let patch = random_image(21, 16, 16);
        let placement = Placement { center_x: 17.0, center_y: 23.0, side: 21.0 };
        // objective: weighted sum of the embedded image
        let weights = random_image(22, 40, 40);
        let objective = |p: &Image| -> f64 {
            let (out, _) = embed_patch(&image, p, &placement).unwrap();
            out.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
        };
        let grad = embed_patch_backward(&weights, 16, 16, &placement).unwrap();
        let h = 1e-4;
        for idx in [(0usize, 0usize, 0usize), (5, 9, 1), (15, 15, 2), (8, 3, 0)] {
            let mut plus = patch.clone();
            let mut minus = patch.clone();
            plus[[idx.0, idx.1, idx.2]] += h;
            minus[[idx.0, idx.1, idx.2]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let g = grad[[idx.0, idx.1, idx.2]];
            assert!(
                (g - fd).abs() / fd.abs().max(1e-3) < 1e-4,
                "grad {g} vs fd {fd} at {idx:?}"
            );
        }
    }

    #[test]
    fn augment_chain_gradient_matches_finite_differences() {
        let patch = random_image(30, 12, 12);
        let params = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let chain = augment_patch(&patch, 14.0, &mut rng, &params).unwrap();
        let weights = random_image(31, chain.canvas_side(), chain.canvas_side());
        let grad = chain.backward(&weights);
        let h = 1e-5;
        let draws = chain.draws;
        let replay = |p: &Image| -> f64 {
            // rebuild the same chain by replaying the recorded draws
            let params = AugmentParams {
                resize_lo: draws.resize_factor,
                resize_hi: draws.resize_factor,
                rotation_deg: 0.0,
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                perspective_scale: 0.0,
            };
            let mut c =
                augment_patch(p, 14.0, &mut ChaCha8Rng::seed_from_u64(0), &params).unwrap();
            // manual remaining stages with identical draws
            let jitter = ColorJitter {
                brightness: draws.brightness,
                contrast: draws.contrast,
                saturation: draws.saturation,
                hue_theta: draws.hue * std::f64::consts::TAU,
            };
            let side = c.canvas_side();
            let mut canvas = jitter.forward(&c.canvas);
            canvas = perspective_plan(side, &draws.corner_deltas).unwrap().apply(&canvas);
            canvas = rotation_plan(side, draws.rotation_deg).apply(&canvas);
            c.canvas = canvas;
            c.canvas.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
        };
        // the resize side must match the original chain for the replay to align
        assert_eq!(
            ((14.0 * draws.resize_factor).round() as usize).max(1),
            chain.canvas_side()
        );
        for idx in [(0usize, 0usize, 0usize), (5, 9, 1), (11, 11, 2), (3, 7, 0)] {
            let mut plus = patch.clone();
            let mut minus = patch.clone();
            plus[[idx.0, idx.1, idx.2]] += h;
            minus[[idx.0, idx.1, idx.2]] -= h;
            let fd = (replay(&plus) - replay(&minus)) / (2.0 * h);
            let g = grad[[idx.0, idx.1, idx.2]];
            assert!(
                (g - fd).abs() / fd.abs().max(1e-2) < 1e-3,
                "grad {g} vs fd {fd} at {idx:?}"
            );
        }
    }
}
