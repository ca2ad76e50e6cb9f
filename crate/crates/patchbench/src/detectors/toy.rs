//! A differentiable template-correlation detector for desk-scale testing.
//!
//! The objectness logit of each K x K sliding window is the zero-mean
//! template correlation of the window contents, normalized by the template
//! energy and scaled by a fixed gain. The map is linear in the image pixels,
//! so the gradient path back to an embedded patch is exact.

use ndarray::Array3;

use crate::detectors::{check_thresholds, nms, sigmoid, Detection, DetectorAdapter, RawScores};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::patch::ArchGroup;
use crate::Image;

/// A small K x K color template plus its window stride.
#[derive(Debug, Clone)]
pub struct ToyTemplate {
    pub name: String,
    /// K x K x 3 intensities in [0, 1], zero-sum around 0.5 by construction.
    pub pixels: Image,
    pub stride: usize,
}

impl ToyTemplate {
    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Names of the built-in templates.
pub fn template_names() -> &'static [&'static str] {
    &["rings-red", "rings-blue"]
}

/// Construct a built-in template by name.
///
/// Each template is a 32 x 32 tile: a strong black/white checker border that
/// carries the localization energy, and fainter concentric color rings in
/// the 24 x 24 interior that the embedded patch covers at the standard 0.75
/// placement scale.
pub fn builtin_template(name: &str) -> Result<ToyTemplate> {
    const K: usize = 32;
    const BORDER: usize = 4;
    // channel directions of the interior rings; orthogonal between the two
    // built-ins so a patch tuned against one barely couples to the other
    let (ring_dir, ring_width): ([f64; 3], usize) = match name {
        "rings-red" => {
            let s = 1.0 / 2f64.sqrt();
            ([s, -s, 0.0], 3)
        }
        "rings-blue" => {
            let s = 1.0 / 6f64.sqrt();
            ([s, s, -2.0 * s], 4)
        }
        other => {
            return Err(Error::NotFound(format!(
                "built-in template {other}; available: {:?}",
                template_names()
            )))
        }
    };
    let border_amp = 0.4;
    let ring_amp = 0.2;
    let border_dir = [1.0 / 3f64.sqrt(); 3];
    let c = K as f64 / 2.0;
    let mut pixels = Array3::from_elem((K, K, 3), 0.5);
    for y in 0..K {
        for x in 0..K {
            let in_border =
                y < BORDER || x < BORDER || y >= K - BORDER || x >= K - BORDER;
            let (dir, amp, sign) = if in_border {
                let sign = if ((x / BORDER) + (y / BORDER)) % 2 == 0 { 1.0 } else { -1.0 };
                (border_dir, border_amp, sign)
            } else {
                let r = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
                let sign = if (r as usize / ring_width) % 2 == 0 { 1.0 } else { -1.0 };
                (ring_dir, ring_amp, sign)
            };
            for ch in 0..3 {
                pixels[[y, x, ch]] = 0.5 + sign * amp * dir[ch];
            }
        }
    }
    Ok(ToyTemplate { name: name.to_string(), pixels, stride: 16 })
}

/// Template-correlation detector; see the module docs.
pub struct ToyDetector {
    name: String,
    weights_id: String,
    input_size: (usize, usize),
    template: ToyTemplate,
    /// Zero-mean template, flat (K*K*3), row-major.
    t_hat: Vec<f64>,
    gain: f64,
    bias: f64,
}

/// Logit of a full-contrast template window.
const PEAK_LOGIT: f64 = 8.0;
/// Logit of a blank window (no template response).
const BLANK_LOGIT: f64 = -4.0;

impl ToyDetector {
    pub fn new(name: &str, template: ToyTemplate, input_size: (usize, usize)) -> Result<Self> {
        let k = template.side();
        if k > input_size.0 || k > input_size.1 {
            return Err(Error::invalid(format!(
                "template side {k} exceeds input size {input_size:?}"
            )));
        }
        if template.stride == 0 {
            return Err(Error::invalid("template stride must be positive"));
        }
        let mean = template.pixels.iter().sum::<f64>() / template.pixels.len() as f64;
        let t_hat: Vec<f64> = template.pixels.iter().map(|&v| v - mean).collect();
        let energy = t_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if energy == 0.0 {
            return Err(Error::invalid("template must not be constant"));
        }
        Ok(ToyDetector {
            name: name.to_string(),
            weights_id: format!("builtin:{}", template.name),
            input_size,
            gain: PEAK_LOGIT / energy,
            bias: BLANK_LOGIT,
            t_hat,
            template,
        })
    }

    pub fn template(&self) -> &ToyTemplate {
        &self.template
    }

    /// Sliding windows in logit order.
    pub fn windows(&self) -> Vec<BBox> {
        let k = self.template.side();
        let stride = self.template.stride;
        let (h, w) = self.input_size;
        let mut out = Vec::new();
        let mut y = 0;
        while y + k <= h {
            let mut x = 0;
            while x + k <= w {
                out.push(BBox { x: x as f64, y: y as f64, w: k as f64, h: k as f64 });
                x += stride;
            }
            y += stride;
        }
        out
    }

    fn check_shape(&self, image: &Image) -> Result<()> {
        let s = image.shape();
        if (s[0], s[1]) != self.input_size || s[2] != 3 {
            return Err(Error::invalid(format!(
                "image shape {s:?} does not match adapter input size {:?}",
                self.input_size
            )));
        }
        Ok(())
    }
}

impl DetectorAdapter for ToyDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn group(&self) -> ArchGroup {
        ArchGroup::ObjectnessV7
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn weights_id(&self) -> &str {
        &self.weights_id
    }

    fn raw_scores(&self, image: &Image) -> Result<RawScores> {
        self.check_shape(image)?;
        let k = self.template.side();
        let img = image.as_slice().expect("contiguous image");
        let w_img = self.input_size.1;
        let logits = self
            .windows()
            .iter()
            .map(|win| {
                let (x0, y0) = (win.x as usize, win.y as usize);
                let mut corr = 0.0;
                for ty in 0..k {
                    let row = ((y0 + ty) * w_img + x0) * 3;
                    let trow = ty * k * 3;
                    for i in 0..k * 3 {
                        corr += self.t_hat[trow + i] * img[row + i];
                    }
                }
                self.gain * corr + self.bias
            })
            .collect();
        Ok(RawScores::Objectness { logits })
    }

    fn raw_scores_backward(&self, image: &Image, upstream: &RawScores) -> Result<Image> {
        self.check_shape(image)?;
        let up = match upstream {
            RawScores::Objectness { logits } => logits,
            _ => return Err(Error::invalid("toy detector expects objectness upstream")),
        };
        let windows = self.windows();
        if up.len() != windows.len() {
            return Err(Error::invalid(format!(
                "upstream length {} does not match {} windows",
                up.len(),
                windows.len()
            )));
        }
        let k = self.template.side();
        let w_img = self.input_size.1;
        let mut grad = Array3::zeros(image.raw_dim());
        let g = grad.as_slice_mut().unwrap();
        for (win, &u) in windows.iter().zip(up) {
            if u == 0.0 {
                continue;
            }
            let (x0, y0) = (win.x as usize, win.y as usize);
            for ty in 0..k {
                let row = ((y0 + ty) * w_img + x0) * 3;
                let trow = ty * k * 3;
                for i in 0..k * 3 {
                    g[row + i] += u * self.gain * self.t_hat[trow + i];
                }
            }
        }
        Ok(grad)
    }

    fn detect(&self, image: &Image, conf_thresh: f64, iou_thresh: f64) -> Result<Vec<Detection>> {
        check_thresholds(conf_thresh, iou_thresh)?;
        let logits = match self.raw_scores(image)? {
            RawScores::Objectness { logits } => logits,
            _ => unreachable!(),
        };
        let dets: Vec<Detection> = self
            .windows()
            .into_iter()
            .zip(logits)
            .filter_map(|(bbox, logit)| {
                let score = sigmoid(logit);
                (score >= conf_thresh).then_some(Detection { bbox, score, category: 0 })
            })
            .collect();
        Ok(nms(dets, iou_thresh))
    }
}
