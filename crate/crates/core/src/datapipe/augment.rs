use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image_io::check_pixel_range;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random augmentation ranges. Angles are in degrees; fractions are of the
/// image side or area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub scale_range: [f64; 2],
    pub max_shear_deg: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`; the hue offset from `±s/2` of the hue circle.
    pub jitter_strength: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub crop_area_range: [f64; 2],
    /// Width/height ratio of the crop relative to the image's own ratio.
    pub crop_aspect_range: [f64; 2],
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 90.0,
            max_translate_frac: 0.10,
            scale_range: [0.8, 1.2],
            max_shear_deg: 10.0,
            jitter_strength: 0.5,
            hflip_p: 0.5,
            vflip_p: 0.5,
            crop_area_range: [0.6, 1.0],
            crop_aspect_range: [0.75, 1.333],
            output_size: 160,
        }
    }
}

impl AugmentConfig {
    /// Every transform collapsed: the pipeline reduces to a bilinear resize.
    pub fn identity(output_size: usize) -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            max_translate_frac: 0.0,
            scale_range: [1.0, 1.0],
            max_shear_deg: 0.0,
            jitter_strength: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            crop_area_range: [1.0, 1.0],
            crop_aspect_range: [1.0, 1.0],
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |field: &str, [lo, hi]: [f64; 2], min: f64, max: f64| -> Result<()> {
            if !(lo > min && lo <= hi && hi <= max) {
                return Err(Error::config(field, format!("[{lo}, {hi}] must satisfy {min} < lo <= hi <= {max}")));
            }
            Ok(())
        };
        let within = |field: &str, v: f64, max: f64| -> Result<()> {
            if !(0.0..=max).contains(&v) {
                return Err(Error::config(field, format!("{v} is outside [0, {max}]")));
            }
            Ok(())
        };
        within("max_rotation_deg", self.max_rotation_deg, 180.0)?;
        within("max_translate_frac", self.max_translate_frac, 0.5)?;
        within("max_shear_deg", self.max_shear_deg, 45.0)?;
        within("jitter_strength", self.jitter_strength, 1.0)?;
        within("hflip_p", self.hflip_p, 1.0)?;
        within("vflip_p", self.vflip_p, 1.0)?;
        range("scale_range", self.scale_range, 0.0, 10.0)?;
        range("crop_area_range", self.crop_area_range, 0.0, 1.0)?;
        range("crop_aspect_range", self.crop_aspect_range, 0.0, 10.0)?;
        if self.output_size == 0 {
            return Err(Error::config("output_size", "must be positive"));
        }
        Ok(())
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [3, h, w] if h > 0 && w > 0 => Ok([3, h, w]),
        _ => Err(Error::shape(op, "input", format!("expected [3, H, W], got {:?}", t.shape()))),
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Folds a continuous coordinate into `[0, n-1]` by mirroring at the edges.
fn reflect_coord(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let x = x.rem_euclid(period);
    if x > (n - 1) as f64 {
        period - x
    } else {
        x
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinearly resamples the box `(top, left, height, width)` of the image to
/// `out_h × out_w`, with half-pixel centres and edge clamping.
pub fn resample_box(img: &Tensor, (top, left, bh, bw): (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = dims3("resample_box", img)?;
    let (sy, sx) = (bh / out_h as f64, bw / out_w as f64);
    let src = img.data();
    Ok(Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, r, col) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let y = (top + (r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = (left + (col as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, y, x)
    }))
}

/// Plain bilinear resize, used for validation and evaluation images.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [_, h, w] = dims3("resize_bilinear", img)?;
    resample_box(img, (0.0, 0.0, h as f64, w as f64), out_h, out_w)
}

/// Applies the inverse of `x ↦ A·(x − c) + c + t` by bilinear sampling with
/// mirrored borders.
fn warp_affine(img: &Tensor, a: [[f64; 2]; 2], t: [f64; 2]) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let src = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        let (dx, dy) = (col as f64 - cx - t[0], r as f64 - cy - t[1]);
        let x = reflect_coord(inv[0][0] * dx + inv[0][1] * dy + cx, w);
        let y = reflect_coord(inv[1][0] * dx + inv[1][1] * dy + cy, h);
        bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, y, x)
    })
}

fn flip(img: &Tensor, horizontal: bool) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let d = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        let (r, col) = if horizontal { (r, w - 1 - col) } else { (h - 1 - r, col) };
        d[ch * h * w + r * w + col]
    })
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn per_pixel(img: &Tensor, f: impl Fn([f64; 3]) -> [f64; 3]) -> Tensor {
    let hw = img.numel() / 3;
    let d = img.data();
    let mut out = vec![0.0; img.numel()];
    for p in 0..hw {
        let px = f([d[p], d[hw + p], d[2 * hw + p]]);
        for c in 0..3 {
            out[c * hw + p] = px[c];
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

pub fn adjust_brightness(img: &Tensor, factor: f64) -> Tensor {
    img.map(|v| (v * factor).clamp(0.0, 1.0))
}

/// Blends every pixel with the image's mean gray level.
pub fn adjust_contrast(img: &Tensor, factor: f64) -> Tensor {
    let hw = img.numel() / 3;
    let d = img.data();
    let mean = (0..hw).map(|p| gray(d[p], d[hw + p], d[2 * hw + p])).sum::<f64>() / hw as f64;
    img.map(|v| (mean + (v - mean) * factor).clamp(0.0, 1.0))
}

/// Blends every pixel with its own gray level.
pub fn adjust_saturation(img: &Tensor, factor: f64) -> Tensor {
    per_pixel(img, |[r, g, b]| {
        let y = gray(r, g, b);
        [r, g, b].map(|v| (y + (v - y) * factor).clamp(0.0, 1.0))
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `offset` turns of the hue circle.
pub fn adjust_hue(img: &Tensor, offset: f64) -> Tensor {
    per_pixel(img, |px| {
        let [h, s, v] = rgb_to_hsv(px);
        hsv_to_rgb([h + offset, s, v]).map(|c| c.clamp(0.0, 1.0))
    })
}

/// Random-resized crop, composed affine (rotation, translation, scale,
/// shear), horizontal and vertical flips, then colour jitter, producing a
/// `[3, S, S]` image in `[0, 1]`. Draws from `rng` in a fixed order, so the
/// output is a pure function of the image, config and generator state.
pub fn augment<R: Rng>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let [_, h, w] = dims3("augment", img)?;
    check_pixel_range("augment", img)?;
    cfg.validate()?;
    let size = cfg.output_size;

    let (hf, wf) = (h as f64, w as f64);
    let mut crop = (0.0, 0.0, hf, wf);
    let [alo, ahi] = cfg.crop_area_range;
    let [rlo, rhi] = cfg.crop_aspect_range;
    for _ in 0..10 {
        let area = uniform(rng, alo, ahi);
        let ratio = uniform(rng, rlo.ln(), rhi.ln()).exp();
        let (ch, cw) = (hf * (area / ratio).sqrt(), wf * (area * ratio).sqrt());
        if ch <= hf && cw <= wf {
            let top = uniform(rng, 0.0, hf - ch);
            let left = uniform(rng, 0.0, wf - cw);
            crop = (top, left, ch, cw);
            break;
        }
    }
    let mut x = resample_box(img, crop, size, size)?;

    let angle = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
    let tx = uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac) * size as f64;
    let ty = uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac) * size as f64;
    let scale = uniform(rng, cfg.scale_range[0], cfg.scale_range[1]);
    let shear = uniform(rng, -cfg.max_shear_deg, cfg.max_shear_deg).to_radians().tan();
    let (sin, cos) = angle.sin_cos();
    // rotation · x-shear · isotropic scale
    let a = [[cos * scale, (cos * shear - sin) * scale], [sin * scale, (sin * shear + cos) * scale]];
    if a != [[1.0, 0.0], [0.0, 1.0]] || tx != 0.0 || ty != 0.0 {
        x = warp_affine(&x, a, [tx, ty]);
    }

    if rng.random::<f64>() < cfg.hflip_p {
        x = flip(&x, true);
    }
    if rng.random::<f64>() < cfg.vflip_p {
        x = flip(&x, false);
    }

    let s = cfg.jitter_strength;
    let brightness = uniform(rng, 1.0 - s, 1.0 + s);
    let contrast = uniform(rng, 1.0 - s, 1.0 + s);
    let saturation = uniform(rng, 1.0 - s, 1.0 + s);
    let hue = uniform(rng, -s / 2.0, s / 2.0);
    if brightness != 1.0 {
        x = adjust_brightness(&x, brightness);
    }
    if contrast != 1.0 {
        x = adjust_contrast(&x, contrast);
    }
    if saturation != 1.0 {
        x = adjust_saturation(&x, saturation);
    }
    if hue != 0.0 {
        x = adjust_hue(&x, hue);
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}
