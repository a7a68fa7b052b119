use serde::{Deserialize, Serialize};

use crate::data::RgbImage;

/// Signed colour-jitter strengths; zero everywhere is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue adjustments, in that order,
/// each applied as a blend factor `1 + strength` (hue as a rotation).
pub fn color_jitter(image: &RgbImage, j: &ColorJitter) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width(), image.height());
    if j.brightness != 0.0 {
        let f = 1.0 + j.brightness;
        for v in out.data_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    if j.contrast != 0.0 {
        let f = 1.0 + j.contrast;
        let n = (w * h) as f32;
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += luma(out.pixel(x, y));
            }
        }
        mean /= n;
        for v in out.data_mut() {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
    if j.saturation != 0.0 || j.hue != 0.0 {
        let f = 1.0 + j.saturation;
        for y in 0..h {
            for x in 0..w {
                let mut p = out.pixel(x, y);
                if j.saturation != 0.0 {
                    let g = luma(p);
                    for c in &mut p {
                        *c = ((*c - g) * f + g).clamp(0.0, 1.0);
                    }
                }
                if j.hue != 0.0 {
                    let mut hsv = rgb_to_hsv(p);
                    hsv[0] += j.hue;
                    p = hsv_to_rgb(hsv);
                }
                out.set_pixel(x, y, p);
            }
        }
    }
    out
}

/// Odd kernel size covering `ceil(4 * sigma)` taps.
pub fn blur_kernel_size(sigma: f32) -> usize {
    let k = (4.0 * sigma).ceil().max(1.0) as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &RgbImage, sigma: f32) -> RgbImage {
    let k = blur_kernel_size(sigma);
    let r = (k / 2) as isize;
    let mut weights: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let (w, h) = (image.width() as isize, image.height() as isize);
    let mut out = image.clone();
    let mut tmp = vec![0.0f32; (w * h) as usize];
    for c in 0..3 {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, wt) in weights.iter().enumerate() {
                    let sx = (x + i as isize - r).clamp(0, w - 1);
                    acc += wt * src[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, wt) in weights.iter().enumerate() {
                    let sy = (y + i as isize - r).clamp(0, h - 1);
                    acc += wt * tmp[(sy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}
