//! Procedurally rendered "coloured shapes on textured background" datasets
//! with exact masks, for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Sample};
use super::grid::LabelMap;
use super::image::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ShapesConfig {
    pub size: usize,
    /// Total class count including the background class 0.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f32,
    pub max_radius: f32,
    /// Half-width of the hue jitter around each class's hue centre, as a
    /// fraction of the colour wheel.
    pub hue_jitter: f32,
    /// Additive rotation of every class hue, used to render a shifted domain.
    pub hue_shift: f32,
    pub noise: f32,
    pub ignore_index: u16,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 3,
            min_shapes: 1,
            max_shapes: 4,
            min_radius: 6.0,
            max_radius: 14.0,
            hue_jitter: 0.12,
            hue_shift: 0.0,
            noise: 0.06,
            ignore_index: 255,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeKind {
    fn for_class(class: usize) -> Self {
        match (class - 1) % 6 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Ring,
            4 => ShapeKind::Cross,
            _ => ShapeKind::Diamond,
        }
    }

    /// Point-in-shape test in coordinates relative to the centre, after
    /// rotation by the shape's angle.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.5 * r && dx.abs() <= (dy + r) * 0.577,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
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

/// Renders sample `index` of the generator seeded with `seed`.
pub fn render_sample(cfg: &ShapesConfig, seed: u64, index: u64) -> (RgbImage, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = cfg.size;
    let mut image = RgbImage::zeros(s, s);
    let mut label = LabelMap::filled(s, s, 0);

    // Background: random low-saturation base colour with a smooth texture.
    let base = hsv_to_rgb(
        rng.random::<f32>(),
        rng.random_range(0.0..0.35),
        rng.random_range(0.25..0.8),
    );
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let t: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin())
                .sum();
            image.set_pixel(x, y, [base[0] + t, base[1] + t, base[2] + t]);
        }
    }

    if cfg.classes > 1 {
        let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        for _ in 0..n {
            let class = rng.random_range(1..cfg.classes);
            let kind = ShapeKind::for_class(class);
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let cx = rng.random_range(0.0..s as f32);
            let cy = rng.random_range(0.0..s as f32);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let hue_centre = (class - 1) as f32 / (cfg.classes - 1) as f32 + cfg.hue_shift;
            let hue = hue_centre + rng.random_range(-cfg.hue_jitter..=cfg.hue_jitter);
            let colour = hsv_to_rgb(hue, rng.random_range(0.5..1.0), rng.random_range(0.45..1.0));
            let (sin, cos) = angle.sin_cos();
            let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + r + 1.0).ceil() as usize).min(s);
            let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
            let y1 = ((cy + r + 1.0).ceil() as usize).min(s);
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = x as f32 + 0.5 - cx;
                    let py = y as f32 + 0.5 - cy;
                    let dx = cos * px + sin * py;
                    let dy = -sin * px + cos * py;
                    if kind.contains(dx, dy, r) {
                        image.set_pixel(x, y, colour);
                        label.set(x, y, class as u16);
                    }
                }
            }
        }
    }

    for v in image.data_mut() {
        *v = (*v + cfg.noise * (rng.random::<f32>() - 0.5) * 2.0).clamp(0.0, 1.0);
    }
    (image, label)
}

/// Generates `n` labeled samples with ids `<prefix><index>`.
pub fn generate(cfg: &ShapesConfig, n: usize, seed: u64, prefix: &str) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.min_shapes > cfg.max_shapes || cfg.min_radius > cfg.max_radius {
        return Err(Error::Config("invalid synthetic shapes configuration".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let (image, label) = render_sample(cfg, seed, i as u64);
            Sample {
                id: format!("{prefix}{i:05}"),
                image_path: None,
                label_path: None,
                image,
                label: Some(label),
            }
        })
        .collect();
    Dataset::new(cfg.classes, cfg.ignore_index, samples)
}
