use serde::{Deserialize, Serialize};

use crate::data::{Grid, RgbImage};

/// Everything needed to replay a geometric transform on any map with the
/// shape of the original input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomRecord {
    pub flipped: bool,
    pub scale: f64,
    /// Offset of the output window inside the resized image, `(y, x)`.
    /// Negative values pad before the resized content.
    pub crop_offset: (i64, i64),
    /// Source dimensions `(height, width)`.
    pub input_size: (usize, usize),
    /// Output dimensions `(height, width)`.
    pub output_size: (usize, usize),
    /// ClassMix paste mask in input coordinates, when mixing was applied.
    pub mix_mask: Option<Grid<bool>>,
}

impl GeomRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flipped: false,
            scale: 1.0,
            crop_offset: (0, 0),
            input_size: (height, width),
            output_size: (height, width),
            mix_mask: None,
        }
    }

    pub fn resized_size(&self) -> (usize, usize) {
        resized_dims(self.input_size, self.scale)
    }

    pub fn is_identity(&self) -> bool {
        !self.flipped
            && self.resized_size() == self.input_size
            && self.crop_offset == (0, 0)
            && self.output_size == self.input_size
    }

    /// Nearest-neighbour replay; pixels outside the resized content get `fill`.
    pub fn warp_grid<T: Copy>(&self, src: &Grid<T>, fill: T) -> Grid<T> {
        debug_assert_eq!(src.dims(), self.input_size);
        let (h, w) = self.input_size;
        let (rh, rw) = self.resized_size();
        let (oh, ow) = self.output_size;
        let (oy, ox) = self.crop_offset;
        Grid::from_fn(ow, oh, |x, y| {
            let ry = y as i64 + oy;
            let rx = x as i64 + ox;
            if ry < 0 || rx < 0 || ry >= rh as i64 || rx >= rw as i64 {
                return fill;
            }
            let sy = nearest(ry as usize, h, rh);
            let mut sx = nearest(rx as usize, w, rw);
            if self.flipped {
                sx = w - 1 - sx;
            }
            src.get(sx, sy)
        })
    }

    /// Bilinear replay for images; padding is filled with zeros.
    pub fn warp_image(&self, src: &RgbImage) -> RgbImage {
        debug_assert_eq!(src.dims(), self.input_size);
        let (h, w) = self.input_size;
        let (rh, rw) = self.resized_size();
        let (oh, ow) = self.output_size;
        let (oy, ox) = self.crop_offset;
        if self.is_identity() {
            return src.clone();
        }
        let sy_scale = h as f64 / rh as f64;
        let sx_scale = w as f64 / rw as f64;
        let mut out = RgbImage::zeros(ow, oh);
        for y in 0..oh {
            let ry = y as i64 + oy;
            if ry < 0 || ry >= rh as i64 {
                continue;
            }
            let fy = ((ry as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..ow {
                let rx = x as i64 + ox;
                if rx < 0 || rx >= rw as i64 {
                    continue;
                }
                let mut fx = ((rx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
                if self.flipped {
                    fx = (w - 1) as f64 - fx;
                }
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = (fx - x0 as f64) as f32;
                let p00 = src.pixel(x0, y0);
                let p01 = src.pixel(x1, y0);
                let p10 = src.pixel(x0, y1);
                let p11 = src.pixel(x1, y1);
                let mut v = [0.0f32; 3];
                for c in 0..3 {
                    let top = p00[c] + (p01[c] - p00[c]) * tx;
                    let bot = p10[c] + (p11[c] - p10[c]) * tx;
                    v[c] = top + (bot - top) * ty;
                }
                out.set_pixel(x, y, v);
            }
        }
        out
    }

    /// Replays the mix (if any) and then the geometry. `partner` must be the
    /// map that was pasted from when the record was produced.
    pub fn replay<T: Copy>(&self, map: &Grid<T>, partner: Option<&Grid<T>>, fill: T) -> Grid<T> {
        match (&self.mix_mask, partner) {
            (Some(mask), Some(p)) => self.warp_grid(&paste(mask, p, map), fill),
            _ => self.warp_grid(map, fill),
        }
    }
}

pub(crate) fn resized_dims((h, w): (usize, usize), scale: f64) -> (usize, usize) {
    let rh = ((h as f64 * scale).round() as usize).max(1);
    let rw = ((w as f64 * scale).round() as usize).max(1);
    (rh, rw)
}

#[inline]
fn nearest(dst: usize, src_len: usize, dst_len: usize) -> usize {
    if src_len == dst_len {
        return dst;
    }
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
}

/// `src` where `mask` is set, `dst` elsewhere.
pub fn paste<T: Copy>(mask: &Grid<bool>, src: &Grid<T>, dst: &Grid<T>) -> Grid<T> {
    debug_assert_eq!(mask.dims(), dst.dims());
    Grid::from_fn(dst.width(), dst.height(), |x, y| {
        if mask.get(x, y) {
            src.get(x, y)
        } else {
            dst.get(x, y)
        }
    })
}

pub fn paste_image(mask: &Grid<bool>, src: &RgbImage, dst: &RgbImage) -> RgbImage {
    let mut out = dst.clone();
    for y in 0..dst.height() {
        for x in 0..dst.width() {
            if mask.get(x, y) {
                out.set_pixel(x, y, src.pixel(x, y));
            }
        }
    }
    out
}
