use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Integer class-index map.
pub type LabelMap = Grid<u16>;

/// Per-pixel confidence values.
pub type ConfidenceMap = Grid<f32>;

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "grid of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Nearest-neighbour enlargement by an integer factor, cropped to the
    /// requested size.
    pub fn upsample_nearest(&self, factor: usize, width: usize, height: usize) -> Self {
        Grid::from_fn(width, height, |x, y| {
            let sx = (x / factor).min(self.width - 1);
            let sy = (y / factor).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Subsamples a label map by taking the top-left pixel of every
/// `factor`×`factor` block. Output dimensions are `ceil(dim / factor)`.
pub fn downsample_labels<T: Copy>(map: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be positive".into()));
    }
    let width = map.width.div_ceil(factor);
    let height = map.height.div_ceil(factor);
    Ok(Grid::from_fn(width, height, |x, y| map.get(x * factor, y * factor)))
}
