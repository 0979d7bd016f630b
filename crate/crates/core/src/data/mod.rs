//! Images, file formats, normalization, tiling, augmentation and synthetic
//! data generation.

pub mod dihedral;
pub mod io;
pub mod normalize;
pub mod synth;
pub mod tiles;

pub use dihedral::Dihedral;
pub use io::{list_images, read_image, read_manifest, write_image};
pub use normalize::{fit_normalization, NormalizationRecord};
pub use synth::{generate_phantom, synth_noise, NoiseKind, PhantomSpec};
pub use tiles::{augment, make_tiles, Tile, TileBatch};

use crate::error::{Error, Result};

/// Bit depth of the file an image was read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SourceDepth {
    U8,
    U16,
    #[default]
    F32,
}

/// Single-channel floating-point raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub depth: SourceDepth,
    /// Links a noisy image to its ground truth.
    pub pair_id: Option<String>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dims must be >= 1, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} image",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
            depth: SourceDepth::F32,
            pair_id: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid constant image")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                v.push(f(y, x));
            }
        }
        Self::new(height, width, v)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }
    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let mut out = Self::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())?;
        out.depth = self.depth;
        out.pair_id.clone_from(&self.pair_id);
        Ok(out)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut v = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            v.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(h, w, v)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "image shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}
