//! Random (overlapping) tile extraction and dihedral augmentation.

use rand::Rng;

use super::{Dihedral, Image2D};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
    pub transform: Dihedral,
    pub image: Image2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileBatch {
    pub tiles: Vec<Tile>,
}

/// Draws `count` square tiles with origins uniform over all valid positions.
pub fn make_tiles(image: &Image2D, tile: usize, count: usize, rng: &mut impl Rng) -> Result<TileBatch> {
    if tile == 0 || image.height() < tile || image.width() < tile {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than tile size {tile}",
            image.height(),
            image.width()
        )));
    }
    let tiles = (0..count)
        .map(|_| {
            let y = rng.random_range(0..=image.height() - tile);
            let x = rng.random_range(0..=image.width() - tile);
            Ok(Tile {
                origin: (y, x),
                transform: Dihedral::IDENTITY,
                image: image.crop(y, x, tile, tile)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TileBatch { tiles })
}

/// Applies a uniformly drawn symmetry: one of 8 with `allow_transpose`, one
/// of the 4 axis-preserving ones otherwise.
pub fn augment(tile: &Image2D, rng: &mut impl Rng, allow_transpose: bool) -> (Image2D, Dihedral) {
    let group = Dihedral::group(allow_transpose);
    let g = group[rng.random_range(0..group.len())];
    (g.apply(tile), g)
}
