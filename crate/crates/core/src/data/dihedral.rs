//! The eight symmetries of the square acting on images.

use super::Image2D;

/// Optional transpose followed by optional row and column flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_rows: bool,
    pub flip_cols: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self::new(false, false, false);

    pub const fn new(transpose: bool, flip_rows: bool, flip_cols: bool) -> Self {
        Self {
            transpose,
            flip_rows,
            flip_cols,
        }
    }

    /// All eight group elements.
    pub const ALL: [Self; 8] = [
        Self::new(false, false, false),
        Self::new(false, false, true),
        Self::new(false, true, false),
        Self::new(false, true, true),
        Self::new(true, false, false),
        Self::new(true, false, true),
        Self::new(true, true, false),
        Self::new(true, true, true),
    ];

    /// Identity, horizontal flip, vertical flip and 180 degree rotation.
    pub const NON_TRANSPOSING: [Self; 4] = [
        Self::new(false, false, false),
        Self::new(false, false, true),
        Self::new(false, true, false),
        Self::new(false, true, true),
    ];

    pub fn group(allow_transpose: bool) -> &'static [Self] {
        if allow_transpose {
            &Self::ALL
        } else {
            &Self::NON_TRANSPOSING
        }
    }

    pub fn inverse(self) -> Self {
        if self.transpose {
            // T then flips(r, c) is undone by flips(c, r) then T
            Self::new(true, self.flip_cols, self.flip_rows)
        } else {
            self
        }
    }

    /// Output dims for an `h x w` input.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.transpose {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Applies the transform to a row-major `h x w` buffer.
    pub fn apply_slice<T: Copy>(self, h: usize, w: usize, src: &[T]) -> Vec<T> {
        assert_eq!(src.len(), h * w);
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            let iy = if self.flip_rows { oh - 1 - y } else { y };
            for x in 0..ow {
                let ix = if self.flip_cols { ow - 1 - x } else { x };
                let (sy, sx) = if self.transpose { (ix, iy) } else { (iy, ix) };
                out.push(src[sy * w + sx]);
            }
        }
        out
    }

    pub fn apply(self, img: &Image2D) -> Image2D {
        let (oh, ow) = self.output_dims(img.height(), img.width());
        let mut out = Image2D::new(oh, ow, self.apply_slice(img.height(), img.width(), img.values()))
            .expect("permutation of a valid image");
        out.depth = img.depth;
        out.pair_id.clone_from(&img.pair_id);
        out
    }
}
