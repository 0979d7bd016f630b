//! Grid masking for blind-spot training.
//!
//! A random lattice of pixels is replaced by a weighted mean of their
//! neighbours (never the pixel itself), and the loss is evaluated only at
//! those pixels. Replacement values are always computed from the original,
//! unmasked image.

use rand::Rng;

use crate::data::Image2D;
use crate::error::{Error, Result};

/// Direction along which the noise is correlated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationAxis {
    /// Neighbours within a row, `(y, x +- k)`.
    Horizontal,
    /// Neighbours within a column, `(y +- k, x)`.
    Vertical,
}

impl CorrelationAxis {
    fn step(self) -> (isize, isize) {
        match self {
            CorrelationAxis::Horizontal => (0, 1),
            CorrelationAxis::Vertical => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplacementMode {
    /// 8-neighbourhood weighted by `exp(-d^2 / 2)`.
    Gaussian8,
    /// Plain mean of the 8 neighbours.
    Uniform8,
    /// Gaussian weights without the two neighbours along `axis`; the `extent`
    /// pixels on each side along the axis are masked as well.
    Axial { axis: CorrelationAxis, extent: usize },
}

impl ReplacementMode {
    pub fn axial(axis: CorrelationAxis) -> Self {
        ReplacementMode::Axial { axis, extent: 3 }
    }
}

/// Grid positions and the resulting loss mask for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub height: usize,
    pub width: usize,
    pub spacing: (usize, usize),
    pub phase: (usize, usize),
    pub mode: ReplacementMode,
    /// Lattice points `(phase.0 + i * spacing.0, phase.1 + j * spacing.1)`.
    pub positions: Vec<(usize, usize)>,
}

impl MaskPlan {
    /// Plan with an explicit lattice.
    pub fn lattice(
        height: usize,
        width: usize,
        spacing: (usize, usize),
        phase: (usize, usize),
        mode: ReplacementMode,
    ) -> Result<Self> {
        if spacing.0 == 0 || spacing.1 == 0 || phase.0 >= spacing.0 || phase.1 >= spacing.1 {
            return Err(Error::Config(format!("invalid grid spacing {spacing:?} / phase {phase:?}")));
        }
        let mut positions = Vec::new();
        for y in (phase.0..height).step_by(spacing.0) {
            for x in (phase.1..width).step_by(spacing.1) {
                positions.push((y, x));
            }
        }
        Ok(Self {
            height,
            width,
            spacing,
            phase,
            mode,
            positions,
        })
    }

    /// Plan that masks nothing.
    pub fn empty(height: usize, width: usize, mode: ReplacementMode) -> Self {
        Self {
            height,
            width,
            spacing: (height.max(1), width.max(1)),
            phase: (0, 0),
            mode,
            positions: Vec::new(),
        }
    }

    /// Every pixel that gets replaced: the lattice plus, in axial mode, the
    /// `extent` pixels on either side along the axis. Sorted, no duplicates.
    pub fn masked_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = self.positions.clone();
        if let ReplacementMode::Axial { axis, extent } = self.mode {
            let (dy, dx) = axis.step();
            for &(y, x) in &self.positions {
                for k in 1..=extent as isize {
                    for s in [-k, k] {
                        let (ny, nx) = (y as isize + s * dy, x as isize + s * dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                            out.push((ny as usize, nx as usize));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Binary loss mask (row-major, 1 at masked pixels).
    pub fn loss_mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.height * self.width];
        for (y, x) in self.masked_pixels() {
            m[y * self.width + x] = 1;
        }
        m
    }

    /// Fraction of the image covered by the loss mask.
    pub fn masked_fraction(&self) -> f64 {
        self.masked_pixels().len() as f64 / (self.height * self.width) as f64
    }
}

/// Draws per-axis spacings uniformly in `spacing_min..=spacing_max` and
/// phases uniformly in `[0, spacing)`.
pub fn sample_grid(
    height: usize,
    width: usize,
    spacing_min: usize,
    spacing_max: usize,
    mode: ReplacementMode,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    if spacing_min == 0 || spacing_min > spacing_max {
        return Err(Error::Config(format!("invalid spacing range {spacing_min}..={spacing_max}")));
    }
    if height < spacing_max || width < spacing_max {
        return Err(Error::Shape(format!(
            "image {height}x{width} smaller than maximum spacing {spacing_max}"
        )));
    }
    let sy = rng.random_range(spacing_min..=spacing_max);
    let sx = rng.random_range(spacing_min..=spacing_max);
    let py = rng.random_range(0..sy);
    let px = rng.random_range(0..sx);
    MaskPlan::lattice(height, width, (sy, sx), (py, px), mode)
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Weight of neighbour offset `(dy, dx)` under `mode` (0 when excluded).
pub fn neighbour_weight(mode: ReplacementMode, dy: isize, dx: isize) -> f64 {
    let d2 = (dy * dy + dx * dx) as f64;
    match mode {
        ReplacementMode::Uniform8 => 1.0,
        ReplacementMode::Gaussian8 => (-d2 / 2.0).exp(),
        ReplacementMode::Axial { axis, .. } => {
            let (ay, ax) = axis.step();
            if (dy, dx) == (ay, ax) || (dy, dx) == (-ay, -ax) {
                0.0
            } else {
                (-d2 / 2.0).exp()
            }
        }
    }
}

/// Neighbour-based replacement value for `pos`, weights renormalized over
/// the in-bounds neighbours. The pixel's own value never contributes.
pub fn replacement_value(image: &Image2D, pos: (usize, usize), mode: ReplacementMode) -> Result<f32> {
    let (h, w) = image.dims();
    let (y, x) = pos;
    if y >= h || x >= w {
        return Err(Error::Shape(format!("position {pos:?} outside {h}x{w} image")));
    }
    let mut acc = 0.0f64;
    let mut wsum = 0.0f64;
    for (dy, dx) in NEIGHBOURS {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
            continue;
        }
        let wt = neighbour_weight(mode, dy, dx);
        if wt > 0.0 {
            acc += wt * image.get(ny as usize, nx as usize) as f64;
            wsum += wt;
        }
    }
    if wsum == 0.0 {
        return Err(Error::Shape(format!("pixel {pos:?} has no available neighbours")));
    }
    Ok((acc / wsum) as f32)
}

/// Masked copy of `image` and its loss mask.
pub fn apply_mask(image: &Image2D, plan: &MaskPlan) -> Result<(Image2D, Vec<u8>)> {
    if image.dims() != (plan.height, plan.width) {
        return Err(Error::Shape(format!(
            "plan for {}x{} applied to {:?}",
            plan.height,
            plan.width,
            image.dims()
        )));
    }
    let mut masked = image.clone();
    let mut mask = vec![0u8; image.len()];
    for (y, x) in plan.masked_pixels() {
        masked.set(y, x, replacement_value(image, (y, x), plan.mode)?);
        mask[y * image.width() + x] = 1;
    }
    Ok((masked, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_img(h: usize, w: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap()
    }

    #[test]
    fn lattice_count_on_96() {
        let p = MaskPlan::lattice(96, 96, (3, 3), (0, 0), ReplacementMode::Gaussian8).unwrap();
        assert_eq!(p.positions.len(), 1024);
    }

    #[test]
    fn grid_positions_in_bounds_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = sample_grid(37, 41, 3, 5, ReplacementMode::Gaussian8, &mut rng).unwrap();
            assert!((3..=5).contains(&p.spacing.0) && (3..=5).contains(&p.spacing.1));
            assert!(p.positions.iter().all(|&(y, x)| y < 37 && x < 41));
            assert!(p
                .positions
                .iter()
                .all(|&(y, x)| (y - p.phase.0) % p.spacing.0 == 0 && (x - p.phase.1) % p.spacing.1 == 0));
        }
        let a = sample_grid(64, 64, 3, 5, ReplacementMode::Gaussian8, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_grid(64, 64, 3, 5, ReplacementMode::Gaussian8, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(sample_grid(4, 64, 3, 5, ReplacementMode::Gaussian8, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn gaussian_weight_ratio() {
        let r = neighbour_weight(ReplacementMode::Gaussian8, 1, 1) / neighbour_weight(ReplacementMode::Gaussian8, 0, 1);
        assert!((r - (-0.5f64).exp()).abs() < 1e-15);
        assert!((r - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn constant_image_replacement_is_constant() {
        let img = Image2D::filled(10, 10, 42.5);
        for mode in [
            ReplacementMode::Gaussian8,
            ReplacementMode::Uniform8,
            ReplacementMode::axial(CorrelationAxis::Horizontal),
        ] {
            for pos in [(0, 0), (5, 5), (9, 0), (0, 4)] {
                assert!((replacement_value(&img, pos, mode).unwrap() - 42.5).abs() < 1e-5);
            }
        }
        let one = Image2D::filled(1, 1, 1.0);
        assert!(replacement_value(&one, (0, 0), ReplacementMode::Gaussian8).is_err());
    }

    #[test]
    fn replacement_ignores_center() {
        let mut img = noise_img(9, 9, 1);
        let a = replacement_value(&img, (4, 4), ReplacementMode::Gaussian8).unwrap();
        img.set(4, 4, 1e6);
        assert_eq!(a, replacement_value(&img, (4, 4), ReplacementMode::Gaussian8).unwrap());
    }

    #[test]
    fn axial_replacement_ignores_axis_neighbours() {
        let img = noise_img(9, 9, 2);
        let mode = ReplacementMode::axial(CorrelationAxis::Horizontal);
        let base = replacement_value(&img, (4, 4), mode).unwrap();
        for (y, x) in [(4, 3), (4, 5), (4, 4)] {
            let mut p = img.clone();
            p.set(y, x, -1e4);
            assert_eq!(base, replacement_value(&p, (4, 4), mode).unwrap());
        }
        let mut p = img.clone();
        p.set(3, 4, -1e4);
        assert_ne!(base, replacement_value(&p, (4, 4), mode).unwrap());
    }

    #[test]
    fn empty_and_single_plans() {
        let img = noise_img(12, 12, 3);
        let (m, mask) = apply_mask(&img, &MaskPlan::empty(12, 12, ReplacementMode::Gaussian8)).unwrap();
        assert_eq!(m, img);
        assert!(mask.iter().all(|&v| v == 0));
        let plan = MaskPlan::lattice(12, 12, (12, 12), (5, 7), ReplacementMode::Gaussian8).unwrap();
        let (m, mask) = apply_mask(&img, &plan).unwrap();
        let diffs = m.values().iter().zip(img.values()).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);
        assert_eq!(mask.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(mask[5 * 12 + 7], 1);
    }

    #[test]
    fn masked_image_independent_of_masked_originals() {
        let img = noise_img(32, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [
            ReplacementMode::Gaussian8,
            ReplacementMode::Uniform8,
            ReplacementMode::axial(CorrelationAxis::Vertical),
        ] {
            let plan = sample_grid(32, 32, 3, 5, mode, &mut rng).unwrap();
            let (base, _) = apply_mask(&img, &plan).unwrap();
            for &(y, x) in plan.positions.iter().step_by(3) {
                let mut p = img.clone();
                p.set(y, x, p.get(y, x) + 1234.5);
                let (m, _) = apply_mask(&p, &plan).unwrap();
                assert_eq!(m, base, "{mode:?} at {y},{x}");
            }
        }
    }

    #[test]
    fn axial_extension_in_loss_mask() {
        let plan = MaskPlan::lattice(16, 16, (16, 16), (8, 8), ReplacementMode::axial(CorrelationAxis::Horizontal)).unwrap();
        let px = plan.masked_pixels();
        assert_eq!(px, (5..=11).map(|x| (8, x)).collect::<Vec<_>>());
        let mask = plan.loss_mask();
        assert_eq!(mask.iter().map(|&v| v as usize).sum::<usize>(), 7);
    }

    #[test]
    fn masked_fraction_matches_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1000;
        let mean = (0..n)
            .map(|_| sample_grid(256, 256, 3, 5, ReplacementMode::Gaussian8, &mut rng).unwrap().masked_fraction())
            .sum::<f64>()
            / n as f64;
        let expect = ((1.0 / 3.0 + 0.25 + 0.2) / 3.0f64).powi(2);
        assert!((expect - 0.0682).abs() < 1e-4);
        assert!((mean - 0.068).abs() < 0.003, "{mean}");
    }
}
