//! Bottom-up 4-to-1 averaging pyramid.
//!
//! Level `L + 1` has dimensions `ceil(w / 2) x ceil(h / 2)` of level `L`. A pixel
//! at level `L` stands for the level-0 rectangle
//! `[x * 2^L, min((x + 1) * 2^L, w0)) x [y * 2^L, min((y + 1) * 2^L, h0))`
//! and its value is the mean of that footprint. With even dimensions this is the
//! plain mean of the four children; on odd edges the existing children are
//! weighted by how many level-0 pixels they stand for, which keeps the
//! area-weighted mean identical on every level.

use crate::fixed::Mass;
use crate::raster::GrayImage;

pub const DEFAULT_TOP_TARGET: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
    masses: Vec<Vec<Mass>>,
    top_target: usize,
}

impl Pyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> Option<&GrayImage> {
        self.levels.get(index)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn top_index(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn top(&self) -> &GrayImage {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0]
    }

    pub fn top_target(&self) -> usize {
        self.top_target
    }

    /// Exact per-pixel footprint sums of a level.
    pub fn masses(&self, level: usize) -> &[Mass] {
        &self.masses[level]
    }

    /// Exact area-weighted sum of a level: the sum over its pixels of
    /// value times footprint size.
    pub fn level_mass(&self, level: usize) -> Mass {
        self.masses[level].iter().copied().sum()
    }

    /// Number of level-0 pixels represented by pixel `(x, y)` of `level`.
    pub fn footprint(&self, level: usize, x: usize, y: usize) -> u64 {
        let (w0, h0) = self.levels[0].dims();
        footprint_extent(x, level, w0) * footprint_extent(y, level, h0)
    }
}

fn footprint_extent(coord: usize, level: usize, base: usize) -> u64 {
    let start = coord << level;
    let end = ((coord + 1) << level).min(base);
    (end - start) as u64
}

/// Dimensions of every level the builder produces for a `width x height` input.
pub fn level_dims(width: usize, height: usize, top_target: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    let (mut w, mut h) = (width, height);
    while w * h > top_target {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        dims.push((w, h));
    }
    dims
}

/// Builds the pyramid, stopping at the first level with at most `top_target`
/// pixels. Panics if `top_target` is zero.
pub fn build_pyramid(img: &GrayImage, top_target: usize) -> Pyramid {
    assert!(top_target >= 1, "top_target must be at least 1");
    let mut levels = vec![img.clone()];
    let mut masses = vec![img.data().iter().map(|&v| Mass::of(v)).collect::<Vec<_>>()];
    let mut counts = vec![1u64; img.len()];
    while levels.last().unwrap().len() > top_target {
        let fine = levels.last().unwrap();
        let fine_mass = masses.last().unwrap();
        let (fw, fh) = fine.dims();
        let (cw, ch) = (fw.div_ceil(2), fh.div_ceil(2));
        let mut data = Vec::with_capacity(cw * ch);
        let mut mass = Vec::with_capacity(cw * ch);
        let mut coarse_counts = Vec::with_capacity(cw * ch);
        for cy in 0..ch {
            for cx in 0..cw {
                let mut m = Mass::ZERO;
                let mut n = 0u64;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for y in 2 * cy..(2 * cy + 2).min(fh) {
                    for x in 2 * cx..(2 * cx + 2).min(fw) {
                        let i = y * fw + x;
                        m += fine_mass[i];
                        n += counts[i];
                        let v = fine.data()[i];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                // the clamp only absorbs last-ulp rounding of the division
                data.push(m.mean(n).clamp(lo, hi));
                mass.push(m);
                coarse_counts.push(n);
            }
        }
        levels.push(GrayImage::from_raw_unchecked(cw, ch, data));
        masses.push(mass);
        counts = coarse_counts;
    }
    Pyramid {
        levels,
        masses,
        top_target,
    }
}
