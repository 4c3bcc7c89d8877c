//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strata::{synth_scene, GrayImage, LabelMap, RectSpec};

pub struct Scene {
    pub image: GrayImage,
    pub truth: LabelMap,
    pub rects: Vec<RectSpec>,
    pub background: f64,
}

/// Up to five rectangles on a `size x size` canvas. All intensities (background
/// included) are pairwise more than `2 * tol` apart; noise stays below `tol / 2`.
pub fn random_scene(size: usize, tol: f64, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=5);
    // k + 1 integer levels at least `step` apart: spread random slack over sorted gaps
    let step = (2.0 * tol).floor() as i64 + 1;
    let slack = 255 - k as i64 * step;
    assert!(slack >= 0, "tol {tol} leaves no room for {k} rectangles");
    let mut offsets: Vec<i64> = (0..=k).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();
    let mut levels: Vec<f64> = offsets
        .iter()
        .enumerate()
        .map(|(i, o)| (o + i as i64 * step) as f64)
        .collect();
    levels.shuffle(&mut rng);
    let min_side = size / 16;
    let rects: Vec<RectSpec> = (0..k)
        .map(|i| {
            let w = rng.random_range(min_side..=size / 2);
            let h = rng.random_range(min_side..=size / 2);
            let x = rng.random_range(0..=size - w);
            let y = rng.random_range(0..=size - h);
            RectSpec::new(x, y, w, h, levels[i + 1])
        })
        .collect();
    let noise = ((tol / 2.0).ceil() as u32).saturating_sub(1);
    let (image, truth) = synth_scene(size, size, &rects, levels[0], noise, seed).unwrap();
    Scene {
        image,
        truth,
        rects,
        background: levels[0],
    }
}

/// Fraction of pixels whose predicted region maps, by maximum overlap, onto the
/// true region.
pub fn pixel_accuracy(pred: &LabelMap, truth: &LabelMap) -> f64 {
    use std::collections::HashMap;
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        *overlap.entry((p, t)).or_default() += 1;
    }
    let mut best: HashMap<u32, usize> = HashMap::new();
    for (&(p, _), &n) in &overlap {
        let b = best.entry(p).or_default();
        *b = (*b).max(n);
    }
    best.values().sum::<usize>() as f64 / pred.len() as f64
}
