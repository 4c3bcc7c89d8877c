//! Segmentation of the pyramid top: a 1-D intensity sweep followed by
//! 4-connected component labelling.

use std::collections::VecDeque;

use crate::fixed::Mass;
use crate::labels::{neighbors4, Label, LabelMap};
use crate::raster::GrayImage;

/// Pixel count and exact intensity sum of one region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegionStat {
    pub count: u64,
    pub sum: Mass,
}

impl RegionStat {
    pub fn mean(&self) -> f64 {
        self.sum.mean(self.count)
    }

    pub fn add(&mut self, value: f64) {
        self.count += 1;
        self.sum += Mass::of(value);
    }

    pub fn remove(&mut self, value: f64) {
        debug_assert!(self.count > 0);
        self.count -= 1;
        self.sum -= Mass::of(value);
    }
}

/// Statistics for every label below a bound; labels that lost all their pixels
/// keep a zero-count entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionStats {
    stats: Vec<RegionStat>,
}

impl RegionStats {
    /// Recomputes from scratch. Panics if dimensions disagree.
    pub fn compute(labels: &LabelMap, img: &GrayImage) -> Self {
        Self::compute_with_bound(labels, img, 0)
    }

    /// Like [`RegionStats::compute`], but reserves every label below `bound` even
    /// if it no longer has pixels, so freshly minted labels never reuse one.
    pub fn compute_with_bound(labels: &LabelMap, img: &GrayImage, bound: Label) -> Self {
        assert_eq!(labels.dims(), img.dims(), "label map and image dimensions differ");
        let n = labels.label_bound().max(bound) as usize;
        let mut stats = vec![RegionStat::default(); n];
        for (&l, &v) in labels.labels().iter().zip(img.data()) {
            stats[l as usize].add(v);
        }
        RegionStats { stats }
    }

    pub fn get(&self, label: Label) -> Option<&RegionStat> {
        self.stats.get(label as usize)
    }

    pub fn mean(&self, label: Label) -> f64 {
        self.stats[label as usize].mean()
    }

    pub fn count(&self, label: Label) -> u64 {
        self.stats.get(label as usize).map_or(0, |s| s.count)
    }

    /// Labels with at least one pixel, ascending.
    pub fn live_labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.stats
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count > 0)
            .map(|(l, _)| l as Label)
    }

    pub fn live_count(&self) -> usize {
        self.live_labels().count()
    }

    /// One past the highest label ever allocated.
    pub fn bound(&self) -> Label {
        self.stats.len() as Label
    }

    /// Allocates a fresh, empty label.
    pub(crate) fn mint(&mut self) -> Label {
        self.stats.push(RegionStat::default());
        (self.stats.len() - 1) as Label
    }

    pub(crate) fn move_pixel(&mut self, from: Label, to: Label, value: f64) {
        self.stats[from as usize].remove(value);
        self.stats[to as usize].add(value);
    }

    /// Equal when every live region agrees; trailing empty slots are ignored.
    pub fn same_regions(&self, other: &RegionStats) -> bool {
        let n = self.stats.len().max(other.stats.len());
        (0..n).all(|i| {
            let a = self.stats.get(i).copied().unwrap_or_default();
            let b = other.stats.get(i).copied().unwrap_or_default();
            a == b
        })
    }
}

/// Groups sorted distinct values: a new group starts whenever a value is more
/// than `tol` away from the running mean of the distinct values already in the
/// current group. Returns one group index per input value, in ascending-value
/// group order.
pub(crate) fn sweep_groups(values: &[f64], tol: f64) -> Vec<u32> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut group_of = Vec::with_capacity(distinct.len());
    let mut group = 0u32;
    let (mut sum, mut n) = (0.0f64, 0u32);
    for &v in &distinct {
        if n > 0 && (v - sum / n as f64).abs() > tol {
            group += 1;
            sum = 0.0;
            n = 0;
        }
        sum += v;
        n += 1;
        group_of.push(group);
    }
    values
        .iter()
        .map(|v| {
            let i = distinct
                .binary_search_by(|d| d.total_cmp(v))
                .expect("value present");
            group_of[i]
        })
        .collect()
}

/// Clusters the intensity axis and returns a per-pixel cluster map.
/// Panics unless `tol > 0`.
pub fn cluster_intensities(img: &GrayImage, tol: f64) -> LabelMap {
    assert!(tol > 0.0, "tolerance must be positive");
    LabelMap::from_raw(img.width(), img.height(), sweep_groups(img.data(), tol))
}

/// Labels 4-connected components of equal values, densely in raster order of
/// first occurrence.
pub fn connected_components(map: &LabelMap) -> LabelMap {
    let (w, h) = map.dims();
    let src = map.labels();
    let mut out = vec![Label::MAX; src.len()];
    let mut next: Label = 0;
    let mut queue = VecDeque::new();
    for start in 0..src.len() {
        if out[start] != Label::MAX {
            continue;
        }
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for n in neighbors4(i, w, h) {
                if out[n] == Label::MAX && src[n] == src[start] {
                    out[n] = next;
                    queue.push_back(n);
                }
            }
        }
        next += 1;
    }
    LabelMap::from_raw(w, h, out)
}

/// Segments the coarsest level.
pub fn segment_top(img: &GrayImage, tol: f64) -> (LabelMap, RegionStats) {
    let labels = connected_components(&cluster_intensities(img, tol));
    let stats = RegionStats::compute(&labels, img);
    (labels, stats)
}
