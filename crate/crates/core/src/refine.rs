//! Top-down refinement: expand labels 1-to-4, find pixels that deviate from
//! their region on the current level image, and repair them.
//!
//! A sweep walks the deviant pixels in raster order against live region means.
//! A pixel still deviating is handed to the 4-neighbor region with the nearest
//! mean if that mean is within `tol`; otherwise it becomes a seed. Border pixels
//! that fit a neighboring region strictly better than their own move too. Seeds are
//! grouped into 4-connected runs of tol-close intensities and minted as new
//! regions. Regions that lost connectivity are split, and adjacent regions that
//! fit together within `tol` are merged. Sweeps repeat until nothing deviates or
//! `max_sweeps` is spent.

use std::collections::VecDeque;

use thiserror::Error;

use crate::fixed::Mass;
use crate::labels::{neighbors4, Label, LabelMap};
use crate::pyramid::{build_pyramid, Pyramid, DEFAULT_TOP_TARGET};
use crate::raster::GrayImage;
use crate::segment::{segment_top, sweep_groups, RegionStats};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("cannot expand a {coarse_w}x{coarse_h} map to {fine_w}x{fine_h}")]
    DimensionMismatch {
        coarse_w: usize,
        coarse_h: usize,
        fine_w: usize,
        fine_h: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    /// Largest intensity distance from a region mean that still counts as
    /// belonging to the region.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Seed groups smaller than this stay with their old region.
    pub min_seed_size: usize,
    /// Also move non-deviant border pixels to a neighboring region whose mean is
    /// strictly closer than their own.
    pub relax_borders: bool,
    /// Merge adjacent regions whose union keeps every pixel within `tol` of the
    /// union mean.
    pub merge_adjacent: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            tol: 10.0,
            max_sweeps: 10,
            min_seed_size: 1,
            relax_borders: true,
            merge_adjacent: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(RefineError::InvalidConfig(format!(
                "tol must be a positive number, got {}",
                self.tol
            )));
        }
        if self.max_sweeps == 0 {
            return Err(RefineError::InvalidConfig("max_sweeps must be at least 1".into()));
        }
        if self.min_seed_size == 0 {
            return Err(RefineError::InvalidConfig(
                "min_seed_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegmentConfig {
    pub top_target: usize,
    #[serde(flatten)]
    pub refine: RefineConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            top_target: DEFAULT_TOP_TARGET,
            refine: RefineConfig::default(),
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.top_target == 0 {
            return Err(RefineError::InvalidConfig("top_target must be at least 1".into()));
        }
        self.refine.validate()
    }
}

/// Final state of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub labels: LabelMap,
    pub stats: RegionStats,
    /// No pixel deviates from its region mean by more than `tol`.
    pub converged: bool,
    /// Deviant count before the first sweep and after each sweep.
    pub deviant_count_history: Vec<usize>,
}

impl LevelResult {
    pub fn region_count(&self) -> usize {
        self.stats.live_count()
    }
}

/// Replicates each coarse label into its 2x2 block of the finer level.
pub fn expand_labels(coarse: &LabelMap, fine_dims: (usize, usize)) -> Result<LabelMap, RefineError> {
    let (cw, ch) = coarse.dims();
    let (fw, fh) = fine_dims;
    if fw == 0 || fh == 0 || fw.div_ceil(2) != cw || fh.div_ceil(2) != ch {
        return Err(RefineError::DimensionMismatch {
            coarse_w: cw,
            coarse_h: ch,
            fine_w: fw,
            fine_h: fh,
        });
    }
    let mut out = Vec::with_capacity(fw * fh);
    for y in 0..fh {
        let row = &coarse.labels()[(y / 2) * cw..(y / 2 + 1) * cw];
        out.extend((0..fw).map(|x| row[x / 2]));
    }
    Ok(LabelMap::from_raw(fw, fh, out))
}

/// Majority label of each 2x2 block (ties go to the lower label).
pub fn downsample_majority(fine: &LabelMap) -> LabelMap {
    let (fw, fh) = fine.dims();
    let (cw, ch) = (fw.div_ceil(2), fh.div_ceil(2));
    let mut out = Vec::with_capacity(cw * ch);
    for cy in 0..ch {
        for cx in 0..cw {
            let mut block: Vec<Label> = Vec::with_capacity(4);
            for y in 2 * cy..(2 * cy + 2).min(fh) {
                for x in 2 * cx..(2 * cx + 2).min(fw) {
                    block.push(fine.get(x, y));
                }
            }
            block.sort_unstable();
            let mut best = (0usize, block[0]);
            let mut i = 0;
            while i < block.len() {
                let run = block[i..].iter().take_while(|&&l| l == block[i]).count();
                if run > best.0 {
                    best = (run, block[i]);
                }
                i += run;
            }
            out.push(best.1);
        }
    }
    LabelMap::from_raw(cw, ch, out)
}

fn is_deviant(value: f64, mean: f64, tol: f64) -> bool {
    (value - mean).abs() > tol
}

fn deviant_indices(labels: &LabelMap, stats: &RegionStats, reference: &GrayImage, tol: f64) -> Vec<usize> {
    labels
        .labels()
        .iter()
        .zip(reference.data())
        .enumerate()
        .filter(|(_, (&l, &v))| is_deviant(v, stats.mean(l), tol))
        .map(|(i, _)| i)
        .collect()
}

/// Pixels whose intensity differs from their region mean by more than `tol`,
/// as `(x, y)` in raster order. Panics if dimensions disagree.
pub fn detect_deviants(
    labels: &LabelMap,
    stats: &RegionStats,
    reference: &GrayImage,
    tol: f64,
) -> Vec<(usize, usize)> {
    assert_eq!(
        labels.dims(),
        reference.dims(),
        "label map and image dimensions differ"
    );
    let w = labels.width();
    deviant_indices(labels, stats, reference, tol)
        .into_iter()
        .map(|i| (i % w, i / w))
        .collect()
}

/// Runs the refinement cycle on one level.
pub fn refine_level(
    labels: &LabelMap,
    stats: &RegionStats,
    reference: &GrayImage,
    cfg: &RefineConfig,
) -> LevelResult {
    refine_level_observed(labels, stats, reference, cfg, |_, _| {})
}

/// [`refine_level`] that calls `observe` with the labels and stats after every sweep.
pub fn refine_level_observed(
    labels: &LabelMap,
    stats: &RegionStats,
    reference: &GrayImage,
    cfg: &RefineConfig,
    mut observe: impl FnMut(&LabelMap, &RegionStats),
) -> LevelResult {
    assert_eq!(
        labels.dims(),
        reference.dims(),
        "label map and image dimensions differ"
    );
    let mut state = Refinement {
        labels: labels.clone(),
        stats: stats.clone(),
        reference,
        cfg,
    };
    let mut history = vec![deviant_indices(&state.labels, &state.stats, reference, cfg.tol).len()];
    let mut sweeps = 0;
    while *history.last().unwrap() > 0 && sweeps < cfg.max_sweeps {
        sweeps += 1;
        state.sweep();
        observe(&state.labels, &state.stats);
        history.push(deviant_indices(&state.labels, &state.stats, reference, cfg.tol).len());
    }
    LevelResult {
        level: 0,
        converged: *history.last().unwrap() == 0,
        labels: state.labels,
        stats: state.stats,
        deviant_count_history: history,
    }
}

struct Refinement<'a> {
    labels: LabelMap,
    stats: RegionStats,
    reference: &'a GrayImage,
    cfg: &'a RefineConfig,
}

impl Refinement<'_> {
    fn sweep(&mut self) {
        let seeds = self.reassign();
        self.mint_seeds(&seeds);
        self.split_disconnected();
        if self.cfg.merge_adjacent {
            self.merge_similar();
        }
    }

    fn relabel(&mut self, i: usize, to: Label) {
        let from = self.labels.labels()[i];
        if from != to {
            self.stats.move_pixel(from, to, self.reference.data()[i]);
            self.labels.labels_mut()[i] = to;
        }
    }

    /// Hands deviants to the nearest neighboring region and returns the ones
    /// nobody can take (the seeds). With `relax_borders`, border pixels that fit
    /// a neighbor strictly better than their own region move as well.
    fn reassign(&mut self) -> Vec<usize> {
        let tol = self.cfg.tol;
        let (w, h) = self.labels.dims();
        let mut seeds = Vec::new();
        let deviants = deviant_indices(&self.labels, &self.stats, self.reference, tol);
        let mut next_deviant = deviants.iter().peekable();
        for i in 0..w * h {
            let was_deviant = next_deviant.next_if_eq(&&i).is_some();
            if !was_deviant && !self.cfg.relax_borders {
                continue;
            }
            let own = self.labels.labels()[i];
            let v = self.reference.data()[i];
            let own_distance = (v - self.stats.mean(own)).abs();
            let mut best: Option<(f64, Label)> = None;
            for n in neighbors4(i, w, h) {
                let l = self.labels.labels()[n];
                if l == own {
                    continue;
                }
                let d = (v - self.stats.mean(l)).abs();
                let better = match best {
                    None => true,
                    Some((bd, bl)) => d < bd || (d == bd && l < bl),
                };
                if better {
                    best = Some((d, l));
                }
            }
            if own_distance > tol {
                match best {
                    Some((d, l)) if d <= tol => self.relabel(i, l),
                    _ if was_deviant => seeds.push(i),
                    _ => {}
                }
            } else if let Some((d, l)) = best {
                if self.cfg.relax_borders && d < own_distance {
                    self.relabel(i, l);
                }
            }
        }
        seeds
    }

    fn mint_seeds(&mut self, seeds: &[usize]) {
        if seeds.is_empty() {
            return;
        }
        let (w, h) = self.labels.dims();
        let data = self.reference.data();
        // 0 = not a seed, otherwise 1 + intensity group within its component
        let mut group = vec![0u32; w * h];
        for &i in seeds {
            group[i] = 1;
        }
        let mut visited = vec![false; w * h];
        let mut queue = VecDeque::new();
        for &start in seeds {
            if visited[start] {
                continue;
            }
            let mut component = vec![start];
            visited[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for n in neighbors4(i, w, h) {
                    if group[n] != 0 && !visited[n] {
                        visited[n] = true;
                        component.push(n);
                        queue.push_back(n);
                    }
                }
            }
            let values: Vec<f64> = component.iter().map(|&i| data[i]).collect();
            for (&i, g) in component.iter().zip(sweep_groups(&values, self.cfg.tol)) {
                group[i] = g + 1;
            }
        }
        // connected runs of one group become new regions
        let mut done = vec![false; w * h];
        for &start in seeds {
            if done[start] {
                continue;
            }
            let g = group[start];
            let mut members = vec![start];
            done[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for n in neighbors4(i, w, h) {
                    if group[n] == g && !done[n] {
                        done[n] = true;
                        members.push(n);
                        queue.push_back(n);
                    }
                }
            }
            if members.len() >= self.cfg.min_seed_size {
                let fresh = self.stats.mint();
                for i in members {
                    self.relabel(i, fresh);
                }
            }
        }
    }

    /// Keeps each label on its largest component (ties: the one reached first in
    /// raster order) and mints fresh labels for the other components.
    fn split_disconnected(&mut self) {
        let (w, h) = self.labels.dims();
        let n = w * h;
        let mut comp = vec![u32::MAX; n];
        // (label, size, pixels) per component in raster discovery order
        let mut comps: Vec<(Label, usize, usize)> = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if comp[start] != u32::MAX {
                continue;
            }
            let id = comps.len() as u32;
            let label = self.labels.labels()[start];
            comp[start] = id;
            queue.push_back(start);
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                for nb in neighbors4(i, w, h) {
                    if comp[nb] == u32::MAX && self.labels.labels()[nb] == label {
                        comp[nb] = id;
                        queue.push_back(nb);
                    }
                }
            }
            comps.push((label, size, start));
        }
        if comps.len() == self.stats.live_count() {
            return;
        }
        let mut keeper: Vec<Option<usize>> = vec![None; self.stats.bound() as usize];
        for (id, &(label, size, _)) in comps.iter().enumerate() {
            let slot = &mut keeper[label as usize];
            match *slot {
                Some(k) if comps[k].1 >= size => {}
                _ => *slot = Some(id),
            }
        }
        let mut target: Vec<Label> = Vec::with_capacity(comps.len());
        for (id, &(label, _, _)) in comps.iter().enumerate() {
            if keeper[label as usize] == Some(id) {
                target.push(label);
            } else {
                target.push(self.stats.mint());
            }
        }
        for i in 0..n {
            let t = target[comp[i] as usize];
            self.relabel(i, t);
        }
    }

    /// Merges adjacent regions, closest means first, whenever the union keeps
    /// every pixel within `tol` of its mean. The lower label survives.
    fn merge_similar(&mut self) {
        let tol = self.cfg.tol;
        let (w, h) = self.labels.dims();
        let labels = self.labels.labels();
        let data = self.reference.data();
        let bound = self.stats.bound() as usize;
        let mut lo = vec![f64::INFINITY; bound];
        let mut hi = vec![f64::NEG_INFINITY; bound];
        let mut pairs = Vec::new();
        for i in 0..w * h {
            let l = labels[i] as usize;
            lo[l] = lo[l].min(data[i]);
            hi[l] = hi[l].max(data[i]);
            let x = i % w;
            let mut consider = |j: usize| {
                let m = labels[j];
                if m != labels[i] {
                    pairs.push((labels[i].min(m), labels[i].max(m)));
                }
            };
            if x + 1 < w {
                consider(i + 1);
            }
            if i + w < w * h {
                consider(i + w);
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut candidates: Vec<(f64, Label, Label)> = pairs
            .into_iter()
            .map(|(a, b)| ((self.stats.mean(a) - self.stats.mean(b)).abs(), a, b))
            .filter(|&(d, _, _)| d <= tol)
            .collect();
        if candidates.is_empty() {
            return;
        }
        candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut parent: Vec<Label> = (0..bound as Label).collect();
        let mut count: Vec<u64> = (0..bound as Label).map(|l| self.stats.count(l)).collect();
        let mut sum: Vec<Mass> = (0..bound as Label)
            .map(|l| self.stats.get(l).map_or(Mass::ZERO, |s| s.sum))
            .collect();
        fn find(parent: &mut [Label], mut l: Label) -> Label {
            while parent[l as usize] != l {
                let p = parent[l as usize];
                parent[l as usize] = parent[p as usize];
                l = p;
            }
            l
        }
        let mut merged_any = false;
        for (_, a, b) in candidates {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                continue;
            }
            let (ia, ib) = (ra as usize, rb as usize);
            let n = count[ia] + count[ib];
            let s = sum[ia] + sum[ib];
            let mean = s.mean(n);
            let (mn, mx) = (lo[ia].min(lo[ib]), hi[ia].max(hi[ib]));
            if is_deviant(mn, mean, tol) || is_deviant(mx, mean, tol) {
                continue;
            }
            let (keep, gone) = if ra < rb { (ia, ib) } else { (ib, ia) };
            parent[gone] = keep as Label;
            count[keep] = n;
            sum[keep] = s;
            lo[keep] = mn;
            hi[keep] = mx;
            merged_any = true;
        }
        if !merged_any {
            return;
        }
        for i in 0..w * h {
            let l = self.labels.labels()[i];
            let root = find(&mut parent, l);
            self.relabel(i, root);
        }
    }
}

/// Segments an image top-down. Results are ordered from the pyramid top to level 0.
pub fn segment_image(img: &GrayImage, cfg: &SegmentConfig) -> Result<Vec<LevelResult>, RefineError> {
    cfg.validate()?;
    let pyramid = build_pyramid(img, cfg.top_target);
    segment_pyramid(&pyramid, &cfg.refine)
}

/// Segments an already built pyramid. The top is segmented directly and then
/// refined like every lower level.
pub fn segment_pyramid(pyramid: &Pyramid, cfg: &RefineConfig) -> Result<Vec<LevelResult>, RefineError> {
    cfg.validate()?;
    let top = pyramid.top_index();
    let (labels, stats) = segment_top(pyramid.top(), cfg.tol);
    let mut result = refine_level(&labels, &stats, pyramid.top(), cfg);
    result.level = top;
    let mut results = vec![result];
    for level in (0..top).rev() {
        let reference = &pyramid.levels()[level];
        let coarse = results.last().unwrap();
        let labels = expand_labels(&coarse.labels, reference.dims())?;
        let stats = RegionStats::compute_with_bound(&labels, reference, coarse.stats.bound());
        let mut result = refine_level(&labels, &stats, reference, cfg);
        result.level = level;
        results.push(result);
    }
    Ok(results)
}
