//! Stacked level descriptions: the appearance list of every region at every
//! pyramid level, and reconstruction of a level from it.
//!
//! The stack serializes to pretty-printed JSON with a fixed key order:
//!
//! ```text
//! {
//!   "format": "strata-description-stack/1",
//!   "source_width": 256, "source_height": 256,
//!   "config": { "top_target": 100, "tol": 10.0, ... },
//!   "levels": [                      // top level first
//!     { "level": 5, "width": 8, "height": 8, "converged": true,
//!       "regions": [
//!         { "level": 5, "label": 0, "size": 40, "centroid": [3.1, 4.0],
//!           "mean_intensity": 50.0,
//!           "bbox": { "min_x": 0, "min_y": 0, "max_x": 7, "max_y": 7 },
//!           "parent_label": null, "adjacent": [1],
//!           "relative_position": { "1": "left-of" } } ] } ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Label, LabelMap};
use crate::pyramid::Pyramid;
use crate::raster::GrayImage;
use crate::refine::{LevelResult, SegmentConfig};

pub const STACK_FORMAT: &str = "strata-description-stack/1";

#[derive(Debug, Error)]
pub enum StackError {
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("level {0} is not in the stack")]
    MissingLevel(usize),
    #[error("label {label} has no descriptor at level {level}")]
    UnknownLabel { level: usize, label: Label },
    #[error("stack file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid stack: {0}")]
    Invalid(String),
}

/// Qualitative position of one region relative to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> usize {
        self.max_y - self.min_y + 1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.min_x as f64..=self.max_x as f64).contains(&x)
            && (self.min_y as f64..=self.max_y as f64).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub level: usize,
    pub label: Label,
    pub size: u64,
    /// Mean pixel position `(x, y)`; pixel centers sit on integer coordinates.
    pub centroid: (f64, f64),
    pub mean_intensity: f64,
    pub bbox: BBox,
    /// Label one level up covering most of this region's pixels.
    pub parent_label: Option<Label>,
    /// Labels sharing a 4-connected border, ascending.
    pub adjacent: Vec<Label>,
    /// This region's position relative to each adjacent label.
    pub relative_position: BTreeMap<Label, Relation>,
}

/// Position of a region with centroid `a` relative to one with centroid `b`:
/// the axis with the larger centroid gap decides, horizontal on ties, and
/// coincident centroids fall back to label order.
pub fn relation_between(a: &RegionDescriptor, b: &RegionDescriptor) -> Relation {
    let dx = b.centroid.0 - a.centroid.0;
    let dy = b.centroid.1 - a.centroid.1;
    if dx.abs() >= dy.abs() {
        if dx > 0.0 || (dx == 0.0 && a.label < b.label) {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy > 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDescription {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub converged: bool,
    pub regions: Vec<RegionDescriptor>,
}

impl LevelDescription {
    pub fn region(&self, label: Label) -> Option<&RegionDescriptor> {
        self.regions
            .binary_search_by_key(&label, |r| r.label)
            .ok()
            .map(|i| &self.regions[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionStack {
    pub format: String,
    pub source_width: usize,
    pub source_height: usize,
    pub config: SegmentConfig,
    /// Top level first.
    pub levels: Vec<LevelDescription>,
}

impl DescriptionStack {
    pub fn level(&self, level: usize) -> Option<&LevelDescription> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stack serializes");
        s.push('\n');
        s
    }

    /// Parses a stack file and checks its structural invariants.
    pub fn from_json(text: &str) -> Result<DescriptionStack, StackError> {
        let stack: DescriptionStack = serde_json::from_str(text)?;
        if stack.format != STACK_FORMAT {
            return Err(StackError::Invalid(format!(
                "unknown format {:?}, expected {STACK_FORMAT:?}",
                stack.format
            )));
        }
        let violations = stack.violations();
        if let Some(first) = violations.first() {
            return Err(StackError::Invalid(first.clone()));
        }
        Ok(stack)
    }

    /// Every broken invariant, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.levels.is_empty() {
            out.push("no levels".to_string());
            return out;
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            if pair[0].level != pair[1].level + 1 {
                out.push(format!("level order broken at position {}", i + 1));
            }
        }
        if self.levels.last().map(|l| l.level) != Some(0) {
            out.push("finest level is not level 0".to_string());
        }
        for (pos, lvl) in self.levels.iter().enumerate() {
            let pixels = lvl.width as u128 * lvl.height as u128;
            let total: u128 = lvl.regions.iter().map(|r| r.size as u128).sum();
            if total != pixels {
                out.push(format!(
                    "level {}: region sizes sum to {total}, level has {pixels} pixels",
                    lvl.level
                ));
            }
            if lvl.regions.windows(2).any(|w| w[0].label >= w[1].label) {
                out.push(format!("level {}: regions not sorted by label", lvl.level));
            }
            let coarser = pos.checked_sub(1).map(|p| &self.levels[p]);
            for r in &lvl.regions {
                let here = format!("level {} label {}", lvl.level, r.label);
                if r.level != lvl.level {
                    out.push(format!("{here}: descriptor claims level {}", r.level));
                }
                if r.size == 0 {
                    out.push(format!("{here}: empty region"));
                }
                if r.bbox.min_x > r.bbox.max_x
                    || r.bbox.min_y > r.bbox.max_y
                    || r.bbox.max_x >= lvl.width
                    || r.bbox.max_y >= lvl.height
                {
                    out.push(format!("{here}: bbox outside the level"));
                } else if !r.bbox.contains(r.centroid.0, r.centroid.1) {
                    out.push(format!("{here}: centroid outside bbox"));
                }
                match (coarser, r.parent_label) {
                    (None, Some(_)) => out.push(format!("{here}: top region has a parent")),
                    (Some(_), None) => out.push(format!("{here}: missing parent")),
                    (Some(c), Some(p)) if c.region(p).is_none() => {
                        out.push(format!("{here}: parent {p} does not exist"))
                    }
                    _ => {}
                }
                let adjacent: BTreeSet<Label> = r.adjacent.iter().copied().collect();
                let related: BTreeSet<Label> = r.relative_position.keys().copied().collect();
                if adjacent != related || adjacent.len() != r.adjacent.len() {
                    out.push(format!("{here}: adjacency and relative positions disagree"));
                }
                for (&other, &rel) in &r.relative_position {
                    match lvl.region(other) {
                        None => out.push(format!("{here}: adjacent label {other} does not exist")),
                        Some(o) => {
                            if o.relative_position.get(&r.label) != Some(&rel.inverse()) {
                                out.push(format!("{here}: relation to {other} is not mirrored"));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

struct Accum {
    size: u64,
    sum_x: u64,
    sum_y: u64,
    bbox: BBox,
}

fn describe_level(
    result: &LevelResult,
    coarser: Option<&LabelMap>,
) -> Result<Vec<RegionDescriptor>, StackError> {
    let labels = &result.labels;
    let (w, h) = labels.dims();
    let mut acc: BTreeMap<Label, Accum> = BTreeMap::new();
    let mut adjacency: BTreeSet<(Label, Label)> = BTreeSet::new();
    let mut overlap: HashMap<(Label, Label), u64> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y);
            let a = acc.entry(l).or_insert(Accum {
                size: 0,
                sum_x: 0,
                sum_y: 0,
                bbox: BBox {
                    min_x: x,
                    min_y: y,
                    max_x: x,
                    max_y: y,
                },
            });
            a.size += 1;
            a.sum_x += x as u64;
            a.sum_y += y as u64;
            a.bbox.min_x = a.bbox.min_x.min(x);
            a.bbox.min_y = a.bbox.min_y.min(y);
            a.bbox.max_x = a.bbox.max_x.max(x);
            a.bbox.max_y = a.bbox.max_y.max(y);
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h {
                    let m = labels.get(nx, ny);
                    if m != l {
                        adjacency.insert((l, m));
                        adjacency.insert((m, l));
                    }
                }
            }
            if let Some(c) = coarser {
                *overlap.entry((l, c.get(x / 2, y / 2))).or_default() += 1;
            }
        }
    }
    let mut parents: BTreeMap<Label, (u64, Label)> = BTreeMap::new();
    for (&(l, p), &n) in &overlap {
        let best = parents.entry(l).or_insert((n, p));
        if n > best.0 || (n == best.0 && p < best.1) {
            *best = (n, p);
        }
    }
    let mut regions: Vec<RegionDescriptor> = Vec::with_capacity(acc.len());
    for (&label, a) in &acc {
        let stat = result
            .stats
            .get(label)
            .filter(|s| s.count == a.size)
            .ok_or_else(|| {
                StackError::Inconsistent(format!(
                    "level {}: stats disagree with the label map for label {label}",
                    result.level
                ))
            })?;
        regions.push(RegionDescriptor {
            level: result.level,
            label,
            size: a.size,
            centroid: (a.sum_x as f64 / a.size as f64, a.sum_y as f64 / a.size as f64),
            mean_intensity: stat.mean(),
            bbox: a.bbox,
            parent_label: parents.get(&label).map(|&(_, p)| p),
            adjacent: Vec::new(),
            relative_position: BTreeMap::new(),
        });
    }
    let index: HashMap<Label, usize> = regions.iter().enumerate().map(|(i, r)| (r.label, i)).collect();
    for &(a, b) in &adjacency {
        let rel = relation_between(&regions[index[&a]], &regions[index[&b]]);
        let ra = &mut regions[index[&a]];
        ra.adjacent.push(b);
        ra.relative_position.insert(b, rel);
    }
    Ok(regions)
}

/// Registers every region of every level. `results` must come from segmenting
/// `pyramid`, top level first.
pub fn register_regions(
    results: &[LevelResult],
    pyramid: &Pyramid,
    config: &SegmentConfig,
) -> Result<DescriptionStack, StackError> {
    if results.len() != pyramid.len() {
        return Err(StackError::Inconsistent(format!(
            "{} level results for a {}-level pyramid",
            results.len(),
            pyramid.len()
        )));
    }
    let mut levels = Vec::with_capacity(results.len());
    for (pos, result) in results.iter().enumerate() {
        let expected = pyramid.top_index() - pos;
        if result.level != expected {
            return Err(StackError::Inconsistent(format!(
                "result {pos} is level {}, expected {expected}",
                result.level
            )));
        }
        let dims = pyramid.levels()[expected].dims();
        if result.labels.dims() != dims {
            return Err(StackError::Inconsistent(format!(
                "level {expected}: label map {:?} but image {:?}",
                result.labels.dims(),
                dims
            )));
        }
        let coarser = pos.checked_sub(1).map(|p| &results[p].labels);
        levels.push(LevelDescription {
            level: expected,
            width: dims.0,
            height: dims.1,
            converged: result.converged,
            regions: describe_level(result, coarser)?,
        });
    }
    Ok(DescriptionStack {
        format: STACK_FORMAT.to_string(),
        source_width: pyramid.base().width(),
        source_height: pyramid.base().height(),
        config: *config,
        levels,
    })
}

/// Paints every pixel of `level` with its region's mean intensity.
/// `labels` is that level's label map.
pub fn reconstruct(
    stack: &DescriptionStack,
    level: usize,
    labels: &LabelMap,
) -> Result<GrayImage, StackError> {
    let desc = stack.level(level).ok_or(StackError::MissingLevel(level))?;
    if labels.dims() != (desc.width, desc.height) {
        return Err(StackError::Inconsistent(format!(
            "label map is {:?}, level {level} is {}x{}",
            labels.dims(),
            desc.width,
            desc.height
        )));
    }
    let means: HashMap<Label, f64> = desc.regions.iter().map(|r| (r.label, r.mean_intensity)).collect();
    let data = labels
        .labels()
        .iter()
        .map(|l| {
            means
                .get(l)
                .copied()
                .ok_or(StackError::UnknownLabel { level, label: *l })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    GrayImage::new(desc.width, desc.height, data).map_err(|e| StackError::Invalid(e.to_string()))
}
