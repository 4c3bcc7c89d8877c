//! Hand-authored knowledge base: scenes made of object words, words described by
//! attribute predicates over region descriptors, and relation constraints that
//! check a naming against the image layout.
//!
//! # File format
//!
//! A TOML document:
//!
//! ```toml
//! author = "supervisor"
//! version = "1"
//!
//! [[prototype]]
//! word = "sky"
//! predicates = [
//!   { attribute = "mean_intensity", lo = 180, hi = 255 },
//!   { attribute = "centroid_y", lo = 0.0, hi = 0.5, weight = 2 },
//! ]
//!
//! [[scene]]
//! name = "landscape"
//! members = ["sky", "ground"]
//! constraints = [{ a = "sky", relation = "above", b = "ground" }]
//! ```
//!
//! Attributes: `mean_intensity`, `relative_size` (region size / image size),
//! `aspect_ratio` (bbox width / height), `elongation` (long / short bbox side),
//! `extent` (size / bbox area), `centroid_x` and `centroid_y` (normalized to
//! [0, 1]). Relations: `left-of`, `right-of`, `above`, `below`, `adjacent`,
//! `sub-part-of`. Weights default to 1 and must be positive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::describe::{relation_between, DescriptionStack, RegionDescriptor, Relation};
use crate::labels::Label;

/// Line and column (both 1-based) in a KB file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

impl Location {
    fn of(text: &str, offset: usize) -> Location {
        let offset = offset.min(text.len());
        let before = &text.as_bytes()[..offset];
        let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
        let line_start = before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        Location {
            line,
            column: offset - line_start + 1,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{at}: schema violation: {message}")]
    Schema { at: Location, message: String },
    #[error("{at}: scene {scene:?} refers to word {word:?}, which has no prototype")]
    DanglingWord {
        at: Location,
        scene: String,
        word: String,
    },
    #[error("{at}: scene {scene:?} constraint uses {word:?}, which is not a member")]
    NotAMember {
        at: Location,
        scene: String,
        word: String,
    },
    #[error("{at}: prototype {word:?} has no predicates")]
    EmptyPredicates { at: Location, word: String },
    #[error("{at}: prototype {word:?} predicate range lo {lo} > hi {hi}")]
    BadRange {
        at: Location,
        word: String,
        lo: f64,
        hi: f64,
    },
    #[error("{at}: prototype {word:?} predicate weight {weight} is not positive")]
    BadWeight { at: Location, word: String, weight: f64 },
    #[error("{at}: word {word:?} has more than one prototype")]
    DuplicateWord { at: Location, word: String },
}

impl KbError {
    pub fn location(&self) -> Option<Location> {
        match self {
            KbError::Read { .. } => None,
            KbError::Schema { at, .. }
            | KbError::DanglingWord { at, .. }
            | KbError::NotAMember { at, .. }
            | KbError::EmptyPredicates { at, .. }
            | KbError::BadRange { at, .. }
            | KbError::BadWeight { at, .. }
            | KbError::DuplicateWord { at, .. } => Some(*at),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    MeanIntensity,
    RelativeSize,
    AspectRatio,
    Elongation,
    Extent,
    CentroidX,
    CentroidY,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::MeanIntensity,
        Attribute::RelativeSize,
        Attribute::AspectRatio,
        Attribute::Elongation,
        Attribute::Extent,
        Attribute::CentroidX,
        Attribute::CentroidY,
    ];

    /// Value of this attribute for a region of an image of `image_dims`.
    pub fn of(self, desc: &RegionDescriptor, image_dims: (usize, usize)) -> f64 {
        let (w, h) = image_dims;
        let (bw, bh) = (desc.bbox.width() as f64, desc.bbox.height() as f64);
        let normalized = |c: f64, extent: usize| {
            if extent > 1 {
                c / (extent - 1) as f64
            } else {
                0.5
            }
        };
        match self {
            Attribute::MeanIntensity => desc.mean_intensity,
            Attribute::RelativeSize => desc.size as f64 / (w * h) as f64,
            Attribute::AspectRatio => bw / bh,
            Attribute::Elongation => bw.max(bh) / bw.min(bh),
            Attribute::Extent => desc.size as f64 / (bw * bh),
            Attribute::CentroidX => normalized(desc.centroid.0, w),
            Attribute::CentroidY => normalized(desc.centroid.1, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributePredicate {
    pub attribute: Attribute,
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

impl AttributePredicate {
    pub fn holds(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrototype {
    pub word: String,
    pub predicates: Vec<AttributePredicate>,
}

impl ObjectPrototype {
    /// Weighted fraction of satisfied predicates.
    pub fn score(&self, desc: &RegionDescriptor, image_dims: (usize, usize)) -> f64 {
        let total: f64 = self.predicates.iter().map(|p| p.weight).sum();
        let satisfied: f64 = self
            .predicates
            .iter()
            .filter(|p| p.holds(p.attribute.of(desc, image_dims)))
            .map(|p| p.weight)
            .sum();
        (satisfied / total).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Adjacent,
    SubPartOf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub a: String,
    pub relation: SceneRelation,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneNode {
    pub name: String,
    pub members: Vec<String>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    pub author: Option<String>,
    pub version: Option<String>,
    /// Keyed by word.
    pub prototypes: BTreeMap<String, ObjectPrototype>,
    pub scenes: Vec<SceneNode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKb {
    author: Option<String>,
    version: Option<String>,
    #[serde(default)]
    prototype: Vec<RawPrototype>,
    #[serde(default)]
    scene: Vec<RawScene>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrototype {
    word: Spanned<String>,
    predicates: Spanned<Vec<Spanned<RawPredicate>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredicate {
    attribute: Attribute,
    lo: f64,
    hi: f64,
    weight: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    name: String,
    members: Vec<Spanned<String>>,
    #[serde(default)]
    constraints: Vec<RawConstraint>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    a: Spanned<String>,
    relation: SceneRelation,
    b: Spanned<String>,
}

/// Parses and validates a KB document.
pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KbError> {
    let at = |span: Range<usize>| Location::of(text, span.start);
    let raw: RawKb = toml::from_str(text).map_err(|e| KbError::Schema {
        at: at(e.span().unwrap_or(0..0)),
        message: e.message().to_string(),
    })?;

    let mut prototypes = BTreeMap::new();
    for p in raw.prototype {
        let word = p.word.get_ref().clone();
        if prototypes.contains_key(&word) {
            return Err(KbError::DuplicateWord {
                at: at(p.word.span()),
                word,
            });
        }
        if p.predicates.get_ref().is_empty() {
            return Err(KbError::EmptyPredicates {
                at: at(p.predicates.span()),
                word,
            });
        }
        let mut predicates = Vec::new();
        for sp in p.predicates.into_inner() {
            let span = sp.span();
            let rp = sp.into_inner();
            if rp.lo.is_nan() || rp.hi.is_nan() || rp.lo > rp.hi {
                return Err(KbError::BadRange {
                    at: at(span),
                    word,
                    lo: rp.lo,
                    hi: rp.hi,
                });
            }
            let weight = match rp.weight {
                None => 1.0,
                Some(w) if *w.get_ref() > 0.0 && w.get_ref().is_finite() => *w.get_ref(),
                Some(w) => {
                    return Err(KbError::BadWeight {
                        at: at(w.span()),
                        word,
                        weight: *w.get_ref(),
                    })
                }
            };
            predicates.push(AttributePredicate {
                attribute: rp.attribute,
                lo: rp.lo,
                hi: rp.hi,
                weight,
            });
        }
        prototypes.insert(word.clone(), ObjectPrototype { word, predicates });
    }

    let mut scenes = Vec::new();
    for s in raw.scene {
        let mut members = Vec::new();
        for m in &s.members {
            if !prototypes.contains_key(m.get_ref()) {
                return Err(KbError::DanglingWord {
                    at: at(m.span()),
                    scene: s.name.clone(),
                    word: m.get_ref().clone(),
                });
            }
            if !members.contains(m.get_ref()) {
                members.push(m.get_ref().clone());
            }
        }
        let mut constraints = Vec::new();
        for c in &s.constraints {
            for w in [&c.a, &c.b] {
                if !members.contains(w.get_ref()) {
                    return Err(KbError::NotAMember {
                        at: at(w.span()),
                        scene: s.name.clone(),
                        word: w.get_ref().clone(),
                    });
                }
            }
            constraints.push(Constraint {
                a: c.a.get_ref().clone(),
                relation: c.relation,
                b: c.b.get_ref().clone(),
            });
        }
        scenes.push(SceneNode {
            name: s.name,
            members,
            constraints,
        });
    }
    Ok(KnowledgeBase {
        author: raw.author,
        version: raw.version,
        prototypes,
        scenes,
    })
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_kb(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub word: String,
    pub score: f64,
}

/// Thresholds for naming regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateConfig {
    /// Minimum similarity for a word to become a candidate.
    pub match_threshold: f64,
    /// Minimum context score for the winning assignment to be kept.
    pub context_threshold: f64,
    /// Largest number of assignments searched exhaustively per scene.
    pub search_budget: u64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            match_threshold: 0.5,
            context_threshold: 0.5,
            search_budget: 1_000_000,
        }
    }
}

impl AnnotateConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("match_threshold", self.match_threshold),
            ("context_threshold", self.context_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Scenes with at most this many members are searched exhaustively (within the
/// search budget); larger ones are assigned greedily.
pub const EXHAUSTIVE_MEMBER_LIMIT: usize = 6;

fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
}

/// Candidate words for one region, best first (ties by word).
pub fn match_region(
    desc: &RegionDescriptor,
    image_dims: (usize, usize),
    kb: &KnowledgeBase,
    match_threshold: f64,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = kb
        .prototypes
        .values()
        .map(|p| Candidate {
            word: p.word.clone(),
            score: p.score(desc, image_dims),
        })
        .filter(|c| c.score >= match_threshold)
        .collect();
    rank(&mut out);
    out
}

/// Final naming of one level-0 region.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: Label,
    pub candidates: Vec<Candidate>,
    pub word: Option<String>,
    pub scene: Option<String>,
    pub context_score: f64,
}

impl Annotation {
    /// Similarity of the chosen word, or of the best candidate when none was chosen.
    pub fn similarity(&self) -> f64 {
        let word = self.word.as_ref();
        self.candidates
            .iter()
            .find(|c| Some(&c.word) == word)
            .or(self.candidates.first())
            .map_or(0.0, |c| c.score)
    }
}

/// Candidates of every level-0 region that matched at least one word.
pub type RegionCandidates = Vec<(Label, Vec<Candidate>)>;

/// Checks whether `constraint` holds when its words name regions `a` and `b`.
pub fn constraint_holds(
    relation: SceneRelation,
    a: &RegionDescriptor,
    b: &RegionDescriptor,
    stack: &DescriptionStack,
) -> bool {
    let directional = |r: Relation| relation_between(a, b) == r;
    match relation {
        SceneRelation::LeftOf => directional(Relation::LeftOf),
        SceneRelation::RightOf => directional(Relation::RightOf),
        SceneRelation::Above => directional(Relation::Above),
        SceneRelation::Below => directional(Relation::Below),
        SceneRelation::Adjacent => a.adjacent.binary_search(&b.label).is_ok(),
        SceneRelation::SubPartOf => is_sub_part(a, b, stack),
    }
}

/// `a` is a sub-part of `b` when `b`'s label appears among `a`'s ancestors on
/// coarser levels, following parent links.
fn is_sub_part(a: &RegionDescriptor, b: &RegionDescriptor, stack: &DescriptionStack) -> bool {
    if a.label == b.label {
        return false;
    }
    let mut current = a.clone();
    while let Some(parent) = current.parent_label {
        let Some(next) = stack.level(current.level + 1).and_then(|l| l.region(parent)) else {
            return false;
        };
        if next.label == b.label {
            return true;
        }
        current = next.clone();
    }
    false
}

/// One scored assignment of scene members to regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneChoice {
    pub scene: usize,
    /// Region label per scene member, in member order.
    pub regions: Vec<Label>,
    pub mean_similarity: f64,
    pub context_score: f64,
}

impl SceneChoice {
    pub fn objective(&self) -> f64 {
        self.mean_similarity * self.context_score
    }
}

/// Regions eligible for each member of `scene`, best similarity first and
/// ties by label. `None` if some member has no eligible region.
pub fn eligible_regions(scene: &SceneNode, candidates: &RegionCandidates) -> Option<Vec<Vec<(Label, f64)>>> {
    scene
        .members
        .iter()
        .map(|word| {
            let mut regions: Vec<(Label, f64)> = candidates
                .iter()
                .filter_map(|(label, cands)| {
                    cands.iter().find(|c| &c.word == word).map(|c| (*label, c.score))
                })
                .collect();
            regions.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            (!regions.is_empty()).then_some(regions)
        })
        .collect()
}

/// Scores a complete assignment.
pub fn score_assignment(
    scene_index: usize,
    scene: &SceneNode,
    regions: &[(Label, f64)],
    level0: &BTreeMap<Label, &RegionDescriptor>,
    stack: &DescriptionStack,
) -> SceneChoice {
    let mean_similarity = regions.iter().map(|r| r.1).sum::<f64>() / regions.len() as f64;
    let context_score = if scene.constraints.is_empty() {
        1.0
    } else {
        let region_of = |word: &str| {
            let i = scene.members.iter().position(|m| m == word).expect("member");
            level0[&regions[i].0]
        };
        let satisfied = scene
            .constraints
            .iter()
            .filter(|c| constraint_holds(c.relation, region_of(&c.a), region_of(&c.b), stack))
            .count();
        satisfied as f64 / scene.constraints.len() as f64
    };
    SceneChoice {
        scene: scene_index,
        regions: regions.iter().map(|r| r.0).collect(),
        mean_similarity,
        context_score,
    }
}

struct Exhaustive<'a> {
    scene_index: usize,
    scene: &'a SceneNode,
    eligible: &'a [Vec<(Label, f64)>],
    level0: &'a BTreeMap<Label, &'a RegionDescriptor>,
    stack: &'a DescriptionStack,
    picked: Vec<(Label, f64)>,
    used: BTreeSet<Label>,
    best: Option<SceneChoice>,
}

impl Exhaustive<'_> {
    fn descend(&mut self, depth: usize) {
        if depth == self.eligible.len() {
            let choice = score_assignment(
                self.scene_index,
                self.scene,
                &self.picked,
                self.level0,
                self.stack,
            );
            if self
                .best
                .as_ref()
                .is_none_or(|b| choice.objective() > b.objective())
            {
                self.best = Some(choice);
            }
            return;
        }
        for &(label, score) in &self.eligible[depth] {
            if self.used.insert(label) {
                self.picked.push((label, score));
                self.descend(depth + 1);
                self.picked.pop();
                self.used.remove(&label);
            }
        }
    }
}

fn exhaustive(
    scene_index: usize,
    scene: &SceneNode,
    eligible: &[Vec<(Label, f64)>],
    level0: &BTreeMap<Label, &RegionDescriptor>,
    stack: &DescriptionStack,
) -> Option<SceneChoice> {
    let mut search = Exhaustive {
        scene_index,
        scene,
        eligible,
        level0,
        stack,
        picked: Vec::new(),
        used: BTreeSet::new(),
        best: None,
    };
    search.descend(0);
    search.best
}

fn greedy(
    scene_index: usize,
    scene: &SceneNode,
    eligible: &[Vec<(Label, f64)>],
    level0: &BTreeMap<Label, &RegionDescriptor>,
    stack: &DescriptionStack,
) -> Option<SceneChoice> {
    let mut options: Vec<(f64, usize, Label)> = eligible
        .iter()
        .enumerate()
        .flat_map(|(m, regions)| regions.iter().map(move |&(l, s)| (s, m, l)))
        .collect();
    options.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut picked: Vec<Option<(Label, f64)>> = vec![None; eligible.len()];
    let mut used = BTreeSet::new();
    for (score, member, label) in options {
        if picked[member].is_none() && !used.contains(&label) {
            picked[member] = Some((label, score));
            used.insert(label);
        }
    }
    let picked: Option<Vec<(Label, f64)>> = picked.into_iter().collect();
    picked.map(|p| score_assignment(scene_index, scene, &p, level0, stack))
}

/// Best assignment for one scene, or `None` when some member cannot be filled.
pub fn best_assignment(
    scene_index: usize,
    scene: &SceneNode,
    candidates: &RegionCandidates,
    stack: &DescriptionStack,
    search_budget: u64,
) -> Option<SceneChoice> {
    let level0: BTreeMap<Label, &RegionDescriptor> =
        stack.level(0)?.regions.iter().map(|r| (r.label, r)).collect();
    let eligible = eligible_regions(scene, candidates)?;
    let space = eligible
        .iter()
        .try_fold(1u64, |acc, e| acc.checked_mul(e.len() as u64));
    let small = scene.members.len() <= EXHAUSTIVE_MEMBER_LIMIT && space.is_some_and(|s| s <= search_budget);
    if small {
        exhaustive(scene_index, scene, &eligible, &level0, stack)
    } else {
        greedy(scene_index, scene, &eligible, &level0, stack)
    }
}

/// Picks the scene and member assignment with the highest mean similarity times
/// context score (ties: earlier scene, then earlier assignment in search order)
/// and names its regions when the context score reaches the threshold.
pub fn verify_context(
    candidates: &RegionCandidates,
    stack: &DescriptionStack,
    kb: &KnowledgeBase,
    cfg: &AnnotateConfig,
) -> Vec<Annotation> {
    let mut best: Option<SceneChoice> = None;
    for (i, scene) in kb.scenes.iter().enumerate() {
        if let Some(choice) = best_assignment(i, scene, candidates, stack, cfg.search_budget) {
            if best.as_ref().is_none_or(|b| choice.objective() > b.objective()) {
                best = Some(choice);
            }
        }
    }
    let winner = best.filter(|b| b.context_score >= cfg.context_threshold && b.objective() > 0.0);
    candidates
        .iter()
        .map(|(label, cands)| {
            let mut ann = Annotation {
                label: *label,
                candidates: cands.clone(),
                word: None,
                scene: None,
                context_score: 0.0,
            };
            if let Some(w) = &winner {
                if let Some(m) = w.regions.iter().position(|l| l == label) {
                    let scene = &kb.scenes[w.scene];
                    ann.word = Some(scene.members[m].clone());
                    ann.scene = Some(scene.name.clone());
                    ann.context_score = w.context_score;
                }
            }
            ann
        })
        .collect()
}

/// Candidates for every level-0 region of `stack` that matches at least one word.
pub fn match_level0(stack: &DescriptionStack, kb: &KnowledgeBase, match_threshold: f64) -> RegionCandidates {
    let Some(level0) = stack.level(0) else {
        return Vec::new();
    };
    let dims = (level0.width, level0.height);
    level0
        .regions
        .iter()
        .map(|r| (r.label, match_region(r, dims, kb, match_threshold)))
        .filter(|(_, c)| !c.is_empty())
        .collect()
}

/// Names level-0 regions: similarity matching, then context verification.
pub fn annotate(stack: &DescriptionStack, kb: &KnowledgeBase, cfg: &AnnotateConfig) -> Vec<Annotation> {
    let candidates = match_level0(stack, kb, cfg.match_threshold);
    verify_context(&candidates, stack, kb, cfg)
}

/// Tab-separated report, one line per region with candidates.
pub fn format_report(annotations: &[Annotation]) -> String {
    let mut out = String::from("region\tword\tsimilarity\tscene\tcontext\n");
    for a in annotations {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\t{:.6}\n",
            a.label,
            a.word.as_deref().unwrap_or("-"),
            a.similarity(),
            a.scene.as_deref().unwrap_or("-"),
            a.context_score
        ));
    }
    out
}
