//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use strata::describe::{BBox, LevelDescription, STACK_FORMAT};
use strata::kb::{
    annotate, format_report, match_region, verify_context, AnnotateConfig, Attribute, AttributePredicate,
    Candidate, Constraint, KnowledgeBase, ObjectPrototype, RegionCandidates, SceneNode, SceneRelation,
};
use strata::labels::Label;
use strata::pyramid::level_dims;
use strata::refine::{downsample_majority, refine_level_observed};
use strata::{
    build_pyramid, connected_components, expand_labels, load_kb, reconstruct, register_regions,
    segment_image, segment_pyramid, synth_scene, DescriptionStack, GrayImage, LabelMap, LevelResult, Pyramid,
    RectSpec, RefineConfig, RegionDescriptor, RegionStats, Relation, SegmentConfig,
};

use common::{pixel_accuracy, random_scene, Scene};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("pyramid conservation", pyramid_conservation),
        ("top-size rule", top_size_rule),
        ("label-map invariants", label_map_invariants),
        ("convergence certificate", convergence_certificate),
        ("reconstruction bound", reconstruction_bound),
        ("segmentation oracle", segmentation_oracle),
        ("newly emerging region", newly_emerging_region),
        ("expansion law", expansion_law),
        ("descriptor invariants", descriptor_invariants),
        ("kb optimality", kb_optimality),
        ("end-to-end annotation", end_to_end_annotation),
        ("cli determinism", cli_determinism),
    ];
    // optional filter: criterion numbers or name fragments
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |i: usize, name: &str| {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| *f == (i + 1).to_string() || name.contains(f.as_str()))
    };
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected(i, name) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared helpers

/// Segments `img` and returns the pyramid, per-level results (top first) and stack.
fn pipeline(img: &GrayImage, cfg: &SegmentConfig) -> (Pyramid, Vec<LevelResult>, DescriptionStack) {
    let pyramid = build_pyramid(img, cfg.top_target);
    let results = segment_pyramid(&pyramid, &cfg.refine).expect("valid config");
    let stack = register_regions(&results, &pyramid, cfg).expect("consistent results");
    (pyramid, results, stack)
}

fn scene_config(tol: f64) -> SegmentConfig {
    let mut cfg = SegmentConfig::default();
    cfg.refine.tol = tol;
    cfg
}

fn scenes(count: u64, tol: f64) -> Vec<Scene> {
    (0..count)
        .map(|s| random_scene(256, tol, 0x5eed_0000 + s))
        .collect()
}

/// Pixels deviating from a mean computed here with compensated summation.
/// `slack` absorbs last-ulp differences on non-integer levels.
fn independent_deviants(labels: &LabelMap, img: &GrayImage, tol: f64, slack: f64) -> usize {
    let mut acc: HashMap<Label, (f64, f64, u64)> = HashMap::new();
    for (&l, &v) in labels.labels().iter().zip(img.data()) {
        let (sum, comp, n) = acc.entry(l).or_insert((0.0, 0.0, 0));
        let y = v - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
        *n += 1;
    }
    labels
        .labels()
        .iter()
        .zip(img.data())
        .filter(|(l, &v)| {
            let (sum, _, n) = acc[l];
            (v - sum / n as f64).abs() > tol + slack
        })
        .count()
}

fn is_integer_image(img: &GrayImage) -> bool {
    img.data().iter().all(|v| v.fract() == 0.0)
}

// ---------------------------------------------------------------------------
// 1

fn pyramid_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let mut levels_checked = 0;
    for case in 0..1000 {
        let w = rng.random_range(1..=128);
        let h = rng.random_range(1..=128);
        let data: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..=255.0)).collect();
        let img = GrayImage::new(w, h, data).unwrap();
        let p = build_pyramid(&img, 100);
        let base_mass = p.level_mass(0);
        let base_sum: f64 = img.data().iter().sum();
        let area = (w * h) as f64;
        for level in 0..p.len() {
            ensure!(
                p.level_mass(level) == base_mass,
                "case {case} ({w}x{h}) level {level}: exact mass {:?} != {:?}",
                p.level_mass(level),
                base_mass
            );
            // value times footprint, with footprints counted here from scratch
            let li = &p.levels()[level];
            let mut footprint = vec![0u64; li.len()];
            for y in 0..h {
                for x in 0..w {
                    footprint[(y >> level) * li.width() + (x >> level)] += 1;
                }
            }
            let mut weighted = 0.0;
            for (i, &n) in footprint.iter().enumerate() {
                ensure!(
                    n == p.footprint(level, i % li.width(), i / li.width()),
                    "case {case} level {level}: footprint mismatch at {i}"
                );
                weighted += li.data()[i] * n as f64;
            }
            let rel = (weighted / area - base_sum / area).abs() / (base_sum / area).max(1.0);
            ensure!(
                rel <= 1e-9,
                "case {case} level {level}: area-weighted mean off by {rel:e}"
            );
            levels_checked += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}, limit 5 s");
    Ok(format!(
        "1000 images, {levels_checked} levels exact, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2

fn top_size_rule() -> Outcome {
    let sides = [
        1usize, 2, 3, 5, 7, 9, 10, 11, 13, 19, 20, 21, 31, 50, 99, 100, 101, 127, 128, 129, 200, 255, 256,
        257, 511, 512, 513, 1000, 1023, 1024, 1025, 1500, 2047, 2048,
    ];
    let mut pairs = 0;
    for &w in &sides {
        for &h in &sides {
            let dims = level_dims(w, h, 100);
            ensure!(dims[0] == (w, h), "{w}x{h}: first level is {:?}", dims[0]);
            for pair in dims.windows(2) {
                ensure!(
                    pair[1] == (pair[0].0.div_ceil(2), pair[0].1.div_ceil(2)),
                    "{w}x{h}: {:?} does not halve to {:?}",
                    pair[0],
                    pair[1]
                );
            }
            let (tw, th) = *dims.last().unwrap();
            if w * h <= 100 {
                ensure!(dims.len() == 1, "{w}x{h}: small input got {} levels", dims.len());
            } else {
                ensure!(tw * th <= 100, "{w}x{h}: top has {} px", tw * th);
                let (bw, bh) = dims[dims.len() - 2];
                ensure!(bw * bh > 100, "{w}x{h}: level below top has {} px", bw * bh);
            }
            pairs += 1;
        }
    }
    // built pyramids agree with the predicted shapes
    for (w, h) in [(2048, 2048), (2047, 3), (1, 2048), (101, 1), (512, 512), (10, 10)] {
        let p = build_pyramid(&GrayImage::filled(w, h, 7.0), 100);
        let got: Vec<_> = p.levels().iter().map(|l| l.dims()).collect();
        ensure!(got == level_dims(w, h, 100), "{w}x{h}: built {got:?}");
    }
    ensure!(
        level_dims(512, 512, 100).len() == 7,
        "512x512 should give 7 levels"
    );
    Ok(format!("{pairs} dimension pairs, 6 built pyramids"))
}

// ---------------------------------------------------------------------------
// 3

/// A small blocky image with integer noise and a connected initial labelling
/// made by expanding a random coarse map.
fn random_refine_input(w: usize, h: usize, seed: u64) -> (GrayImage, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![rng.random_range(0..=255) as f64; w * h];
    for _ in 0..rng.random_range(0..=4) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
        let v = rng.random_range(0..=255) as f64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                data[y * w + x] = v;
            }
        }
    }
    let noise = rng.random_range(0..=6i32);
    for v in &mut data {
        *v = (*v + rng.random_range(-noise..=noise) as f64).clamp(0.0, 255.0);
    }
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let k = rng.random_range(1..=4u32);
    let coarse = LabelMap::from_raw(cw, ch, (0..cw * ch).map(|_| rng.random_range(0..k)).collect());
    let labels = expand_labels(&connected_components(&coarse), (w, h)).unwrap();
    (GrayImage::new(w, h, data).unwrap(), labels)
}

fn refine_config_strategy() -> impl Strategy<Value = RefineConfig> {
    (
        1.0..40.0f64,
        1usize..=10,
        1usize..=3,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(
            |(tol, max_sweeps, min_seed_size, relax_borders, merge_adjacent)| RefineConfig {
                tol,
                max_sweeps,
                min_seed_size,
                relax_borders,
                merge_adjacent,
            },
        )
}

fn label_map_invariants() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 600,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let sweeps = std::cell::Cell::new(0usize);
    let strategy = (1usize..=24, 1usize..=24, any::<u64>(), refine_config_strategy());
    let result = runner.run(&strategy, |(w, h, seed, cfg)| {
        let (img, labels) = random_refine_input(w, h, seed);
        let stats = RegionStats::compute(&labels, &img);
        let mut failure: Option<String> = None;
        let result = refine_level_observed(&labels, &stats, &img, &cfg, |l, s| {
            sweeps.set(sweeps.get() + 1);
            if failure.is_some() {
                return;
            }
            if l.dims() != (w, h) || l.len() != w * h {
                failure = Some(format!("coverage: dims {:?}", l.dims()));
            } else if !l.is_four_connected() {
                failure = Some("a label is not 4-connected".into());
            } else if !s.same_regions(&RegionStats::compute_with_bound(l, &img, s.bound())) {
                failure = Some("incremental stats differ from recomputed".into());
            } else if l.labels().iter().any(|&x| s.count(x) == 0) {
                failure = Some("a pixel carries a label with no recorded pixels".into());
            }
        });
        if let Some(f) = failure {
            return Err(TestCaseError::fail(f));
        }
        prop_assert!(result.labels.is_four_connected());
        prop_assert!(result.stats.same_regions(&RegionStats::compute_with_bound(
            &result.labels,
            &img,
            result.stats.bound()
        )));
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok(format!("600 cases, {} sweeps observed", sweeps.get()))
}

// ---------------------------------------------------------------------------
// 4

fn convergence_certificate() -> Outcome {
    let mut converged_levels = 0;
    let mut check = |tag: &str, result: &LevelResult, img: &GrayImage, tol: f64| -> Result<(), String> {
        if !result.converged {
            return Ok(());
        }
        converged_levels += 1;
        let slack = if is_integer_image(img) { 0.0 } else { 1e-9 };
        let found = independent_deviants(&result.labels, img, tol, slack);
        ensure!(
            found == 0,
            "{tag} level {}: certified but {found} deviants",
            result.level
        );
        ensure!(
            result.deviant_count_history.last() == Some(&0),
            "{tag}: converged with history {:?}",
            result.deviant_count_history
        );
        Ok(())
    };
    for seed in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (img, labels) = random_refine_input(w, h, seed);
        let cfg = RefineConfig {
            tol: rng.random_range(2..=30) as f64,
            max_sweeps: rng.random_range(1..=10),
            ..RefineConfig::default()
        };
        let result = strata::refine_level(&labels, &RegionStats::compute(&labels, &img), &img, &cfg);
        check(&format!("random {seed}"), &result, &img, cfg.tol)?;
    }
    for (i, scene) in scenes(30, 10.0).iter().enumerate() {
        let (pyramid, results, _) = pipeline(&scene.image, &scene_config(10.0));
        for r in &results {
            check(&format!("scene {i}"), r, &pyramid.levels()[r.level], 10.0)?;
        }
    }
    ensure!(
        converged_levels > 100,
        "only {converged_levels} converged levels exercised"
    );
    Ok(format!(
        "{converged_levels} converged levels rescanned, 0 deviants"
    ))
}

// ---------------------------------------------------------------------------
// 5

fn reconstruction_bound() -> Outcome {
    let tol = 10.0;
    let mut worst: f64 = 0.0;
    let mut levels = 0;
    for (i, scene) in scenes(30, tol).iter().enumerate() {
        let (pyramid, results, stack) = pipeline(&scene.image, &scene_config(tol));
        for r in results.iter().filter(|r| r.converged) {
            let rec = reconstruct(&stack, r.level, &r.labels).map_err(|e| e.to_string())?;
            let orig = &pyramid.levels()[r.level];
            let err = orig
                .data()
                .iter()
                .zip(rec.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure!(err <= tol, "scene {i} level {}: max error {err}", r.level);
            worst = worst.max(err);
            levels += 1;
        }
    }
    let mut noiseless = 0;
    for seed in 0..30u64 {
        let s = random_scene(256, tol, 0x5eed_0000 + seed);
        let (img, _) = synth_scene(256, 256, &s.rects, s.background, 0, 0).unwrap();
        let (_, results, stack) = pipeline(&img, &scene_config(tol));
        let base = results.last().unwrap();
        ensure!(
            base.level == 0 && base.converged,
            "noiseless {seed}: level 0 not converged"
        );
        let rec = reconstruct(&stack, 0, &base.labels).map_err(|e| e.to_string())?;
        ensure!(
            rec.data() == img.data(),
            "noiseless {seed}: level-0 reconstruction not exact"
        );
        noiseless += 1;
    }
    Ok(format!(
        "{levels} converged levels, worst error {worst:.3} <= {tol}; {noiseless} noiseless scenes exact"
    ))
}

// ---------------------------------------------------------------------------
// 6

fn segmentation_oracle() -> Outcome {
    let tol = 10.0;
    let cfg = scene_config(tol);
    let mut slowest = Duration::ZERO;
    let mut worst_acc: f64 = 1.0;
    for (i, scene) in scenes(50, tol).iter().enumerate() {
        let started = Instant::now();
        let results = segment_image(&scene.image, &cfg).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        slowest = slowest.max(elapsed);
        let base = results.last().unwrap();
        let truth = scene.truth.region_count();
        ensure!(
            base.region_count() == truth,
            "scene {i}: {} regions, truth {truth}",
            base.region_count()
        );
        let acc = pixel_accuracy(&base.labels, &scene.truth);
        ensure!(acc >= 0.99, "scene {i}: accuracy {acc:.4}");
        worst_acc = worst_acc.min(acc);
        ensure!(elapsed < Duration::from_secs(1), "scene {i}: took {elapsed:?}");
    }
    Ok(format!(
        "50 scenes, region counts exact, worst accuracy {worst_acc:.4}, slowest {:.0} ms",
        slowest.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------------------
// 7

fn newly_emerging_region() -> Outcome {
    let tol = 10.0;
    let (img, _) = synth_scene(256, 256, &[RectSpec::new(100, 100, 3, 3, 255.0)], 0.0, 0, 0).unwrap();
    let cfg = scene_config(tol);
    let (pyramid, results, _) = pipeline(&img, &cfg);
    let top = pyramid.top_index();
    // background stays 0, so contrast is the brightest pixel of a level
    let contrast = |l: usize| pyramid.levels()[l].data().iter().copied().fold(0.0, f64::max);
    ensure!(
        contrast(top) <= tol,
        "square still visible at the top ({})",
        contrast(top)
    );
    let visible = (0..=top)
        .rev()
        .find(|&l| contrast(l) > tol)
        .ok_or("square never exceeds tol")?;
    let at = |l: usize| &results[top - l];
    let square_at = |l: usize| at(l).labels.get(100 >> l, 100 >> l);

    let above = at(visible + 1);
    let fresh = square_at(visible);
    ensure!(
        above.stats.count(fresh) == 0 && fresh >= above.stats.bound(),
        "label {fresh} at level {visible} is not fresh"
    );
    for l in visible + 1..=top {
        let bg = at(l).labels.labels()[0];
        ensure!(
            at(l).labels.labels().iter().all(|&x| x == bg),
            "level {l} already separates the square"
        );
    }
    let base = at(0);
    let label = square_at(0);
    ensure!(
        label >= above.stats.bound(),
        "level-0 square label {label} predates level {visible}"
    );
    let pixels: Vec<usize> = (0..base.labels.len())
        .filter(|&i| base.labels.labels()[i] == label)
        .collect();
    let expected: Vec<usize> = (100..103)
        .flat_map(|y| (100..103).map(move |x| y * 256 + x))
        .collect();
    ensure!(
        pixels == expected,
        "level-0 square region has {} pixels",
        pixels.len()
    );
    ensure!(
        base.region_count() == 2,
        "level 0 has {} regions",
        base.region_count()
    );
    Ok(format!(
        "square invisible above level {visible} (contrast {:.2}), minted as label {fresh}, exact 9 px at level 0",
        contrast(visible)
    ))
}

// ---------------------------------------------------------------------------
// 8

fn expansion_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let (cw, ch) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let k = rng.random_range(1..=12u32);
        let m = LabelMap::from_raw(cw, ch, (0..cw * ch).map(|_| rng.random_range(0..k) * 3).collect());
        let fw = if cw > 1 || rng.random_bool(0.5) {
            2 * cw - rng.random_range(0..=1)
        } else {
            2
        };
        let fh = if ch > 1 || rng.random_bool(0.5) {
            2 * ch - rng.random_range(0..=1)
        } else {
            2
        };
        let expanded = expand_labels(&m, (fw, fh)).map_err(|e| e.to_string())?;
        ensure!(
            expanded.dims() == (fw, fh),
            "case {case}: expanded dims {:?}",
            expanded.dims()
        );
        let back = downsample_majority(&expanded);
        ensure!(
            back == m,
            "case {case}: {cw}x{ch} -> {fw}x{fh} does not round-trip"
        );
    }
    Ok("200 random coarse maps round-trip".into())
}

// ---------------------------------------------------------------------------
// 9

fn check_stack(tag: &str, stack: &DescriptionStack, results: &[LevelResult]) -> Result<(), String> {
    let violations = stack.violations();
    ensure!(violations.is_empty(), "{tag}: {}", violations.join("; "));
    ensure!(stack.levels.len() == results.len(), "{tag}: level count");
    for (i, (desc, result)) in stack.levels.iter().zip(results).enumerate() {
        ensure!(desc.level == result.level, "{tag}: level order");
        let mut counts: BTreeMap<Label, u64> = BTreeMap::new();
        for &l in result.labels.labels() {
            *counts.entry(l).or_default() += 1;
        }
        let sizes: BTreeMap<Label, u64> = desc.regions.iter().map(|r| (r.label, r.size)).collect();
        ensure!(
            sizes == counts,
            "{tag} level {}: sizes disagree with label map",
            desc.level
        );
        ensure!(
            sizes.values().sum::<u64>() == (desc.width * desc.height) as u64,
            "{tag} level {}: sizes do not sum to the level area",
            desc.level
        );
        let by_label: BTreeMap<Label, &RegionDescriptor> =
            desc.regions.iter().map(|r| (r.label, r)).collect();
        for r in &desc.regions {
            for &n in &r.adjacent {
                let other = by_label.get(&n).ok_or(format!("{tag}: dangling neighbour {n}"))?;
                ensure!(
                    other.adjacent.contains(&r.label),
                    "{tag}: adjacency not symmetric ({} {n})",
                    r.label
                );
                let (ab, ba) = (r.relative_position.get(&n), other.relative_position.get(&r.label));
                ensure!(
                    matches!((ab, ba), (Some(a), Some(b)) if a.inverse() == *b),
                    "{tag}: relative position not antisymmetric ({} {n})",
                    r.label
                );
            }
        }
        // parents: every non-top region points at an existing coarser region
        let coarser: Option<&LevelDescription> = i.checked_sub(1).map(|p| &stack.levels[p]);
        for r in &desc.regions {
            match (coarser, r.parent_label) {
                (None, None) => {}
                (Some(c), Some(p)) => ensure!(c.region(p).is_some(), "{tag}: parent {p} missing"),
                (c, p) => {
                    return Err(format!(
                        "{tag}: region {} parent {p:?} (top: {})",
                        r.label,
                        c.is_none()
                    ))
                }
            }
        }
    }
    Ok(())
}

fn descriptor_invariants() -> Outcome {
    let mut checked = 0;
    for tol in [6.0, 10.0, 20.0] {
        for (i, scene) in scenes(20, tol).iter().enumerate() {
            let (_, results, stack) = pipeline(&scene.image, &scene_config(tol));
            check_stack(&format!("tol {tol} scene {i}"), &stack, &results)?;
            checked += 1;
        }
    }
    for noise in [0, 3] {
        let (img, _) = fixture_scene(noise);
        let (_, results, stack) = pipeline(&img, &SegmentConfig::default());
        check_stack(&format!("fixture noise {noise}"), &stack, &results)?;
        checked += 1;
    }
    for seed in 0..40u64 {
        let (img, _) = random_refine_input(1 + seed as usize % 37, 1 + (seed as usize * 7) % 41, seed);
        let (_, results, stack) = pipeline(&img, &scene_config(8.0));
        check_stack(&format!("small {seed}"), &stack, &results)?;
        checked += 1;
    }
    Ok(format!("{checked} stacks"))
}

// ---------------------------------------------------------------------------
// 10

const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

fn region(level: usize, label: Label, centroid: (f64, f64), parent: Option<Label>) -> RegionDescriptor {
    RegionDescriptor {
        level,
        label,
        size: 1,
        centroid,
        mean_intensity: 0.0,
        bbox: BBox {
            min_x: 0,
            min_y: 0,
            max_x: 0,
            max_y: 0,
        },
        parent_label: parent,
        adjacent: Vec::new(),
        relative_position: BTreeMap::new(),
    }
}

/// A two-level stack with random geometry. Only the fields context
/// verification reads are meaningful.
fn random_kb_stack(rng: &mut ChaCha8Rng, n: usize) -> DescriptionStack {
    let coarse_labels: Vec<Label> = (0..rng.random_range(1..=3)).map(|i| i * 2).collect();
    let coarse: Vec<RegionDescriptor> = coarse_labels
        .iter()
        .map(|&l| region(1, l, (l as f64, 0.0), None))
        .collect();
    let mut fine: Vec<RegionDescriptor> = (0..n as Label)
        .map(|l| {
            let c = (rng.random_range(0..6) as f64, rng.random_range(0..6) as f64);
            let parent = coarse_labels[rng.random_range(0..coarse_labels.len())];
            region(0, l, c, Some(parent))
        })
        .collect();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(0.4) {
                fine[a].adjacent.push(b as Label);
                fine[b].adjacent.push(a as Label);
            }
        }
    }
    DescriptionStack {
        format: STACK_FORMAT.to_string(),
        source_width: 6,
        source_height: 6,
        config: SegmentConfig::default(),
        levels: vec![
            LevelDescription {
                level: 1,
                width: 3,
                height: 3,
                converged: true,
                regions: coarse,
            },
            LevelDescription {
                level: 0,
                width: 6,
                height: 6,
                converged: true,
                regions: fine,
            },
        ],
    }
}

/// Direction of `a` relative to `b`, straight from the centroids.
fn oracle_direction(a: &RegionDescriptor, b: &RegionDescriptor) -> Relation {
    let (dx, dy) = (b.centroid.0 - a.centroid.0, b.centroid.1 - a.centroid.1);
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

fn oracle_holds(
    rel: SceneRelation,
    a: &RegionDescriptor,
    b: &RegionDescriptor,
    stack: &DescriptionStack,
) -> bool {
    match rel {
        SceneRelation::LeftOf => oracle_direction(a, b) == Relation::LeftOf,
        SceneRelation::RightOf => oracle_direction(a, b) == Relation::RightOf,
        SceneRelation::Above => oracle_direction(a, b) == Relation::Above,
        SceneRelation::Below => oracle_direction(a, b) == Relation::Below,
        SceneRelation::Adjacent => a.adjacent.contains(&b.label),
        SceneRelation::SubPartOf => {
            if a.label == b.label {
                return false;
            }
            // walk the parent chain level by level
            let mut level = a.level;
            let mut parent = a.parent_label;
            while let Some(p) = parent {
                level += 1;
                if p == b.label {
                    return true;
                }
                parent = stack
                    .levels
                    .iter()
                    .find(|l| l.level == level)
                    .and_then(|l| l.regions.iter().find(|r| r.label == p))
                    .and_then(|r| r.parent_label);
            }
            false
        }
    }
}

/// Every injective assignment of every scene, scored from scratch.
/// Returns (objective, context, scene, labels) of all optima.
fn brute_force(
    kb: &KnowledgeBase,
    candidates: &RegionCandidates,
    stack: &DescriptionStack,
) -> (f64, Vec<(f64, usize, Vec<Label>)>) {
    let level0 = &stack.levels[1].regions;
    let score = |label: Label, word: &str| {
        candidates
            .iter()
            .find(|(l, _)| *l == label)
            .and_then(|(_, c)| c.iter().find(|c| c.word == word))
            .map(|c| c.score)
    };
    let labels: Vec<Label> = candidates.iter().map(|(l, _)| *l).collect();
    let mut best = f64::NEG_INFINITY;
    let mut optima = Vec::new();
    for (si, scene) in kb.scenes.iter().enumerate() {
        let k = scene.members.len();
        let total = labels.len().pow(k as u32);
        for code in 0..total {
            let mut pick = Vec::with_capacity(k);
            let mut c = code;
            for _ in 0..k {
                pick.push(labels[c % labels.len()]);
                c /= labels.len();
            }
            let distinct: BTreeSet<_> = pick.iter().collect();
            if distinct.len() != k {
                continue;
            }
            let sims: Option<Vec<f64>> = pick
                .iter()
                .zip(&scene.members)
                .map(|(&l, w)| score(l, w))
                .collect();
            let Some(sims) = sims else { continue };
            let mean = sims.iter().sum::<f64>() / k as f64;
            let context = if scene.constraints.is_empty() {
                1.0
            } else {
                let region_of = |w: &str| {
                    let m = scene.members.iter().position(|x| x == w).unwrap();
                    &level0[pick[m] as usize]
                };
                let ok = scene
                    .constraints
                    .iter()
                    .filter(|c| oracle_holds(c.relation, region_of(&c.a), region_of(&c.b), stack))
                    .count();
                ok as f64 / scene.constraints.len() as f64
            };
            let objective = mean * context;
            if objective > best {
                best = objective;
                optima.clear();
            }
            if objective == best {
                optima.push((context, si, pick));
            }
        }
    }
    (best, optima)
}

fn random_kb_case(rng: &mut ChaCha8Rng) -> (KnowledgeBase, RegionCandidates, DescriptionStack) {
    let n = rng.random_range(1..=7);
    let stack = random_kb_stack(rng, n);
    let vocab = rng.random_range(1..=WORDS.len());
    let mut kb = KnowledgeBase::default();
    for w in &WORDS[..vocab] {
        kb.prototypes.insert(
            w.to_string(),
            ObjectPrototype {
                word: w.to_string(),
                predicates: vec![AttributePredicate {
                    attribute: Attribute::MeanIntensity,
                    lo: 0.0,
                    hi: 1.0,
                    weight: 1.0,
                }],
            },
        );
    }
    let relations = [
        SceneRelation::LeftOf,
        SceneRelation::RightOf,
        SceneRelation::Above,
        SceneRelation::Below,
        SceneRelation::Adjacent,
        SceneRelation::SubPartOf,
    ];
    for s in 0..rng.random_range(1..=3) {
        let k = rng.random_range(1..=vocab.min(6));
        let mut members: Vec<String> = WORDS[..vocab].iter().map(|w| w.to_string()).collect();
        while members.len() > k {
            members.remove(rng.random_range(0..members.len()));
        }
        let constraints = (0..rng.random_range(0..=4))
            .map(|_| Constraint {
                a: members[rng.random_range(0..k)].clone(),
                relation: relations[rng.random_range(0..relations.len())],
                b: members[rng.random_range(0..k)].clone(),
            })
            .collect();
        kb.scenes.push(SceneNode {
            name: format!("scene{s}"),
            members,
            constraints,
        });
    }
    let mut candidates: RegionCandidates = Vec::new();
    for label in 0..n as Label {
        let mut cands = Vec::new();
        for w in &WORDS[..vocab] {
            if rng.random_bool(0.6) {
                // eighths force plenty of ties
                let score = rng.random_range(4..=8) as f64 / 8.0;
                cands.push(Candidate {
                    word: w.to_string(),
                    score,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.word.cmp(&b.word)));
        if !cands.is_empty() {
            candidates.push((label, cands));
        }
    }
    (kb, candidates, stack)
}

fn kb_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut named = 0;
    for case in 0..100 {
        let (kb, candidates, stack) = random_kb_case(&mut rng);
        let cfg = AnnotateConfig {
            context_threshold: 0.0,
            ..AnnotateConfig::default()
        };
        let annotations = verify_context(&candidates, &stack, &kb, &cfg);
        ensure!(
            annotations.len() == candidates.len(),
            "case {case}: annotation count"
        );
        let (best, optima) = brute_force(&kb, &candidates, &stack);
        let chosen: Vec<(Label, &str, &str)> = annotations
            .iter()
            .filter_map(|a| Some((a.label, a.word.as_deref()?, a.scene.as_deref()?)))
            .collect();
        if optima.is_empty() || best <= 0.0 {
            ensure!(
                chosen.is_empty(),
                "case {case}: named regions with no positive assignment"
            );
            continue;
        }
        let scene_name = chosen
            .first()
            .map(|c| c.2)
            .ok_or(format!("case {case}: nothing chosen, best {best}"))?;
        let si = kb.scenes.iter().position(|s| s.name == scene_name).unwrap();
        let scene = &kb.scenes[si];
        let assignment: Vec<Label> = scene
            .members
            .iter()
            .map(|m| chosen.iter().find(|c| c.1 == m).map(|c| c.0))
            .collect::<Option<_>>()
            .ok_or(format!("case {case}: incomplete assignment"))?;
        ensure!(
            chosen.len() == scene.members.len(),
            "case {case}: extra regions named"
        );
        let hit = optima.iter().find(|(_, s, p)| *s == si && *p == assignment);
        ensure!(
            hit.is_some(),
            "case {case}: chose {scene_name} {assignment:?}, brute force best {best} at {optima:?}"
        );
        let context = hit.unwrap().0;
        ensure!(
            annotations
                .iter()
                .filter(|a| a.word.is_some())
                .all(|a| a.context_score == context),
            "case {case}: context score mismatch"
        );
        // the same winner is withheld once the threshold exceeds its context score
        if context < 1.0 {
            let strict = AnnotateConfig {
                context_threshold: (context + 1e-9).min(1.0),
                ..cfg
            };
            let withheld = verify_context(&candidates, &stack, &kb, &strict);
            let optimal_above = optima.iter().any(|o| o.0 >= strict.context_threshold);
            if !optimal_above {
                ensure!(
                    withheld.iter().all(|a| a.word.is_none()),
                    "case {case}: assignment below threshold kept"
                );
            }
        }
        named += 1;
    }

    // monotonicity: widening a predicate range never lowers a score
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 200,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let predicate = (0usize..7, -50.0..300.0f64, 0.0..200.0f64, 0.1..5.0f64);
    let strategy = (
        proptest::collection::vec(predicate, 1..6),
        0usize..6,
        0.0..50.0f64,
        0.0..50.0f64,
        (
            1u64..5000,
            0.0..255.0f64,
            0.0..64.0f64,
            0.0..64.0f64,
            1usize..64,
            1usize..64,
        ),
    );
    runner
        .run(
            &strategy,
            |(preds, which, grow_lo, grow_hi, (size, mean, cx, cy, bw, bh))| {
                let predicates: Vec<AttributePredicate> = preds
                    .iter()
                    .map(|&(a, lo, span, weight)| AttributePredicate {
                        attribute: Attribute::ALL[a],
                        lo,
                        hi: lo + span,
                        weight,
                    })
                    .collect();
                let mut desc = region(0, 0, (cx, cy), None);
                desc.size = size;
                desc.mean_intensity = mean;
                desc.bbox = BBox {
                    min_x: 0,
                    min_y: 0,
                    max_x: bw - 1,
                    max_y: bh - 1,
                };
                let proto = ObjectPrototype {
                    word: "w".into(),
                    predicates: predicates.clone(),
                };
                let mut wider = proto.clone();
                let i = which % predicates.len();
                wider.predicates[i].lo -= grow_lo;
                wider.predicates[i].hi += grow_hi;
                let dims = (64, 64);
                let (before, after) = (proto.score(&desc, dims), wider.score(&desc, dims));
                prop_assert!(after >= before, "{before} -> {after}");
                let mut kb = KnowledgeBase::default();
                kb.prototypes.insert("w".into(), proto);
                let mut kb_wide = KnowledgeBase::default();
                kb_wide.prototypes.insert("w".into(), wider);
                for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let matched = !match_region(&desc, dims, &kb, t).is_empty();
                    let matched_wide = !match_region(&desc, dims, &kb_wide, t).is_empty();
                    prop_assert!(!matched || matched_wide);
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "100 candidate sets ({named} named) match brute force; 200 widenings monotone"
    ))
}

// ---------------------------------------------------------------------------
// 11

const FIXTURE_RECTS: [(usize, usize, usize, usize, f64); 3] = [
    (0, 0, 256, 120, 200.0),
    (40, 40, 12, 12, 250.0),
    (150, 150, 60, 50, 110.0),
];
const FIXTURE_BACKGROUND: f64 = 60.0;

fn fixture_kb_path() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/three_rect.toml")
}

fn fixture_scene(noise: u32) -> (GrayImage, LabelMap) {
    let rects: Vec<RectSpec> = FIXTURE_RECTS
        .iter()
        .map(|&(x, y, w, h, v)| RectSpec::new(x, y, w, h, v))
        .collect();
    synth_scene(256, 256, &rects, FIXTURE_BACKGROUND, noise, 11).unwrap()
}

fn end_to_end_annotation() -> Outcome {
    let kb = load_kb(fixture_kb_path()).map_err(|e| e.to_string())?;
    let expected = [
        ((5, 5), "sky"),
        ((45, 45), "sun"),
        ((180, 175), "house"),
        ((5, 250), "ground"),
    ];
    let mut reports = Vec::new();
    for noise in [0, 3] {
        let (img, truth) = fixture_scene(noise);
        ensure!(
            truth.region_count() == 4,
            "fixture has {} regions",
            truth.region_count()
        );
        let mut first: Option<String> = None;
        for _ in 0..2 {
            let (_, results, stack) = pipeline(&img, &SegmentConfig::default());
            let base = results.last().unwrap();
            ensure!(
                base.region_count() == 4,
                "noise {noise}: {} regions",
                base.region_count()
            );
            let annotations = annotate(&stack, &kb, &AnnotateConfig::default());
            ensure!(
                annotations.len() == 4,
                "noise {noise}: {} annotated regions",
                annotations.len()
            );
            for ((x, y), word) in expected {
                let label = base.labels.get(x, y);
                let a = annotations
                    .iter()
                    .find(|a| a.label == label)
                    .ok_or(format!("noise {noise}: region at ({x},{y}) unannotated"))?;
                ensure!(
                    a.word.as_deref() == Some(word) && a.scene.as_deref() == Some("sunny-day"),
                    "noise {noise}: region at ({x},{y}) named {:?}, expected {word}",
                    a.word
                );
                ensure!(
                    a.context_score == 1.0,
                    "noise {noise}: context {}",
                    a.context_score
                );
            }
            let report = format_report(&annotations);
            if let Some(f) = &first {
                ensure!(*f == report, "noise {noise}: reports differ between runs");
            }
            first = Some(report);
        }
        reports.push(first.unwrap());
    }
    // the sun is averaged away at the top but stays a sub-part of the sky
    let (img, _) = fixture_scene(0);
    let (pyramid, results, _) = pipeline(&img, &SegmentConfig::default());
    let shift = pyramid.top_index();
    let top = &results[0].labels;
    ensure!(
        top.get(45 >> shift, 45 >> shift) == top.get(5 >> shift, 5 >> shift),
        "sun already separate at the top of the {}-level pyramid",
        pyramid.len()
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cli_reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        cli(&synth_args(&out))?;
        cli(&[
            "annotate".into(),
            out.join("image.pgm").display().to_string(),
            "--kb".into(),
            fixture_kb_path().into(),
            "--out-dir".into(),
            out.display().to_string(),
        ])?;
        cli_reports.push(std::fs::read(out.join("annotations.tsv")).map_err(|e| e.to_string())?);
    }
    ensure!(
        cli_reports[0] == cli_reports[1],
        "CLI reports differ between runs"
    );
    ensure!(
        cli_reports[0] == reports[0].as_bytes(),
        "CLI report differs from the library report"
    );
    Ok("4/4 regions named on clean and noisy fixtures; reports byte-identical across runs".into())
}

// ---------------------------------------------------------------------------
// 12

fn cli(args: &[String]) -> Result<Vec<u8>, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_strata"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        output.status.success(),
        "strata {} exited {:?}: {}",
        args.join(" "),
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    Ok(output.stdout)
}

fn synth_args(out: &Path) -> Vec<String> {
    let mut args = vec![
        "synth".to_string(),
        "--width".into(),
        "256".into(),
        "--height".into(),
        "256".into(),
        "--background".into(),
        FIXTURE_BACKGROUND.to_string(),
        "--noise".into(),
        "0".into(),
        "--seed".into(),
        "11".into(),
        "--out-dir".into(),
        out.display().to_string(),
    ];
    for (x, y, w, h, v) in FIXTURE_RECTS {
        args.push("--rect".into());
        args.push(format!("{x},{y},{w},{h},{v}"));
    }
    args
}

fn full_run(out: &Path) -> Result<BTreeMap<String, String>, String> {
    let s = |p: &Path| p.display().to_string();
    let mut args = synth_args(out);
    let noise = args.iter().position(|a| a == "--noise").unwrap();
    args[noise + 1] = "3".into();
    cli(&args)?;
    let image = s(&out.join("image.pgm"));
    cli(&[
        "segment".into(),
        image.clone(),
        "--out-dir".into(),
        s(&out.join("seg")),
    ])?;
    cli(&[
        "describe".into(),
        image.clone(),
        "--out-dir".into(),
        s(&out.join("desc")),
    ])?;
    let report = cli(&[
        "reconstruct".into(),
        "--stack".into(),
        s(&out.join("desc/stack.json")),
        "--labels".into(),
        s(&out.join("desc/level_0.labels")),
        "--level".into(),
        "0".into(),
        "--original".into(),
        image.clone(),
        "--out".into(),
        s(&out.join("recon.pgm")),
    ])?;
    std::fs::write(out.join("reconstruct.txt"), report).map_err(|e| e.to_string())?;
    cli(&[
        "annotate".into(),
        image,
        "--kb".into(),
        fixture_kb_path().into(),
        "--out-dir".into(),
        s(&out.join("ann")),
    ])?;
    let mut hashes = BTreeMap::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                let rel = path.strip_prefix(out).unwrap().display().to_string();
                let digest: String = Sha256::digest(&bytes)
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect();
                hashes.insert(rel, digest);
            }
        }
    }
    Ok(hashes)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = full_run(&dir.path().join("a"))?;
    let b = full_run(&dir.path().join("b"))?;
    ensure!(a.len() >= 10, "only {} artifacts produced", a.len());
    for (name, hash) in &a {
        ensure!(b.get(name) == Some(hash), "{name} differs between runs");
    }
    ensure!(a.len() == b.len(), "artifact sets differ");
    Ok(format!("{} artifacts hash-identical across two runs", a.len()))
}
