//! Coarse-to-fine image segmentation and semantic annotation.
//!
//! The physical half of the pipeline builds a 4-to-1 averaging pyramid, segments
//! its ~100 pixel top, and walks back down: labels are expanded 1-to-4, pixels
//! that disagree with their region are refined against the level image, and
//! structures that only become visible at finer levels are minted as new regions.
//! Every region at every level is registered in a [`DescriptionStack`], which
//! together with the per-level label maps reconstructs the input.
//!
//! The semantic half is a hand-authored [`KnowledgeBase`] of scenes, object
//! prototypes and attribute predicates that names level-0 regions by similarity
//! and checks the names against the scene's relation constraints.

pub mod cli;
pub mod describe;
pub mod fixed;
pub mod kb;
pub mod labels;
pub mod pyramid;
pub mod raster;
pub mod refine;
pub mod segment;

pub use describe::{reconstruct, register_regions, DescriptionStack, RegionDescriptor, Relation};
pub use kb::{
    annotate, load_kb, match_region, parse_kb, verify_context, AnnotateConfig, Annotation, KnowledgeBase,
};
pub use labels::LabelMap;
pub use pyramid::{build_pyramid, Pyramid, DEFAULT_TOP_TARGET};
pub use raster::{load_image, save_image, synth_scene, GrayImage, RectSpec};
pub use refine::{
    detect_deviants, expand_labels, refine_level, segment_image, segment_pyramid, LevelResult, RefineConfig,
    SegmentConfig,
};
pub use segment::{cluster_intensities, connected_components, segment_top, RegionStats};
