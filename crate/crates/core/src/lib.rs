//! Box refinement over frozen detectors.
//!
//! A small refinement network (FPN over the detector's backbone pyramid plus
//! weight-shared refiner stages) corrects the boxes of an already trained
//! detector. Around it sit Hungarian set matching, a COCO-protocol
//! evaluator, the ideal-performance analysis that replaces matched boxes or
//! labels with ground truth, a synthetic frozen detector and the binary/JSON
//! formats used by the `refinebox` CLI.

pub mod assignment;
pub mod config;
pub mod detection;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod net;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use assignment::{hungarian, match_cost, match_image, Assignment, CostMatrix, MatchWeights};
pub use config::{load_config, parse_config, Config};
pub use detection::{Detection, GtInstance, ImageSize};
pub use error::{Error, Result};
pub use eval::{
    analyze, coco_eval, ideal_classification, ideal_localization, EvalSummary, IdealReport,
};
pub use geometry::{area_bin, giou, iou, refine_step, AreaBin, BBox, BoxDelta, NormBox};
