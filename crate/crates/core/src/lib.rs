//! Clip- and video-level feature aggregation for lesion detection in
//! ultrasound-like videos, built on a small `f64` reverse-mode autodiff
//! engine.
//!
//! The pipeline for one frame `k` of a video:
//!
//! 1. [`data`] samples the ordered clip `(I[k-1], I[k], I[k+1])` and the
//!    matching positions of a shuffled copy of the video.
//! 2. [`backbone`] maps each of the six frames to a three-level feature
//!    pyramid (ordered frames give `L`, shuffled frames give `G`).
//! 3. [`fusion`] merges every `L` with its `G` (inter-video attention, giving
//!    `P`) and then the three `P` pyramids of the clip (intra-video
//!    attention, giving `Q`).
//! 4. [`head`] turns `Q` into a fixed-size set of class/box predictions and a
//!    video-level benign/malignant classification.
//! 5. [`eval`] scores exported predictions with COCO-style AP.
//!
//! [`train`] ties everything together and runs the ablation grid.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/head.md")]
    struct Head;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
}
