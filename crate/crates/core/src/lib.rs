//! Object-based video domain adaptation on synthetic egocentric kitchens.
//!
//! An action recognizer reads a clip together with hand and object boxes
//! from a detector. To move it to a new visual domain, only the detector is
//! fine-tuned, on one annotated frame from each of a few target clips; the
//! recognizer stays frozen, which is checked by fingerprinting its weights.
//!
//! * [`synth`] renders class-balanced sprite-video datasets per domain.
//! * [`boxes`] holds boxes, IoU, greedy matching and the detector loss.
//! * [`detector`] is the four-slot box detector and its training.
//! * [`recognizer`] is the video transformer with box-cropped object tokens.
//! * [`adapt`] implements detector-only adaptation, baselines and controls.
//! * [`harness`] is the config-driven study behind the `odapt` binary.
//!
//! ```
//! use odapt::boxes::{iou, BBox};
//!
//! let a = BBox::new(0.0, 0.0, 0.5, 0.5)?;
//! let b = BBox::new(0.25, 0.25, 0.75, 0.75)?;
//! assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
//! # Ok::<(), odapt::Error>(())
//! ```
//!
//! The guide in `book/` explains each part; its code blocks run as doc tests.

pub mod adapt;
pub mod boxes;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod harness;
pub mod nn;
pub mod recognizer;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/domains.md")]
    struct Domains;
    #[doc = include_str!("../../../book/src/boxes.md")]
    struct Boxes;
    #[doc = include_str!("../../../book/src/detector.md")]
    struct DetectorChapter;
    #[doc = include_str!("../../../book/src/recognizer.md")]
    struct RecognizerChapter;
    #[doc = include_str!("../../../book/src/adaptation.md")]
    struct Adaptation;
    #[doc = include_str!("../../../book/src/study.md")]
    struct Study;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    struct Reproducibility;
}
