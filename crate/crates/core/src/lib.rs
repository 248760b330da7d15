//! Fixed-length character recognition without character detection.
//!
//! A scene is resized into the top of a canvas, a CNN predicts one
//! character, that character is drawn into the strip below, and the
//! updated canvas is classified again until the string is complete.

pub mod alphabet;
pub mod canvas;
pub mod cli;
pub mod decoder;
pub mod edgesim;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracles;
pub mod supergen;
pub mod taskgen;
pub mod train;

pub use alphabet::Alphabet;
pub use canvas::{compose, GlyphFont, Image, LayoutSpec, Rect};
pub use error::{Error, Result};
