//! Robot-centric 2.5D elevation mapping with multi-modal layers.
//!
//! A [`GridMap`] holds named `f32` layers over a fixed-size window. Point
//! clouds and images are associated with cells ([`association`]), fused
//! into layers ([`fusion`]) and post-processed by plugins ([`plugins`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod bench;
pub mod config;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod plugins;
pub mod sensor;
pub mod sim;

pub use error::{Error, Result};
pub use grid::{CellIndex, GridMap, Layer, LayerKind, MapGeometry};
