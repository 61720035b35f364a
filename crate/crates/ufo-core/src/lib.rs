//! Recurrent feed-forward 4D scene reconstruction on CPU.
//!
//! A persistent scene-token memory is updated per frame by a transformer
//! under visibility-based filtering, decoded into lifespan-aware, motion-
//! blended 3D Gaussians, rendered by a differentiable splatter, and trained
//! on procedurally generated dynamic driving scenes.

pub mod dynamics;
pub mod geometry;
pub mod nn;
pub mod encoders;
pub mod numerics;
pub mod splatter;
pub mod update_net;
pub mod scalar;
pub mod synthdata;
pub mod tokenstore;

pub use scalar::Scalar;
