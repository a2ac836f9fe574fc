//! Hybrid Eulerian-Lagrangian graph surrogate for indoor aerosol dispersion.
//!
//! The crate is organised bottom-up: mesh parsing and graph construction
//! ([`mesh`]), parcel graphs ([`parcel`]), field transfer ([`coupling`]),
//! closed-form particle physics ([`physics`]), a synthetic reference
//! simulator ([`refsim`]), the graph pressure projection ([`projection`]),
//! a small reverse-mode autodiff core with the network blocks ([`nn`]),
//! rollout archives and the autoregressive engine ([`archive`],
//! [`rollout`]), the training curriculum ([`training`]) and the evaluation
//! metrics ([`eval`]).

pub mod archive;
pub mod coupling;
pub mod error;
pub mod eval;
pub mod geom;
pub mod mesh;
pub mod nn;
pub mod parcel;
pub mod physics;
pub mod projection;
pub mod refsim;
pub mod rollout;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
pub use geom::{Rect, Vec2};

/// Shared reference scales and fixed protocol constants.
pub mod consts {
    use crate::geom::{Rect, Vec2};

    /// Reference length (room width), m.
    pub const L_REF: f64 = 4.0;
    /// Reference speed, m/s.
    pub const U_REF: f64 = 20.0;
    /// Snapshot and model time step, s.
    pub const DT: f64 = 0.1;
    /// First archived time, s.
    pub const T_START: f64 = 2.0;
    /// Positions kept per parcel history (four velocity differences).
    pub const HISTORY: usize = 5;
    /// Nearest cells used by the inverse-distance transfer.
    pub const K_IDW: usize = 4;
    /// Distance guard of the inverse-distance weights, m.
    pub const IDW_EPS: f64 = 1e-9;
    /// Breathing-zone rectangle.
    pub const BREATHING_ZONE: Rect = Rect::new(Vec2::new(1.30, 1.525), Vec2::new(1.80, 1.675));
    /// Room height used by the non-dimensional groups, m.
    pub const ROOM_HEIGHT: f64 = 3.0;
}
