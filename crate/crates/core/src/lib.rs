//! Moving-object indexing with peer-wise location privacy.
//!
//! The policy-embedded index keys every user by time partition, policy
//! sequence value and Z-curve cell, so that users who are likely to see each
//! other are stored close together. A plain spatial index with a policy
//! filter serves as the baseline, and brute-force oracles check both.

pub mod bench;
pub mod costmodel;
pub mod error;
pub mod formats;
pub mod geom;
pub mod index;
pub mod keys;
pub mod motion;
pub mod policy;
pub mod query;
pub mod store;
pub mod workload;
pub mod zcurve;

pub use error::{Error, Result};

pub type UserId = u64;
