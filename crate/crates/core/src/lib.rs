//! Incremental few-shot semantic segmentation engine.
//!
//! Support samples are embedded into a category embedding and a hyper-class
//! embedding (built by clustering the base classes), aligned by a gated
//! cross-information module and stored in a [`membank::MemoryPool`].
//! Category embeddings are moved apart by an attention-weighted displacement
//! update ([`eaus`]) while hyper-class embeddings stay fixed as memory.
//! Queries are segmented one class at a time by an iterative class-agnostic
//! head ([`casm`]) and fused per pixel.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. All arithmetic is `f64`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod casm;
pub mod eaus;
mod error;
pub mod featext;
pub mod gradsuite;
pub mod membank;
pub mod numkit;
pub mod pipeline;

pub use error::{Error, Result};
