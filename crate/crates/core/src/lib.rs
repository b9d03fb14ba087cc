#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod error;
pub mod geoeval;
pub mod gradcheck;
pub mod image;
pub mod matcher;
pub mod numgrid;
pub mod selftest;
pub mod transformer;
pub mod weightfile;

pub use error::{Error, Result};
