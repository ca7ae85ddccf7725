#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expr;
pub mod grid;
pub mod linalg;
pub mod ma;
pub mod model;
pub mod sparse;
pub mod flow;
pub mod static_solver;
pub mod barrier;
pub mod verify;
pub mod io;
pub mod config;
pub mod cli;
