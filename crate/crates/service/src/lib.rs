//! HTTP session service and command-line tools for running ordinal-feedback
//! tuning studies on top of the `fracsls` crate.

pub mod api;
pub mod cli;
pub mod study;
