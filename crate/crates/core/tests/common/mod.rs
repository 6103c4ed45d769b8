#![allow(dead_code)]

pub mod batches;
pub mod gradcheck;
pub mod synthetic;
