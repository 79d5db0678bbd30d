#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod evalkit;
pub mod models;
pub mod objectives;
pub mod textcorpus;
pub mod trainer;
pub mod worldsim;
