pub mod bo;
pub mod cli;
pub mod data;
pub mod format;
pub mod gp;
pub mod hyper;
pub mod kernels;
