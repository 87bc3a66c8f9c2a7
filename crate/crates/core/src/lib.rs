pub mod autodiff;
pub mod bayes;
pub mod commands;
pub mod error;
pub mod io;
pub mod msm;
pub mod nuisance;
pub mod sim;
pub mod tmle;

pub use error::{Error, Result};
