pub mod attribution;
pub mod autodiff;
pub mod eval;
pub mod model;
pub mod synth;
pub mod training;
