pub mod autodiff;
pub mod data;
pub mod graph;
pub mod model;
pub mod recurrent;
pub mod train;
pub mod transformer;
