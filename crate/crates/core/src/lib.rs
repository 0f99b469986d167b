pub mod attention;
pub mod bsa;
pub mod detector;
pub mod data;
pub mod error;
pub mod geom;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod pipeline;
