// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distance;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod quant;
pub mod topo_loss;
pub mod topology;
pub mod volume_io;
