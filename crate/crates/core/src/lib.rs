pub mod archive;
pub mod geo;
pub mod gtfs;
pub mod gtfs_rt;
pub mod inference;
pub mod ingest;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod resolver;
mod util;
pub mod writer;
