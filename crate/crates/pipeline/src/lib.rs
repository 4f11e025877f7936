//! Desk-scale cerebellum lobule segmentation pipeline: phantom library,
//! atlas fusion, cascade training, ensemble inference, evaluation harnesses
//! and volumetric reports.

pub mod atlas;
pub mod config;
pub mod data;
pub mod experiments;
pub mod library;
pub mod report;
pub mod segment;
pub mod train;

pub use config::{ChannelMode, ResolutionMode, RunConfig, Variant};

/// Configures the global worker pool. A no-op without the `parallel` feature.
pub fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}
