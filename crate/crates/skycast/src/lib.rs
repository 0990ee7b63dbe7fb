//! Photovoltaic nowcasting from sky images and historical power values.
//!
//! The crate is organised around the path from raw capture data to a
//! 1-to-10-minute-ahead power forecast:
//!
//! - [`tensor`] — dense n-d arrays with reverse-mode automatic
//!   differentiation, the Adam optimizer and a finite-difference checker.
//! - [`layers`] — dense stacks, batch normalization, convolutions, fire
//!   modules, the sky-image encoder/decoder and a 2-layer LSTM.
//! - [`models`] — the four forecast architectures (MLP, CNN, LSTM,
//!   LSTM-Full) and their losses, including the weighted multi-task
//!   objective.
//! - [`datapipe`] — ingestion and preprocessing: log-space power
//!   normalization, minute averaging, invalid-data filtering, exposure
//!   stacking, HDR merging, fisheye solid angles, solar position and
//!   sliding-window sample construction.
//! - [`skysim`] — a parametric synthetic sky/PV generator used as the
//!   training corpus and as a verification oracle.
//! - [`eval`] — persistence baseline, MAE/RMSE/skill-score metrics and
//!   per-weather-class reports.
//! - [`train`] — the training loop with validation-based model selection.
//! - [`checkpoint`] — on-disk model snapshots (JSON manifest + binary
//!   tensors).

pub mod checkpoint;
pub mod datapipe;
pub mod eval;
pub mod layers;
pub mod models;
pub mod skysim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Element, Tensor};

use std::sync::OnceLock;

static THREAD_POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Configure the number of worker threads used inside numeric kernels.
///
/// Takes effect once; later calls are ignored. When never called, kernels
/// run on a pool sized to the available parallelism. Thread count does not
/// affect results: kernels only parallelize over disjoint output regions.
pub fn set_threads(n: usize) {
    let _ = THREAD_POOL.set(
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("failed to build thread pool"),
    );
}

pub(crate) fn pool() -> &'static rayon::ThreadPool {
    THREAD_POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .build()
            .expect("failed to build thread pool")
    })
}
