//! Path-integrated explanation maps over intermediate network representations.
//!
//! The crate is organised around five modules:
//!
//! - [`adapters`]: capture/substitute/differentiate interface over vision
//!   models, plus small built-in reference models.
//! - [`attribution`]: baselines, linear paths, Riemann integration of the
//!   activation- or attention-aware integrand, layer-set aggregation.
//! - [`rollout`]: attention rollout and gradient rollout.
//! - [`metrics`]: perturbation AUCs, confidence drop/increase, information
//!   curves and segmentation scores.
//! - [`sanity`]: parameter- and data-randomization protocols.
//!
//! [`harness`] wraps them in a configuration-driven CLI.

pub mod adapters;
pub mod attribution;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rollout;
pub mod sanity;
pub mod tensor;

pub use error::{DixError, Result};
pub use tensor::Tensor;

use std::sync::atomic::{AtomicBool, Ordering};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Forces serial, fixed-order evaluation everywhere work could otherwise fan out.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Evaluates `f` for every index in `0..n`, each worker on its own model clone.
///
/// Results come back in index order. In deterministic mode, or for a single
/// item, everything runs serially on one clone.
pub(crate) fn fan_out<T, F>(model: &adapters::ModelHandle, n: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&mut adapters::ModelHandle, usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    use std::sync::Mutex;

    if is_deterministic() || n <= 1 {
        let mut m = model.clone();
        return (0..n).map(|i| f(&mut m, i)).collect();
    }
    let template = Mutex::new(model.clone());
    (0..n)
        .into_par_iter()
        .map_init(
            || template.lock().expect("model template poisoned").clone(),
            |m, i| f(m, i),
        )
        .collect()
}
