//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    pub tol: f64,
    /// Params with more coordinates than this are checked on a random subset.
    pub max_coords: usize,
    pub sample_seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 1000,
            sample_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub tol: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `grad_fn` runs forward and backward (grads are zeroed beforehand) and
/// returns the loss; `loss_fn` evaluates the loss only.
pub fn finite_diff_check<M, G, L>(model: &mut M, mut grad_fn: G, mut loss_fn: L, opts: &FdOptions) -> Result<FdReport>
where
    M: ParamSet,
    G: FnMut(&mut M) -> Result<f64>,
    L: FnMut(&M) -> Result<f64>,
{
    model.zero_grads();
    let base = grad_fn(model)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {base}")));
    }
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut entries = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let n = analytic[pi].len();
        let coords: Vec<usize> = if n > opts.max_coords {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = model.params()[pi].value.data()[c];
            model.params_mut()[pi].value.data_mut()[c] = orig + opts.eps;
            let plus = loss_fn(model)?;
            model.params_mut()[pi].value.data_mut()[c] = orig - opts.eps;
            let minus = loss_fn(model)?;
            model.params_mut()[pi].value.data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss perturbing {name}[{c}]")));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[pi][c], numeric));
        }
        entries.push(FdEntry {
            name,
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(FdReport { entries, tol: opts.tol })
}
