//! Central-finite-difference verification of analytic gradients. The probe
//! only ever calls the forward pass, so it stays independent of the tape's
//! backward implementation.
//!
//! A coordinate passes when `|analytic - fd| <= atol + rtol * max(|analytic|,
//! |fd|)`; the absolute floor keeps vanishing gradients from being judged on
//! relative error alone.

use rand::RngExt;

use super::init;
use super::params::{Gradients, ParamStore};

pub struct GradCheckOptions {
    pub coords_per_param: usize,
    pub seed: u64,
    /// Step is `h_scale * max(1, |theta|)`. Losses with many L1/ReLU kinks
    /// want a small step so no kink falls inside the stencil.
    pub h_scale: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_param: 4,
            seed: 17,
            h_scale: 1e-6,
            rtol: 1e-3,
            atol: 1e-9,
        }
    }
}

pub struct GradCheckReport {
    pub checked: usize,
    /// Worst `|a - fd| / (atol + rtol * max(|a|, |fd|))`; passing means <= 1.
    pub max_violation: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.max_violation <= 1.0
    }

    pub fn describe(&self) -> String {
        match &self.worst {
            Some((name, idx, analytic, fd)) => format!(
                "checked {} coords, max violation {:.3} at {}[{}] (analytic {:.6e}, fd {:.6e})",
                self.checked, self.max_violation, name, idx, analytic, fd
            ),
            None => format!(
                "checked {} coords, max violation {:.3}",
                self.checked, self.max_violation
            ),
        }
    }
}

/// Compare the analytic gradient of `run` against central differences on a
/// seeded coordinate sample of every parameter. `run` must be deterministic
/// in the store values (fix all random draws outside of it).
pub fn check_gradients<F>(store: &mut ParamStore, run: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    let (_, analytic) = run(store);
    let mut rng = init::rng_for(opts.seed, "gradcheck-coords");

    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut checked = 0usize;
    let mut max_violation = 0.0f64;
    let mut worst = None;

    for id in ids {
        let len = store.value(id).len();
        let mut coords: Vec<usize> = (0..opts.coords_per_param.min(len))
            .map(|_| rng.random_range(0..len))
            .collect();
        coords.sort_unstable();
        coords.dedup();

        for coord in coords {
            let orig = store.value(id).as_slice().unwrap()[coord];
            let h = opts.h_scale * orig.abs().max(1.0);

            store.value_mut(id).as_slice_mut().unwrap()[coord] = orig + h;
            let (loss_plus, _) = run(store);
            store.value_mut(id).as_slice_mut().unwrap()[coord] = orig - h;
            let (loss_minus, _) = run(store);
            store.value_mut(id).as_slice_mut().unwrap()[coord] = orig;

            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let a: f64 = analytic
                .get(id)
                .map(|g| g.as_standard_layout().as_slice().unwrap()[coord])
                .unwrap_or(0.0);
            let violation = (a - fd).abs() / (opts.atol + opts.rtol * a.abs().max(fd.abs()));
            if violation > max_violation {
                max_violation = violation;
                worst = Some((store.name(id).to_string(), coord, a, fd));
            }
            checked += 1;
        }
    }

    GradCheckReport {
        checked,
        max_violation,
        worst,
    }
}
