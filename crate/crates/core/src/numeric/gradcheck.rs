//! Central-difference gradient checking in f64.

use super::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Outer step; the estimate combines central differences at `step` and
    /// `step / 2` (Richardson), so truncation error is fourth order.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub floor: f64,
    /// Probe at most this many coordinates per parameter (evenly strided).
    pub max_coords: usize,
    /// Times a coordinate may be re-probed at `step / 8` when the two
    /// central differences disagree by more than `tolerance` (a ReLU kink
    /// inside the probe interval). 0 disables.
    pub shrink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 3e-5,
            tolerance: 1e-6,
            floor: 1e-4,
            max_coords: usize::MAX,
            shrink_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub non_finite: bool,
    pub tolerance: f64,
    /// Coordinates that needed a smaller step.
    pub reprobed: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error < self.tolerance
    }
}

/// Compares analytic and numeric gradients of a scalar loss.
///
/// `loss(store, backward)` must return the loss; when `backward` is true it
/// also accumulates analytic gradients into `store` (which arrives zeroed).
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&mut ParamStore<f64>, bool) -> f64,
{
    store.zero_grad();
    let base = loss(store, true);
    let mut non_finite = !base.is_finite() || !store.grads_finite();
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_error = 0.0f64;
    let mut reprobed = 0usize;
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.value(id).numel();
        let stride = n.div_ceil(opts.max_coords.max(1)).max(1);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            let mut central = |h: f64| {
                store.value_mut(id).data_mut()[i] = orig + h;
                let up = loss(store, false);
                store.value_mut(id).data_mut()[i] = orig - h;
                let down = loss(store, false);
                store.value_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            };
            let mut h = opts.step;
            let (mut coarse, mut fine) = (central(h), central(h / 2.0));
            for _ in 0..opts.shrink_retries {
                if (coarse - fine).abs() <= opts.tolerance * coarse.abs().max(fine.abs()).max(opts.floor) {
                    break;
                }
                // Smooth losses agree to O(h^2) here; a gap this large means
                // a kink lies within the probe interval.
                if h == opts.step {
                    reprobed += 1;
                }
                h /= 8.0;
                (coarse, fine) = (central(h), central(h / 2.0));
            }
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[pi][i];
            if !numeric.is_finite() || !a.is_finite() {
                non_finite = true;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.param(id).name.clone(), worst));
    }
    store.zero_grad();
    GradCheckReport {
        per_param,
        max_rel_error,
        non_finite,
        tolerance: opts.tolerance,
        reprobed,
    }
}
