//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

/// Compares the gradient reported by `f` with central differences at `coords`.
///
/// `f` maps a flat parameter tensor to `(loss, gradient)`; only the loss is
/// used at the perturbed points. `h` must lie in `[1e-4, 1e-2]`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &Tensor,
    h: f32,
    coords: &[usize],
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&Tensor) -> Result<(f32, Tensor), TensorError>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(TensorError::Contract(format!("step {h} outside [1e-4, 1e-2]")));
    }
    let (loss, grad) = f(params)?;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    if grad.numel() != params.numel() {
        return Err(TensorError::Contract("gradient size differs from parameters".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        checked: 0,
    };
    let mut probe = params.clone();
    for &c in coords {
        let x = params.data()[c];
        let up = x + h;
        let down = x - h;
        probe.data_mut()[c] = up;
        let (f_up, _) = f(&probe)?;
        probe.data_mut()[c] = down;
        let (f_down, _) = f(&probe)?;
        probe.data_mut()[c] = x;
        if !f_up.is_finite() || !f_down.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" });
        }
        // Use the representable step, not the nominal one.
        let step = f64::from(up) - f64::from(down);
        let g_fd = (f64::from(f_up) - f64::from(f_down)) / step;
        let g_ad = f64::from(grad.data()[c]);
        let rel = (g_ad - g_fd).abs() / 1f64.max(g_ad.abs()).max(g_fd.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = c;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `count` distinct coordinates out of `numel`, reproducible from `seed`.
pub fn sample_coords(numel: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, numel, count.min(numel)).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn quadratic_scalar() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let f = |p: &Tensor| {
            let x = p.data()[0];
            Ok((x * x, Tensor::new(vec![1], vec![2.0 * x]).unwrap()))
        };
        let r = finite_diff_check(f, &w, 1e-3, &[0]).unwrap();
        assert!(r.max_rel_error < 1e-3);
        assert_abs_diff_eq!(6.0, 2.0 * 3.0f32);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let w = Tensor::zeros(&[1]);
        let f = |_: &Tensor| Ok((0.0, Tensor::zeros(&[1])));
        assert!(finite_diff_check(f, &w, 0.5, &[0]).is_err());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let w = Tensor::zeros(&[1]);
        let f = |_: &Tensor| Ok((f32::NAN, Tensor::zeros(&[1])));
        assert_eq!(
            finite_diff_check(f, &w, 1e-3, &[0]).unwrap_err(),
            TensorError::NonFinite { op: "finite_diff_check" }
        );
    }

    #[test]
    fn cross_entropy_matches_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let targets = [1u32, 5, 0, 3];
        let f = |p: &Tensor| {
            let mut g = Graph::new();
            let l = g.param(p.clone())?;
            let loss = g.cross_entropy(l, &targets, 99)?;
            let mut grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads.take(l).unwrap()))
        };
        let all: Vec<usize> = (0..24).collect();
        let r = finite_diff_check(f, &logits, 1e-3, &all).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");

        // Analytic form: (softmax − onehot) / N.
        let (_, grad) = f(&logits).unwrap();
        for (row, &t) in targets.iter().enumerate() {
            let lr = logits.row(row);
            let max = lr.iter().copied().fold(f32::MIN, f32::max);
            let z: f32 = lr.iter().map(|v| (v - max).exp()).sum();
            for (j, &l) in lr.iter().enumerate() {
                let p = (l - max).exp() / z;
                let want = (p - if j == t as usize { 1.0 } else { 0.0 }) / 4.0;
                assert_abs_diff_eq!(grad.row(row)[j], want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sample_coords_is_reproducible_and_distinct() {
        let a = sample_coords(1000, 20, 5);
        assert_eq!(a, sample_coords(1000, 20, 5));
        let mut b = a.clone();
        b.dedup();
        assert_eq!(b.len(), 20);
    }
}
