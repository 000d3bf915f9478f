use super::{Graph, NnError, ParamStore, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Half step of the coarser central difference; the estimate is the
    /// Richardson extrapolation of steps `h` and `h / 2`.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, coords_per_param: 6, seed: 0, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Coordinates whose difference interval crossed a ReLU kink.
    pub skipped_kinks: usize,
}

/// Times the step is divided by ten when it straddles a ReLU kink.
pub const KINK_RETRIES: usize = 3;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients produced by [`Graph::backward`] against central
/// differences of `loss`, which must build a fresh graph from `store` and
/// return its scalar loss node. Coordinates whose perturbation changes any
/// ReLU activation pattern are retried with smaller steps and skipped if the
/// kink persists.
pub fn grad_check<F, E>(store: &mut ParamStore<f64>, mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let base_signature = g.relu_signature();
    g.backward(l, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut eval = |store: &mut ParamStore<f64>| -> Result<(f64, u64), E> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok((g.value(l).data[0], g.relu_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.value.len())).collect();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0, skipped_kinks: 0 };
    for (id, len) in ids {
        let count = opts.coords_per_param.min(len);
        for i in sample(&mut rng, len, count) {
            let orig = store.get(id).value.data[i];
            let mut step = opts.step;
            let mut numeric = None;
            for _ in 0..=KINK_RETRIES {
                let mut central = |h: f64| -> Result<Option<f64>, E> {
                    store.get_mut(id).value.data[i] = orig + h;
                    let plus = eval(store)?;
                    store.get_mut(id).value.data[i] = orig - h;
                    let minus = eval(store)?;
                    store.get_mut(id).value.data[i] = orig;
                    let smooth = plus.1 == base_signature && minus.1 == base_signature;
                    Ok(smooth.then(|| (plus.0 - minus.0) / (2.0 * h)))
                };
                if let (Some(coarse), Some(fine)) = (central(step)?, central(step / 2.0)?) {
                    numeric = Some((4.0 * fine - coarse) / 3.0);
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let err = relative_error(analytic[id.0][i], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic[id.0][i], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm1d, Conv2d, Linear, Mode, Tensor};
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(1.0, -1.0, 1e-6), 2.0);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng);
        let fc = Linear::new(&mut store, "fc", 3 * 3 * 4 + 2, 5, &mut rng);
        let bn = BatchNorm1d::new(&mut store, "bn", 5);
        let head_a = Linear::new(&mut store, "a", 5, 2, &mut rng);
        let head_b = Linear::new(&mut store, "b", 5, 3, &mut rng);
        for (_, p) in store.iter_mut() {
            if p.trainable {
                p.value.data.iter_mut().for_each(|v| *v += 0.1);
            }
        }
        let x = random(&mut rng, vec![3, 2, 6, 7]);
        let side = random(&mut rng, vec![3, 2]);
        let ta = random(&mut rng, vec![3, 2]);
        let tb = random(&mut rng, vec![3, 3]);
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.input(x.clone());
                let h = conv.forward(g, s, xi)?;
                let h = g.relu(h);
                let h = g.reshape(h, vec![3, 36])?;
                let si = g.input(side.clone());
                let h = g.concat(&[h, si])?;
                let h = fc.forward(g, s, h)?;
                let h = bn.forward(g, s, h, Mode::Train)?;
                let h = g.tanh(h);
                let a = head_a.forward(g, s, h)?;
                let a = g.tanh(a);
                let b = head_b.forward(g, s, h)?;
                let b = g.sigmoid(b);
                let la = g.mse(a, &ta)?;
                let lb = g.mse(b, &tb)?;
                let lb = g.scale_gradient(lb, 1.0);
                g.weighted_sum(&[(0.7, la), (1.3, lb)])
            },
            GradCheckOptions { coords_per_param: 20, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert!(report.checked > 50);
    }

    #[test]
    fn eval_mode_batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 4, 3, &mut rng);
        let bn = BatchNorm1d::new(&mut store, "bn", 3);
        store.get_mut(bn.running_mean).value.data = vec![0.1, -0.2, 0.3];
        store.get_mut(bn.running_var).value.data = vec![0.5, 2.0, 1.5];
        let x = random(&mut rng, vec![1, 4]);
        let t = random(&mut rng, vec![1, 3]);
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.input(x.clone());
                let h = fc.forward(g, s, xi)?;
                let h = bn.forward(g, s, h, Mode::Eval)?;
                g.mse(h, &t)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn sign_flipped_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 4, 3, &mut rng);
        let x = random(&mut rng, vec![2, 4]);
        let t = random(&mut rng, vec![2, 3]);
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.input(x.clone());
                let h = fc.forward(g, s, xi)?;
                let h = g.scale_gradient(h, -1.0);
                g.mse(h, &t)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error > 0.1);
    }

    #[test]
    fn kinks_are_skipped_not_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        let out = Linear::new(&mut store, "out", 2, 1, &mut rng);
        let x = Tensor::zeros(vec![1, 3]);
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.input(x.clone());
                let h = fc.forward(g, s, xi)?;
                let h = g.relu(h);
                let h = out.forward(g, s, h)?;
                g.mse(h, &t)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 2);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }
}
