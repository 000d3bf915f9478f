use super::{Graph, Mode, NnError, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor { shape, data }
}

/// Fully connected layer with weight `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_init(rng, vec![out_dim, in_dim], in_dim), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), true);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.add(format!("{name}.weight"), uniform_init(rng, vec![out_channels, in_channels, kernel, kernel], fan_in), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), true);
        Self { w, b, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.padding - self.kernel) / self.stride + 1, (w + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalisation over the feature axis of `[B, F]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm1d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor { shape: vec![dim], data: vec![T::one(); dim] }, true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), true);
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(vec![dim]), false);
        let running_var = store.add(format!("{name}.running_var"), Tensor { shape: vec![dim], data: vec![T::one(); dim] }, false);
        Self { gamma, beta, running_mean, running_var, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var, NnError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            (self.running_mean, self.running_var),
            store,
            mode,
            T::from_f64(BN_MOMENTUM),
            T::from_f64(BN_EPSILON),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 100, 7, &mut rng);
        assert!(store.get(l.w).value.data.iter().all(|v| v.abs() <= 0.1));
        assert!(store.get(l.b).value.data.iter().all(|&v| v == 0.0));
        let c = Conv2d::new(&mut store, "conv", 6, 16, 3, 2, 1, &mut rng);
        assert_eq!(store.get(c.w).value.shape, vec![16, 6, 3, 3]);
        assert_eq!(c.output_size(48, 64), (24, 32));
        let bn = BatchNorm1d::new(&mut store, "bn", 5);
        assert!(!store.get(bn.running_var).trainable);
        assert_eq!(store.trainable_count(), 700 + 7 + 864 + 16 + 10);
    }
}
