use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bindings, Expr, NodeId, NumericsError, Tensor};

/// Settings for [`finite_difference_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub eps: f64,
    /// Coordinates checked per input; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Magnitude below which gradients are compared absolutely.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: 64, seed: 0, floor: 1e-8 }
    }
}

/// Compares reverse-mode gradients with central differences in 64-bit.
///
/// Returns the maximum over sampled coordinates of
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_difference_check<B: Bindings<f64> + ?Sized>(
    expr: &Expr,
    root: NodeId,
    bindings: &B,
    wrt: &[&str],
    config: FdConfig,
) -> Result<f64, NumericsError> {
    let root_shape = expr.shape(root);
    if root_shape.iter().product::<usize>() != 1 {
        return Err(NumericsError::NonScalarRoot { shape: root_shape.to_vec() });
    }
    let mut local: HashMap<String, Tensor<f64>> = HashMap::new();
    for name in expr.input_names() {
        let t = bindings.lookup(name).ok_or_else(|| NumericsError::Unbound { name: name.to_string() })?;
        local.insert(name.to_string(), t.clone());
    }
    let analytic = expr.forward(&local)?.backward(root, wrt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    for name in wrt {
        let n = local[*name].len();
        let coords: Vec<usize> = if n <= config.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = local[*name].data()[i];
            local.get_mut(*name).unwrap().data_mut()[i] = original + config.eps;
            let plus = expr.forward(&local)?.value(root).item();
            local.get_mut(*name).unwrap().data_mut()[i] = original - config.eps;
            let minus = expr.forward(&local)?.value(root).item();
            local.get_mut(*name).unwrap().data_mut()[i] = original;

            let fd = (plus - minus) / (2.0 * config.eps);
            let ad = analytic[*name].data()[i];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(config.floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
