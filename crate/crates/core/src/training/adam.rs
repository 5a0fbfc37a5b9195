//! Adam optimizer over the two-network parameter set.
//!
//! Standard adaptive-moment estimation with bias correction. The moment
//! buffers mirror the parameter structure layer by layer, so the update is
//! a flat elementwise pass with no index bookkeeping.

use crate::field::FieldParams;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Adam {
    m: FieldParams,
    v: FieldParams,
    steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    /// Fresh optimizer state shaped like `template`.
    pub fn new(template: &FieldParams) -> Self {
        Self {
            m: template.zeros_like(),
            v: template.zeros_like(),
            steps: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update: `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut FieldParams, grads: &FieldParams, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let Self {
            m, v, beta1, beta2, epsilon, ..
        } = self;
        for ((p_mlp, g_mlp), (m_mlp, v_mlp)) in [&mut params.coarse, &mut params.fine]
            .into_iter()
            .zip([&grads.coarse, &grads.fine])
            .zip([&mut m.coarse, &mut m.fine].into_iter().zip([&mut v.coarse, &mut v.fine]))
        {
            for ((p_l, g_l), (m_l, v_l)) in p_mlp
                .layers_mut()
                .into_iter()
                .zip(g_mlp.layers())
                .zip(m_mlp.layers_mut().into_iter().zip(v_mlp.layers_mut()))
            {
                debug_assert_eq!((p_l.rows, p_l.cols), (g_l.rows, g_l.cols));
                update(&mut p_l.w, &g_l.w, &mut m_l.w, &mut v_l.w, *beta1, *beta2, *epsilon, lr, bc1, bc2);
                update(&mut p_l.b, &g_l.b, &mut m_l.b, &mut v_l.b, *beta1, *beta2, *epsilon, lr, bc1, bc2);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    debug_assert!(p.len() == g.len() && p.len() == m.len() && p.len() == v.len());
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn tiny_params(seed: u64) -> FieldParams {
        let cfg = FieldConfig {
            levels_pos: 2,
            levels_dir: 1,
            trunk_depth: 2,
            trunk_width: 16,
            skip_layer: 1,
            color_hidden: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldParams::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_signs() {
        // With bias correction, the first update is lr·g/(|g| + ε), which
        // is lr·sign(g) up to ε/|g|; only check where |g| dwarfs ε.
        let mut params = tiny_params(1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.accumulate(&params);
        let mut adam = Adam::new(&params);
        let lr = 0.01;
        adam.step(&mut params, &grads, lr);
        assert_eq!(adam.steps(), 1);
        let mut checked = 0usize;
        for i in 0..params.param_count() {
            let g = before.param(i);
            if g.abs() < 1e-2 {
                continue;
            }
            checked += 1;
            let expected = before.param(i) - lr * g.signum();
            assert!(
                (params.param(i) - expected).abs() < 1e-4 * lr,
                "param {i}: {} vs {}",
                params.param(i),
                expected
            );
        }
        assert!(checked > 100, "only {checked} params were large enough to check");
    }

    #[test]
    fn descends_a_quadratic_bowl() {
        // Gradient of ½‖θ‖² is θ itself; Adam should crush every weight
        // toward zero.
        let mut params = tiny_params(2);
        let initial_max = (0..params.param_count())
            .map(|i| params.param(i).abs())
            .fold(0.0f64, f64::max);
        let mut adam = Adam::new(&params);
        for _ in 0..500 {
            let mut grads = params.zeros_like();
            grads.accumulate(&params);
            adam.step(&mut params, &grads, 0.01);
        }
        let final_max = (0..params.param_count())
            .map(|i| params.param(i).abs())
            .fold(0.0f64, f64::max);
        assert!(initial_max > 0.1, "init too small: {initial_max}");
        assert!(final_max < 0.05, "did not converge: {final_max}");
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = tiny_params(3);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 0.1);
        for i in 0..params.param_count() {
            assert_eq!(params.param(i), before.param(i));
        }
    }
}
