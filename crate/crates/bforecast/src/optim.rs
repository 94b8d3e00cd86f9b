//! Adam optimizer and a central-finite-difference gradient checker.

use rand::SeedableRng;

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Bias-corrected adaptive-moment optimizer state. Moment buffers are keyed
/// by position in the registered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            epsilon: S::from_f64(1e-8),
            step: 0,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One update over the registered parameter set. `grads[i]` must hold the
    /// gradient of parameter `i`; a missing or misshaped gradient is rejected.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<Vec<S>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adam_step: registered {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(TensorError::MissingGradient(format!("parameter #{i}"))),
                Some(g) if g.len() != self.m[i].len() => {
                    return Err(TensorError::InvalidArgument(format!(
                        "adam_step: gradient #{i} has {} elements, expected {}",
                        g.len(),
                        self.m[i].len()
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = S::from_f64(self.step as f64);
        let bc1 = S::one() - self.beta1.powf(t);
        let bc2 = S::one() - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.as_ref().expect("checked above");
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data_mut()[i] = p.data()[i] - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Per-parameter-block result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckBlock {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Entries whose perturbation straddled a relu/maxpool kink.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<GradCheckBlock>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<30} max rel err {:>12.3e} at [{}]  {}{}",
                b.name,
                b.max_rel_error,
                b.worst_index,
                if b.max_rel_error <= self.tolerance { "ok" } else { "FAIL" },
                if b.skipped > 0 { format!("  ({} kink entries skipped)", b.skipped) } else { String::new() }
            )?;
        }
        Ok(())
    }
}

/// Compare analytic gradients against central differences with step 1e-5.
///
/// `loss_fn` evaluates the model loss for a candidate parameter set;
/// `analytic[i]` is the gradient of block `i` as produced by `backward`.
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
/// Meant to run with `S = f64`.
pub fn grad_check<S, F>(
    loss_fn: &mut F,
    params: &[(String, Tensor<S>)],
    analytic: &[Vec<S>],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&[(String, Tensor<S>)]) -> Result<S>,
{
    grad_check_entries(loss_fn, params, analytic, tolerance, |numel| (0..numel).collect())
}

/// [`grad_check`] over a random subset of entries per tensor: exhaustive
/// checks are quadratic in parameter count, so large models get spot-checked
/// with a deterministic sample instead.
pub fn grad_check_sampled<S, F>(
    loss_fn: &mut F,
    params: &[(String, Tensor<S>)],
    analytic: &[Vec<S>],
    tolerance: f64,
    entries_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&[(String, Tensor<S>)]) -> Result<S>,
{
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    grad_check_entries(loss_fn, params, analytic, tolerance, |numel| {
        if numel <= entries_per_tensor {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, entries_per_tensor).into_vec()
        }
    })
}

fn grad_check_entries<S, F, I>(
    loss_fn: &mut F,
    params: &[(String, Tensor<S>)],
    analytic: &[Vec<S>],
    tolerance: f64,
    mut pick: I,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&[(String, Tensor<S>)]) -> Result<S>,
    I: FnMut(usize) -> Vec<usize>,
{
    let h = 1e-5;
    let mut blocks = Vec::with_capacity(params.len());
    let mut work: Vec<(String, Tensor<S>)> = params.to_vec();
    let l0 = loss_fn(&work)?.to_f64();
    for (bi, (name, p)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut skipped = 0usize;
        for ei in pick(p.numel()) {
            let orig = work[bi].1.data()[ei];
            work[bi].1.data_mut()[ei] = orig + S::from_f64(h);
            let lp = loss_fn(&work)?.to_f64();
            work[bi].1.data_mut()[ei] = orig - S::from_f64(h);
            let lm = loss_fn(&work)?.to_f64();
            work[bi].1.data_mut()[ei] = orig;
            // a perturbation that straddles a relu/maxpool kink makes the
            // two one-sided slopes disagree; such entries carry no
            // information about the analytic gradient and are skipped
            let fwd = (lp - l0) / h;
            let bwd = (l0 - lm) / h;
            if (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()).max(1e-6) {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[bi][ei].to_f64();
            // the floor keeps near-zero gradients from turning finite
            // difference roundoff into spurious relative error
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = ei;
            }
        }
        blocks.push(GradCheckBlock {
            name: name.clone(),
            max_rel_error: max_rel,
            worst_index: worst,
            skipped,
        });
    }
    Ok(GradCheckReport { blocks, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::<f64>::new(1e-3, &[3]);
        let mut params = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        state.step(&mut params, &[Some(vec![0.0; 3])]).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let lr = 0.05;
        let mut state = AdamState::<f64>::new(lr, &[2]);
        let mut params = vec![Tensor::zeros(&[2])];
        state.step(&mut params, &[Some(vec![3.0, -0.7])]).unwrap();
        // bias correction makes m_hat / sqrt(v_hat) ~ sign(g) on the first step
        assert!((params[0].data()[0] + lr).abs() < 1e-6);
        assert!((params[0].data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut state = AdamState::<f64>::new(1e-3, &[2]);
        let mut params = vec![Tensor::zeros(&[2])];
        assert!(matches!(
            state.step(&mut params, &[None]),
            Err(TensorError::MissingGradient(_))
        ));
    }

    #[test]
    fn scalar_problem_converges() {
        // minimize mse(w, 5) from w = 0 with lr = 0.1
        let mut state = AdamState::<f64>::new(0.1, &[1]);
        let mut params = vec![Tensor::scalar(0.0)];
        for _ in 0..50 {
            let mut g = Graph::new();
            let w = g.param(params[0].clone());
            let target = g.input(Tensor::scalar(5.0));
            let loss = g.mse_loss(w, target).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(w).unwrap().to_vec();
            state.step(&mut params, &[Some(grad)]).unwrap();
        }
        // reference value from an independent Adam implementation (same
        // hyperparameters): w = 4.0988812 after 50 steps, 4.9555 after 60
        assert!((params[0].data()[0] - 4.0988809).abs() < 1e-6, "w = {}", params[0].data()[0]);
        for _ in 0..10 {
            let mut g = Graph::new();
            let w = g.param(params[0].clone());
            let target = g.input(Tensor::scalar(5.0));
            let loss = g.mse_loss(w, target).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(w).unwrap().to_vec();
            state.step(&mut params, &[Some(grad)]).unwrap();
        }
        assert!((params[0].data()[0] - 5.0).abs() < 0.5, "w = {}", params[0].data()[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut state = AdamState::<f32>::new(1e-2, &[4]);
            let mut params = vec![Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()];
            for i in 0..10 {
                let g = vec![0.3 - 0.01 * i as f32; 4];
                state.step(&mut params, &[Some(g)]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_linear_is_near_exact() {
        let params = vec![("w".to_string(), Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())];
        // L = 2 w0 - w1 + 0.5 w2
        let mut loss = |p: &[(String, Tensor<f64>)]| {
            let d = p[0].1.data();
            Ok(2.0 * d[0] - d[1] + 0.5 * d[2])
        };
        let analytic = vec![vec![2.0, -1.0, 0.5]];
        let report = grad_check(&mut loss, &params, &analytic, 1e-9).unwrap();
        assert!(report.passed(), "\n{report}");
    }

    #[test]
    fn grad_check_detects_corrupted_backward() {
        let params = vec![("w".to_string(), Tensor::from_vec(&[2], vec![0.4, -0.8]).unwrap())];
        let mut loss = |p: &[(String, Tensor<f64>)]| {
            let d = p[0].1.data();
            Ok(d[0] * d[0] + d[1] * d[1])
        };
        // deliberately corrupted analytic gradient
        let corrupted = vec![vec![2.0 * 0.4 * 1.5, 2.0 * -0.8]];
        let report = grad_check(&mut loss, &params, &corrupted, 1e-4).unwrap();
        assert!(report.max_rel_error() > 1e-2, "\n{report}");
    }
}
