//! Differentiable building blocks: ReLU MLPs with a reverse-mode tape,
//! softmax cross-entropy, the Adam optimizer and a central finite-difference
//! gradient checker.
//!
//! Everything runs in `f64`. Forward passes record the per-layer inputs they
//! need for an exact backward pass; `ReLU'(0)` is defined as 0 so gradient
//! checks can stay away from the kink.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected input width {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("tape does not match parameters: {0}")]
    StaleTape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch between parameters and {what}: {detail}")]
    ShapeMismatch { what: &'static str, detail: String },
    #[error("loss is not finite at probe {0}")]
    NonFiniteLoss(String),
    #[error("an MLP needs at least one layer")]
    Empty,
}

/// One dense layer: `y = x · Wᵀ + b` with `W` of shape `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A multi-layer perceptron with ReLU between layers and a linear last layer.
///
/// The same struct doubles as the gradient container: a gradient bundle for
/// an `Mlp` is an `Mlp` of identical shape whose entries hold `∂L/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Cached layer inputs from a forward pass, consumed by [`Mlp::backward`].
///
/// `inputs[l]` is the batch fed into layer `l`; for `l >= 1` it is also the
/// post-ReLU activation of layer `l-1`, which encodes the ReLU mask
/// (`ReLU'(z) = 1` iff the stored activation is `> 0`).
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
}

impl MlpTape {
    /// The input that was fed to the first layer.
    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }

    pub fn batch_len(&self) -> usize {
        self.inputs[0].nrows()
    }
}

impl Mlp {
    /// He-uniform initialization (`W ~ U[-√(6/fan_in), √(6/fan_in)]`, zero biases).
    pub fn he_init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let limit = (6.0 / d_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((d_out, d_in), |_| rng.gen_range(-limit..limit));
                Layer {
                    weight,
                    bias: Array1::zeros(d_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    /// All-zero parameters of the given layer dims. Used for gradient buffers.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Mlp { layers }
    }

    /// A zero-valued gradient bundle shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Layer widths as `[d_in, hidden.., d_out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Forward pass on a batch (one row per sample). Returns the output batch
    /// and the tape needed for [`Mlp::backward`].
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpTape), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Empty);
        }
        if x.ncols() != self.in_dim() {
            return Err(NnError::InputWidth {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(a);
            a = if l + 1 < n_layers {
                z.mapv_into(|v| if v > 0.0 { v } else { 0.0 })
            } else {
                z
            };
        }
        Ok((a, MlpTape { inputs }))
    }

    /// Reverse-mode pass. `dy` is `∂L/∂output`; returns `∂L/∂input` and the
    /// parameter gradients as an `Mlp`-shaped bundle.
    pub fn backward(
        &self,
        tape: &MlpTape,
        dy: &Array2<f64>,
    ) -> Result<(Array2<f64>, Mlp), NnError> {
        let n_layers = self.layers.len();
        if tape.inputs.len() != n_layers {
            return Err(NnError::StaleTape(format!(
                "tape has {} layer inputs, parameters have {} layers",
                tape.inputs.len(),
                n_layers
            )));
        }
        for (l, (layer, input)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if input.ncols() != layer.weight.ncols() {
                return Err(NnError::StaleTape(format!(
                    "layer {l} expects width {}, tape holds {}",
                    layer.weight.ncols(),
                    input.ncols()
                )));
            }
        }
        if dy.ncols() != self.out_dim() || dy.nrows() != tape.batch_len() {
            return Err(NnError::StaleTape(format!(
                "output gradient is {}x{}, expected {}x{}",
                dy.nrows(),
                dy.ncols(),
                tape.batch_len(),
                self.out_dim()
            )));
        }

        let mut grads = self.zeros_like();
        let mut da = dy.clone();
        for l in (0..n_layers).rev() {
            // ReLU mask for non-last layers: the stored input of layer l+1 is
            // the activation ReLU(z_l); positive entries mark active units.
            let dz = if l + 1 < n_layers {
                let act = &tape.inputs[l + 1];
                let mut dz = da;
                dz.zip_mut_with(act, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz
            } else {
                da
            };
            // Multiply into the preallocated buffer: keeps the gradient
            // arrays in standard layout regardless of operand strides.
            general_mat_mul(1.0, &dz.t(), &tape.inputs[l], 0.0, &mut grads.layers[l].weight);
            grads.layers[l].bias = dz.sum_axis(Axis(0));
            da = dz.dot(&self.layers[l].weight);
        }
        Ok((da, grads))
    }

    /// Accumulate another gradient bundle of identical shape into `self`.
    pub fn add_assign(&mut self, other: &Mlp) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Flat views over every parameter tensor, weights then bias per layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Mean softmax cross-entropy over a batch of logits.
///
/// Returns the scalar loss and `∂loss/∂logits = (softmax - onehot) / batch`,
/// stabilized by per-row max subtraction.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), NnError> {
    let (batch, classes) = (logits.nrows(), logits.ncols());
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch {
            what: "labels",
            detail: format!("{} labels for a batch of {batch}", labels.len()),
        });
    }
    for &label in labels {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
    }
    let mut dlogits = logits.clone();
    let mut loss = 0.0;
    for (row, &label) in dlogits.rows_mut().into_iter().zip(labels) {
        let row = row.into_slice().expect("standard layout");
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted_label = row[label] - max;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        // Log-sum-exp form: finite even when the true class's probability
        // underflows to zero.
        loss += sum.ln() - shifted_label;
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[label] -= 1.0;
    }
    let scale = 1.0 / batch as f64;
    dlogits *= scale;
    Ok((loss * scale, dlogits))
}

/// Adam moment estimates for a fixed list of parameter tensors.
///
/// The state is keyed by position: the slices passed to [`AdamState::step`]
/// must always come in the same order and with the same lengths as the
/// slices the state was created from.
#[derive(Debug, Clone)]
pub struct AdamState {
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize]) -> Self {
        AdamState {
            step_count: 0,
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<(), NnError> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(NnError::ShapeMismatch {
                what: "adam state",
                detail: format!(
                    "state holds {} tensors, got {} params / {} grads",
                    self.first_moment.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(NnError::ShapeMismatch {
                    what: "adam tensor",
                    detail: format!(
                        "tensor {i}: state {} / params {} / grads {}",
                        self.first_moment[i].len(),
                        p.len(),
                        g.len()
                    ),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Worst relative error between an analytic gradient and central finite
/// differences of `loss_fn`, probed coordinate by coordinate.
///
/// When the flat parameter vector is longer than `max_coords` (at least 256
/// are always probed), coordinates are sampled with a deterministic stride.
/// Relative error uses a `1e-6` floor so zero-gradient coordinates compare
/// against rounding noise rather than dividing by zero.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
    max_coords: usize,
) -> Result<f64, NnError>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic_grad.len() {
        return Err(NnError::ShapeMismatch {
            what: "analytic gradient",
            detail: format!("{} grads for {} params", analytic_grad.len(), params.len()),
        });
    }
    let n = params.len();
    let budget = max_coords.max(256).min(n);
    let stride = n.div_ceil(budget).max(1);
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    let mut idx = 0;
    while idx < n {
        let saved = probe[idx];
        probe[idx] = saved + step;
        let plus = loss_fn(&probe);
        probe[idx] = saved - step;
        let minus = loss_fn(&probe);
        probe[idx] = saved;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NnError::NonFiniteLoss(format!("coordinate {idx}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = analytic_grad[idx];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
        idx += stride;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_map_to_zero() {
        let mlp = Mlp::zeros(&[3, 4, 2]);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        let (y, _) = mlp.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut mlp = Mlp::zeros(&[3, 3]);
        mlp.layers[0].weight = Array2::eye(3);
        let x = array![[1.0, -2.0, 3.0], [4.0, 5.0, -6.0]];
        let (y, _) = mlp.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    #[allow(clippy::neg_multiply)] // keeps the weight-times-input spelling
    fn two_layer_forward_matches_hand_computation() {
        // Oracle: explicit per-element arithmetic of W2·relu(W1 x + b1) + b2.
        let mut mlp = Mlp::zeros(&[2, 2, 1]);
        mlp.layers[0].weight = array![[1.0, -1.0], [2.0, 0.5]];
        mlp.layers[0].bias = array![0.25, -1.0];
        mlp.layers[1].weight = array![[3.0, -2.0]];
        mlp.layers[1].bias = array![0.125];
        let x = array![[1.0, 2.0]];

        let z1: [f64; 2] = [
            1.0 * 1.0 + (-1.0) * 2.0 + 0.25,
            2.0 * 1.0 + 0.5 * 2.0 - 1.0,
        ];
        let a1 = [z1[0].max(0.0), z1[1].max(0.0)];
        let expected = 3.0 * a1[0] + (-2.0) * a1[1] + 0.125;

        let (y, _) = mlp.forward(&x).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::zeros(&[3, 2]);
        let x = Array2::<f64>::zeros((4, 5));
        assert!(matches!(
            mlp.forward(&x),
            Err(NnError::InputWidth { expected: 3, got: 5 })
        ));
    }

    #[test]
    fn backward_zero_dy_gives_zero_grads() {
        let mlp = Mlp::he_init(&[3, 5, 2], &mut rng(1));
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1 - 0.2);
        let (y, tape) = mlp.forward(&x).unwrap();
        let (dx, grads) = mlp.backward(&tape, &Array2::zeros(y.raw_dim())).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        for s in grads.param_slices() {
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layer_backward_closed_form() {
        // Single layer W=I, b=0: dx = dy and dW = dyᵀ·x.
        let mut mlp = Mlp::zeros(&[2, 2]);
        mlp.layers[0].weight = Array2::eye(2);
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (_, tape) = mlp.forward(&x).unwrap();
        let dy = array![[0.5, -1.0], [2.0, 0.25]];
        let (dx, grads) = mlp.backward(&tape, &dy).unwrap();
        assert_eq!(dx, dy);
        assert_eq!(grads.layers[0].weight, dy.t().dot(&x));
        assert_eq!(grads.layers[0].bias, dy.sum_axis(Axis(0)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Oracle: central differences on a scalarized loss sum(y²)/2,
        // at a point with no pre-activation near the ReLU kink.
        let mlp = Mlp::he_init(&[4, 6, 3], &mut rng(7));
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());

        let loss_of = |m: &Mlp| -> f64 {
            let (y, _) = m.forward(&x).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, tape) = mlp.forward(&x).unwrap();
        let (_, grads) = mlp.backward(&tape, &y).unwrap();

        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut m = mlp.clone();
        for l in 0..m.layers.len() {
            for idx in 0..m.layers[l].weight.len() {
                let w = m.layers[l].weight.as_slice_mut().unwrap();
                let saved = w[idx];
                w[idx] = saved + step;
                let plus = loss_of(&m);
                m.layers[l].weight.as_slice_mut().unwrap()[idx] = saved - step;
                let minus = loss_of(&m);
                m.layers[l].weight.as_slice_mut().unwrap()[idx] = saved;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads.layers[l].weight.as_slice().unwrap()[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn stale_tape_is_rejected() {
        let a = Mlp::he_init(&[3, 4, 2], &mut rng(2));
        let b = Mlp::he_init(&[3, 5, 2], &mut rng(3));
        let x = Array2::zeros((2, 3));
        let (y, tape) = a.forward(&x).unwrap();
        assert!(matches!(b.backward(&tape, &y), Err(NnError::StaleTape(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::zeros((2, 40));
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 7]).unwrap();
        assert_abs_diff_eq!(loss, (40.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut logits = Array2::zeros((1, 5));
        logits[[0, 2]] = 60.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Array2::zeros((1, 3));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let logits = Array2::from_shape_fn((3, 6), |_| r.gen_range(-2.0..2.0));
        let labels = [4usize, 0, 3];
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();

        let step = 1e-6;
        for i in 0..logits.nrows() {
            for j in 0..logits.ncols() {
                let mut p = logits.clone();
                p[[i, j]] += step;
                let (lp, _) = softmax_cross_entropy(&p, &labels).unwrap();
                p[[i, j]] -= 2.0 * step;
                let (lm, _) = softmax_cross_entropy(&p, &labels).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let analytic = dlogits[[i, j]];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-6,
                    "dlogits[{i},{j}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -0.7, 0.01];
        let mut state = AdamState::new(&[3]);
        let lr = 1e-3;
        let before = p.clone();
        state.step(&mut [&mut p], &[&g], lr).unwrap();
        for k in 0..3 {
            let delta = p[k] - before[k];
            let expected = -lr * g[k].signum();
            assert!(
                (delta - expected).abs() <= lr * 1e-4,
                "delta {delta} vs {expected}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, 2.0];
        let g = vec![0.0, 0.0];
        let mut state = AdamState::new(&[2]);
        state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5, -0.25, 1.5];
            let mut state = AdamState::new(&[3]);
            for i in 0..10 {
                let g: Vec<f64> = p.iter().map(|v| v * 0.1 + i as f64 * 0.01).collect();
                state.step(&mut [&mut p], &[&g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![1.0, 2.0];
        let g = vec![0.1];
        let mut state = AdamState::new(&[2]);
        assert!(state.step(&mut [&mut p], &[&g], 0.1).is_err());
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let params: Vec<f64> = (0..20).map(|i| 0.5 + 0.07 * i as f64).collect();
        let grad: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(
            |p| p.iter().map(|v| v * v).sum(),
            &params,
            &grad,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn finite_diff_detects_corrupted_gradient() {
        let params: Vec<f64> = (0..8).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut grad: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
        grad[3] *= 1.1;
        let err = finite_diff_check(
            |p| p.iter().map(|v| v * v).sum(),
            &params,
            &grad,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(err > 5e-2, "relative error {err}");
    }

    #[test]
    fn finite_diff_reports_non_finite_loss() {
        let params = vec![1.0];
        let grad = vec![0.0];
        let err = finite_diff_check(|_| f64::NAN, &params, &grad, 1e-5, usize::MAX);
        assert!(matches!(err, Err(NnError::NonFiniteLoss(_))));
    }

    #[test]
    fn he_init_hidden_preactivation_variance_in_range() {
        // Unit-variance input through a He-initialized hidden layer keeps the
        // pre-activation variance in a healthy band (fixed seed, 10k samples).
        let mut r = rng(42);
        let mlp = Mlp::he_init(&[64, 64, 64], &mut r);
        let x = Array2::from_shape_fn((10_000, 64), |_| {
            // Box-Muller standard normals.
            let u1: f64 = r.gen_range(f64::EPSILON..1.0);
            let u2: f64 = r.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        // First hidden pre-activation = first layer output before ReLU.
        let z = x.dot(&mlp.layers[0].weight.t());
        let mean = z.mean().unwrap();
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (z.len() - 1) as f64;
        assert!(
            (0.5..=2.0).contains(&var),
            "hidden pre-activation variance {var}"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mlp = Mlp::he_init(&[3, 8, 4], &mut rng(5));
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (y1, _) = mlp.forward(&x).unwrap();
        let (y2, _) = mlp.forward(&x).unwrap();
        assert_eq!(y1, y2);
    }
}
