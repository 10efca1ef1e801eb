//! Fully connected network with two hidden layers, and its optimizer.
//!
//! Each hidden block is `Linear → BatchNorm → ReLU → Dropout`. The output
//! layer is linear; families that need bounded outputs apply their own head
//! on top (see `ProblemFamily::decode_partial`).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::tensor_io::{read_tensors, take_tensor, write_tensors, TensorFileError};

pub const HIDDEN: usize = 200;
pub const DROPOUT: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient for parameter {0}; step rejected")]
    NonFiniteGradient(usize),
    #[error("gradient count {found} does not match {expected} parameters")]
    GradientCount { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] TensorFileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`, so a batch maps as `X·W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub layers: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
}

/// Nodes created by one forward pass.
pub struct MlpForward {
    pub output: Var,
    /// Parameter leaves in [`MlpParams::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per hidden layer (train mode only).
    pub stats: Vec<BatchStats>,
}

impl MlpParams {
    /// Default architecture: hidden width 200, dropout 0.2.
    pub fn init(seed: u64, input_dim: usize, output_dim: usize) -> Self {
        Self::init_with(seed, input_dim, output_dim, HIDDEN, DROPOUT)
    }

    /// Weights uniform in `±1/√fan_in`, zero biases, unit BN scale.
    pub fn init_with(seed: u64, input_dim: usize, output_dim: usize, hidden: usize, dropout: f64) -> Self {
        assert!(input_dim >= 1 && output_dim >= 1, "network dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [input_dim, hidden, hidden, output_dim];
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Linear {
                    weight: Tensor::from_fn(w[0], w[1], |_, _| rng.gen_range(-bound..bound)),
                    bias: Tensor::zeros(1, w[1]),
                }
            })
            .collect();
        let norms = (0..2)
            .map(|_| BatchNorm {
                gamma: Tensor::filled(1, hidden, 1.0),
                beta: Tensor::zeros(1, hidden),
                running_mean: vec![0.0; hidden],
                running_var: vec![1.0; hidden],
            })
            .collect();
        MlpParams { input_dim, output_dim, hidden, dropout, layers, norms }
    }

    /// Trainable tensors in a fixed order:
    /// `W1 b1 γ1 β1 W2 b2 γ2 β2 W3 b3`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(10);
        for (i, l) in self.layers.iter().enumerate() {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = self.norms.get(i) {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(10);
        let MlpParams { layers, norms, .. } = self;
        let mut norms = norms.iter_mut();
        for l in layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = norms.next() {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn param_names() -> [&'static str; 10] {
        ["W1", "b1", "gamma1", "beta1", "W2", "b2", "gamma2", "beta2", "W3", "b3"]
    }

    /// Exponential running averages, weight [`BN_MOMENTUM`] on the new batch.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats]) {
        for (n, s) in self.norms.iter_mut().zip(stats) {
            for (r, m) in n.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in n.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Gradients for [`Self::params`] out of a backward pass.
    pub fn collect_grads(&self, fwd: &MlpForward, grads: &Gradients) -> Vec<Tensor> {
        fwd.params
            .iter()
            .zip(self.params())
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect()
    }

    /// Record the network on `tape` for a batch `x` (`batch × input_dim`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<MlpForward, TensorError> {
        let xt = tape.value(x);
        if xt.cols() != self.input_dim {
            return Err(TensorError::shape("mlp_forward", &[xt.shape(), &[self.input_dim]]));
        }
        if mode == Mode::Train && xt.rows() < 2 {
            return Err(TensorError::Contract(format!(
                "training-mode forward needs a batch of at least 2, got {}",
                xt.rows()
            )));
        }
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let mut stats = Vec::new();
        let mut h = x;
        for (i, norm) in self.norms.iter().enumerate() {
            let (w, b, g, be) = (params[4 * i], params[4 * i + 1], params[4 * i + 2], params[4 * i + 3]);
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            let normed = match mode {
                Mode::Train => {
                    let (y, s) = tape.batch_norm_train(lin, g, be, BN_EPS)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => tape.batch_norm_eval(lin, g, be, &norm.running_mean, &norm.running_var, BN_EPS)?,
            };
            let act = tape.relu(normed)?;
            h = match mode {
                Mode::Train => tape.dropout(act, self.dropout, rng)?,
                Mode::Eval => act,
            };
        }
        let lin = tape.matmul(h, params[8])?;
        let output = tape.add(lin, params[9])?;
        Ok(MlpForward { output, params, stats })
    }

    /// Eval-mode inference without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // Eval mode draws nothing from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
        Ok(tape.value(fwd.output).clone())
    }

    pub fn write_checkpoint(&self, w: impl Write) -> Result<(), NnError> {
        let dims = Tensor::row_vector(&[
            self.input_dim as f64,
            self.output_dim as f64,
            self.hidden as f64,
            self.dropout,
        ]);
        let rm: Vec<Tensor> = self.norms.iter().map(|n| Tensor::row_vector(&n.running_mean)).collect();
        let rv: Vec<Tensor> = self.norms.iter().map(|n| Tensor::row_vector(&n.running_var)).collect();
        let mut entries: Vec<(&str, &Tensor)> = vec![("dims", &dims)];
        entries.extend(Self::param_names().into_iter().zip(self.params()));
        entries.push(("running_mean1", &rm[0]));
        entries.push(("running_var1", &rv[0]));
        entries.push(("running_mean2", &rm[1]));
        entries.push(("running_var2", &rv[1]));
        write_tensors(w, &entries)?;
        Ok(())
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self, NnError> {
        let mut entries = read_tensors(r)?;
        let dims = take_tensor(&mut entries, "dims", Some(&[1, 4]))?;
        let (d, m, h) = (dims.data()[0] as usize, dims.data()[1] as usize, dims.data()[2] as usize);
        let mut params = MlpParams::init_with(0, d.max(1), m.max(1), h, dims.data()[3]);
        let expected: Vec<Vec<usize>> = params.params().iter().map(|p| p.shape().to_vec()).collect();
        for ((name, slot), shape) in Self::param_names().into_iter().zip(params.params_mut()).zip(&expected) {
            *slot = take_tensor(&mut entries, name, Some(shape))?;
        }
        for (i, n) in params.norms.iter_mut().enumerate() {
            n.running_mean = take_tensor(&mut entries, &format!("running_mean{}", i + 1), Some(&[1, h]))?.into_data();
            n.running_var = take_tensor(&mut entries, &format!("running_var{}", i + 1), Some(&[1, h]))?.into_data();
        }
        Ok(params)
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// One update. Non-finite gradients leave parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(NnError::GradientCount { expected: self.m.len(), found: grads.len() });
        }
        for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
            if g.shape() != p.shape() {
                return Err(TensorError::shape("adam_step", &[g.shape(), p.shape()]).into());
            }
            if !g.all_finite() {
                return Err(NnError::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                pd[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpParams::init(7, 10, 3);
        let b = MlpParams::init(7, 10, 3);
        assert_eq!(a, b);
        let c = MlpParams::init(8, 10, 3);
        assert_ne!(a.layers[0].weight, c.layers[0].weight);
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        assert_eq!(a.layers[1].weight.shape(), &[200, 200]);
        assert_eq!(a.layers[2].weight.shape(), &[200, 3]);
    }

    #[test]
    fn zero_network_outputs_zero_in_eval() {
        let mut p = MlpParams::init(1, 4, 2);
        for t in p.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn(5, 4, |i, j| (i + j) as f64 - 3.0);
        let y = p.predict(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_follows_batch() {
        let p = MlpParams::init(2, 6, 4);
        let x = Tensor::filled(200, 6, 0.3);
        assert_eq!(p.predict(&x).unwrap().shape(), &[200, 4]);
    }

    #[test]
    fn train_mode_rejects_single_row_batch() {
        let p = MlpParams::init(2, 3, 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(p.forward(&mut tape, x, Mode::Train, &mut rng), Err(TensorError::Contract(_))));
    }

    #[test]
    fn train_mode_dropout_averages_to_eval_output() {
        // BN with batch statistics differs from running statistics, so compare
        // dropout-on against dropout-off with the same train-mode normalization.
        let p = MlpParams::init_with(4, 3, 2, 16, 0.2);
        let mut no_drop = p.clone();
        no_drop.dropout = 0.0;
        let x = Tensor::from_fn(8, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let f = no_drop.forward(&mut t, xv, Mode::Train, &mut rng).unwrap();
            t.value(f.output).clone()
        };
        let draws = 10_000;
        let mut acc = Tensor::zeros(8, 2);
        for _ in 0..draws {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let f = p.forward(&mut t, xv, Mode::Train, &mut rng).unwrap();
            acc.add_assign(t.value(f.output));
        }
        // Only the last layer sees dropout linearly; the second hidden layer
        // sees it through BN and ReLU, so compare in aggregate.
        let mean = acc.scale(1.0 / draws as f64);
        let num: f64 = mean.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = reference.data().iter().map(|b| b.abs()).sum();
        assert!(num / den < 0.25, "relative deviation {}", num / den);
    }

    #[test]
    fn eval_gradient_matches_finite_differences() {
        let mut p = MlpParams::init_with(5, 3, 2, 12, 0.2);
        for n in &mut p.norms {
            n.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64);
            n.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + 0.1 * i as f64);
        }
        let x = Tensor::from_fn(4, 3, |i, j| ((i * 7 + j) as f64 * 0.61).cos());
        let probe = Tensor::from_fn(4, 2, |i, j| ((i + 2 * j) as f64 * 0.9).sin());
        let loss = |params: &MlpParams| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let f = params.forward(&mut tape, xv, Mode::Eval, &mut rng).unwrap();
            let pr = tape.constant(probe.clone());
            let m = tape.mul(f.output, pr).unwrap();
            let s = tape.sin(m).unwrap();
            let l = tape.sum(s).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item(), params.collect_grads(&f, &g))
        };
        let (_, grads) = loss(&p);
        for (k, g) in grads.iter().enumerate() {
            let base = p.clone();
            let err = finite_difference_check(
                |v| {
                    let mut q = base.clone();
                    q.params_mut()[k].data_mut().copy_from_slice(v);
                    Ok::<_, ()>(loss(&q).0)
                },
                base.params()[k].data(),
                g.data(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "param {k}: {err}");
        }
    }

    #[test]
    fn train_gradient_matches_finite_differences_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = MlpParams::init_with(6, 4, 3, 10, 0.0);
        let x = Tensor::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |params: &MlpParams| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let f = params.forward(&mut tape, xv, Mode::Train, &mut r).unwrap();
            let yv = tape.constant(y.clone());
            let d = tape.sub(f.output, yv).unwrap();
            let q = tape.square(d).unwrap();
            let l = tape.mean(q).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item(), params.collect_grads(&f, &g))
        };
        let (_, grads) = loss(&p);
        for (k, g) in grads.iter().enumerate() {
            let base = p.clone();
            let err = finite_difference_check(
                |v| {
                    let mut q = base.clone();
                    q.params_mut()[k].data_mut().copy_from_slice(v);
                    Ok::<_, ()>(loss(&q).0)
                },
                base.params()[k].data(),
                g.data(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "param {k}: {err}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut theta = Tensor::row_vector(&[1.5, -2.0]);
        let mut st = AdamState::new(0.1, &[&theta]);
        st.step(&mut [&mut theta], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(theta.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut theta = Tensor::scalar(0.0);
        let mut st = AdamState::new(0.1, &[&theta]);
        st.step(&mut [&mut theta], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        assert!((theta.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut theta = Tensor::scalar(1.0);
        let mut st = AdamState::new(1e-2, &[&theta]);
        for _ in 0..1000 {
            let g = theta.clone();
            st.step(&mut [&mut theta], &[g]).unwrap();
        }
        assert!(theta.item().abs() < 1e-3, "theta = {}", theta.item());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut theta = Tensor::scalar(1.0);
        let mut st = AdamState::new(0.1, &[&theta]);
        let err = st.step(&mut [&mut theta], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(NnError::NonFiniteGradient(0))));
        assert_eq!(theta.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn regression_loss_decreases_over_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(64, 5, |_, _| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(64, 2, |i, j| (x.get(i, j) + 0.5 * x.get(i, j + 2)).sin());
        let mut p = MlpParams::init_with(3, 5, 2, 32, 0.0);
        let mut adam = AdamState::new(1e-3, &p.params());
        let mut losses = Vec::new();
        for _ in 0..300 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let f = p.forward(&mut tape, xv, Mode::Train, &mut rng).unwrap();
            let yv = tape.constant(y.clone());
            let d = tape.sub(f.output, yv).unwrap();
            let q = tape.square(d).unwrap();
            let l = tape.mean(q).unwrap();
            losses.push(tape.value(l).item());
            let g = tape.backward(l).unwrap();
            let grads = p.collect_grads(&f, &g);
            p.absorb_batch_stats(&f.stats);
            adam.step(&mut p.params_mut(), &grads).unwrap();
        }
        let windows: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0], "smoothed loss rose: {windows:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = MlpParams::init(3, 7, 2);
        p.norms[1].running_var[5] = 2.5;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = MlpParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        buf.truncate(buf.len() / 2);
        assert!(MlpParams::read_checkpoint(&buf[..]).is_err());
    }
}
