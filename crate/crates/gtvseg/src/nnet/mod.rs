//! Minimal dense tensor engine with reverse-mode gradients for the layer set
//! the segmentation network needs: 3D convolution (kernel 1 or 3, stride 1,
//! shape-preserving), batch normalization, ReLU, 2x max pooling, 2x trilinear
//! upsampling, sigmoid, a combined soft-Dice + BCE loss, and SGD with
//! Nesterov momentum under a polynomial learning-rate schedule.
//!
//! Everything is f32 with f64 accumulation in reductions; loops run in a
//! fixed order so training is bitwise deterministic for a given seed.

mod checkpoint;
mod layers;
mod loss;
mod optim;

pub use checkpoint::{load_named_tensors, save_named_tensors, NamedTensor};
pub use layers::{
    maxpool2x_backward, maxpool2x_forward, relu_backward, relu_forward, sigmoid,
    upsample2x_backward, upsample2x_forward, BatchNorm3d, BnCache, BnMode, Conv3d,
};
pub use loss::{dice_bce_loss, dice_bce_loss_grad};
pub use optim::{sgd_nesterov_step, OptState, PolySchedule};

use crate::error::{Error, Result};

/// Dense 5-D tensor in (N, C, D, H, W) layout, W fastest.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, cc, dd, hh, ww] = self.shape;
        (((n * cc + c) * dd + d) * hh + h) * ww + w
    }

    pub fn ensure_grad(&mut self) -> &mut Vec<f32> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_finite(&self) -> bool {
        self.grad
            .as_ref()
            .map(|g| g.iter().all(|v| v.is_finite()))
            .unwrap_or(true)
    }
}

#[cfg(test)]
mod grad_check {
    //! Central finite-difference gradient checks for every differentiable op.

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const EPS: f32 = 1e-3;
    pub const TOL: f64 = 1e-3;

    /// Relative error with a small absolute floor appropriate for f32.
    pub fn rel_err(fd: f64, an: f64) -> f64 {
        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5], scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Weighted sum of a tensor against fixed coefficients (f64 accumulate);
    /// this is the scalar "loss" every check differentiates.
    fn weighted_sum(y: &Tensor, coef: &[f32]) -> f64 {
        y.data.iter().zip(coef).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Generic FD check over a parameter vector given forward/analytic-grad
    /// closures. Checks a subsample for speed.
    fn check_param(
        len: usize,
        forward: &mut dyn FnMut(&dyn Fn(&mut Vec<f32>)) -> f64,
        analytic: &[f32],
        rng: &mut ChaCha8Rng,
        label: &str,
    ) {
        let n_checks = len.min(24);
        for _ in 0..n_checks {
            let i = rng.gen_range(0..len);
            let fp = forward(&|v: &mut Vec<f32>| v[i] += EPS);
            let fm = forward(&|v: &mut Vec<f32>| v[i] -= EPS);
            let fd = (fp - fm) / (2.0 * EPS as f64);
            let an = analytic[i] as f64;
            let e = rel_err(fd, an);
            assert!(e < TOL, "{label}[{i}]: fd={fd:.6e} an={an:.6e} rel={e:.3e}");
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (cin, cout) = (2, 2);
            let xs = [1, cin, 4, 4, 4];
            let x = rand_tensor(&mut rng, xs, 1.0);
            let mut conv = Conv3d::new(cin, cout, 3, &mut rng);
            let coef: Vec<f32> = (0..cout * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let y = conv.forward(&x);
            let mut gy = Tensor::from_vec(y.shape, coef.clone()).unwrap();
            gy.data = coef.clone();
            conv.weight.ensure_grad();
            conv.bias.ensure_grad();
            let gx = conv.backward(&x, &gy);

            // d/dx
            let mut fx = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut x2 = x.clone();
                perturb(&mut x2.data);
                weighted_sum(&conv.forward(&x2), &coef)
            };
            check_param(x.numel(), &mut fx, gx.grad.as_ref().unwrap(), &mut rng, "gx");

            // d/dw
            let w_grad = conv.weight.grad.clone().unwrap();
            let mut fw = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut c2 = conv.clone();
                perturb(&mut c2.weight.data);
                weighted_sum(&c2.forward(&x), &coef)
            };
            check_param(conv.weight.numel(), &mut fw, &w_grad, &mut rng, "gw");

            // d/db
            let b_grad = conv.bias.grad.clone().unwrap();
            let mut fb = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut c2 = conv.clone();
                perturb(&mut c2.bias.data);
                weighted_sum(&c2.forward(&x), &coef)
            };
            check_param(conv.bias.numel(), &mut fb, &b_grad, &mut rng, "gb");
        }
    }

    #[test]
    fn conv3d_identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, [1, 1, 3, 4, 5], 2.0);
        let mut conv = Conv3d::new(1, 1, 3, &mut rng);
        conv.weight.data.iter_mut().for_each(|v| *v = 0.0);
        conv.bias.data.iter_mut().for_each(|v| *v = 0.0);
        let center = conv.weight.idx(0, 0, 1, 1, 1);
        conv.weight.data[center] = 1.0;
        let y = conv.forward(&x);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv3d_ones_kernel_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut conv = Conv3d::new(1, 1, 3, &mut rng);
        conv.weight.data.iter_mut().for_each(|v| *v = 1.0);
        conv.bias.data.iter_mut().for_each(|v| *v = 0.0);
        let k = 2.0f32;
        let x = Tensor::from_vec([1, 1, 4, 4, 4], vec![k; 64]).unwrap();
        let y = conv.forward(&x);
        // interior voxels see all 27 taps; boundary voxels see zero padding
        assert_eq!(y.data[y.idx(0, 0, 1, 1, 1)], 27.0 * k);
        assert_eq!(y.data[y.idx(0, 0, 2, 2, 2)], 27.0 * k);
        // corner: 2x2x2 in-bounds taps
        assert_eq!(y.data[y.idx(0, 0, 0, 0, 0)], 8.0 * k);
        // face center at (1,1,0): 3*3*2 taps
        assert_eq!(y.data[y.idx(0, 0, 1, 1, 0)], 18.0 * k);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let shape = [2, 2, 2, 3, 3];
            let x = rand_tensor(&mut rng, shape, 1.5);
            let mut bn = BatchNorm3d::new(2);
            bn.gamma.data = vec![1.3, 0.7];
            bn.beta.data = vec![0.2, -0.4];
            let coef: Vec<f32> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (y, cache) = bn.forward_train(&x).unwrap();
            let gy = Tensor::from_vec(y.shape, coef.clone()).unwrap();
            bn.gamma.ensure_grad();
            bn.beta.ensure_grad();
            let gx = bn.backward(&x, &cache, &gy);

            let mut fx = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut x2 = x.clone();
                perturb(&mut x2.data);
                let mut bn2 = bn.clone();
                let (y2, _) = bn2.forward_train(&x2).unwrap();
                weighted_sum(&y2, &coef)
            };
            check_param(x.numel(), &mut fx, gx.grad.as_ref().unwrap(), &mut rng, "bn gx");

            let g_gamma = bn.gamma.grad.clone().unwrap();
            let mut fg = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut bn2 = bn.clone();
                perturb(&mut bn2.gamma.data);
                let (y2, _) = bn2.forward_train(&x).unwrap();
                weighted_sum(&y2, &coef)
            };
            check_param(2, &mut fg, &g_gamma, &mut rng, "bn ggamma");

            let g_beta = bn.beta.grad.clone().unwrap();
            let mut fbta = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut bn2 = bn.clone();
                perturb(&mut bn2.beta.data);
                let (y2, _) = bn2.forward_train(&x).unwrap();
                weighted_sum(&y2, &coef)
            };
            check_param(2, &mut fbta, &g_beta, &mut rng, "bn gbeta");
        }
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let shape = [2, 3, 4, 4, 4];
        let x = rand_tensor(&mut rng, shape, 5.0);
        let mut bn = BatchNorm3d::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        let m = 2 * 64;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..2 {
                for d in 0..4 {
                    for h in 0..4 {
                        for w in 0..4 {
                            let v = y.data[y.idx(n, c, d, h, w)] as f64;
                            sum += v;
                            sq += v * v;
                        }
                    }
                }
            }
            let mean = sum / m as f64;
            let var = sq / m as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_affine_on_normalized_input() {
        // gamma=2, beta=3 applied to already-normalized data: mean 3, std 2.
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let shape = [1, 1, 4, 4, 8];
        let raw = rand_tensor(&mut rng, shape, 1.0);
        let mut bn0 = BatchNorm3d::new(1);
        let (xn, _) = bn0.forward_train(&raw).unwrap();
        let mut bn = BatchNorm3d::new(1);
        bn.gamma.data = vec![2.0];
        bn.beta.data = vec![3.0];
        let (y, _) = bn.forward_train(&xn).unwrap();
        let n = y.numel() as f64;
        let mean: f64 = y.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = y.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 3.0).abs() < 1e-3);
        assert!((var.sqrt() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn batchnorm_single_element_channel_errors() {
        let x = Tensor::zeros([1, 2, 1, 1, 1]);
        let mut bn = BatchNorm3d::new(2);
        assert!(bn.forward_train(&x).is_err());
    }

    #[test]
    fn relu_and_maxpool_basics() {
        let x = Tensor::from_vec([1, 1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 2.0]);

        let c = Tensor::from_vec([1, 1, 2, 2, 2], vec![4.0; 8]).unwrap();
        let (p, _) = maxpool2x_forward(&c).unwrap();
        assert_eq!(p.shape, [1, 1, 1, 1, 1]);
        assert_eq!(p.data, vec![4.0]);

        let odd = Tensor::zeros([1, 1, 3, 2, 2]);
        assert!(maxpool2x_forward(&odd).is_err());
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let x = rand_tensor(&mut rng, [1, 2, 4, 4, 4], 1.0);
        let (y, arg) = maxpool2x_forward(&x).unwrap();
        let coef: Vec<f32> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gy = Tensor::from_vec(y.shape, coef.clone()).unwrap();
        let gx = maxpool2x_backward(&x, &arg, &gy);
        let g = gx.grad.as_ref().unwrap();
        let mut fx = |perturb: &dyn Fn(&mut Vec<f32>)| {
            let mut x2 = x.clone();
            perturb(&mut x2.data);
            let (y2, _) = maxpool2x_forward(&x2).unwrap();
            y2.data.iter().zip(&coef).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        check_param(x.numel(), &mut fx, g, &mut rng, "pool gx");
    }

    #[test]
    fn upsample_halfvoxel_weights_and_gradient() {
        // 1-axis profile (a, b) -> (a, 0.75a+0.25b, 0.25a+0.75b, b)
        let x = Tensor::from_vec([1, 1, 1, 1, 2], vec![1.0, 5.0]).unwrap();
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape, [1, 1, 2, 2, 4]);
        let row: Vec<f32> = (0..4).map(|i| y.data[y.idx(0, 0, 0, 0, i)]).collect();
        assert_eq!(row, vec![1.0, 2.0, 4.0, 5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let x = rand_tensor(&mut rng, [1, 2, 2, 3, 3], 1.0);
        let y = upsample2x_forward(&x);
        let coef: Vec<f32> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gy = Tensor::from_vec(y.shape, coef.clone()).unwrap();
        let gx = upsample2x_backward(&x.shape, &gy);
        let g = gx.grad.as_ref().unwrap();
        let mut fx = |perturb: &dyn Fn(&mut Vec<f32>)| {
            let mut x2 = x.clone();
            perturb(&mut x2.data);
            let y2 = upsample2x_forward(&x2);
            y2.data.iter().zip(&coef).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        check_param(x.numel(), &mut fx, g, &mut rng, "up gx");
    }

    #[test]
    fn upsample_inverts_maxpool_on_uniform_blocks() {
        // With align_corners=false, up(maxpool(x)) reproduces x exactly when
        // every 2x2x2 block is constant and neighboring blocks agree.
        for v in [0.0f32, -2.5, 7.0] {
            let x = Tensor::from_vec([1, 1, 4, 4, 4], vec![v; 64]).unwrap();
            let (p, _) = maxpool2x_forward(&x).unwrap();
            let u = upsample2x_forward(&p);
            assert_eq!(u.data, x.data);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let shape = [1, 1, 3, 3, 3];
            let z = rand_tensor(&mut rng, shape, 2.0);
            let t: Vec<f32> = (0..z.numel()).map(|_| rng.gen_bool(0.4) as u8 as f32).collect();
            let an = dice_bce_loss_grad(&z, &t);
            let mut fz = |perturb: &dyn Fn(&mut Vec<f32>)| {
                let mut z2 = z.clone();
                perturb(&mut z2.data);
                dice_bce_loss(&z2, &t)
            };
            check_param(z.numel(), &mut fz, &an.1, &mut rng, "loss gz");
        }
    }

    #[test]
    fn loss_perfect_prediction_is_near_zero() {
        let t: Vec<f32> = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let z: Vec<f32> = t.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        let z = Tensor::from_vec([1, 1, 2, 2, 2], z).unwrap();
        let l = dice_bce_loss(&z, &t);
        assert!(l < 1e-3, "loss {l}");
        assert!(l >= 0.0);
    }

    #[test]
    fn loss_zero_logits_on_empty_target_closed_form() {
        // sigma(0)=0.5: BCE = ln 2 exactly; soft dice = 1/(V/2 + 1).
        let v = 27usize;
        let z = Tensor::zeros([1, 1, 3, 3, 3]);
        let t = vec![0.0f32; v];
        let l = dice_bce_loss(&z, &t);
        let dice_term = 1.0 - 1.0 / (v as f64 * 0.5 + 1.0);
        let want = 0.5 * dice_term + 0.5 * std::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn sgd_schedule_and_updates() {
        let sched = PolySchedule { lr0: 0.01, power: 0.9, total_steps: 100 };
        assert_eq!(sched.lr(0), 0.01);
        let want_last = 0.01 * (1.0f64 / 100.0).powf(0.9);
        assert!((sched.lr(99) - want_last).abs() < 1e-12);

        // mu = 0 reduces to vanilla SGD
        let mut p = Tensor::from_vec([1, 1, 1, 1, 2], vec![1.0, -2.0]).unwrap();
        p.ensure_grad();
        p.grad.as_mut().unwrap().copy_from_slice(&[0.5, -1.0]);
        let mut st = OptState::new(&[&p], 0.0, sched);
        sgd_nesterov_step(&mut [&mut p], &mut st, 0).unwrap();
        assert!((p.data[0] - (1.0 - 0.01 * 0.5)).abs() < 1e-7);
        assert!((p.data[1] - (-2.0 + 0.01)).abs() < 1e-7);

        // t beyond the schedule errors
        assert!(sgd_nesterov_step(&mut [&mut p], &mut st, 100).is_err());
    }
}
