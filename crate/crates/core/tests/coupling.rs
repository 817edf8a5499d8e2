use nalgebra::DMatrix;
use piffuse::coupling::{coupling_forward, coupling_inverse, pin_log_scale, CouplingBlock};
use piffuse::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturb_outputs(b: &CouplingBlock, ps: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    for sub in [&b.i1, &b.i2, &b.i3] {
        for id in sub.out.param_ids() {
            let shape = ps.value(id).shape().to_vec();
            ps.set_value(id, Tensor::randn(&shape, std, rng));
        }
    }
}

/// Central-difference Jacobian of the full coupling map on the stacked
/// `[xh, xl]` vector, then log|det| through LU.
fn fd_log_abs_det(b: &CouplingBlock, ps: &ParamStore<f64>, xh: &Tensor<f64>, xl: &Tensor<f64>) -> f64 {
    let n = xh.len();
    let shape = xh.shape().to_vec();
    let eval = |v: &[f64]| -> Vec<f64> {
        let h = Tensor::from_vec(&shape, v[..n].to_vec()).unwrap();
        let l = Tensor::from_vec(&shape, v[n..].to_vec()).unwrap();
        let (h2, l2, _) = coupling_forward(&h, &l, b, ps).unwrap();
        h2.data().iter().chain(l2.data()).copied().collect()
    };
    let x0: Vec<f64> = xh.data().iter().chain(xl.data()).copied().collect();
    let eps = 1e-5;
    let mut jac = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut up = x0.clone();
        let mut dn = x0.clone();
        up[j] += eps;
        dn[j] -= eps;
        let (fu, fd) = (eval(&up), eval(&dn));
        for i in 0..2 * n {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * eps);
        }
    }
    jac.lu().determinant().abs().ln()
}

#[test]
fn pinned_log_scale_matches_brute_force_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::<f64>::new();
    let b = CouplingBlock::new(&mut ps, "c", 2, 4, &mut rng).unwrap();
    perturb_outputs(&b, &mut ps, 0.4, &mut rng);
    let c = 0.37;
    pin_log_scale(&b, &mut ps, c).unwrap();
    let xh = Tensor::randn(&[1, 1, 2], 1.0, &mut rng);
    let xl = Tensor::randn(&[1, 1, 2], 1.0, &mut rng);
    let (h, l, ld) = coupling_forward(&xh, &xl, &b, &ps).unwrap();
    assert!((ld - 2.0 * c).abs() < 1e-12, "{ld}");
    let fd = fd_log_abs_det(&b, &ps, &xh, &xl);
    assert!((fd - ld).abs() < 1e-6, "fd {fd} analytic {ld}");
    let (rh, rl) = coupling_inverse(&h, &l, &b, &ps).unwrap();
    assert!(rh.max_abs_diff(&xh).unwrap() < 1e-12);
    assert!(rl.max_abs_diff(&xl).unwrap() < 1e-12);
}

#[test]
fn random_block_logdet_matches_brute_force_jacobian() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut rng).unwrap();
        perturb_outputs(&b, &mut ps, 0.5, &mut rng);
        let xh = Tensor::randn(&[2, 2, 4], 1.0, &mut rng);
        let xl = Tensor::randn(&[2, 2, 4], 1.0, &mut rng);
        let (_, _, ld) = coupling_forward(&xh, &xl, &b, &ps).unwrap();
        let fd = fd_log_abs_det(&b, &ps, &xh, &xl);
        let rel = (fd - ld).abs() / ld.abs().max(1e-8);
        assert!(rel < 1e-3, "seed {seed}: fd {fd} analytic {ld}");
    }
}

#[test]
fn f32_round_trip_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps64 = ParamStore::<f64>::new();
    let b = CouplingBlock::new(&mut ps64, "c", 8, 8, &mut rng).unwrap();
    perturb_outputs(&b, &mut ps64, 0.3, &mut rng);
    let ps: ParamStore<f32> = ps64.cast();
    let xh = Tensor::<f32>::randn(&[4, 4, 8], 1.0, &mut rng);
    let xl = Tensor::<f32>::randn(&[4, 4, 8], 1.0, &mut rng);
    let (h, l, _) = coupling_forward(&xh, &xl, &b, &ps).unwrap();
    let (rh, rl) = coupling_inverse(&h, &l, &b, &ps).unwrap();
    assert!(rh.max_abs_diff(&xh).unwrap() < 1e-4);
    assert!(rl.max_abs_diff(&xl).unwrap() < 1e-4);
}

#[test]
fn forward_then_inverse_has_identity_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ps = ParamStore::<f64>::new();
    let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut rng).unwrap();
    perturb_outputs(&b, &mut ps, 0.4, &mut rng);
    let wh = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
    let wl = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
    let tape = Tape::new();
    let xh = tape.leaf(Tensor::randn(&[3, 3, 4], 1.0, &mut rng));
    let xl = tape.leaf(Tensor::randn(&[3, 3, 4], 1.0, &mut rng));
    let (h, l, _) = b.forward(&ps, xh, xl).unwrap();
    let (rh, rl) = b.inverse(&ps, h, l).unwrap();
    let loss = rh
        .mul(tape.constant(wh.clone()))
        .unwrap()
        .sum_all()
        .add(rl.mul(tape.constant(wl.clone())).unwrap().sum_all())
        .unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(xh).unwrap().max_abs_diff(&wh).unwrap() < 1e-9);
    assert!(g.wrt(xl).unwrap().max_abs_diff(&wl).unwrap() < 1e-9);
}
