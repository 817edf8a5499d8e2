use piffuse::gradcheck::{gradcheck, gradcheck_params};
use piffuse::prior::{extract_prior, hf_semantic_guidance, residue_channel_gate, HfSemanticPerception, PriorExtractor};
use piffuse::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct loops: 3x3 in-bounds mean per channel, then channel max minus min.
fn brute_gate(x: &Tensor<f64>) -> Vec<f64> {
    let (h, w, c) = x.dims3().unwrap();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut means = vec![0.0; c];
            let mut n = 0.0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, xx) = (i + di, j + dj);
                    if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    n += 1.0;
                    for (k, m) in means.iter_mut().enumerate() {
                        *m += x.get(&[y as usize, xx as usize, k]);
                    }
                }
            }
            let hi = means.iter().fold(f64::MIN, |a, &b| a.max(b / n));
            let lo = means.iter().fold(f64::MAX, |a, &b| a.min(b / n));
            out.push(hi - lo);
        }
    }
    out
}

#[test]
fn gate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(&[7, 5, 4], 1.0, &mut rng);
    let t = Tape::no_grad();
    let g = residue_channel_gate(t.constant(x.clone()), true).unwrap().value();
    for (a, b) in g.data().iter().zip(brute_gate(&x)) {
        assert!(*a >= 0.0);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gate_vanishes_where_channel_means_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = Tensor::<f64>::randn(&[6, 6, 3], 1.0, &mut rng);
    // Make rows 0..3 channel-identical; their 3x3 means (rows 0..2) coincide.
    for i in 0..3 {
        for j in 0..6 {
            let v = x.get(&[i, j, 0]);
            let o = x.offset(&[i, j, 1]);
            x.data_mut()[o] = v;
            x.data_mut()[o + 1] = v;
        }
    }
    let t = Tape::no_grad();
    let g = residue_channel_gate(t.constant(x), true).unwrap().value();
    for i in 0..2 {
        for j in 0..6 {
            assert_eq!(g.get(&[i, j, 0]), 0.0);
        }
    }
    assert!(g.get(&[5, 0, 0]) > 0.0);
}

#[test]
fn prior_is_nonnegative_and_linear_in_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::<f64>::new();
    let mut p = PriorExtractor::new(&mut ps, "p", 8, 1.0, &mut rng).unwrap();
    let xs = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
    let ys = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
    let full = extract_prior(&xs, &ys, &p, &ps).unwrap();
    assert!(full.data().iter().all(|&v| v >= 0.0));
    assert!(full.max_abs() > 0.0);
    for beta in [0.0, 0.3, 0.7] {
        p.beta = beta;
        let part = extract_prior(&xs, &ys, &p, &ps).unwrap();
        assert!(part.max_abs_diff(&full.scale(beta)).unwrap() < 1e-12);
    }
}

#[test]
fn identical_channel_features_block_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::<f64>::new();
    let p = PriorExtractor::new(&mut ps, "p", 4, 1.0, &mut rng).unwrap();
    let plane = Tensor::<f64>::randn(&[6, 6, 1], 1.0, &mut rng);
    let xs = Tensor::from_fn(&[6, 6, 4], |i| plane.data()[i / 4]);
    let ys = Tensor::randn(&[6, 6, 4], 1.0, &mut rng);
    assert!(extract_prior(&xs, &ys, &p, &ps).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_prior_leaves_only_high_frequency_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::<f64>::new();
    let m = HfSemanticPerception::new(&mut ps, "hf", 4, &mut rng).unwrap();
    let xh = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
    let g = hf_semantic_guidance(&xh, &Tensor::zeros(&[8, 8, 4]), &m, &ps).unwrap();
    // Zeroing the prior half of the fuse kernel must not change anything.
    let w = ps.value(m.fuse.weight).clone();
    let masked = Tensor::from_fn(w.shape(), |i| if (i / 4) % 8 >= 4 { 0.0 } else { w.data()[i] });
    ps.set_value(m.fuse.weight, masked);
    let g2 = hf_semantic_guidance(&xh, &Tensor::zeros(&[8, 8, 4]), &m, &ps).unwrap();
    assert_eq!(g, g2);
}

#[test]
fn gradcheck_prior_and_guidance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamStore::<f64>::new();
    let p = PriorExtractor::new(&mut ps, "p", 4, 0.8, &mut rng).unwrap();
    let m = HfSemanticPerception::new(&mut ps, "hf", 4, &mut rng).unwrap();
    let xs = Tensor::randn(&[6, 6, 4], 1.0, &mut rng);
    let ys = Tensor::randn(&[6, 6, 4], 1.0, &mut rng);
    let xh = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 6, 4], 1.0, &mut rng);
    let r = gradcheck(
        |t, v| {
            let xr = p.forward(&ps, v, t.constant(ys.clone()))?;
            m.forward(&ps, t.constant(xh.clone()), xr)?.mul(t.constant(w.clone()))
                .map(|y| y.sum_all())
        },
        &xs,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let mut ids = p.param_ids();
    ids.extend(m.param_ids());
    let r = gradcheck_params(
        |t, ps| {
            let xr = p.forward(ps, t.constant(xs.clone()), t.constant(ys.clone()))?;
            Ok(m.forward(ps, t.constant(xh.clone()), xr)?.mul(t.constant(w.clone()))?.sum_all())
        },
        &ps,
        &ids,
        1e-6,
        4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
