use piffuse::fam_lora::{fam_lora_forward, FamLoraBlock};
use piffuse::gradcheck::gradcheck_params;
use piffuse::{ParamId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Give the zero-initialized output path random values so gradients reach attention.
fn wake(b: &FamLoraBlock, ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let mut ids: Vec<ParamId> = b.t4.param_ids().to_vec();
    ids.extend(b.heads.iter().map(|h| h.up));
    for id in ids {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, Tensor::randn(&shape, 0.5, rng));
    }
}

fn grads(b: &FamLoraBlock, ps: &ParamStore<f64>, y: &Tensor<f64>, xr: &Tensor<f64>, w: &Tensor<f64>, ids: &[ParamId]) -> Vec<Tensor<f64>> {
    let t = Tape::new();
    let out = b.forward(ps, t.constant(y.clone()), Some(t.constant(xr.clone()))).unwrap();
    let g = t.backward(out.mul(t.constant(w.clone())).unwrap().sum_all()).unwrap();
    ids.iter()
        .map(|&id| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(ps.value(id).shape())))
        .collect()
}

#[test]
fn frozen_second_pass_contributes_no_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::<f64>::new();
    let mut shared = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut rng).unwrap();
    wake(&shared, &mut ps, &mut rng);
    let y = Tensor::randn(&[6, 6, 8], 1.0, &mut rng);
    let xr = Tensor::randn(&[6, 6, 8], 1.0, &mut rng).map(|v: f64| v.abs());
    let w = Tensor::randn(&[6, 6, 8], 1.0, &mut rng);
    let first: Vec<ParamId> = shared.lka.param_ids().into_iter().chain(shared.se.param_ids()).collect();

    let frozen = grads(&shared, &ps, &y, &xr, &w, &first);
    shared.set_pass2_frozen(false);
    let open = grads(&shared, &ps, &y, &xr, &w, &first);

    // Same weights, but the second pass owns a separate copy.
    let mut split = shared.clone();
    split.split_second_pass(&mut ps, "f", &mut rng).unwrap();
    let (l2, s2) = split.second.clone().unwrap();
    let copy: Vec<ParamId> = l2.param_ids().into_iter().chain(s2.param_ids()).collect();
    let pass1 = grads(&split, &ps, &y, &xr, &w, &first);
    let pass2 = grads(&split, &ps, &y, &xr, &w, &copy);

    let mut differs = false;
    for i in 0..first.len() {
        let scale = open[i].max_abs().max(1e-12);
        assert!(pass1[i].max_abs_diff(&frozen[i]).unwrap() / scale < 1e-10, "param {i}: frozen run includes pass 2");
        let sum = pass1[i].add(&pass2[i]).unwrap();
        assert!(sum.max_abs_diff(&open[i]).unwrap() / scale < 1e-10, "param {i}: open run is not pass1 + pass2");
        differs |= frozen[i].max_abs_diff(&open[i]).unwrap() > 1e-8 * scale;
    }
    assert!(differs, "unfreezing must change attention gradients");
}

#[test]
fn zero_prior_matches_disabled_injection() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::<f64>::new();
    let b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut rng).unwrap();
    wake(&b, &mut ps, &mut rng);
    let y = Tensor::randn(&[5, 5, 8], 1.0, &mut rng);
    let with_zero = fam_lora_forward(&y, &Tensor::zeros(&[5, 5, 8]), &b, &ps).unwrap();
    let t = Tape::no_grad();
    let without = b.forward(&ps, t.constant(y.clone()), None).unwrap().value();
    assert_eq!(with_zero, without);
    assert!(with_zero.max_abs_diff(&y).unwrap() > 0.0);
}

#[test]
fn unfrozen_block_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::<f64>::new();
    let mut b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut rng).unwrap();
    b.set_pass2_frozen(false);
    wake(&b, &mut ps, &mut rng);
    let y = Tensor::randn(&[5, 5, 8], 1.0, &mut rng);
    let xr = Tensor::randn(&[5, 5, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[5, 5, 8], 1.0, &mut rng);
    let r = gradcheck_params(
        |t, ps| Ok(b.forward(ps, t.constant(y.clone()), Some(t.constant(xr.clone())))?.mul(t.constant(w.clone()))?.sum_all()),
        &ps,
        &b.param_ids(),
        1e-6,
        3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn rejects_mismatched_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::<f64>::new();
    let b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut rng).unwrap();
    assert!(fam_lora_forward(&Tensor::zeros(&[4, 4, 8]), &Tensor::zeros(&[4, 2, 8]), &b, &ps).is_err());
}
