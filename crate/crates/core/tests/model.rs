use piffuse::coupling::stack_forward;
use piffuse::gradcheck::gradcheck_params;
use piffuse::loss::composite_loss;
use piffuse::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, parameter_count, pifnet_forward, restore, save_checkpoint, PifNet, PifNetConfig,
};
use piffuse::nn::{bicubic_upsample, Conv2dLayer, ConvSpec, Init};
use piffuse::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random values on every zero-initialized output layer so every path carries signal.
fn wake(m: &PifNet, ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let mut ids = Vec::new();
    for b in &m.stack.blocks {
        for s in [&b.i1, &b.i2, &b.i3] {
            ids.extend(s.out.param_ids());
        }
    }
    ids.extend(m.tail.b.param_ids());
    ids.extend(m.spec_tail.b.param_ids());
    for f in &m.fam {
        ids.extend(f.t4.param_ids());
        ids.extend(f.heads.iter().map(|h| h.up));
    }
    for id in ids {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, Tensor::randn(&shape, 0.2, rng));
    }
}

fn micro(seed: u64) -> (PifNet, ParamStore<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f64>::new();
    let mut cfg = PifNetConfig::micro(4, 2, 2);
    cfg.pass2_frozen = false;
    let m = PifNet::new(cfg, &mut ps, &mut rng).unwrap();
    wake(&m, &mut ps, &mut rng);
    let x = Tensor::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut rng);
    let z = Tensor::rand_uniform(&[8, 8, 4], 0.0, 1.0, &mut rng);
    (m, ps, x, y, z)
}

#[test]
fn end_to_end_gradcheck_micro() {
    let (m, ps, x, y, z) = micro(1);
    let r = gradcheck_params(
        |t, ps| {
            let out = m.forward(ps, t.constant(x.clone()), t.constant(y.clone()))?;
            Ok(composite_loss(out.z_hat, t.constant(z.clone()), out.z_bar, out.logdet, out.coupled_len, &m.cfg.loss)?.0)
        },
        &ps,
        &m.param_ids(),
        1e-5,
        2,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn spectral_logdet_matches_stack() {
    let (m, ps, x, _, _) = micro(2);
    let t = Tape::no_grad();
    let sp = m.spectral_branch(&ps, t.constant(x.clone())).unwrap();
    // Rebuild the coupling inputs by hand.
    let x_up = bicubic_upsample(&x, 2).unwrap();
    let f = m.proj.apply(&ps, &m.hsi_head.forward(&ps, t.constant(x_up)).unwrap().value()).unwrap();
    let packed = t.constant(f).haar_analyze().unwrap().value();
    let d = m.cfg.d;
    let ll = packed.narrow_last(0, d).unwrap();
    let xh = m.reduce.apply(&ps, &packed.narrow_last(d, 3 * d).unwrap()).unwrap();
    let (h2, _, total) = stack_forward(&xh, &ll, &m.stack, &ps).unwrap();
    assert_eq!(sp.logdet.item(), total);
    assert_eq!(sp.xh_feats.value(), h2);
}

#[test]
fn fresh_spectral_branch_reduces_to_head_and_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::<f64>::new();
    let m = PifNet::new(PifNetConfig::micro(6, 3, 4), &mut ps, &mut rng).unwrap();
    let x = Tensor::rand_uniform(&[4, 4, 6], 0.0, 1.0, &mut rng);
    let t = Tape::no_grad();
    let sp = m.spectral_branch(&ps, t.constant(x.clone())).unwrap();
    assert_eq!(sp.logdet.item(), 0.0);
    let x_up = bicubic_upsample(&x, 4).unwrap();
    let f = m.proj.apply(&ps, &m.hsi_head.forward(&ps, t.constant(x_up.clone())).unwrap().value()).unwrap();
    let packed = t.constant(f).haar_analyze().unwrap();
    let d = m.cfg.d;
    let details = m.expand.forward(&ps, m.reduce.forward(&ps, packed.narrow_last(d, 3 * d).unwrap()).unwrap()).unwrap();
    let synth = piffuse::Var::concat_last(&[packed.narrow_last(0, d).unwrap(), details]).unwrap().haar_synthesize().unwrap();
    let want = m.spec_tail.forward(&ps, synth).unwrap().value().add(&x_up).unwrap();
    assert!(sp.z_bar.value().max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn fresh_spatial_branch_is_tail_of_head_plus_guidance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::<f64>::new();
    let m = PifNet::new(PifNetConfig::micro(6, 3, 4), &mut ps, &mut rng).unwrap();
    let t = Tape::no_grad();
    let y = t.constant(Tensor::rand_uniform(&[16, 16, 3], 0.0, 1.0, &mut rng));
    let g = t.constant(Tensor::randn(&[16, 16, 8], 1.0, &mut rng));
    let xr = t.constant(Tensor::randn(&[16, 16, 8], 1.0, &mut rng));
    let up = t.constant(Tensor::zeros(&[16, 16, 6]));
    let ys = m.msi_head.forward(&ps, y).unwrap();
    let got = m.spatial_branch(&ps, ys, g, xr, up).unwrap().value();
    let want = m.tail.forward(&ps, ys.add(g).unwrap()).unwrap().value();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    assert_eq!(got.shape(), &[16, 16, 6]);
}

#[test]
fn zero_beta_removes_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::<f64>::new();
    let cfg = PifNetConfig { beta: 0.0, ..PifNetConfig::micro(4, 2, 2) };
    let m = PifNet::new(cfg, &mut ps, &mut rng).unwrap();
    let t = Tape::no_grad();
    let xs = t.constant(Tensor::randn(&[8, 8, 8], 1.0, &mut rng));
    let ys = t.constant(Tensor::randn(&[8, 8, 8], 1.0, &mut rng));
    assert!(m.prior.forward(&ps, xs, ys).unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamStore::<f32>::new();
    Conv2dLayer::new(&mut ps, "c", 4, 4, ConvSpec::same(1), Init::He, &mut rng).unwrap();
    assert_eq!(ps.scalar_count(), 20);
    let mut ps = ParamStore::<f32>::new();
    let m = PifNet::new(PifNetConfig::paper(103, 4, 4), &mut ps, &mut rng).unwrap();
    let n = parameter_count(&m, &ps);
    assert!((500_000..=5_000_000).contains(&n), "{n}");
    assert_eq!(n, ps.scalar_count());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::<f32>::new();
    let m = PifNet::new(PifNetConfig::micro(4, 2, 4), &mut ps, &mut rng).unwrap();
    for id in m.param_ids() {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, Tensor::randn(&shape, 0.1, &mut rng));
    }
    let x = Tensor::<f32>::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let y = Tensor::<f32>::rand_uniform(&[16, 16, 2], 0.0, 1.0, &mut rng);
    let before = pifnet_forward(&x, &y, &m, &ps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pifn");
    save_checkpoint(&path, &m.cfg, &ps).unwrap();
    let (m2, ps2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(m2.cfg, m.cfg);
    let after = pifnet_forward(&x, &y, &m2, &ps2).unwrap();
    assert_eq!(before.0, after.0);
    assert_eq!(before.1, after.1);
    let bytes = encode_checkpoint(&m.cfg, &ps).unwrap();
    assert_eq!(encode_checkpoint(&m2.cfg, &ps2).unwrap(), bytes);
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let (_, ps3) = restore(decode_checkpoint::<f32>(&bytes).unwrap()).unwrap();
    assert_eq!(ps3.len(), ps.len());
}

