//! Self-verification suites behind the `audit` subcommand.
//!
//! Every check compares the implementation against something computed a
//! different way: brute-force Jacobians through LU, central differences,
//! scalar reference loops or closed forms. Suites 1 to 7 and 11 in
//! [`Suite::criterion`] line up with the acceptance criteria of the same number.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::coupling::{coupling_forward, coupling_inverse, pin_log_scale, stack_forward, stack_inverse, CouplingBlock, CouplingStack};
use crate::data::{
    decode_cube, degrade_lrhsi, encode_cube, extract_patches, read_cube, simulate_hrmsi, synth_scene, write_cube, CubeData, Downsample,
    PatchConfig, SpectralResponse,
};
use crate::error::{invalid, Result};
use crate::fam_lora::{fam_lora_forward, multihead_lora, FamLoraBlock, LoraHead, LORA_HEADS};
use crate::gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
use crate::loss::{composite_loss, LossConfig};
use crate::metrics::{ergas, psnr, sam, ssim, SSIM_SIGMA, SSIM_WINDOW};
use crate::model::{decode_checkpoint, encode_checkpoint, parameter_count, pifnet_forward, restore, PifNet, PifNetConfig};
use crate::nn::{
    bicubic_upsample, bicubic_upsample_var, lka_forward, se_forward, Conv2dLayer, ConvSpec, Init, LayerNorm, LkaLayer, SeLayer,
};
use crate::params::{ParamId, ParamStore};
use crate::prior::{extract_prior, residue_channel_gate, HfSemanticPerception, PriorExtractor};
use crate::ssm::{
    reset_scan_update_count, scan_update_count, selective_scan, selective_scan_1d, ss2d_forward, ssmm_forward, SelectiveScanParams, Ss2d,
    SsmmBlock, STATE_SIZE,
};
use crate::tensor::Tensor;
use crate::train::{adamw_step, clip_grad_norm, lr_at, train, AdamW, ExperimentConfig, TrainState, LR_HALVING_EPOCHS};

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Suite {
    Wavelet,
    Coupling,
    LogDet,
    Gradients,
    Identity,
    Freeze,
    Metrics,
    Formats,
    Tensor,
    Layers,
    Scan,
    Prior,
    FamLora,
    Model,
    Data,
    Training,
}

impl Suite {
    pub const ALL: [Suite; 16] = [
        Suite::Wavelet,
        Suite::Coupling,
        Suite::LogDet,
        Suite::Gradients,
        Suite::Identity,
        Suite::Freeze,
        Suite::Metrics,
        Suite::Formats,
        Suite::Tensor,
        Suite::Layers,
        Suite::Scan,
        Suite::Prior,
        Suite::FamLora,
        Suite::Model,
        Suite::Data,
        Suite::Training,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Wavelet => "wavelet",
            Suite::Coupling => "coupling",
            Suite::LogDet => "logdet",
            Suite::Gradients => "gradients",
            Suite::Identity => "identity",
            Suite::Freeze => "freeze",
            Suite::Metrics => "metrics",
            Suite::Formats => "formats",
            Suite::Tensor => "tensor",
            Suite::Layers => "layers",
            Suite::Scan => "scan",
            Suite::Prior => "prior",
            Suite::FamLora => "fam-lora",
            Suite::Model => "model",
            Suite::Data => "data",
            Suite::Training => "training",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn criterion(self) -> Option<u8> {
        Some(match self {
            Suite::Wavelet => 1,
            Suite::Coupling => 2,
            Suite::LogDet => 3,
            Suite::Gradients => 4,
            Suite::Identity => 5,
            Suite::Freeze => 6,
            Suite::Metrics => 7,
            Suite::Formats => 11,
            _ => return None,
        })
    }

    /// Wall-clock budget in seconds.
    pub fn budget(self) -> Option<f64> {
        match self {
            Suite::Wavelet => Some(1.0),
            Suite::Coupling => Some(10.0),
            Suite::LogDet => Some(30.0),
            Suite::Gradients => Some(300.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub suites: Vec<SuiteReport>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }

    pub fn suite(&self, s: Suite) -> Option<&SuiteReport> {
        self.suites.iter().find(|r| r.suite == s)
    }

    pub fn failures(&self) -> Vec<(Suite, &Check)> {
        self.suites
            .iter()
            .flat_map(|r| r.checks.iter().filter(|c| !c.passed).map(move |c| (r.suite, c)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let tag = r.suite.criterion().map(|c| format!(" (criterion {c})")).unwrap_or_default();
            s.push_str(&format!(
                "[{}] {}{tag}: {}/{} checks, {:.2} s\n",
                if r.passed() { "PASS" } else { "FAIL" },
                r.suite.name(),
                r.checks.iter().filter(|c| c.passed).count(),
                r.checks.len(),
                r.seconds
            ));
            for c in &r.checks {
                s.push_str(&format!("    {} {}: {}\n", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail));
            }
        }
        let failed = self.failures().len();
        s.push_str(&format!("audit {}: {failed} failing checks\n", if failed == 0 { "passed" } else { "FAILED" }));
        s
    }
}

pub fn run_audit() -> AuditReport {
    run_suites(&Suite::ALL)
}

pub fn run_suites(suites: &[Suite]) -> AuditReport {
    AuditReport {
        suites: suites.iter().map(|&s| run_suite(s)).collect(),
    }
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    let start = Instant::now();
    let mut r = Recorder::default();
    match suite {
        Suite::Wavelet => wavelet_suite(&mut r),
        Suite::Coupling => coupling_suite(&mut r),
        Suite::LogDet => logdet_suite(&mut r),
        Suite::Gradients => gradient_suite(&mut r),
        Suite::Identity => identity_suite(&mut r),
        Suite::Freeze => freeze_suite(&mut r),
        Suite::Metrics => metrics_suite(&mut r),
        Suite::Formats => formats_suite(&mut r),
        Suite::Tensor => tensor_suite(&mut r),
        Suite::Layers => layers_suite(&mut r),
        Suite::Scan => scan_suite(&mut r),
        Suite::Prior => prior_suite(&mut r),
        Suite::FamLora => fam_suite(&mut r),
        Suite::Model => model_suite(&mut r),
        Suite::Data => data_suite(&mut r),
        Suite::Training => training_suite(&mut r),
    }
    let seconds = start.elapsed().as_secs_f64();
    if let Some(b) = suite.budget() {
        r.checks.push(Check {
            name: "runtime".into(),
            passed: seconds < b,
            detail: format!("{seconds:.3} s (budget {b} s)"),
        });
    }
    log::info!("audit suite {} done in {seconds:.2} s", suite.name());
    SuiteReport {
        suite,
        checks: r.checks,
        seconds,
    }
}

type Verdict = (bool, String);

#[derive(Default)]
struct Recorder {
    checks: Vec<Check>,
}

impl Recorder {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<Verdict>) {
        let (passed, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }
}

fn below(what: &str, v: f64, tol: f64) -> Verdict {
    (v < tol, format!("{what} {v:.3e} (tol {tol:e})"))
}

fn holds(ok: bool, detail: impl Into<String>) -> Verdict {
    (ok, detail.into())
}

fn all(vs: Vec<Verdict>) -> Verdict {
    let ok = vs.iter().all(|v| v.0);
    (ok, vs.into_iter().map(|v| v.1).collect::<Vec<_>>().join("; "))
}

fn grad_verdict(reports: &[GradcheckReport], tol: f64) -> Verdict {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let n: usize = reports.iter().map(|r| r.components).sum();
    let refined: usize = reports.iter().map(|r| r.refined).sum();
    let kinks = if refined > 0 { format!(", {refined} re-stepped across a kink") } else { String::new() };
    (
        worst < tol && n > 0,
        format!("max rel error {worst:.2e} over {n} components{kinks} (tol {tol:e})"),
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probe<'t>(t: &'t Tape<f64>, v: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(v.mul(t.constant(w.clone()))?.sum_all())
}

fn cst<'t>(t: &'t Tape<f64>, x: &Tensor<f64>) -> Var<'t, f64> {
    t.constant(x.clone())
}

fn randomize(ps: &mut ParamStore<f64>, ids: &[ParamId], std: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, Tensor::randn(&shape, std, rng));
    }
}

fn coupling_outs(b: &CouplingBlock) -> Vec<ParamId> {
    [&b.i1, &b.i2, &b.i3].iter().flat_map(|s| s.out.param_ids()).collect()
}

/// Central-difference Jacobian of a square map, then log|det| through LU.
fn fd_log_abs_det(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x0: &[f64]) -> Result<f64> {
    let n = x0.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut up = x0.to_vec();
        let mut dn = x0.to_vec();
        up[j] += EPS;
        dn[j] -= EPS;
        let (fu, fd) = (f(&up)?, f(&dn)?);
        if fu.len() != n {
            return Err(invalid("audit", "map is not square"));
        }
        for i in 0..n {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * EPS);
        }
    }
    Ok(jac.lu().determinant().abs().ln())
}

/// Coupling-style map on the stacked `[xh, xl]` vector.
fn stacked(shape: &[usize], f: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)>) -> impl Fn(&[f64]) -> Result<Vec<f64>> {
    let shape = shape.to_vec();
    move |v: &[f64]| {
        let n = v.len() / 2;
        let h = Tensor::from_vec(&shape, v[..n].to_vec())?;
        let l = Tensor::from_vec(&shape, v[n..].to_vec())?;
        let (h2, l2) = f(&h, &l)?;
        Ok(h2.data().iter().chain(l2.data()).copied().collect())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

/// Micro model with every zero-initialized output layer given random values.
fn awake_micro(seed: u64, pass2_frozen: bool) -> Result<(PifNet, ParamStore<f64>, [Tensor<f64>; 3])> {
    let mut rng = rng(seed);
    let mut ps = ParamStore::<f64>::new();
    let cfg = PifNetConfig {
        pass2_frozen,
        ..PifNetConfig::micro(4, 2, 2)
    };
    let m = PifNet::new(cfg, &mut ps, &mut rng)?;
    let mut ids: Vec<ParamId> = m.stack.blocks.iter().flat_map(coupling_outs).collect();
    ids.extend(m.tail.b.param_ids());
    ids.extend(m.spec_tail.b.param_ids());
    for f in &m.fam {
        ids.extend(f.t4.param_ids());
        ids.extend(f.heads.iter().map(|h| h.up));
    }
    randomize(&mut ps, &ids, 0.2, &mut rng);
    let x = Tensor::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut rng);
    let z = Tensor::rand_uniform(&[8, 8, 4], 0.0, 1.0, &mut rng);
    Ok((m, ps, [x, y, z]))
}

fn wavelet_suite(r: &mut Recorder) {
    let mut g = rng(1);
    let x64 = Tensor::<f64>::randn(&[64, 64, 8], 1.0, &mut g);
    let x32: Tensor<f32> = x64.cast();
    r.check("round trip f64 [64,64,8]", || {
        let back = crate::wavelet::haar_synthesize(&crate::wavelet::haar_analyze(&x64)?)?;
        Ok(below("max abs error", back.max_abs_diff(&x64)?, 1e-12))
    });
    r.check("round trip f32 [64,64,8]", || {
        let back = crate::wavelet::haar_synthesize(&crate::wavelet::haar_analyze(&x32)?)?;
        Ok(below("max abs error", back.max_abs_diff(&x32)? as f64, 1e-6))
    });
    r.check("energy preserved", || {
        let p = crate::wavelet::haar_analyze(&x64)?;
        let bands = p.ll.sum_sq() + p.lh.sum_sq() + p.hl.sum_sq() + p.hh.sum_sq();
        let p32 = crate::wavelet::haar_analyze(&x32)?;
        let bands32 = [&p32.ll, &p32.lh, &p32.hl, &p32.hh].iter().map(|t| t.cast::<f64>().sum_sq()).sum::<f64>();
        let e32 = x32.cast::<f64>().sum_sq();
        Ok(all(vec![
            below("f64 relative", rel(bands, x64.sum_sq()), 1e-5),
            below("f32 relative", rel(bands32, e32), 1e-5),
        ]))
    });
    r.check("2x2 block formulas", || {
        let p = crate::wavelet::haar_analyze(&x64)?;
        let mut worst = 0.0f64;
        for (i, j, c) in [(0, 0, 0), (5, 17, 3), (31, 31, 7)] {
            let v = |di: usize, dj: usize| x64.get(&[2 * i + di, 2 * j + dj, c]);
            let (a, b, cc, d) = (v(0, 0), v(0, 1), v(1, 0), v(1, 1));
            let want = [(a + b + cc + d) / 2.0, (a + b - cc - d) / 2.0, (a - b + cc - d) / 2.0, (a - b - cc + d) / 2.0];
            for (band, w) in [&p.ll, &p.lh, &p.hl, &p.hh].iter().zip(want) {
                worst = worst.max((band.get(&[i, j, c]) - w).abs());
            }
        }
        Ok(below("max deviation", worst, 1e-14))
    });
    r.check("constant image energy in ll", || {
        let x = Tensor::<f64>::full(&[8, 6, 3], 0.7);
        let p = crate::wavelet::haar_analyze(&x)?;
        let details = p.details()?.max_abs();
        Ok(all(vec![
            holds(details == 0.0, format!("detail max {details:e}")),
            below("ll energy relative gap", rel(p.ll.sum_sq(), x.sum_sq()), 1e-12),
        ]))
    });
    r.check("odd extents rejected", || {
        Ok(holds(crate::wavelet::haar_analyze(&Tensor::<f64>::zeros(&[5, 4, 1])).is_err(), "[5,4,1] rejected"))
    });
}

fn coupling_suite(r: &mut Recorder) {
    r.check("100 random parameterizations, f64 and f32", || {
        let (mut e64, mut e32) = (0.0f64, 0.0f64);
        for i in 0..100 {
            let mut g = rng(1000 + i);
            let mut ps = ParamStore::<f64>::new();
            let b = CouplingBlock::new(&mut ps, "c", 8, STATE_SIZE, &mut g)?;
            randomize(&mut ps, &coupling_outs(&b), 0.3, &mut g);
            let xh = Tensor::<f64>::randn(&[8, 8, 8], 1.0, &mut g);
            let xl = Tensor::<f64>::randn(&[8, 8, 8], 1.0, &mut g);
            let (h, l, _) = coupling_forward(&xh, &xl, &b, &ps)?;
            let (rh, rl) = coupling_inverse(&h, &l, &b, &ps)?;
            e64 = e64.max(rh.max_abs_diff(&xh)?).max(rl.max_abs_diff(&xl)?);
            let ps32: ParamStore<f32> = ps.cast();
            let (xh32, xl32): (Tensor<f32>, Tensor<f32>) = (xh.cast(), xl.cast());
            let (h, l, _) = coupling_forward(&xh32, &xl32, &b, &ps32)?;
            let (rh, rl) = coupling_inverse(&h, &l, &b, &ps32)?;
            e32 = e32.max(rh.max_abs_diff(&xh32)?.max(rl.max_abs_diff(&xl32)?) as f64);
        }
        Ok(all(vec![below("f64 max abs error", e64, 1e-9), below("f32 max abs error", e32, 1e-4)]))
    });
    r.check("stack of three round trip", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f64>::new();
        let s = CouplingStack::new(&mut ps, "s", 3, 8, STATE_SIZE, &mut g)?;
        for b in &s.blocks {
            randomize(&mut ps, &coupling_outs(b), 0.3, &mut g);
        }
        let xh = Tensor::<f64>::randn(&[6, 6, 8], 1.0, &mut g);
        let xl = Tensor::<f64>::randn(&[6, 6, 8], 1.0, &mut g);
        let (h, l, _) = stack_forward(&xh, &xl, &s, &ps)?;
        let (rh, rl) = stack_inverse(&h, &l, &s, &ps)?;
        let moved = h.max_abs_diff(&xh)?;
        Ok(all(vec![
            below("max abs error", rh.max_abs_diff(&xh)?.max(rl.max_abs_diff(&xl)?), 1e-9),
            holds(moved > 1e-3, format!("forward moves the input by {moved:.3}")),
        ]))
    });
    r.check("forward then inverse has identity VJP", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut g)?;
        randomize(&mut ps, &coupling_outs(&b), 0.4, &mut g);
        let wh = Tensor::randn(&[3, 3, 4], 1.0, &mut g);
        let wl = Tensor::randn(&[3, 3, 4], 1.0, &mut g);
        let t = Tape::new();
        let xh = t.leaf(Tensor::randn(&[3, 3, 4], 1.0, &mut g));
        let xl = t.leaf(Tensor::randn(&[3, 3, 4], 1.0, &mut g));
        let (h, l, _) = b.forward(&ps, xh, xl)?;
        let (rh, rl) = b.inverse(&ps, h, l)?;
        let loss = probe(&t, rh, &wh)?.add(probe(&t, rl, &wl)?)?;
        let gr = t.backward(loss)?;
        let err = gr.wrt(xh).map_or(f64::INFINITY, |v| v.max_abs_diff(&wh).unwrap_or(f64::INFINITY));
        let err = err.max(gr.wrt(xl).map_or(f64::INFINITY, |v| v.max_abs_diff(&wl).unwrap_or(f64::INFINITY)));
        Ok(below("VJP deviation", err, 1e-9))
    });
    r.check("mismatched streams rejected", || {
        let mut g = rng(4);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut g)?;
        let bad = coupling_forward(&Tensor::zeros(&[2, 2, 4]), &Tensor::zeros(&[2, 3, 4]), &b, &ps).is_err();
        Ok(holds(bad, "shape mismatch rejected"))
    });
}

fn logdet_suite(r: &mut Recorder) {
    let pinned = |channels: usize, shape: [usize; 3], c: f64, seed: u64| -> Result<Verdict> {
        let mut g = rng(seed);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", channels, 4, &mut g)?;
        randomize(&mut ps, &coupling_outs(&b), 0.4, &mut g);
        pin_log_scale(&b, &mut ps, c)?;
        let xh = Tensor::randn(&shape, 1.0, &mut g);
        let xl = Tensor::randn(&shape, 1.0, &mut g);
        let (_, _, ld) = coupling_forward(&xh, &xl, &b, &ps)?;
        let want = c * xl.len() as f64;
        let x0: Vec<f64> = xh.data().iter().chain(xl.data()).copied().collect();
        let fd = fd_log_abs_det(stacked(&shape, |h, l| coupling_forward(h, l, &b, &ps).map(|(a, b, _)| (a, b))), &x0)?;
        Ok(all(vec![
            below(&format!("|logdet - c*{}|", xl.len()), (ld - want).abs(), 1e-12),
            below("relative gap to FD Jacobian", rel(ld, fd), 1e-3),
        ]))
    };
    r.check("constant scale on [1,1,2]", || pinned(2, [1, 1, 2], 0.37, 11));
    r.check("constant scale on [2,2,4] (32 elements)", || pinned(4, [2, 2, 4], -0.6, 12));
    r.check("random blocks vs FD Jacobian", || {
        let mut vs = Vec::new();
        for seed in 0..3 {
            let mut g = rng(100 + seed);
            let mut ps = ParamStore::<f64>::new();
            let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut g)?;
            randomize(&mut ps, &coupling_outs(&b), 0.5, &mut g);
            let xh = Tensor::randn(&[2, 2, 4], 1.0, &mut g);
            let xl = Tensor::randn(&[2, 2, 4], 1.0, &mut g);
            let (_, _, ld) = coupling_forward(&xh, &xl, &b, &ps)?;
            let x0: Vec<f64> = xh.data().iter().chain(xl.data()).copied().collect();
            let fd = fd_log_abs_det(stacked(&[2, 2, 4], |h, l| coupling_forward(h, l, &b, &ps).map(|(a, b, _)| (a, b))), &x0)?;
            vs.push(below(&format!("seed {seed} relative gap"), rel(ld, fd), 1e-3));
        }
        Ok(all(vs))
    });
    r.check("stack total vs FD Jacobian", || {
        let mut g = rng(5);
        let mut ps = ParamStore::<f64>::new();
        let s = CouplingStack::new(&mut ps, "s", 2, 4, 4, &mut g)?;
        for b in &s.blocks {
            randomize(&mut ps, &coupling_outs(b), 0.4, &mut g);
        }
        let xh = Tensor::randn(&[2, 2, 4], 1.0, &mut g);
        let xl = Tensor::randn(&[2, 2, 4], 1.0, &mut g);
        let (_, _, ld) = stack_forward(&xh, &xl, &s, &ps)?;
        let x0: Vec<f64> = xh.data().iter().chain(xl.data()).copied().collect();
        let fd = fd_log_abs_det(stacked(&[2, 2, 4], |h, l| stack_forward(h, l, &s, &ps).map(|(a, b, _)| (a, b))), &x0)?;
        Ok(below("relative gap", rel(ld, fd), 1e-3))
    });
    r.check("Haar transform has zero log-det", || {
        let mut g = rng(6);
        let x = Tensor::<f64>::randn(&[4, 4, 2], 1.0, &mut g);
        let fd = fd_log_abs_det(
            |v| {
                let t = Tensor::from_vec(&[4, 4, 2], v.to_vec())?;
                Ok(crate::wavelet::haar_analyze(&t)?.packed()?.into_vec())
            },
            x.data(),
        )?;
        Ok(below("|log det|", fd.abs(), 1e-9))
    });
    r.check("spectral branch log-det is the stack total", || {
        let (m, ps, [x, _, _]) = awake_micro(7, true)?;
        let t = Tape::no_grad();
        let sp = m.spectral_branch(&ps, t.constant(x.clone()))?;
        let x_up = bicubic_upsample(&x, m.cfg.scale)?;
        let f = m.proj.apply(&ps, &m.hsi_head.forward(&ps, t.constant(x_up))?.value())?;
        let packed = crate::wavelet::haar_analyze(&f)?.packed()?;
        let d = m.cfg.d;
        let xh = m.reduce.apply(&ps, &packed.narrow_last(d, 3 * d)?)?;
        let (_, _, total) = stack_forward(&xh, &packed.narrow_last(0, d)?, &m.stack, &ps)?;
        let got = sp.logdet.item();
        Ok(holds(got == total && total != 0.0, format!("branch {got:e}, stack {total:e}")))
    });
}

fn gradient_suite(r: &mut Recorder) {
    r.check("conv2d dense, strided and grouped-dilated", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f64>::new();
        let specs = [
            (3, 4, ConvSpec::same(3), [5, 5, 3]),
            (3, 4, ConvSpec::valid(3).stride(2), [7, 7, 3]),
            (4, 4, ConvSpec::same(3).dilation(2).groups(4), [6, 5, 4]),
            (4, 2, ConvSpec::same(3).groups(2), [4, 4, 4]),
        ];
        let mut reports = Vec::new();
        for (i, (cin, cout, spec, shape)) in specs.into_iter().enumerate() {
            let layer = Conv2dLayer::new(&mut ps, &format!("c{i}"), cin, cout, spec, Init::He, &mut g)?;
            randomize(&mut ps, &[layer.bias], 0.3, &mut g);
            let x = Tensor::<f64>::randn(&shape, 1.0, &mut g);
            let out = layer.apply(&ps, &x)?;
            let w = Tensor::randn(out.shape(), 1.0, &mut g);
            reports.push(gradcheck(|t, v| probe(t, layer.forward(&ps, v)?, &w), &x, EPS)?);
            reports.push(gradcheck_params(
                |t, p| probe(t, layer.forward(p, t.constant(x.clone()))?, &w),
                &ps,
                &layer.param_ids(),
                EPS,
                usize::MAX,
            )?);
        }
        Ok(grad_verdict(&reports, GRAD_TOL))
    });
    r.check("bicubic upsampling", || {
        let mut g = rng(2);
        let x = Tensor::<f64>::randn(&[3, 4, 2], 1.0, &mut g);
        let w = Tensor::randn(&[12, 16, 2], 1.0, &mut g);
        Ok(grad_verdict(&[gradcheck(|t, v| probe(t, bicubic_upsample_var(v, 4)?, &w), &x, EPS)?], GRAD_TOL))
    });
    r.check("layer norm", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6, &mut g);
        randomize(&mut ps, &ln.param_ids(), 1.0, &mut g);
        let x = Tensor::<f64>::randn(&[3, 3, 6], 1.0, &mut g);
        let w = Tensor::randn(&[3, 3, 6], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, ln.forward(&ps, v)?, &w), &x, EPS)?,
                gradcheck_params(|t, p| probe(t, ln.forward(p, t.constant(x.clone()))?, &w), &ps, &ln.param_ids(), EPS, usize::MAX)?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("Haar analysis and synthesis", || {
        let mut g = rng(4);
        let x = Tensor::<f64>::randn(&[4, 6, 2], 1.0, &mut g);
        let wa = Tensor::randn(&[2, 3, 8], 1.0, &mut g);
        let p = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut g);
        let ws = Tensor::randn(&[4, 6, 2], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, v.haar_analyze()?, &wa), &x, EPS)?,
                gradcheck(|t, v| probe(t, v.haar_synthesize()?, &ws), &p, EPS)?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("SE with injection", || {
        let mut g = rng(5);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 8, 4, &mut g)?;
        let x = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut g);
        let inj = Tensor::<f64>::randn(&[8], 1.0, &mut g);
        let w = Tensor::randn(&[5, 5, 8], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, se.forward(&ps, v, Some(t.constant(inj.clone())), false)?, &w), &x, EPS)?,
                gradcheck(|t, v| probe(t, se.forward(&ps, t.constant(x.clone()), Some(v), false)?, &w), &inj, EPS)?,
                gradcheck_params(
                    |t, p| probe(t, se.forward(p, t.constant(x.clone()), Some(t.constant(inj.clone())), false)?, &w),
                    &ps,
                    &se.param_ids(),
                    EPS,
                    usize::MAX,
                )?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("LKA", || {
        let mut g = rng(6);
        let mut ps = ParamStore::<f64>::new();
        let lka = LkaLayer::new(&mut ps, "lka", 4, &mut g)?;
        let x = Tensor::<f64>::randn(&[6, 6, 4], 1.0, &mut g);
        let w = Tensor::randn(&[6, 6, 4], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, lka.forward(&ps, v, false)?, &w), &x, EPS)?,
                gradcheck_params(|t, p| probe(t, lka.forward(p, t.constant(x.clone()), false)?, &w), &ps, &lka.param_ids(), EPS, 8)?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("selective scan, all six inputs", || {
        let mut g = rng(7);
        let (p, ch, n) = (6, 2, 3);
        let inputs = [
            Tensor::<f64>::randn(&[p, ch], 1.0, &mut g),
            Tensor::<f64>::rand_uniform(&[p, ch], 0.2, 1.0, &mut g),
            Tensor::<f64>::randn(&[p, n], 1.0, &mut g),
            Tensor::<f64>::randn(&[p, n], 1.0, &mut g),
            Tensor::<f64>::rand_uniform(&[ch, n], -1.5, -0.1, &mut g),
            Tensor::<f64>::randn(&[ch], 1.0, &mut g),
        ];
        let w = Tensor::<f64>::randn(&[p, ch], 1.0, &mut g);
        let order = vec![3, 0, 5, 1, 4, 2];
        let mut reports = Vec::new();
        for which in 0..6 {
            reports.push(gradcheck(
                |t, v| {
                    let mut vars: Vec<Var<'_, f64>> = inputs.iter().map(|i| t.constant(i.clone())).collect();
                    vars[which] = v;
                    probe(t, selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], order.clone())?, &w)
                },
                &inputs[which],
                EPS,
            )?);
        }
        Ok(grad_verdict(&reports, GRAD_TOL))
    });
    r.check("SSMM on 4x4x8", || {
        let mut g = rng(8);
        let mut ps = ParamStore::<f64>::new();
        let b = SsmmBlock::new(&mut ps, "m", 8, STATE_SIZE, Init::He, &mut g)?;
        let x = Tensor::<f64>::randn(&[4, 4, 8], 1.0, &mut g);
        let w = Tensor::randn(&[4, 4, 8], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, b.forward(&ps, v)?, &w), &x, EPS)?,
                gradcheck_params(|t, p| probe(t, b.forward(p, t.constant(x.clone()))?, &w), &ps, &b.param_ids(), EPS, 3)?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("coupling forward, inverse and log-det", || {
        let mut g = rng(9);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut g)?;
        randomize(&mut ps, &coupling_outs(&b), 0.4, &mut g);
        let xh = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut g);
        let xl = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut g);
        let wh = Tensor::randn(&[3, 3, 4], 1.0, &mut g);
        let wl = Tensor::randn(&[3, 3, 4], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(
                    |t, v| {
                        let (h, l, ld) = b.forward(&ps, v, t.constant(xl.clone()))?;
                        probe(t, h, &wh)?.add(probe(t, l, &wl)?)?.add(ld)
                    },
                    &xh,
                    EPS,
                )?,
                gradcheck(
                    |t, v| {
                        let (h, l, ld) = b.forward(&ps, t.constant(xh.clone()), v)?;
                        probe(t, h, &wh)?.add(probe(t, l, &wl)?)?.add(ld)
                    },
                    &xl,
                    EPS,
                )?,
                gradcheck(
                    |t, v| {
                        let (h, l) = b.inverse(&ps, v, t.constant(xl.clone()))?;
                        probe(t, h, &wh)?.add(probe(t, l, &wl)?)
                    },
                    &xh,
                    EPS,
                )?,
                gradcheck_params(
                    |t, p| {
                        let (h, l, ld) = b.forward(p, t.constant(xh.clone()), t.constant(xl.clone()))?;
                        probe(t, h, &wh)?.add(probe(t, l, &wl)?)?.add(ld)
                    },
                    &ps,
                    &b.param_ids(),
                    EPS,
                    2,
                )?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("prior extraction and high-frequency guidance", || {
        let mut g = rng(10);
        let mut ps = ParamStore::<f64>::new();
        let p = PriorExtractor::new(&mut ps, "p", 4, 0.8, &mut g)?;
        let m = HfSemanticPerception::new(&mut ps, "hf", 4, &mut g)?;
        let xs = Tensor::<f64>::randn(&[6, 6, 4], 1.0, &mut g);
        let ys = Tensor::<f64>::randn(&[6, 6, 4], 1.0, &mut g);
        let xh = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut g);
        let w = Tensor::randn(&[6, 6, 4], 1.0, &mut g);
        let mut ids = p.param_ids();
        ids.extend(m.param_ids());
        Ok(grad_verdict(
            &[
                gradcheck(
                    |t, v| probe(t, m.forward(&ps, t.constant(xh.clone()), p.forward(&ps, v, t.constant(ys.clone()))?)?, &w),
                    &xs,
                    EPS,
                )?,
                gradcheck(
                    |t, v| probe(t, m.forward(&ps, t.constant(xh.clone()), p.forward(&ps, t.constant(xs.clone()), v)?)?, &w),
                    &ys,
                    EPS,
                )?,
                gradcheck(
                    |t, v| probe(t, m.forward(&ps, v, p.forward(&ps, t.constant(xs.clone()), t.constant(ys.clone()))?)?, &w),
                    &xh,
                    EPS,
                )?,
                gradcheck_params(
                    |t, q| {
                        let xr = p.forward(q, t.constant(xs.clone()), t.constant(ys.clone()))?;
                        probe(t, m.forward(q, t.constant(xh.clone()), xr)?, &w)
                    },
                    &ps,
                    &ids,
                    EPS,
                    4,
                )?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("FAM-LoRA block, unfrozen", || {
        let mut g = rng(11);
        let mut ps = ParamStore::<f64>::new();
        let mut b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        b.set_pass2_frozen(false);
        let mut wake: Vec<ParamId> = b.t4.param_ids().to_vec();
        wake.extend(b.heads.iter().map(|h| h.up));
        randomize(&mut ps, &wake, 0.5, &mut g);
        let y = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut g);
        let xr = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut g);
        let w = Tensor::randn(&[5, 5, 8], 1.0, &mut g);
        Ok(grad_verdict(
            &[
                gradcheck(|t, v| probe(t, b.forward(&ps, v, Some(t.constant(xr.clone())))?, &w), &y, EPS)?,
                gradcheck(|t, v| probe(t, b.forward(&ps, t.constant(y.clone()), Some(v))?, &w), &xr, EPS)?,
                gradcheck_params(
                    |t, p| probe(t, b.forward(p, t.constant(y.clone()), Some(t.constant(xr.clone())))?, &w),
                    &ps,
                    &b.param_ids(),
                    EPS,
                    3,
                )?,
            ],
            GRAD_TOL,
        ))
    });
    r.check("loss terms", || {
        let mut g = rng(12);
        let z = Tensor::<f64>::rand_uniform(&[3, 3, 4], 0.0, 1.0, &mut g);
        let z_bar = Tensor::<f64>::rand_uniform(&[3, 3, 4], 0.0, 1.0, &mut g);
        let z_hat = Tensor::<f64>::rand_uniform(&[3, 3, 4], 0.0, 1.0, &mut g);
        let ld = Tensor::scalar(-0.9);
        let only = |inv: f64, cos: f64, pp: bool| LossConfig {
            lambda_inv: inv,
            lambda_cos: cos,
            per_pixel_cos: pp,
            ..LossConfig::default()
        };
        let mut reports = Vec::new();
        for cfg in [only(0.0, 0.0, false), only(1.0, 0.0, false), only(0.0, 1.0, false), only(0.0, 1.0, true), LossConfig::default()] {
            let c = cst;
            reports.push(gradcheck(|t, v| Ok(composite_loss(v, c(t, &z), c(t, &z_bar), c(t, &ld), 36, &cfg)?.0), &z_hat, EPS)?);
            reports.push(gradcheck(|t, v| Ok(composite_loss(c(t, &z_hat), c(t, &z), v, c(t, &ld), 36, &cfg)?.0), &z_bar, EPS)?);
            reports.push(gradcheck(|t, v| Ok(composite_loss(c(t, &z_hat), c(t, &z), c(t, &z_bar), v, 36, &cfg)?.0), &ld, EPS)?);
        }
        Ok(grad_verdict(&reports, GRAD_TOL))
    });
    r.check("end-to-end micro model", || {
        let (m, ps, [x, y, z]) = awake_micro(13, false)?;
        let rep = gradcheck_params(
            |t, p| {
                let out = m.forward(p, t.constant(x.clone()), t.constant(y.clone()))?;
                Ok(composite_loss(out.z_hat, t.constant(z.clone()), out.z_bar, out.logdet, out.coupled_len, &m.cfg.loss)?.0)
            },
            &ps,
            &m.param_ids(),
            EPS,
            2,
        )?;
        Ok(grad_verdict(&[rep], END_TO_END_TOL))
    });
}

fn identity_suite(r: &mut Recorder) {
    r.check("fresh FAM-LoRA block returns its input", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f64>::new();
        let b = FamLoraBlock::new(&mut ps, "f", 16, 2, &mut g)?;
        let y = Tensor::<f64>::randn(&[6, 7, 16], 1.0, &mut g);
        let xr = Tensor::<f64>::randn(&[6, 7, 16], 1.0, &mut g);
        let ps32: ParamStore<f32> = ps.cast();
        let y32: Tensor<f32> = y.cast();
        Ok(holds(
            fam_lora_forward(&y, &xr, &b, &ps)? == y && fam_lora_forward(&y32, &xr.cast(), &b, &ps32)? == y32,
            "bit-exact in f64 and f32",
        ))
    });
    r.check("fresh coupling stack is the identity with zero log-det", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f64>::new();
        let s = CouplingStack::new(&mut ps, "s", 3, 8, STATE_SIZE, &mut g)?;
        let xh = Tensor::<f64>::randn(&[6, 6, 8], 1.0, &mut g);
        let xl = Tensor::<f64>::randn(&[6, 6, 8], 1.0, &mut g);
        let (h, l, ld) = stack_forward(&xh, &xl, &s, &ps)?;
        Ok(holds(h == xh && l == xl && ld == 0.0, format!("logdet {ld:e}")))
    });
    r.check("fresh LoRA heads contribute zero", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let heads: Vec<LoraHead> = (0..LORA_HEADS).map(|j| LoraHead::new(&mut ps, &format!("h{j}"), 4, 2, &mut g)).collect::<Result<_>>()?;
        let x = Tensor::<f64>::randn(&[5, 5, 16], 1.0, &mut g);
        let ups_zero = heads.iter().all(|h| ps.value(h.up).max_abs() == 0.0);
        let downs_live = heads.iter().all(|h| ps.value(h.down).max_abs() > 0.0);
        Ok(holds(
            multihead_lora(&x, &heads, &ps)? == x && ups_zero && downs_live,
            "output == input; up factors zero, down factors Gaussian",
        ))
    });
    r.check("SSMM with zero fuse is the identity", || {
        let mut g = rng(4);
        let mut ps = ParamStore::<f64>::new();
        let b = SsmmBlock::new(&mut ps, "m", 16, STATE_SIZE, Init::Zero, &mut g)?;
        let x = Tensor::<f64>::randn(&[8, 8, 16], 1.0, &mut g);
        Ok(holds(ssmm_forward(&x, &b, &ps)? == x, "bit-exact"))
    });
}

fn freeze_suite(r: &mut Recorder) {
    r.check("freeze flag default and involution", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f64>::new();
        let mut b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        let default = b.pass2_frozen;
        b.toggle_pass2_frozen();
        let flipped = b.pass2_frozen;
        b.toggle_pass2_frozen();
        Ok(holds(default && !flipped && b.pass2_frozen, "frozen by default; two toggles restore it"))
    });

    fn wake(b: &FamLoraBlock, ps: &mut ParamStore<f64>, g: &mut ChaCha8Rng) {
        let mut ids: Vec<ParamId> = b.t4.param_ids().to_vec();
        ids.extend(b.heads.iter().map(|h| h.up));
        randomize(ps, &ids, 0.5, g);
    }
    fn grads(b: &FamLoraBlock, ps: &ParamStore<f64>, io: &[Tensor<f64>; 3], ids: &[ParamId]) -> Result<Vec<Tensor<f64>>> {
        let t = Tape::new();
        let out = b.forward(ps, t.constant(io[0].clone()), Some(t.constant(io[1].clone())))?;
        let g = t.backward(probe(&t, out, &io[2])?)?;
        Ok(ids
            .iter()
            .map(|&id| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(ps.value(id).shape())))
            .collect())
    }

    r.check("second pass adds no attention gradient (differencing)", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f64>::new();
        let mut shared = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        wake(&shared, &mut ps, &mut g);
        let io = [
            Tensor::randn(&[6, 6, 8], 1.0, &mut g),
            Tensor::randn(&[6, 6, 8], 1.0, &mut g).map(|v: f64| v.abs()),
            Tensor::randn(&[6, 6, 8], 1.0, &mut g),
        ];
        let first: Vec<ParamId> = shared.lka.param_ids().into_iter().chain(shared.se.param_ids()).collect();
        let frozen = grads(&shared, &ps, &io, &first)?;
        shared.set_pass2_frozen(false);
        let open = grads(&shared, &ps, &io, &first)?;
        // Control: the second pass owns a copy of the same weights.
        let mut split = shared.clone();
        split.split_second_pass(&mut ps, "f", &mut g)?;
        let (l2, s2) = split.second.clone().ok_or_else(|| invalid("audit", "no second pass"))?;
        let copy: Vec<ParamId> = l2.param_ids().into_iter().chain(s2.param_ids()).collect();
        let pass1 = grads(&split, &ps, &io, &first)?;
        let pass2 = grads(&split, &ps, &io, &copy)?;
        let (mut frozen_gap, mut sum_gap, mut open_gap) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..first.len() {
            let scale = open[i].max_abs().max(1e-12);
            frozen_gap = frozen_gap.max(pass1[i].max_abs_diff(&frozen[i])? / scale);
            sum_gap = sum_gap.max(pass1[i].add(&pass2[i])?.max_abs_diff(&open[i])? / scale);
            open_gap = open_gap.max(frozen[i].max_abs_diff(&open[i])? / scale);
        }
        Ok(all(vec![
            below("frozen vs pass-1-only gradient", frozen_gap, 1e-10),
            below("unfrozen vs pass 1 + pass 2", sum_gap, 1e-10),
            holds(open_gap > 1e-6, format!("unfreezing changes gradients by {open_gap:.2e}")),
        ]))
    });
    r.check("optimizer applies only the pass-1 gradient to attention weights", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        wake(&b, &mut ps, &mut g);
        let io = [
            Tensor::randn(&[5, 5, 8], 1.0, &mut g),
            Tensor::randn(&[5, 5, 8], 1.0, &mut g),
            Tensor::randn(&[5, 5, 8], 1.0, &mut g),
        ];
        let attn = b.attention_param_ids();
        // Pass-1 gradient from a split control whose copy receives the pass-2 share.
        let mut control = b.clone();
        let mut cps = ps.clone();
        control.set_pass2_frozen(false);
        control.split_second_pass(&mut cps, "f", &mut g)?;
        let pass1 = grads(&control, &cps, &io, &attn)?;

        let t = Tape::new();
        let out = b.forward(&ps, t.constant(io[0].clone()), Some(t.constant(io[1].clone())))?;
        let gr = t.backward(probe(&t, out, &io[2])?)?;
        ps.zero_grad();
        ps.accumulate(&gr, 1.0);
        let before: Vec<Tensor<f64>> = attn.iter().map(|&id| ps.value(id).clone()).collect();
        let opt = AdamW::default();
        let lr = 1e-3;
        let mut st = TrainState::new(&ps, lr, 0);
        adamw_step(&mut st, &mut ps, &opt);
        let mut worst = 0.0f64;
        for (k, &id) in attn.iter().enumerate() {
            for i in 0..before[k].len() {
                let (p, gi) = (before[k].data()[i], pass1[k].data()[i]);
                let m = (1.0 - opt.beta1) * gi / (1.0 - opt.beta1);
                let v = (1.0 - opt.beta2) * gi * gi / (1.0 - opt.beta2);
                let want = p - lr * (m / (v.sqrt() + opt.eps) + opt.weight_decay * p);
                worst = worst.max((ps.value(id).data()[i] - want).abs());
            }
        }
        Ok(below("max deviation from the pass-1-only update", worst, 1e-12))
    });
    r.check("frozen second-pass copy is never mutated", || {
        let mut g = rng(4);
        let mut ps = ParamStore::<f64>::new();
        let mut b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        wake(&b, &mut ps, &mut g);
        b.split_second_pass(&mut ps, "f", &mut g)?;
        let (l2, s2) = b.second.clone().ok_or_else(|| invalid("audit", "no second pass"))?;
        let copy: Vec<ParamId> = l2.param_ids().into_iter().chain(s2.param_ids()).collect();
        let before: Vec<Tensor<f64>> = copy.iter().map(|&id| ps.value(id).clone()).collect();
        let mut st = TrainState::new(&ps, 1e-2, 0);
        for _ in 0..3 {
            let y = Tensor::randn(&[5, 5, 8], 1.0, &mut g);
            let t = Tape::new();
            let out = b.forward(&ps, t.constant(y.clone()), Some(t.constant(y.map(|v| v.abs()))))?;
            let gr = t.backward(out.square().mean_all())?;
            ps.zero_grad();
            ps.accumulate(&gr, 1.0);
            adamw_step(&mut st, &mut ps, &AdamW::default());
        }
        let untouched = copy.iter().zip(&before).all(|(&id, v)| ps.value(id) == v && ps.get(id).grad().max_abs() == 0.0);
        Ok(holds(untouched, format!("{} copied tensors bit-identical after 3 steps", copy.len())))
    });
    r.check("frozen parameters reject every write path", || {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5])?);
        let b = ps.add("b", Tensor::from_vec(&[2], vec![0.3, 0.4])?);
        // Record a gradient first, then freeze.
        let t = Tape::new();
        let loss = ps.var(&t, a).square().sum_all().add(ps.var(&t, b).square().sum_all())?;
        let gr = t.backward(loss)?;
        ps.accumulate(&gr, 1.0);
        ps.set_frozen(a, true);
        let before = ps.value(a).clone();
        let rejected = !ps.set_value(a, Tensor::zeros(&[3])) && ps.value_mut(a).is_none() && ps.grad_mut(a).is_none();
        ps.accumulate(&gr, 1.0);
        let mut st = TrainState::new(&ps, 0.1, 0);
        let stepped = adamw_step(&mut st, &mut ps, &AdamW::default());
        Ok(holds(
            rejected && stepped && ps.value(a) == &before && ps.get(a).grad().max_abs() == 0.0 && ps.value(b).data()[0] != 0.3,
            "set_value, value_mut, grad_mut, accumulate and adamw_step leave it untouched",
        ))
    });
}

/// Gaussian-window SSIM computed with explicit loops.
fn ssim_reference(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    let (h, w, c) = a.dims3()?;
    let k = SSIM_WINDOW;
    let half = (k / 2) as i64;
    let g1: Vec<f64> = (-half..=half).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s1: f64 = g1.iter().sum();
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut total = 0.0;
    for band in 0..c {
        let (mut acc, mut count) = (0.0, 0.0);
        for i in 0..=h - k {
            for j in 0..=w - k {
                let wt = |di: usize, dj: usize| g1[di] * g1[dj] / (s1 * s1);
                let px = |t: &Tensor<f64>, di: usize, dj: usize| t.get(&[i + di, j + dj, band]);
                let (mut ma, mut mb) = (0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        ma += wt(di, dj) * px(a, di, dj);
                        mb += wt(di, dj) * px(b, di, dj);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let (x, y) = (px(a, di, dj) - ma, px(b, di, dj) - mb);
                        va += wt(di, dj) * x * x;
                        vb += wt(di, dj) * y * y;
                        cov += wt(di, dj) * x * y;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    Ok(total / c as f64)
}

fn metrics_suite(r: &mut Recorder) {
    let mut g = rng(1);
    let a = Tensor::<f64>::rand_uniform(&[14, 13, 5], 0.1, 1.0, &mut g);
    let b = a.add(&Tensor::randn(&[14, 13, 5], 0.05, &mut g)).unwrap_or_else(|_| a.clone());
    r.check("PSNR uniform error 0.5 on peak 1", || {
        let z = Tensor::<f64>::full(&[8, 8, 3], 0.25);
        let e = z.map(|v| v + 0.5);
        Ok(below("|PSNR - 6.0206|", (psnr(&z, &e, 1.0)? - 6.0206).abs(), 1e-3))
    });
    r.check("SAM scale invariance and orthogonality", || {
        let (s, _) = sam(&a, &b)?;
        let (s2, _) = sam(&a, &b.scale(3.7))?;
        let e1 = Tensor::from_vec(&[1, 1, 3], vec![0.0, 2.0, 0.0])?;
        let e2 = Tensor::from_vec(&[1, 1, 3], vec![0.0, 0.0, 0.5])?;
        let (right, _) = sam(&e1, &e2)?;
        Ok(all(vec![below("scale gap (deg)", (s - s2).abs(), 1e-4), below("|angle - 90|", (right - 90.0).abs(), 1e-4)]))
    });
    r.check("ERGAS closed form", || {
        // Constant reference 1, uniform error 0.1, ratio 4: 25 * sqrt(0.01) = 2.5.
        let z = Tensor::<f64>::ones(&[6, 6, 3]);
        let e = z.map(|v| v + 0.1);
        Ok(below("|ERGAS - 2.5|", (ergas(&z, &e, 4.0)? - 2.5).abs(), 1e-6))
    });
    r.check("SSIM self-comparison and symmetry", || {
        let s_self = ssim(&a, &a, 1.0)?;
        let (ab, ba) = (ssim(&a, &b, 1.0)?, ssim(&b, &a, 1.0)?);
        Ok(all(vec![below("|SSIM(a,a) - 1|", (s_self - 1.0).abs(), 1e-12), below("|SSIM(a,b) - SSIM(b,a)|", (ab - ba).abs(), 1e-15)]))
    });
    r.check("metrics match scalar reference loops", || {
        let (h, w, c) = a.dims3()?;
        let n = (h * w * c) as f64;
        let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let psnr_ref = 10.0 * (1.0 / (se / n)).log10();
        let mut angle = 0.0;
        for p in 0..h * w {
            let (pa, pb) = (&a.data()[p * c..p * c + c], &b.data()[p * c..p * c + c]);
            let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
            let mut cross = 0.0;
            for i in 0..c {
                for j in i + 1..c {
                    cross += (pa[i] * pb[j] - pa[j] * pb[i]).powi(2);
                }
            }
            angle += f64::atan2(cross.sqrt(), dot).to_degrees();
        }
        let sam_ref = angle / (h * w) as f64;
        let mut terms = 0.0;
        for band in 0..c {
            let (mut e, mut s) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    e += (a.get(&[i, j, band]) - b.get(&[i, j, band])).powi(2);
                    s += a.get(&[i, j, band]);
                }
            }
            let m = (h * w) as f64;
            terms += (e / m) / (s / m).powi(2);
        }
        let ergas_ref = 25.0 * (terms / c as f64).sqrt();
        Ok(all(vec![
            below("PSNR gap", (psnr(&a, &b, 1.0)? - psnr_ref).abs(), 1e-9),
            below("SAM gap (deg)", (sam(&a, &b)?.0 - sam_ref).abs(), 1e-4),
            below("ERGAS gap", (ergas(&a, &b, 4.0)? - ergas_ref).abs(), 1e-9),
            below("SSIM gap", (ssim(&a, &b, 1.0)? - ssim_reference(&a, &b, 1.0)?).abs(), 1e-6),
        ]))
    });
    r.check("PSNR and ERGAS monotone in per-band MSE", || {
        let noise = Tensor::<f64>::randn(a.shape(), 0.02, &mut rng(2));
        let mut last = (f64::INFINITY, 0.0);
        let mut ok = true;
        for k in [1.0, 1.5, 2.0, 4.0] {
            let e = a.add(&noise.scale(k))?;
            let (p, q) = (psnr(&a, &e, 1.0)?, ergas(&a, &e, 4.0)?);
            ok &= p < last.0 && q > last.1;
            last = (p, q);
        }
        Ok(holds(ok, "PSNR strictly falls and ERGAS strictly rises as the error grows"))
    });
    r.check("loss terms nonnegative, zero iff perfect", || {
        let t = Tape::no_grad();
        let c = |x: &Tensor<f64>| t.constant(x.clone());
        let cfg = LossConfig::default();
        let z = a.clone();
        let perfect = composite_loss(c(&z), c(&z), c(&z.scale(2.0)), c(&Tensor::scalar(0.0)), 10, &cfg)?.1;
        let mut nonneg = true;
        let mut positive = true;
        for (zh, zb, ld) in [(&b, &z, 0.0), (&z, &b, 0.0), (&z, &z, -0.3), (&b, &b, 0.4)] {
            let l = composite_loss(c(zh), c(&z), c(zb), c(&Tensor::scalar(ld)), 10, &cfg)?.1;
            nonneg &= l.l1 >= 0.0 && l.l_inv >= 0.0 && l.l_cos >= 0.0;
            positive &= l.total > 0.0;
        }
        Ok(holds(
            perfect.total.abs() < 1e-12 && nonneg && positive,
            format!("perfect total {:.1e}; every imperfection gives a positive total", perfect.total),
        ))
    });
}

fn formats_suite(r: &mut Recorder) {
    r.check("HSC1 round trip f32 and f64", || {
        let mut g = rng(1);
        let t32 = Tensor::<f32>::randn(&[7, 5, 3], 1.0, &mut g);
        let t64 = Tensor::<f64>::randn(&[4, 6, 2], 1.0, &mut g);
        let b32 = encode_cube(&t32)?;
        let mem = decode_cube(&b32)? == CubeData::F32(t32.clone()) && decode_cube(&encode_cube(&t64)?)? == CubeData::F64(t64.clone());
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("c.hsc");
        write_cube(&p, &t64)?;
        let file = read_cube(&p)? == CubeData::F64(t64.clone()) && std::fs::read(&p)? == encode_cube(&t64)?;
        let truncated = decode_cube(&b32[..b32.len() - 1]).is_err();
        Ok(holds(mem && file && truncated, "bit-exact in memory and on disk; truncation rejected"))
    });
    r.check("checkpoint round trip", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f32>::new();
        let m = PifNet::new(PifNetConfig::micro(4, 2, 4), &mut ps, &mut g)?;
        for id in m.param_ids() {
            let shape = ps.value(id).shape().to_vec();
            ps.set_value(id, Tensor::randn(&shape, 0.1, &mut g));
        }
        let x = Tensor::<f32>::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut g);
        let y = Tensor::<f32>::rand_uniform(&[16, 16, 2], 0.0, 1.0, &mut g);
        let bytes = encode_checkpoint(&m.cfg, &ps)?;
        let (m2, ps2) = restore(decode_checkpoint::<f32>(&bytes)?)?;
        let same_out = pifnet_forward(&x, &y, &m, &ps)? == pifnet_forward(&x, &y, &m2, &ps2)?;
        let same_bytes = encode_checkpoint(&m2.cfg, &ps2)? == bytes;
        Ok(holds(same_out && same_bytes && m2.cfg == m.cfg, "outputs and re-encoded bytes identical"))
    });
    r.check("checkpoint round trip with a frozen second-pass copy", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let cfg = PifNetConfig {
            independent_second_pass: true,
            ..PifNetConfig::micro(4, 2, 2)
        };
        let m = PifNet::new(cfg, &mut ps, &mut g)?;
        let bytes = encode_checkpoint(&m.cfg, &ps)?;
        let (m2, ps2) = restore(decode_checkpoint::<f64>(&bytes)?)?;
        let flags = ps.iter().zip(ps2.iter()).all(|((_, a), (_, b))| a.frozen() == b.frozen() && a.value() == b.value());
        Ok(holds(flags && encode_checkpoint(&m2.cfg, &ps2)? == bytes, "values and freeze flags restored"))
    });
    r.check("identical config and seed reproduce the run", || {
        let cfg = smoke_experiment(5);
        let a = train::<f32>(&cfg)?;
        let b = train::<f32>(&cfg)?;
        let same_curve = a.curve.iter().zip(&b.curve).all(|(x, y)| x.total.to_bits() == y.total.to_bits() && x == y);
        let same_params = encode_checkpoint(&a.model.cfg, &a.params)? == encode_checkpoint(&b.model.cfg, &b.params)?;
        Ok(holds(
            same_curve && a.curve.len() == b.curve.len() && same_params && a.test == b.test,
            format!("{} steps, curves, weights and test metrics identical", a.curve.len()),
        ))
    });
}

/// A few steps of the micro model on four desk patches.
pub fn smoke_experiment(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(seed, 4);
    c.model = PifNetConfig::micro(16, 4, 4);
    c.max_steps = Some(6);
    c.batch_size = 2;
    if let Some(d) = c.dataset.as_mut() {
        d.max_train = Some(4);
    }
    c
}

fn tensor_suite(r: &mut Recorder) {
    r.check("seeded construction and forward are deterministic", || {
        let build = || -> Result<(Tensor<f32>, Tensor<f32>, f32)> {
            let mut g = rng(9);
            let mut ps = ParamStore::<f32>::new();
            let m = PifNet::new(PifNetConfig::micro(4, 2, 2), &mut ps, &mut g)?;
            for id in m.param_ids() {
                let shape = ps.value(id).shape().to_vec();
                ps.set_value(id, Tensor::randn(&shape, 0.1, &mut g));
            }
            let x = Tensor::<f32>::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut g);
            let y = Tensor::<f32>::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut g);
            pifnet_forward(&x, &y, &m, &ps)
        };
        let (a, b) = (build()?, build()?);
        Ok(holds(a.0 == b.0 && a.1 == b.1 && a.2.to_bits() == b.2.to_bits(), "bit-identical outputs"))
    });
    r.check("matmul matches a scalar loop", || {
        let mut g = rng(2);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut g);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut g);
        let t = Tape::no_grad();
        let got = t.constant(a.clone()).matmul(t.constant(b.clone()))?.value();
        let mut worst = 0.0f64;
        for i in 0..5 {
            for j in 0..3 {
                let want: f64 = (0..7).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
                worst = worst.max((got.get(&[i, j]) - want).abs());
            }
        }
        Ok(below("max deviation", worst, 1e-12))
    });
}

fn layers_suite(r: &mut Recorder) {
    r.check("SE and LKA preserve shape", || {
        let mut g = rng(1);
        let mut ok = true;
        for c in [4, 8] {
            let mut ps = ParamStore::<f64>::new();
            let se = SeLayer::new(&mut ps, "se", c, 4, &mut g)?;
            let lka = LkaLayer::new(&mut ps, "lka", c, &mut g)?;
            for (h, w) in [(1, 1), (3, 9), (16, 5)] {
                let x = Tensor::<f64>::randn(&[h, w, c], 1.0, &mut g);
                ok &= se_forward(&x, &se, &ps, None)?.shape() == x.shape() && lka_forward(&x, &lka, &ps)?.shape() == x.shape();
            }
        }
        Ok(holds(ok, "[H, W, C] preserved for six shapes and two widths"))
    });
    r.check("SE gates lie in (0, 1) and depend only on the pooled descriptor", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 8, 4, &mut g)?;
        let x = Tensor::<f64>::randn(&[5, 5, 8], 3.0, &mut g);
        // Reverse the pixel order; the channel means are unchanged.
        let mut shuffled = x.clone();
        for (dst, src) in shuffled.data_mut().chunks_mut(8).zip(x.data().chunks(8).rev()) {
            dst.copy_from_slice(src);
        }
        let t = Tape::no_grad();
        let ga = se.gates(&ps, t.constant(x), None, false)?.value();
        let gb = se.gates(&ps, t.constant(shuffled), None, false)?.value();
        let open = ga.data().iter().all(|&v| v > 0.0 && v < 1.0);
        Ok(holds(open && ga.max_abs_diff(&gb)? < 1e-12, "gates in (0,1); pixel permutation leaves them unchanged"))
    });
    r.check("LKA receptive field is 23x23", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let lka = LkaLayer::new(&mut ps, "lka", 2, &mut g)?;
        let base = Tensor::<f64>::randn(&[30, 30, 2], 1.0, &mut g);
        let y0 = lka_forward(&base, &lka, &ps)?;
        let probe_at = |dy: usize, dx: usize| -> Result<f64> {
            let mut x = base.clone();
            let o = x.offset(&[dy, dx, 1]);
            x.data_mut()[o] += 1.0;
            Ok((lka_forward(&x, &lka, &ps)?.get(&[0, 0, 0]) - y0.get(&[0, 0, 0])).abs())
        };
        Ok(holds(
            lka.field_radius() == 11 && probe_at(12, 0)? == 0.0 && probe_at(11, 11)? > 0.0,
            "offset 11 reaches the output, offset 12 does not",
        ))
    });
}

fn scan_suite(r: &mut Recorder) {
    r.check("scan work is linear in H x W", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f32>::new();
        let ss = Ss2d::new(&mut ps, "ss", 4, STATE_SIZE, &mut g);
        let mut count = |h: usize, w: usize| -> Result<u64> {
            reset_scan_update_count();
            ss2d_forward(&Tensor::randn(&[h, w, 4], 1.0, &mut g), &ss, &ps)?;
            Ok(scan_update_count())
        };
        let (small, big, bigger) = (count(8, 8)?, count(8, 16)?, count(16, 16)?);
        Ok(holds(big == 2 * small && bigger == 4 * small, format!("{small}, {big}, {bigger} updates")))
    });
    r.check("prefix-sum oracle without decay", || {
        let xs = [0.5, -1.0, 2.0, 0.25, 3.0];
        let t = Tape::no_grad();
        let k = |v: Tensor<f64>| t.constant(v);
        let ones = || Tensor::<f64>::ones(&[5, 1]);
        let y = selective_scan(
            k(Tensor::from_vec(&[5, 1], xs.to_vec())?),
            k(ones()),
            k(ones()),
            k(ones()),
            k(Tensor::zeros(&[1, 1])),
            k(Tensor::zeros(&[1])),
            (0..5).collect(),
        )?
        .value();
        let mut acc = 0.0;
        let mut worst = 0.0f64;
        for (i, &v) in xs.iter().enumerate() {
            acc += v;
            worst = worst.max((y.data()[i] - acc).abs());
        }
        Ok(below("max deviation", worst, 1e-15))
    });
    r.check("4096-step scan stays under its geometric bound", || {
        let mut g = rng(2);
        let mut ps = ParamStore::<f64>::new();
        let p = SelectiveScanParams::new(&mut ps, "s", 4, STATE_SIZE, &mut g);
        let x = Tensor::<f64>::rand_uniform(&[4096, 4], -1.0, 1.0, &mut g);
        let y = selective_scan_1d(&x, &p, &ps)?;
        // |h| <= max|dt B x| / (1 - max abar); bound the output through C and the skip term.
        let t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let bias = ps.var(&t, p.delta_bias).reshape(&[1, 4])?;
        let delta = xv.matmul(ps.var(&t, p.delta_weight))?.add(bias)?.softplus().value();
        let bm = xv.matmul(ps.var(&t, p.b_weight))?.value().max_abs();
        let cm = xv.matmul(ps.var(&t, p.c_weight))?.value().max_abs();
        let a = ps.value(p.log_a).map(|v| -v.exp());
        let (dmin, dmax) = delta.data().iter().fold((f64::MAX, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let amax = a.data().iter().fold(f64::MIN, |m, &v| m.max(v));
        let decay = (dmin * amax).exp();
        let hbound = dmax * bm / (1.0 - decay);
        let dskip = ps.value(p.d).max_abs();
        let bound = STATE_SIZE as f64 * cm * hbound + dskip;
        let peak = y.max_abs();
        Ok(holds(y.all_finite() && peak <= bound, format!("peak {peak:.3} <= bound {bound:.3}")))
    });
    r.check("discretized decay lies in (0, 1]", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let p = SelectiveScanParams::new(&mut ps, "s", 4, STATE_SIZE, &mut g);
        let t = Tape::no_grad();
        let x = t.constant(Tensor::randn(&[64, 4], 3.0, &mut g));
        let bias = ps.var(&t, p.delta_bias).reshape(&[1, 4])?;
        let delta = x.matmul(ps.var(&t, p.delta_weight))?.add(bias)?.softplus().value();
        let a = ps.value(p.log_a).map(|v| -v.exp());
        let ok = delta.data().iter().all(|&d| d > 0.0 && a.data().iter().all(|&av| (d * av).exp() > 0.0 && (d * av).exp() <= 1.0));
        Ok(holds(ok, "every step size positive, every decay in (0, 1]"))
    });
}

fn prior_suite(r: &mut Recorder) {
    let extractor = || -> Result<(PriorExtractor, ParamStore<f64>)> {
        let mut ps = ParamStore::<f64>::new();
        let p = PriorExtractor::new(&mut ps, "p", 8, 1.0, &mut rng(1))?;
        Ok((p, ps))
    };
    r.check("prior is nonnegative and linear in beta", || {
        let (mut p, ps) = extractor()?;
        let mut g = rng(5);
        let xs = Tensor::<f64>::randn(&[8, 8, 8], 1.0, &mut g);
        let ys = Tensor::<f64>::randn(&[8, 8, 8], 1.0, &mut g);
        let full = extract_prior(&xs, &ys, &p, &ps)?;
        let mut worst = 0.0f64;
        for beta in [0.0, 0.4, 0.8] {
            p.beta = beta;
            worst = worst.max(extract_prior(&xs, &ys, &p, &ps)?.max_abs_diff(&full.scale(beta))?);
        }
        let nonneg = full.data().iter().all(|&v| v >= 0.0) && full.max_abs() > 0.0;
        Ok(all(vec![holds(nonneg, "all entries >= 0"), below("beta-linearity gap", worst, 1e-12)]))
    });
    r.check("gate matches brute force", || {
        let x = Tensor::<f64>::randn(&[7, 5, 4], 1.0, &mut rng(2));
        let t = Tape::no_grad();
        let gate = residue_channel_gate(t.constant(x.clone()), true)?.value();
        let (h, w, c) = x.dims3()?;
        let mut worst = 0.0f64;
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
                worst = worst.max((gate.get(&[i as usize, j as usize, 0]) - (hi - lo)).abs());
            }
        }
        Ok(below("max deviation", worst, 1e-12))
    });
    r.check("coinciding channel means block the prior", || {
        let (p, ps) = extractor()?;
        let plane = Tensor::<f64>::randn(&[6, 6, 1], 1.0, &mut rng(3));
        let flat = Tensor::from_fn(&[6, 6, 8], |i| plane.data()[i / 8]);
        let other = Tensor::<f64>::randn(&[6, 6, 8], 5.0, &mut rng(4));
        Ok(holds(extract_prior(&flat, &other, &p, &ps)?.max_abs() == 0.0, "prior exactly zero"))
    });
}

fn fam_suite(r: &mut Recorder) {
    r.check("LoRA parameter economy is 2Cr", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f64>::new();
        let (c, rank) = (16, 2);
        let b = FamLoraBlock::new(&mut ps, "f", c, rank, &mut g)?;
        let n: usize = b.heads.iter().flat_map(|h| h.param_ids()).map(|id| ps.value(id).len()).sum();
        Ok(holds(n == 2 * c * rank && n < c * c, format!("{n} LoRA scalars vs dense {}", c * c)))
    });
    r.check("identity-product factors double the input", || {
        let mut ps = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let heads: Vec<LoraHead> = (0..LORA_HEADS)
            .map(|j| LoraHead::from_factors(&mut ps, &format!("h{j}"), eye.clone(), eye.clone()))
            .collect::<Result<_>>()?;
        let x = Tensor::<f64>::randn(&[3, 3, 16], 1.0, &mut rng(2));
        Ok(below("|out - 2x|", multihead_lora(&x, &heads, &ps)?.max_abs_diff(&x.scale(2.0))?, 1e-15))
    });
    r.check("heads act on their own quarter", || {
        let mut g = rng(3);
        let mut ps = ParamStore::<f64>::new();
        let heads: Vec<LoraHead> = (0..LORA_HEADS).map(|j| LoraHead::new(&mut ps, &format!("h{j}"), 4, 2, &mut g)).collect::<Result<_>>()?;
        randomize(&mut ps, &heads.iter().map(|h| h.up).collect::<Vec<_>>(), 1.0, &mut g);
        let x = Tensor::<f64>::randn(&[3, 3, 16], 1.0, &mut g);
        let mut x2 = x.clone();
        for px in x2.data_mut().chunks_mut(16) {
            px[4..8].iter_mut().for_each(|v| *v += 1.0);
        }
        let (a, b) = (multihead_lora(&x, &heads, &ps)?, multihead_lora(&x2, &heads, &ps)?);
        let mut ok = true;
        for q in 0..4 {
            let changed = a.narrow_last(4 * q, 4)? != b.narrow_last(4 * q, 4)?;
            ok &= changed == (q == 1);
        }
        Ok(holds(ok, "perturbing quarter 2 changes only quarter 2"))
    });
    r.check("zero prior equals a disabled injection port", || {
        let mut g = rng(4);
        let mut ps = ParamStore::<f64>::new();
        let b = FamLoraBlock::new(&mut ps, "f", 8, 1, &mut g)?;
        let mut ids: Vec<ParamId> = b.t4.param_ids().to_vec();
        ids.extend(b.heads.iter().map(|h| h.up));
        randomize(&mut ps, &ids, 0.5, &mut g);
        let y = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut g);
        let zero = fam_lora_forward(&y, &Tensor::zeros(&[5, 5, 8]), &b, &ps)?;
        let t = Tape::no_grad();
        let off = b.forward(&ps, t.constant(y.clone()), None)?.value();
        Ok(holds(zero == off && zero != y, "bit-identical, and different from the input"))
    });
    r.check("channel counts not divisible by four rejected", || {
        let mut ps = ParamStore::<f64>::new();
        Ok(holds(FamLoraBlock::new(&mut ps, "f", 6, 1, &mut rng(5)).is_err(), "C = 6 rejected"))
    });
}

fn model_suite(r: &mut Recorder) {
    r.check("fresh model outputs the bicubic upsample", || {
        let mut g = rng(1);
        let mut ps = ParamStore::<f64>::new();
        let m = PifNet::new(PifNetConfig::micro(6, 3, 4), &mut ps, &mut g)?;
        let x = Tensor::<f64>::rand_uniform(&[4, 4, 6], 0.0, 1.0, &mut g);
        let y = Tensor::<f64>::rand_uniform(&[16, 16, 3], 0.0, 1.0, &mut g);
        let (z_hat, z_bar, ld) = pifnet_forward(&x, &y, &m, &ps)?;
        let up = bicubic_upsample(&x, 4)?;
        Ok(holds(z_hat == up && z_bar == up && ld == 0.0, "z_hat == z_bar == bicubic(x), logdet 0"))
    });
    r.check("branch separability with the cosine term off", || {
        let (mut m, ps, [x, y, z]) = awake_micro(2, true)?;
        m.cfg.loss.lambda_cos = 0.0;
        let grads = |detach: bool| -> Result<crate::autograd::Gradients<f64>> {
            let t = Tape::new();
            let out = m.forward(&ps, t.constant(x.clone()), t.constant(y.clone()))?;
            let z_bar = if detach { out.z_bar.detach() } else { out.z_bar };
            let (l, _) = composite_loss(out.z_hat, t.constant(z.clone()), z_bar, out.logdet, out.coupled_len, &m.cfg.loss)?;
            t.backward(l)
        };
        let (a, b) = (grads(false)?, grads(true)?);
        let norm = |g: &crate::autograd::Gradients<f64>, ids: &[ParamId]| -> f64 {
            ids.iter().filter_map(|&id| g.param(id)).map(|t| t.sum_sq()).sum::<f64>().sqrt()
        };
        let spatial: Vec<ParamId> = m
            .msi_head
            .param_ids()
            .into_iter()
            .chain(m.tail.param_ids())
            .chain(m.fam.iter().flat_map(|f| f.param_ids()))
            .collect();
        let mut same = true;
        for id in m.param_ids() {
            match (a.param(id), b.param(id)) {
                (Some(u), Some(v)) => same &= u == v,
                (None, None) => {}
                (Some(u), None) | (None, Some(u)) => same &= u.max_abs() == 0.0,
            }
        }
        let spec_tail = norm(&a, &m.spec_tail.param_ids());
        let sp = norm(&b, &spatial);
        Ok(holds(
            same && spec_tail == 0.0 && sp > 0.0,
            format!("detaching z_bar changes nothing; spectral tail grad {spec_tail:e}; spatial grad norm {sp:.3e}"),
        ))
    });
    r.check("full-size parameter count", || {
        let mut ps = ParamStore::<f32>::new();
        let m = PifNet::new(PifNetConfig::paper(103, 4, 4), &mut ps, &mut rng(3))?;
        let n = parameter_count(&m, &ps);
        Ok(holds(
            (500_000..=5_000_000).contains(&n) && n == ps.scalar_count(),
            format!("{n} parameters"),
        ))
    });
    r.check("beta = 0 removes the prior", || {
        let mut g = rng(4);
        let mut ps = ParamStore::<f64>::new();
        let m = PifNet::new(PifNetConfig { beta: 0.0, ..PifNetConfig::micro(4, 2, 2) }, &mut ps, &mut g)?;
        let t = Tape::no_grad();
        let xs = t.constant(Tensor::randn(&[8, 8, 8], 1.0, &mut g));
        let ys = t.constant(Tensor::randn(&[8, 8, 8], 1.0, &mut g));
        Ok(holds(m.prior.forward(&ps, xs, ys)?.value().max_abs() == 0.0, "prior exactly zero"))
    });
}

fn data_suite(r: &mut Recorder) {
    r.check("degradation commutes with band selection", || {
        let z = Tensor::<f64>::rand_uniform(&[16, 16, 5], 0.0, 1.0, &mut rng(1));
        let mut ok = true;
        for mode in [Downsample::Decimate, Downsample::AreaAverage] {
            let full = degrade_lrhsi(&z, 4, mode)?;
            for b in 0..5 {
                ok &= full.narrow_last(b, 1)? == degrade_lrhsi(&z.narrow_last(b, 1)?, 4, mode)?;
            }
        }
        Ok(holds(ok, "bit-identical per band for both downsampling modes"))
    });
    r.check("spectral response rows sum to one", || {
        let mut worst = 0.0f64;
        for srf in [SpectralResponse::block_average(4, 16)?, SpectralResponse::block_average(3, 31)?, SpectralResponse::identity(5)?] {
            for row in srf.matrix.chunks(srf.hsi_bands) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let bad = SpectralResponse::new(2, 2, vec![0.5, 0.6, 0.5, 0.5]).is_err();
        Ok(all(vec![below("max row-sum gap", worst, 1e-7), holds(bad, "non-stochastic matrix rejected")]))
    });
    r.check("multispectral simulation matches a direct loop", || {
        let z = Tensor::<f64>::rand_uniform(&[3, 4, 12], 0.0, 1.0, &mut rng(2));
        let srf = SpectralResponse::block_average(3, 12)?;
        let y = simulate_hrmsi(&z, &srf)?;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..3 {
                    let want: f64 = (0..12).map(|b| srf.matrix[k * 12 + b] * z.get(&[i, j, b])).sum();
                    worst = worst.max((y.get(&[i, j, k]) - want).abs());
                }
            }
        }
        Ok(below("max deviation", worst, 1e-14))
    });
    r.check("samples regenerate bit-exactly", || {
        let cfg = PatchConfig {
            patch: 16,
            stride: 8,
            scale: 4,
            msi_bands: 3,
            downsample: Downsample::Decimate,
            test_rows: 16,
        };
        let a = extract_patches(&synth_scene(9, 32, 32, 6, 3)?, &cfg)?;
        let b = extract_patches(&synth_scene(9, 32, 32, 6, 3)?, &cfg)?;
        let c = extract_patches(&synth_scene(10, 32, 32, 6, 3)?, &cfg)?;
        Ok(holds(a == b && a != c && !a.is_empty(), format!("{} samples", a.len())))
    });
    r.check("synthetic scenes are normalized to [0, 1]", || {
        let s = synth_scene(3, 32, 16, 8, 3)?;
        let (lo, hi) = s.data.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        Ok(holds(lo == 0.0 && hi == 1.0, format!("range [{lo}, {hi}]")))
    });
}

fn training_suite(r: &mut Recorder) {
    r.check("learning-rate schedule", || {
        let mut ok = true;
        for epoch in [0, 1, 199, 200, 201, 399, 400, 999, 1000] {
            let mut want = 1e-4;
            for _ in 0..epoch / LR_HALVING_EPOCHS {
                want *= 0.5;
            }
            ok &= lr_at(1e-4, epoch) == want;
        }
        Ok(holds(ok, "exact halving every 200 epochs"))
    });
    r.check("AdamW first step closed form", || {
        let mut ps = ParamStore::<f64>::new();
        let p0 = [1.0, -2.0, 0.5, 3.0];
        let g0 = [3.0, -0.4, 1e-3, 0.0];
        let id = ps.add("p", Tensor::from_vec(&[4], p0.to_vec())?);
        ps.grad_mut(id).ok_or_else(|| invalid("audit", "frozen"))?.copy_from_slice(&g0);
        let opt = AdamW::default();
        let lr = 1e-3;
        let mut st = TrainState::new(&ps, lr, 0);
        adamw_step(&mut st, &mut ps, &opt);
        let mut worst = 0.0f64;
        for i in 0..4 {
            // Bias correction makes m_hat = g and v_hat = g^2 on the first step.
            let want = p0[i] - lr * (g0[i] / (g0[i].abs() + opt.eps) + opt.weight_decay * p0[i]);
            worst = worst.max((ps.value(id).data()[i] - want).abs());
        }
        Ok(below("max deviation", worst, 1e-15))
    });
    r.check("zero gradient without weight decay changes nothing", || {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("p", Tensor::randn(&[6], 1.0, &mut rng(1)));
        let before = ps.value(id).clone();
        let mut st = TrainState::new(&ps, 1e-2, 0);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        adamw_step(&mut st, &mut ps, &opt);
        Ok(holds(ps.value(id) == &before, "bit-identical"))
    });
    r.check("non-finite gradients skip the step", || {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("p", Tensor::ones(&[3]));
        ps.grad_mut(id).ok_or_else(|| invalid("audit", "frozen"))?[1] = f64::NAN;
        let mut st = TrainState::new(&ps, 1e-2, 0);
        let stepped = adamw_step(&mut st, &mut ps, &AdamW::default());
        Ok(holds(
            !stepped && st.skipped_steps == 1 && st.step == 0 && ps.value(id) == &Tensor::ones(&[3]),
            "step skipped and counted",
        ))
    });
    r.check("gradient clipping bounds the global norm", || {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Tensor::zeros(&[2]));
        let b = ps.add("b", Tensor::zeros(&[1]));
        ps.grad_mut(a).ok_or_else(|| invalid("audit", "frozen"))?.copy_from_slice(&[3.0, 4.0]);
        ps.grad_mut(b).ok_or_else(|| invalid("audit", "frozen"))?[0] = 12.0;
        let before = clip_grad_norm(&mut ps, 1.0);
        let after = crate::train::grad_norm(&ps);
        Ok(all(vec![below("|norm before - 13|", (before - 13.0).abs(), 1e-12), below("|norm after - 1|", (after - 1.0).abs(), 1e-12)]))
    });
}
