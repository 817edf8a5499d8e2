//! AdamW optimizer and the training / evaluation loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{DatasetManifest, FusionSample};
use crate::error::{invalid, PifError, Result};
use crate::loss::{composite_loss, LossBreakdown};
use crate::metrics::{evaluate, MetricsReport, Quality};
use crate::model::{parameter_count, pifnet_forward, save_checkpoint, PifNet, PifNetConfig};
use crate::nn::bicubic_upsample;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const LR_HALVING_EPOCHS: usize = 200;

/// `base * 0.5^floor(epoch / 200)`.
pub fn lr_at(base: f64, epoch: usize) -> f64 {
    base * 0.5f64.powi((epoch / LR_HALVING_EPOCHS) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer moments and schedule position.
#[derive(Debug, Clone)]
pub struct TrainState<T: Float> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: usize,
    pub lr: f64,
    pub epoch: usize,
    pub seed: u64,
    pub skipped_steps: usize,
}

impl<T: Float> TrainState<T> {
    pub fn new(ps: &ParamStore<T>, lr: f64, seed: u64) -> Self {
        let zeros = || ps.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            epoch: 0,
            seed,
            skipped_steps: 0,
        }
    }
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm<T: Float>(ps: &ParamStore<T>) -> f64 {
    ps.iter()
        .filter(|(_, p)| !p.frozen())
        .map(|(_, p)| p.grad().data().iter().map(|&g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Float>(ps: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(ps);
    if norm.is_finite() && norm > max_norm {
        let k = T::from_f64c(max_norm / norm);
        let ids: Vec<ParamId> = ps.ids().collect();
        for id in ids {
            if let Some(g) = ps.grad_mut(id) {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update from the stored gradients. Frozen
/// parameters are untouched. Returns `false` (and changes nothing) when any
/// gradient is non-finite.
pub fn adamw_step<T: Float>(state: &mut TrainState<T>, ps: &mut ParamStore<T>, opt: &AdamW) -> bool {
    let finite = ps.iter().filter(|(_, p)| !p.frozen()).all(|(_, p)| p.grad().all_finite());
    if !finite {
        state.skipped_steps += 1;
        log::warn!("non-finite gradient, step skipped ({} so far)", state.skipped_steps);
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let Some((value, grad)) = ps.value_and_grad_mut(id) else { continue };
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        for i in 0..value.len() {
            let g = grad[i].to_f64().unwrap_or(0.0);
            let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
            let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
            m[i] = T::from_f64c(mi);
            v[i] = T::from_f64c(vi);
            let p = value[i].to_f64().unwrap_or(0.0);
            let update = (mi / c1) / ((vi / c2).sqrt() + opt.eps) + opt.weight_decay * p;
            value[i] = T::from_f64c(p - lr * update);
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PifNetConfig,
    /// Dataset manifest file; `dataset` is used when absent.
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetManifest>,
    pub epochs: usize,
    /// Stop after this many optimizer steps, whatever the epoch count.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub base_lr: f64,
    pub optimizer: AdamW,
    pub clip_norm: f64,
    /// Evaluate on held-out samples every this many epochs (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

impl ExperimentConfig {
    /// D = 64, L = 4, 500 epochs, batch 8, lr 1e-4.
    pub fn paper(dataset: DatasetManifest, seed: u64) -> Result<Self> {
        let c = dataset.hsi_bands()?;
        let p = &dataset.patches;
        Ok(Self {
            model: PifNetConfig::paper(c, p.msi_bands, p.scale),
            manifest_path: None,
            dataset: Some(dataset),
            epochs: 500,
            max_steps: None,
            batch_size: 8,
            seed,
            out_dir: None,
            base_lr: 1e-4,
            optimizer: AdamW::default(),
            clip_norm: 1.0,
            eval_every: 50,
        })
    }

    /// D = 16, L = 2, 200 steps of batch 8 on the desk scene.
    pub fn desk(seed: u64, scale: usize) -> Self {
        let dataset = DatasetManifest::desk(seed, scale);
        let p = &dataset.patches;
        Self {
            model: PifNetConfig::desk(16, p.msi_bands, scale),
            manifest_path: None,
            dataset: Some(dataset),
            epochs: 1000,
            max_steps: Some(200),
            batch_size: 8,
            seed,
            out_dir: None,
            base_lr: 1e-3,
            optimizer: AdamW::default(),
            clip_norm: 1.0,
            eval_every: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match (&self.manifest_path, &self.dataset) {
            (Some(p), _) => DatasetManifest::load(p),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(invalid("experiment", "neither a manifest path nor an inline dataset")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("experiment", "batch size and epochs must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("experiment", "learning rate and clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub l_inv: f64,
    pub l_cos: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub const CURVE_HEADER: &str = "step,epoch,lr,l1,l_inv,l_cos,total,grad_norm";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.lr, self.l1, self.l_inv, self.l_cos, self.total, self.grad_norm
        )
    }
}

pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in curve {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Float> {
    pub model: PifNet,
    pub params: ParamStore<T>,
    pub curve: Vec<StepRecord>,
    /// Mean loss over the whole training set before the first update and after the last.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub test: Quality,
    pub bicubic: Quality,
    pub report: MetricsReport,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut b = LossBreakdown {
        l1: 0.0,
        l_inv: 0.0,
        l_cos: 0.0,
        total: 0.0,
        lambda_inv: items.first().map_or(0.0, |i| i.lambda_inv),
        lambda_cos: items.first().map_or(0.0, |i| i.lambda_cos),
    };
    for i in items {
        b.l1 += i.l1 / n;
        b.l_inv += i.l_inv / n;
        b.l_cos += i.l_cos / n;
        b.total += i.total / n;
    }
    b
}

/// Loss without gradients.
pub fn sample_loss<T: Float>(model: &PifNet, ps: &ParamStore<T>, s: &FusionSample<T>) -> Result<LossBreakdown> {
    let t = Tape::no_grad();
    let out = model.forward(ps, t.constant(s.x.clone()), t.constant(s.y.clone()))?;
    let (_, b) = composite_loss(out.z_hat, t.constant(s.z.clone()), out.z_bar, out.logdet, out.coupled_len, &model.cfg.loss)?;
    Ok(b)
}

pub fn dataset_loss<T: Float>(model: &PifNet, ps: &ParamStore<T>, samples: &[FusionSample<T>]) -> Result<f64> {
    let items = samples.par_iter().map(|s| sample_loss(model, ps, s)).collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(&items).total)
}

/// Forward + backward on one sample.
fn sample_grads<T: Float>(
    model: &PifNet,
    ps: &ParamStore<T>,
    s: &FusionSample<T>,
) -> Result<(crate::autograd::Gradients<T>, LossBreakdown)> {
    let t = Tape::new();
    let out = model.forward(ps, t.constant(s.x.clone()), t.constant(s.y.clone()))?;
    let (total, b) = composite_loss(out.z_hat, t.constant(s.z.clone()), out.z_bar, out.logdet, out.coupled_len, &model.cfg.loss)?;
    Ok((t.backward(total)?, b))
}

/// Mean quality of the fused output and wall-clock per image.
pub fn evaluate_model<T: Float>(model: &PifNet, ps: &ParamStore<T>, samples: &[FusionSample<T>]) -> Result<(Quality, f64)> {
    let start = Instant::now();
    let outs = samples.iter().map(|s| pifnet_forward(&s.x, &s.y, model, ps).map(|o| o.0)).collect::<Result<Vec<_>>>()?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / samples.len().max(1) as f64;
    let q = samples
        .iter()
        .zip(&outs)
        .map(|(s, z_hat)| evaluate(&s.z, &z_hat.map(|v| v.max(T::zero()).min(T::one())), s.scale).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((Quality::mean(&q), ms))
}

pub fn bicubic_quality<T: Float>(samples: &[FusionSample<T>]) -> Result<Quality> {
    let q = samples
        .iter()
        .map(|s| {
            let up = bicubic_upsample(&s.x, s.scale)?.map(|v| v.max(T::zero()).min(T::one()));
            evaluate(&s.z, &up, s.scale).map(|r| r.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Quality::mean(&q))
}

/// Train from scratch. Writes the loss curve, checkpoint and metrics when
/// `out_dir` is set. A non-finite loss aborts after saving the last good
/// parameters.
pub fn train<T: Float>(cfg: &ExperimentConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let (train64, test64) = manifest.build()?;
    let train_set: Vec<FusionSample<T>> = train64.iter().map(|s| s.cast()).collect();
    let test_set: Vec<FusionSample<T>> = test64.iter().map(|s| s.cast()).collect();
    train_on(cfg, &manifest.name, &train_set, &test_set)
}

pub fn train_on<T: Float>(
    cfg: &ExperimentConfig,
    dataset_name: &str,
    train_set: &[FusionSample<T>],
    test_set: &[FusionSample<T>],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamStore::<T>::new();
    let model = PifNet::new(cfg.model.clone(), &mut ps, &mut rng)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ck_path = cfg.out_dir.as_ref().map(|d| d.join("checkpoint.pifn"));
    let mut state = TrainState::new(&ps, cfg.base_lr, cfg.seed);
    let initial_train_loss = dataset_loss(&model, &ps, train_set)?;
    let mut curve = Vec::new();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs * per_epoch);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.lr = lr_at(cfg.base_lr, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let results = batch
                .par_iter()
                .map(|&i| sample_grads(&model, &ps, &train_set[i]))
                .collect::<Result<Vec<_>>>()?;
            let losses: Vec<LossBreakdown> = results.iter().map(|r| r.1).collect();
            let b = mean_breakdown(&losses);
            if !b.total.is_finite() {
                if let Some(p) = &ck_path {
                    save_checkpoint(p, &model.cfg, &ps)?;
                }
                return Err(PifError::Diverged {
                    step,
                    msg: format!("loss {} (last good parameters kept)", b.total),
                });
            }
            ps.zero_grad();
            let k = T::from_f64c(1.0 / batch.len() as f64);
            for (g, _) in &results {
                ps.accumulate(g, k);
            }
            let norm = clip_grad_norm(&mut ps, cfg.clip_norm);
            adamw_step(&mut state, &mut ps, &cfg.optimizer);
            curve.push(StepRecord {
                step,
                epoch,
                lr: state.lr,
                l1: b.l1,
                l_inv: b.l_inv,
                l_cos: b.l_cos,
                total: b.total,
                grad_norm: norm,
            });
            log::debug!("step {step} loss {:.5}", b.total);
            step += 1;
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let (q, _) = evaluate_model(&model, &ps, test_set)?;
            log::info!("epoch {} held-out psnr {:.3}", epoch + 1, q.psnr);
        }
    }
    let final_train_loss = dataset_loss(&model, &ps, train_set)?;
    let (test, ms) = evaluate_model(&model, &ps, test_set)?;
    let bicubic = bicubic_quality(test_set)?;
    let report = MetricsReport {
        dataset: dataset_name.to_string(),
        scale: cfg.model.scale,
        psnr: test.psnr,
        ssim: test.ssim,
        sam: test.sam,
        ergas: test.ergas,
        params: parameter_count(&model, &ps),
        ms_per_image: ms,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::write(dir.join("loss_curve.csv"), curve_csv(&curve))?;
        std::fs::write(dir.join("metrics.json"), report.to_json()?)?;
        std::fs::write(dir.join("metrics.csv"), format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()))?;
        save_checkpoint(dir.join("checkpoint.pifn"), &model.cfg, &ps)?;
        cfg.save(dir.join("experiment.json"))?;
    }
    Ok(TrainOutcome {
        model,
        params: ps,
        curve,
        initial_train_loss,
        final_train_loss,
        test,
        bicubic,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_200_epochs() {
        assert_eq!(lr_at(1e-4, 0), 1e-4);
        assert_eq!(lr_at(1e-4, 199), 1e-4);
        assert_eq!(lr_at(1e-4, 200), 5e-5);
        assert_eq!(lr_at(1e-4, 499), 2.5e-5);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut st = TrainState::new(&ps, 0.1, 0);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        assert!(adamw_step(&mut st, &mut ps, &opt));
        assert_eq!(ps.value(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::ones(&[2]));
        ps.grad_mut(id).unwrap()[0] = f64::NAN;
        let mut st = TrainState::new(&ps, 0.1, 0);
        assert!(!adamw_step(&mut st, &mut ps, &AdamW::default()));
        assert_eq!(st.skipped_steps, 1);
        assert_eq!(st.step, 0);
        assert_eq!(ps.value(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::zeros(&[2]));
        ps.grad_mut(id).unwrap().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((grad_norm(&ps) - 1.0).abs() < 1e-15);
    }
}
