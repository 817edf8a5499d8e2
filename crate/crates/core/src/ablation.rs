//! Ablation sweeps: prior weight, block removal and loss-term subsets.
//!
//! Every variant is trained once per seed from the same base experiment and
//! scored on the held-out patches; rows report seed means.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::Quality;
use crate::train::{train, ExperimentConfig};

/// One modification of the base experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    Beta(f64),
    NoCoupling,
    NoFamLora,
    /// Which auxiliary loss terms stay on; L1 is always present.
    Loss { inv: bool, cos: bool },
}

impl Variant {
    pub fn label(&self) -> String {
        match *self {
            Variant::Full => "full model".into(),
            Variant::Beta(b) => format!("beta = {b}"),
            Variant::NoCoupling => "w/o invertible blocks".into(),
            Variant::NoFamLora => "w/o FAM-LoRA".into(),
            Variant::Loss { inv, cos } => {
                let mut s = String::from("L1");
                if inv {
                    s.push_str(" + Linv");
                }
                if cos {
                    s.push_str(" + Lcos");
                }
                s
            }
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let m = &mut cfg.model;
        match *self {
            Variant::Full => {}
            Variant::Beta(b) => m.beta = b,
            Variant::NoCoupling => m.use_coupling = false,
            Variant::NoFamLora => m.use_fam_lora = false,
            Variant::Loss { inv, cos } => {
                if !inv {
                    m.loss.lambda_inv = 0.0;
                }
                if !cos {
                    m.loss.lambda_cos = 0.0;
                }
            }
        }
    }
}

pub const BETA_SWEEP: [f64; 4] = [0.0, 0.4, 0.8, 1.0];

pub fn beta_variants() -> Vec<Variant> {
    BETA_SWEEP.iter().map(|&b| Variant::Beta(b)).collect()
}

pub fn coupling_variants() -> Vec<Variant> {
    vec![Variant::NoCoupling, Variant::Full]
}

pub fn fam_variants() -> Vec<Variant> {
    vec![Variant::NoFamLora, Variant::Full]
}

pub fn loss_variants() -> Vec<Variant> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(inv, cos)| Variant::Loss { inv, cos })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Quality>,
    pub mean: Quality,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub bicubic: Quality,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| variant | PSNR | SSIM | SAM | ERGAS | params |\n|---|---|---|---|---|---|\n", self.title);
        let b = &self.bicubic;
        s.push_str(&format!("| bicubic | {:.4} | {:.4} | {:.4} | {:.4} | 0 |\n", b.psnr, b.ssim, b.sam, b.ergas));
        for r in &self.rows {
            let q = &r.mean;
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                r.label, q.psnr, q.ssim, q.sam, q.ergas, r.params
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,psnr,ssim,sam,ergas\n");
        for r in &self.rows {
            for (seed, q) in r.seeds.iter().zip(&r.per_seed) {
                s.push_str(&format!("{},{},{},{},{},{}\n", r.label, seed, q.psnr, q.ssim, q.sam, q.ergas));
            }
        }
        s
    }
}

/// Train every variant once per seed. `base` builds the experiment for a seed.
pub fn run_sweep(
    title: &str,
    variants: &[Variant],
    seeds: &[u64],
    base: impl Fn(u64) -> ExperimentConfig,
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(invalid("ablation", "need at least one seed and one variant"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut bicubic = Vec::new();
    for &v in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for &seed in seeds {
            let mut cfg = base(seed);
            cfg.out_dir = None;
            v.apply(&mut cfg);
            log::info!("ablation {title}: {} seed {seed}", v.label());
            let out = train::<f32>(&cfg)?;
            if rows.is_empty() {
                bicubic.push(out.bicubic);
            }
            params = out.report.params;
            per_seed.push(out.test);
        }
        rows.push(AblationRow {
            variant: v,
            label: v.label(),
            seeds: seeds.to_vec(),
            mean: Quality::mean(&per_seed),
            per_seed,
            params,
        });
    }
    Ok(AblationTable {
        title: title.to_string(),
        bicubic: Quality::mean(&bicubic),
        rows,
    })
}
