//! Dual-branch fusion network.
//!
//! Spectral branch: bicubic upsampling, head, 1x1 projection, Haar split,
//! coupling of the reduced detail stream with the low-pass stream, exact
//! synthesis, tail. Spatial branch: MSI head plus prior-driven guidance,
//! FAM-LoRA blocks, tail. Both tails add the upsampled input back.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::coupling::CouplingStack;
use crate::error::{invalid, PifError, Result};
use crate::fam_lora::FamLoraBlock;
use crate::loss::LossConfig;
use crate::nn::{bicubic_upsample_var, Conv2dLayer, ConvSpec, Init};
use crate::params::{ParamId, ParamStore};
use crate::prior::{HfSemanticPerception, PriorExtractor};
use crate::tensor::{DType, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PifNetConfig {
    /// Hidden width.
    pub d: usize,
    /// Number of coupling blocks and of FAM-LoRA blocks.
    pub l: usize,
    pub hsi_bands: usize,
    pub msi_bands: usize,
    pub scale: usize,
    pub beta: f64,
    pub rank: usize,
    pub state: usize,
    pub loss: LossConfig,
    pub dtype: DType,
    #[serde(default = "yes")]
    pub use_coupling: bool,
    #[serde(default = "yes")]
    pub use_fam_lora: bool,
    /// Smooth features over 3x3 before the residue gate.
    #[serde(default = "yes")]
    pub prior_local_mean: bool,
    #[serde(default = "yes")]
    pub pass2_frozen: bool,
    /// Give the second attention pass its own weights.
    #[serde(default)]
    pub independent_second_pass: bool,
}

fn yes() -> bool {
    true
}

impl PifNetConfig {
    fn base(d: usize, l: usize, rank: usize, hsi_bands: usize, msi_bands: usize, scale: usize) -> Self {
        Self {
            d,
            l,
            hsi_bands,
            msi_bands,
            scale,
            beta: 1.0,
            rank,
            state: crate::ssm::STATE_SIZE,
            loss: LossConfig::default(),
            dtype: DType::F32,
            use_coupling: true,
            use_fam_lora: true,
            prior_local_mean: true,
            pass2_frozen: true,
            independent_second_pass: false,
        }
    }

    /// D = 64, L = 4, rank 4.
    pub fn paper(hsi_bands: usize, msi_bands: usize, scale: usize) -> Self {
        Self::base(64, 4, 4, hsi_bands, msi_bands, scale)
    }

    /// D = 16, L = 2, rank 2.
    pub fn desk(hsi_bands: usize, msi_bands: usize, scale: usize) -> Self {
        Self::base(16, 2, 2, hsi_bands, msi_bands, scale)
    }

    /// D = 8, L = 1, rank 1, four scan states.
    pub fn micro(hsi_bands: usize, msi_bands: usize, scale: usize) -> Self {
        Self {
            state: 4,
            ..Self::base(8, 1, 1, hsi_bands, msi_bands, scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(invalid("config", format!("D = {} must be a positive multiple of 4", self.d)));
        }
        if ![2, 4, 8].contains(&self.scale) {
            return Err(invalid("config", format!("scale {} not in {{2, 4, 8}}", self.scale)));
        }
        if self.l == 0 || self.hsi_bands == 0 || self.msi_bands == 0 || self.state == 0 {
            return Err(invalid("config", "L, band counts and state size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("config", format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.rank == 0 || self.rank >= self.d / 4 {
            return Err(invalid("config", format!("rank {} must be in 1..{}", self.rank, self.d / 4)));
        }
        Ok(())
    }
}

/// `conv3x3 -> relu -> conv3x3`.
#[derive(Debug, Clone)]
pub struct ConvPair {
    pub a: Conv2dLayer,
    pub b: Conv2dLayer,
}

impl ConvPair {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cin: usize, mid: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Self::with_out_init(ps, name, cin, mid, cout, Init::He, rng)
    }

    pub fn with_out_init<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            a: Conv2dLayer::new(ps, &format!("{name}.a"), cin, mid, ConvSpec::same(3), Init::He, rng)?,
            b: Conv2dLayer::new(ps, &format!("{name}.b"), mid, cout, ConvSpec::same(3), out_init, rng)?,
        })
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.b.forward(ps, self.a.forward(ps, x)?.relu())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.a.param_ids(), self.b.param_ids()].concat()
    }
}

#[derive(Debug, Clone)]
pub struct PifNet {
    pub cfg: PifNetConfig,
    pub hsi_head: ConvPair,
    pub proj: Conv2dLayer,
    pub reduce: Conv2dLayer,
    pub stack: CouplingStack,
    pub expand: Conv2dLayer,
    pub spec_tail: ConvPair,
    pub msi_head: ConvPair,
    pub prior: PriorExtractor,
    pub hf: HfSemanticPerception,
    pub fam: Vec<FamLoraBlock>,
    pub tail: ConvPair,
}

/// Outputs of one forward pass.
pub struct Forward<'t, T: Float> {
    pub z_hat: Var<'t, T>,
    pub z_bar: Var<'t, T>,
    pub logdet: Var<'t, T>,
    /// Element count of one coupled stream.
    pub coupled_len: usize,
}

/// Spectral-branch outputs.
pub struct Spectral<'t, T: Float> {
    pub x_up: Var<'t, T>,
    pub feats: Var<'t, T>,
    pub z_bar: Var<'t, T>,
    pub logdet: Var<'t, T>,
    pub xh_feats: Var<'t, T>,
}

impl PifNet {
    pub fn new<T: Float, R: Rng + ?Sized>(cfg: PifNetConfig, ps: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let one = ConvSpec::same(1);
        let hsi_head = ConvPair::new(ps, "hsi_head", cfg.hsi_bands, d, d, rng)?;
        let proj = Conv2dLayer::new(ps, "proj", d, d, one, Init::He, rng)?;
        let reduce = Conv2dLayer::new(ps, "reduce", 3 * d, d, one, Init::He, rng)?;
        let stack = CouplingStack::new(ps, "coupling", cfg.l, d, cfg.state, rng)?;
        let expand = Conv2dLayer::new(ps, "expand", d, 3 * d, one, Init::He, rng)?;
        let spec_tail = ConvPair::with_out_init(ps, "spec_tail", d, d, cfg.hsi_bands, Init::Zero, rng)?;
        let msi_head = ConvPair::new(ps, "msi_head", cfg.msi_bands, d, d, rng)?;
        let mut prior = PriorExtractor::new(ps, "prior", d, cfg.beta, rng)?;
        prior.local_mean = cfg.prior_local_mean;
        let hf = HfSemanticPerception::new(ps, "hf", d, rng)?;
        let mut fam = Vec::with_capacity(cfg.l);
        for i in 0..cfg.l {
            let name = format!("fam{i}");
            let mut b = FamLoraBlock::new(ps, &name, d, cfg.rank, rng)?;
            b.set_pass2_frozen(cfg.pass2_frozen);
            if cfg.independent_second_pass {
                b.split_second_pass(ps, &name, rng)?;
            }
            fam.push(b);
        }
        let tail = ConvPair::with_out_init(ps, "tail", d, d, cfg.hsi_bands, Init::Zero, rng)?;
        Ok(Self {
            cfg,
            hsi_head,
            proj,
            reduce,
            stack,
            expand,
            spec_tail,
            msi_head,
            prior,
            hf,
            fam,
            tail,
        })
    }

    fn check_inputs(&self, x: &[usize], y: &[usize]) -> Result<()> {
        let s = self.cfg.scale;
        let (&[h, w, c], &[yh, yw, yc]) = (x, y) else {
            return Err(invalid("pifnet_forward", format!("expected [H, W, C] inputs, got {x:?} and {y:?}")));
        };
        if c != self.cfg.hsi_bands || yc != self.cfg.msi_bands {
            return Err(invalid(
                "pifnet_forward",
                format!("band counts {c}/{yc}, expected {}/{}", self.cfg.hsi_bands, self.cfg.msi_bands),
            ));
        }
        if yh != s * h || yw != s * w {
            return Err(invalid(
                "pifnet_forward",
                format!("HR-MSI is {yh}x{yw}, expected {}x{} for a {h}x{w} input at scale {s}", s * h, s * w),
            ));
        }
        if (s * h) % 2 != 0 || (s * w) % 2 != 0 {
            return Err(invalid("pifnet_forward", "upsampled size must be even"));
        }
        Ok(())
    }

    pub fn spectral_branch<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Spectral<'t, T>> {
        let d = self.cfg.d;
        let x_up = bicubic_upsample_var(x, self.cfg.scale)?;
        let feats = self.hsi_head.forward(ps, x_up)?;
        let f = self.proj.forward(ps, feats)?;
        let packed = f.haar_analyze()?;
        let ll = packed.narrow_last(0, d)?;
        let xh = self.reduce.forward(ps, packed.narrow_last(d, 3 * d)?)?;
        let (xh2, ll2, logdet) = if self.cfg.use_coupling {
            self.stack.forward(ps, xh, ll)?
        } else {
            (xh, ll, x.tape().constant(Tensor::scalar(T::zero())))
        };
        let details = self.expand.forward(ps, xh2)?;
        let synth = Var::concat_last(&[ll2, details])?.haar_synthesize()?;
        let z_bar = self.spec_tail.forward(ps, synth)?.add(x_up)?;
        Ok(Spectral {
            x_up,
            feats,
            z_bar,
            logdet,
            xh_feats: xh2,
        })
    }

    pub fn spatial_branch<'t, T: Float>(
        &self,
        ps: &ParamStore<T>,
        ys: Var<'t, T>,
        guidance: Var<'t, T>,
        x_r: Var<'t, T>,
        x_up: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut g = ys.add(guidance)?;
        if self.cfg.use_fam_lora {
            for b in &self.fam {
                g = b.forward(ps, g, Some(x_r))?;
            }
        }
        self.tail.forward(ps, g)?.add(x_up)
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>, y: Var<'t, T>) -> Result<Forward<'t, T>> {
        self.check_inputs(&x.shape(), &y.shape())?;
        let sp = self.spectral_branch(ps, x)?;
        let ys = self.msi_head.forward(ps, y)?;
        let x_r = self.prior.forward(ps, sp.feats, ys)?;
        let guidance = self.hf.forward(ps, sp.xh_feats, x_r)?;
        let z_hat = self.spatial_branch(ps, ys, guidance, x_r, sp.x_up)?;
        Ok(Forward {
            z_hat,
            z_bar: sp.z_bar,
            logdet: sp.logdet,
            coupled_len: sp.xh_feats.len(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.hsi_head.param_ids();
        ids.extend(self.proj.param_ids());
        ids.extend(self.reduce.param_ids());
        ids.extend(self.stack.param_ids());
        ids.extend(self.expand.param_ids());
        ids.extend(self.spec_tail.param_ids());
        ids.extend(self.msi_head.param_ids());
        ids.extend(self.prior.param_ids());
        ids.extend(self.hf.param_ids());
        ids.extend(self.fam.iter().flat_map(|b| b.param_ids()));
        ids.extend(self.tail.param_ids());
        ids
    }
}

/// Inference: `(z_hat, z_bar, logdet)`.
pub fn pifnet_forward<T: Float>(x: &Tensor<T>, y: &Tensor<T>, model: &PifNet, ps: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let t = Tape::no_grad();
    let out = model.forward(ps, t.constant(x.clone()), t.constant(y.clone()))?;
    Ok((out.z_hat.value(), out.z_bar.value(), out.logdet.item()))
}

/// Scalars across the model's parameters; shared weights count once.
pub fn parameter_count<T: Float>(model: &PifNet, ps: &ParamStore<T>) -> usize {
    let mut ids = model.param_ids();
    ids.sort_by_key(|id| id.index());
    ids.dedup();
    ids.into_iter().map(|id| ps.value(id).len()).sum()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PIFN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid("checkpoint", format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Float>(cfg: &PifNetConfig, ps: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, ps.len())?;
    for (_, p) in ps.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        let shape = p.value().shape();
        put_u32(&mut out, shape.len())?;
        for &d in shape {
            put_u32(&mut out, d)?;
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PifError::Format {
                offset: self.pos,
                msg: format!("need {n} more bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parsed checkpoint: config plus named parameter tensors.
pub struct Checkpoint<T: Float> {
    pub config: PifNetConfig,
    pub records: Vec<(String, Tensor<T>)>,
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(PifError::Format { offset: 0, msg: "bad magic, expected PIFN".into() });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(PifError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let n = r.u32()?;
    let config: PifNetConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let at = r.pos;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| PifError::Format { offset: at, msg: "name is not UTF-8".into() })?;
        let at = r.pos;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| PifError::Format { offset: at, msg: format!("unknown dtype code {code}") })?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * dtype.size_of())?;
        let t = match dtype {
            DType::F32 => Tensor::<f32>::from_vec(&shape, raw.chunks_exact(4).map(f32::read_le).collect())?.cast(),
            DType::F64 => Tensor::<f64>::from_vec(&shape, raw.chunks_exact(8).map(f64::read_le).collect())?.cast(),
        };
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(PifError::Format { offset: r.pos, msg: "trailing bytes".into() });
    }
    Ok(Checkpoint { config, records })
}

pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, cfg: &PifNetConfig, ps: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(cfg, ps)?;
    let tmp = path.as_ref().with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Rebuild the model from the stored config and fill in every parameter by name.
pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<(PifNet, ParamStore<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    restore(decode_checkpoint(&bytes)?)
}

pub fn restore<T: Float>(ck: Checkpoint<T>) -> Result<(PifNet, ParamStore<T>)> {
    let mut ps = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = PifNet::new(ck.config, &mut ps, &mut rng)?;
    if ck.records.len() != ps.len() {
        return Err(invalid("checkpoint", format!("{} records for {} parameters", ck.records.len(), ps.len())));
    }
    for (name, t) in ck.records {
        let id = ps.find(&name).ok_or_else(|| invalid("checkpoint", format!("unknown parameter {name}")))?;
        if ps.value(id).shape() != t.shape() {
            return Err(invalid("checkpoint", format!("shape of {name} differs from the model")));
        }
        let frozen = ps.get(id).frozen();
        ps.set_frozen(id, false);
        ps.set_value(id, t);
        ps.set_frozen(id, frozen);
    }
    Ok((model, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f32>::new();
        let m = PifNet::new(PifNetConfig::micro(6, 3, 4), &mut ps, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(&[4, 4, 6], 0.0, 1.0, &mut rng);
        let y = Tensor::<f32>::rand_uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        let (a, b, ld) = pifnet_forward(&x, &y, &m, &ps).unwrap();
        assert_eq!(a.shape(), &[16, 16, 6]);
        assert_eq!(b.shape(), &[16, 16, 6]);
        assert_eq!(ld, 0.0);
        assert_eq!(pifnet_forward(&x, &y, &m, &ps).unwrap().0, a);
        let bad = Tensor::<f32>::zeros(&[12, 16, 3]);
        let err = pifnet_forward(&x, &bad, &m, &ps).unwrap_err().to_string();
        assert!(err.contains("expected 16x16"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(PifNetConfig { d: 10, ..PifNetConfig::desk(8, 4, 4) }.validate().is_err());
        assert!(PifNetConfig::desk(8, 4, 3).validate().is_err());
        assert!(PifNetConfig { rank: 4, ..PifNetConfig::desk(8, 4, 4) }.validate().is_err());
        assert!(PifNetConfig::paper(103, 4, 4).validate().is_ok());
    }
}
