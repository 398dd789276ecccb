//! Parameter-efficient add-on modules.
//!
//! Each [`PeftModule`] sits at one [`Site`] of the base model and holds its
//! own tensors; the base weights are only ever read. Every module starts as
//! an exact no-op.
//!
//! Weight-family modules compose as `W = (W₀ ⊙ Wₛ + ΔW) ⊙ B` where
//! `Wₛ = 1 + U·V`, `ΔW = B_lr·A` and `B` is the thresholded mask. The scale
//! is evaluated as `W₀ + W₀ ⊙ (U·V)` so that a zero deviation reproduces
//! `W₀` bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Site;
use crate::tensor::{Init, Rng, Tape, Tensor, Var};

/// Standard deviation of the random factor in a fresh low-rank pair.
pub const FACTOR_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeftKind {
    BitFit,
    #[serde(rename = "lora")]
    LoRA { r: usize },
    #[serde(rename = "lora_star")]
    LoRAStar { r_default: usize, r_boost: usize },
    Mask { tau: f64 },
    #[serde(rename = "mask_lora_star")]
    MaskLoRAStar { r_default: usize, r_boost: usize, tau: f64 },
    Adapter { d_bottleneck: usize },
    Prompt { n_tokens: usize },
}

/// How a module's tensors are laid out and combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `[delta]`
    Bias,
    /// `[a, b, u, v]`
    LowRank,
    /// `[m]`
    Mask,
    /// `[m, a, b, u, v]`
    MaskLowRank,
    /// `[down, b_down, up, b_up]`
    Adapter,
    /// `[p]`
    Prompt,
}

impl PeftKind {
    /// Scaled-down defaults for the desk model.
    pub fn desk(name: &str) -> Result<Self> {
        Self::named(name, 4, 8, 32, 20)
    }

    /// Full-size defaults (rank 32, boosted rank 128, bottleneck 256).
    pub fn paper_shape(name: &str) -> Result<Self> {
        Self::named(name, 32, 128, 256, 20)
    }

    fn named(name: &str, r: usize, r_boost: usize, bn: usize, n_prompt: usize) -> Result<Self> {
        let tau = 0.05;
        Ok(match name.to_ascii_lowercase().as_str() {
            "bitfit" => PeftKind::BitFit,
            "lora" => PeftKind::LoRA { r },
            "lora_star" | "lora*" => PeftKind::LoRAStar { r_default: r, r_boost },
            "mask" => PeftKind::Mask { tau },
            "mask_lora_star" | "masklora*" => PeftKind::MaskLoRAStar { r_default: r, r_boost, tau },
            "adapter" => PeftKind::Adapter { d_bottleneck: bn },
            "prompt" => PeftKind::Prompt { n_tokens: n_prompt },
            other => return Err(Error::Config(format!("unknown peft kind {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PeftKind::BitFit => "bitfit",
            PeftKind::LoRA { .. } => "lora",
            PeftKind::LoRAStar { .. } => "lora_star",
            PeftKind::Mask { .. } => "mask",
            PeftKind::MaskLoRAStar { .. } => "mask_lora_star",
            PeftKind::Adapter { .. } => "adapter",
            PeftKind::Prompt { .. } => "prompt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PeftKind::BitFit | PeftKind::Prompt { .. } => true,
            PeftKind::LoRA { r } => r >= 1,
            PeftKind::LoRAStar { r_default, r_boost } => r_default >= 1 && r_boost >= 1,
            PeftKind::Mask { tau } => tau > 0.0 && tau < 1.0,
            PeftKind::MaskLoRAStar { r_default, r_boost, tau } => r_default >= 1 && r_boost >= 1 && tau > 0.0 && tau < 1.0,
            PeftKind::Adapter { d_bottleneck } => d_bottleneck >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid peft kind {self:?}")))
        }
    }

    pub fn family(&self) -> Family {
        match self {
            PeftKind::BitFit => Family::Bias,
            PeftKind::LoRA { .. } | PeftKind::LoRAStar { .. } => Family::LowRank,
            PeftKind::Mask { .. } => Family::Mask,
            PeftKind::MaskLoRAStar { .. } => Family::MaskLowRank,
            PeftKind::Adapter { .. } => Family::Adapter,
            PeftKind::Prompt { .. } => Family::Prompt,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            PeftKind::Mask { tau } | PeftKind::MaskLoRAStar { tau, .. } => Some(tau),
            _ => None,
        }
    }

    /// Rank used at a weight site, boosted on output projections.
    pub fn rank_at(&self, site: Site) -> Option<usize> {
        let boosted = matches!(site, Site::Weight { matrix, .. } if matrix.is_output_projection());
        match *self {
            PeftKind::LoRA { r } => Some(r),
            PeftKind::LoRAStar { r_default, r_boost } | PeftKind::MaskLoRAStar { r_default, r_boost, .. } => {
                Some(if boosted { r_boost } else { r_default })
            }
            _ => None,
        }
    }

    /// Whether this kind can live at `site`.
    pub fn accepts(&self, site: Site) -> bool {
        matches!(
            (self.family(), site),
            (Family::Bias, Site::Bias { .. })
                | (Family::LowRank | Family::Mask | Family::MaskLowRank, Site::Weight { .. })
                | (Family::Adapter, Site::Residual { .. })
                | (Family::Prompt, Site::Input)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftModule {
    pub kind: PeftKind,
    pub site: Site,
    pub tensors: Vec<Tensor>,
}

/// Mask logit at which `sigmoid(m)` sits one logit unit above `tau`.
pub fn mask_init_logit(tau: f64) -> f64 {
    (tau / (1.0 - tau)).ln() + 1.0
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    Tensor::new(shape, Init::Normal { mean: 0.0, std, rng })
}

/// `[a, b, u, v]` with `b = u = 0`.
fn low_rank_pair(d2: usize, d1: usize, r: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    Ok(vec![
        normal(&[r, d1], FACTOR_STD, rng)?,
        Tensor::zeros(&[d2, r]),
        Tensor::zeros(&[d2, r]),
        normal(&[r, d1], FACTOR_STD, rng)?,
    ])
}

/// Creates a module at `site`. `dims` is `[d2, d1]` for weight sites,
/// `[len]` for bias sites, `[d_model]` for residual sites and `[d_feat]`
/// for the input site.
pub fn make_module(kind: PeftKind, site: Site, dims: &[usize], rng: &mut Rng) -> Result<PeftModule> {
    kind.validate()?;
    if !kind.accepts(site) {
        return Err(Error::Config(format!("{} cannot be placed at {site}", kind.name())));
    }
    let want = if matches!(site, Site::Weight { .. }) { 2 } else { 1 };
    if dims.len() != want || dims.contains(&0) {
        return Err(Error::Shape(format!("dims {dims:?} do not fit site {site}")));
    }
    let tensors = match kind {
        PeftKind::BitFit => vec![Tensor::zeros(&[dims[0]])],
        PeftKind::LoRA { .. } | PeftKind::LoRAStar { .. } => {
            low_rank_pair(dims[0], dims[1], kind.rank_at(site).expect("low-rank kind"), rng)?
        }
        PeftKind::Mask { tau } => vec![Tensor::full(&[dims[0], dims[1]], mask_init_logit(tau))],
        PeftKind::MaskLoRAStar { tau, .. } => {
            let mut t = vec![Tensor::full(&[dims[0], dims[1]], mask_init_logit(tau))];
            t.extend(low_rank_pair(dims[0], dims[1], kind.rank_at(site).expect("low-rank kind"), rng)?);
            t
        }
        PeftKind::Adapter { d_bottleneck: bn } => {
            let d = dims[0];
            vec![
                normal(&[d, bn], 1.0 / (d as f64).sqrt(), rng)?,
                Tensor::zeros(&[bn]),
                Tensor::zeros(&[bn, d]),
                Tensor::zeros(&[d]),
            ]
        }
        PeftKind::Prompt { n_tokens } => {
            if n_tokens == 0 {
                Vec::new()
            } else {
                vec![Tensor::zeros(&[n_tokens, dims[0]])]
            }
        }
    };
    Ok(PeftModule { kind, site, tensors })
}

impl PeftModule {
    pub fn family(&self) -> Family {
        self.kind.family()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self.family() {
            Family::Bias => &["delta"],
            Family::LowRank => &["a", "b", "u", "v"],
            Family::Mask => &["m"],
            Family::MaskLowRank => &["m", "a", "b", "u", "v"],
            Family::Adapter => &["down", "b_down", "up", "b_up"],
            Family::Prompt => &["p"],
        }
    }

    /// Records the module tensors on `tape` in storage order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf_ref(t, requires_grad)).collect()
    }
}

/// Per-module weight contributions, each optional.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightTerms {
    /// `U·V`, the deviation of `Wₛ` from all-ones.
    pub scale_dev: Option<Var>,
    /// `B·A`.
    pub delta: Option<Var>,
    /// Binary mask.
    pub mask: Option<Var>,
}

/// Splits a bound weight-family module into its terms.
pub fn weight_terms(tape: &mut Tape<'_>, kind: PeftKind, vars: &[Var]) -> Result<WeightTerms> {
    let lr = |tape: &mut Tape<'_>, v: &[Var]| -> Result<(Var, Var)> {
        let (a, b, u, w) = (v[0], v[1], v[2], v[3]);
        Ok((tape.matmul(u, w)?, tape.matmul(b, a)?))
    };
    match kind.family() {
        Family::LowRank => {
            let (dev, delta) = lr(tape, vars)?;
            Ok(WeightTerms { scale_dev: Some(dev), delta: Some(delta), mask: None })
        }
        Family::Mask => Ok(WeightTerms { mask: Some(binarize_mask_var(tape, vars[0], kind.tau().expect("mask"))), ..Default::default() }),
        Family::MaskLowRank => {
            let mask = binarize_mask_var(tape, vars[0], kind.tau().expect("mask"));
            let (dev, delta) = lr(tape, &vars[1..])?;
            Ok(WeightTerms { scale_dev: Some(dev), delta: Some(delta), mask: Some(mask) })
        }
        _ => Err(Error::Config(format!("{} is not a weight family", kind.name()))),
    }
}

/// `(W₀ + W₀ ⊙ dev + delta) ⊙ mask`, skipping absent terms.
pub fn compose_weight(tape: &mut Tape<'_>, w0: Var, terms: WeightTerms) -> Result<Var> {
    let mut w = w0;
    if let Some(dev) = terms.scale_dev {
        let s = tape.mul(w0, dev)?;
        w = tape.add(w, s)?;
    }
    if let Some(d) = terms.delta {
        w = tape.add(w, d)?;
    }
    if let Some(m) = terms.mask {
        w = tape.mul(w, m)?;
    }
    Ok(w)
}

pub fn binarize_mask_var(tape: &mut Tape<'_>, m: Var, tau: f64) -> Var {
    tape.threshold_ste(m, tau)
}

/// `1` where `sigmoid(m) ≥ tau`, else `0`.
pub fn binarize_mask(m: &Tensor, tau: f64) -> Tensor {
    let mut t = Tape::new();
    let v = t.leaf_ref(m, false);
    let b = t.threshold_ste(v, tau);
    t.value(b).clone()
}

/// Composed weight of a single weight-family module.
pub fn effective_weight(w0: &Tensor, module: &PeftModule) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.leaf_ref(w0, false);
    let vars = module.bind(&mut tape, false);
    check_weight_shape(tape.value(w), module)?;
    let terms = weight_terms(&mut tape, module.kind, &vars)?;
    let out = compose_weight(&mut tape, w, terms)?;
    Ok(tape.value(out).clone())
}

fn check_weight_shape(w0: &Tensor, module: &PeftModule) -> Result<()> {
    let expect = match module.family() {
        Family::LowRank => [module.tensors[1].rows(), module.tensors[0].cols()],
        Family::Mask | Family::MaskLowRank => [module.tensors[0].rows(), module.tensors[0].cols()],
        _ => return Err(Error::Config(format!("{} is not a weight family", module.kind.name()))),
    };
    if w0.shape() != expect {
        return Err(Error::Shape(format!("W0 {:?} vs module {:?}", w0.shape(), expect)));
    }
    Ok(())
}

/// Bottleneck delta `relu(h·down + b_down)·up + b_up`.
pub fn adapter_delta(tape: &mut Tape<'_>, h: Var, vars: &[Var]) -> Result<Var> {
    let z = tape.matmul(h, vars[0])?;
    let z = tape.add_row(z, vars[1])?;
    let z = tape.relu(z);
    let y = tape.matmul(z, vars[2])?;
    tape.add_row(y, vars[3])
}

/// `h + adapter_delta(h)` for a single adapter module.
pub fn apply_adapter(h: &Tensor, module: &PeftModule) -> Result<Tensor> {
    if module.family() != Family::Adapter {
        return Err(Error::Config(format!("{} is not an adapter", module.kind.name())));
    }
    if h.shape().len() != 2 || h.cols() != module.tensors[0].rows() {
        return Err(Error::Shape(format!("h {:?} vs adapter width {}", h.shape(), module.tensors[0].rows())));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf_ref(h, false);
    let vars = module.bind(&mut tape, false);
    let d = adapter_delta(&mut tape, hv, &vars)?;
    let out = tape.add(hv, d)?;
    Ok(tape.value(out).clone())
}

/// `[P; features]`; a zero-length prompt returns the features unchanged.
pub fn apply_prompt(features: &Tensor, module: &PeftModule) -> Result<Tensor> {
    if module.family() != Family::Prompt {
        return Err(Error::Config(format!("{} is not a prompt", module.kind.name())));
    }
    let Some(p) = module.tensors.first() else {
        return Ok(features.clone());
    };
    if p.cols() != features.cols() {
        return Err(Error::Shape(format!("prompt width {} vs features {}", p.cols(), features.cols())));
    }
    let mut data = p.data().to_vec();
    data.extend_from_slice(features.data());
    Tensor::from_vec(&[p.rows() + features.rows(), features.cols()], data)
}

/// `b₀ + Δb`.
pub fn apply_bitfit(b0: &Tensor, module: &PeftModule) -> Result<Tensor> {
    if module.family() != Family::Bias {
        return Err(Error::Config(format!("{} is not a bias module", module.kind.name())));
    }
    let delta = &module.tensors[0];
    if delta.shape() != b0.shape() {
        return Err(Error::Shape(format!("bias {:?} vs delta {:?}", b0.shape(), delta.shape())));
    }
    let mut tape = Tape::new();
    let (b, d) = (tape.leaf_ref(b0, false), tape.leaf_ref(delta, false));
    let out = tape.add(b, d)?;
    Ok(tape.value(out).clone())
}

/// One module per site this kind covers on `model`.
pub fn modules_for(model: &crate::model::BaseModel, kind: PeftKind, rng: &mut Rng) -> Result<Vec<PeftModule>> {
    kind.validate()?;
    let d = model.config().d_model;
    let mut out = Vec::new();
    match kind.family() {
        Family::Bias => {
            for (site, len) in model.bias_sites() {
                out.push(make_module(kind, site, &[len], rng)?);
            }
        }
        Family::LowRank | Family::Mask | Family::MaskLowRank => {
            for (site, [d2, d1]) in model.weight_sites() {
                out.push(make_module(kind, site, &[d2, d1], rng)?);
            }
        }
        Family::Adapter => {
            for site in model.residual_sites() {
                out.push(make_module(kind, site, &[d], rng)?);
            }
        }
        Family::Prompt => out.push(make_module(kind, Site::Input, &[model.config().d_feat], rng)?),
    }
    Ok(out)
}

/// Closed-form trainable count of [`modules_for`], excluding the vocabulary update.
pub fn expected_param_count(model: &crate::model::BaseModel, kind: PeftKind) -> usize {
    let cfg = model.config();
    let d = cfg.d_model;
    let enc_adapted = cfg.n_enc_layers - cfg.n_lp_split;
    match kind {
        PeftKind::BitFit => model.bias_sites().iter().map(|(_, n)| n).sum(),
        PeftKind::Adapter { d_bottleneck: bn } => 2 * (enc_adapted + cfg.n_dec_layers) * (2 * d * bn + bn + d),
        PeftKind::Prompt { n_tokens } => n_tokens * cfg.d_feat,
        _ => model
            .weight_sites()
            .iter()
            .map(|&(site, [d2, d1])| {
                let lr = kind.rank_at(site).map_or(0, |r| 2 * r * (d1 + d2));
                let mask = if kind.tau().is_some() { d1 * d2 } else { 0 };
                lr + mask
            })
            .sum(),
    }
}
