//! Hybrid CTC-attention encoder-decoder.
//!
//! Pre-norm transformer blocks (attention + feed-forward) on both sides.
//! The token embedding `E` is shared by three consumers: decoder input,
//! decoder output projection, and the CTC head, whose output matrix is `E`
//! with one extra blank row appended (blank = index `vocab_size`).
//!
//! Adaptation hooks are consulted for encoder layers past `n_lp_split`,
//! every decoder layer, the vocabulary matrix and the input sequence.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::CHECKPOINT_KIND;
pub use forward::{greedy_ctc_decode, hybrid_loss, Bound, EncodedVars, Hooks, NoHooks, UtteranceLoss};
pub use train::{train_step, AdamConfig, Optimizer, TrainableSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Init, Rng, Tensor};
use crate::vocab::{expand_vocab, N_SPECIAL, NEW_ROW_STD};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Positions available beyond `max_frames` for prepended prompt rows.
pub const PROMPT_HEADROOM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Global vocabulary size including the two special tokens.
    pub vocab_size: usize,
    pub d_feat: usize,
    /// Encoder layer (1-based) whose output feeds language identification;
    /// adaptation starts at the layer after it.
    pub n_lp_split: usize,
    pub lambda_ctc: f64,
    pub max_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperShape,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-shape" => Ok(Preset::PaperShape),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk|paper-shape)"))),
        }
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, d_feat: usize) -> Self {
        Self {
            n_enc_layers: 4,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            d_feat,
            n_lp_split: 2,
            lambda_ctc: 0.3,
            max_frames: 256,
        }
    }

    /// Full-size shape: 12 encoder / 6 decoder layers at width 512.
    pub fn paper_shape(vocab_size: usize, d_feat: usize) -> Self {
        Self {
            n_enc_layers: 12,
            n_dec_layers: 6,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            vocab_size,
            d_feat,
            n_lp_split: 6,
            lambda_ctc: 0.3,
            max_frames: 2048,
        }
    }

    pub fn preset(preset: Preset, vocab_size: usize, d_feat: usize) -> Self {
        match preset {
            Preset::Desk => Self::desk(vocab_size, d_feat),
            Preset::PaperShape => Self::paper_shape(vocab_size, d_feat),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_lp_split < 1 || self.n_lp_split >= self.n_enc_layers {
            return bad(format!("n_lp_split {} must be in [1, {})", self.n_lp_split, self.n_enc_layers));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return bad(format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc));
        }
        if self.vocab_size <= N_SPECIAL || self.d_feat == 0 || self.d_ff == 0 || self.n_dec_layers == 0 {
            return bad("vocab_size, d_feat, d_ff and n_dec_layers must be positive".into());
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Weight matrices of a block. `Cross*` exist only in decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    Q,
    K,
    V,
    O,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    Up,
    Down,
}

impl Matrix {
    /// Attention output projections and the feed-forward down projection.
    pub fn is_output_projection(self) -> bool {
        matches!(self, Matrix::O | Matrix::CrossO | Matrix::Down)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRole {
    Attn,
    Cross,
    Ff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasRole {
    Linear(Matrix),
    Norm(NormRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Junction {
    PostAttn,
    PostFf,
}

/// A place in the model where an add-on module can act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Input,
    Weight { stack: Stack, layer: usize, matrix: Matrix },
    Bias { stack: Stack, layer: usize, bias: BiasRole },
    Residual { stack: Stack, layer: usize, junction: Junction },
    Vocab,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = |s: &Stack| match s {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        match self {
            Site::Input => write!(f, "input"),
            Site::Vocab => write!(f, "vocab"),
            Site::Weight { stack, layer, matrix } => write!(f, "{}{layer}.{matrix:?}.weight", st(stack)),
            Site::Bias { stack, layer, bias } => write!(f, "{}{layer}.{bias:?}.bias", st(stack)),
            Site::Residual { stack, layer, junction } => write!(f, "{}{layer}.{junction:?}", st(stack)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIds {
    pub norm_attn: NormIds,
    pub attn: AttentionIds,
    pub norm_ff: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub norm_self: NormIds,
    pub self_attn: AttentionIds,
    pub norm_cross: NormIds,
    pub cross_attn: AttentionIds,
    pub norm_ff: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct Layout {
    input: LinearIds,
    encoder: Vec<EncoderLayerIds>,
    enc_norm: NormIds,
    embed: ParamId,
    ctc_blank: ParamId,
    decoder: Vec<DecoderLayerIds>,
    dec_norm: NormIds,
}

struct Builder<'r> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.params.push(t);
        ParamId(self.params.len() - 1)
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<LinearIds> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::new(&[d_out, d_in], Init::Normal { mean: 0.0, std, rng: self.rng })?;
        Ok(LinearIds { w: self.push(format!("{name}.weight"), w), b: self.push(format!("{name}.bias"), Tensor::zeros(&[d_out])) })
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds { g: self.push(format!("{name}.gain"), Tensor::full(&[d], 1.0)), b: self.push(format!("{name}.bias"), Tensor::zeros(&[d])) }
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionIds> {
        Ok(AttentionIds {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> Result<FeedForwardIds> {
        Ok(FeedForwardIds { up: self.linear(&format!("{name}.up"), d_ff, d)?, down: self.linear(&format!("{name}.down"), d, d_ff)? })
    }
}

/// The frozen-able base recognizer.
#[derive(Debug, Clone)]
pub struct BaseModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    positions: Tensor,
    frozen: bool,
}

fn sinusoid_table(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[rows, d], data).expect("table shape")
}

impl BaseModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng };
        let input = b.linear("input", d, config.d_feat)?;
        let mut encoder = Vec::with_capacity(config.n_enc_layers);
        for l in 0..config.n_enc_layers {
            let p = format!("enc{l}");
            encoder.push(EncoderLayerIds {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.attention(&format!("{p}.attn"), d)?,
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, config.d_ff)?,
            });
        }
        let enc_norm = b.norm("enc_norm", d);
        // special rows, then the rest of the global vocabulary in one expansion
        let special = Tensor::new(&[N_SPECIAL, d], Init::Normal { mean: 0.0, std: NEW_ROW_STD, rng: b.rng })?;
        let (e, _) = expand_vocab(&special, config.vocab_size - N_SPECIAL, config.vocab_size, b.rng)?;
        let embed = b.push("embed".into(), e);
        let blank = Tensor::new(&[1, d], Init::Normal { mean: 0.0, std: NEW_ROW_STD, rng: b.rng })?;
        let ctc_blank = b.push("ctc_blank".into(), blank);
        let mut decoder = Vec::with_capacity(config.n_dec_layers);
        for l in 0..config.n_dec_layers {
            let p = format!("dec{l}");
            decoder.push(DecoderLayerIds {
                norm_self: b.norm(&format!("{p}.norm_self"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d)?,
                norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d)?,
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, config.d_ff)?,
            });
        }
        let dec_norm = b.norm("dec_norm", d);
        let Builder { names, params, .. } = b;
        let positions = sinusoid_table(config.max_frames + PROMPT_HEADROOM, d);
        Ok(Self {
            config,
            names,
            params,
            layout: Layout { input, encoder, enc_norm, embed, ctc_blank, decoder, dec_norm },
            positions,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    #[cfg(test)]
    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[self.layout.embed.0]
    }

    pub fn embed_id(&self) -> ParamId {
        self.layout.embed
    }

    /// FNV-1a over every parameter value in layout order.
    pub fn checksum(&self) -> u64 {
        crate::container::checksum(self.params.iter())
    }

    /// First encoder layer index (0-based) that adaptation touches.
    pub fn first_adapted_layer(&self) -> usize {
        self.config.n_lp_split
    }

    fn adapted_layers(&self) -> impl Iterator<Item = (Stack, usize)> + '_ {
        let enc = (self.config.n_lp_split..self.config.n_enc_layers).map(|l| (Stack::Encoder, l));
        let dec = (0..self.config.n_dec_layers).map(|l| (Stack::Decoder, l));
        enc.chain(dec)
    }

    fn linear_of(&self, stack: Stack, layer: usize, m: Matrix) -> Option<LinearIds> {
        match stack {
            Stack::Encoder => {
                let l = self.layout.encoder.get(layer)?;
                match m {
                    Matrix::Q => Some(l.attn.q),
                    Matrix::K => Some(l.attn.k),
                    Matrix::V => Some(l.attn.v),
                    Matrix::O => Some(l.attn.o),
                    Matrix::Up => Some(l.ff.up),
                    Matrix::Down => Some(l.ff.down),
                    _ => None,
                }
            }
            Stack::Decoder => {
                let l = self.layout.decoder.get(layer)?;
                Some(match m {
                    Matrix::Q => l.self_attn.q,
                    Matrix::K => l.self_attn.k,
                    Matrix::V => l.self_attn.v,
                    Matrix::O => l.self_attn.o,
                    Matrix::CrossQ => l.cross_attn.q,
                    Matrix::CrossK => l.cross_attn.k,
                    Matrix::CrossV => l.cross_attn.v,
                    Matrix::CrossO => l.cross_attn.o,
                    Matrix::Up => l.ff.up,
                    Matrix::Down => l.ff.down,
                })
            }
        }
    }

    fn norm_of(&self, stack: Stack, layer: usize, n: NormRole) -> Option<NormIds> {
        match stack {
            Stack::Encoder => {
                let l = self.layout.encoder.get(layer)?;
                match n {
                    NormRole::Attn => Some(l.norm_attn),
                    NormRole::Ff => Some(l.norm_ff),
                    NormRole::Cross => None,
                }
            }
            Stack::Decoder => {
                let l = self.layout.decoder.get(layer)?;
                Some(match n {
                    NormRole::Attn => l.norm_self,
                    NormRole::Cross => l.norm_cross,
                    NormRole::Ff => l.norm_ff,
                })
            }
        }
    }

    fn matrices(stack: Stack) -> &'static [Matrix] {
        match stack {
            Stack::Encoder => &[Matrix::Q, Matrix::K, Matrix::V, Matrix::O, Matrix::Up, Matrix::Down],
            Stack::Decoder => &[
                Matrix::Q,
                Matrix::K,
                Matrix::V,
                Matrix::O,
                Matrix::CrossQ,
                Matrix::CrossK,
                Matrix::CrossV,
                Matrix::CrossO,
                Matrix::Up,
                Matrix::Down,
            ],
        }
    }

    fn norms(stack: Stack) -> &'static [NormRole] {
        match stack {
            Stack::Encoder => &[NormRole::Attn, NormRole::Ff],
            Stack::Decoder => &[NormRole::Attn, NormRole::Cross, NormRole::Ff],
        }
    }

    /// Every attention / feed-forward weight matrix in the adapted layers,
    /// with its `[d_out, d_in]` shape.
    pub fn weight_sites(&self) -> Vec<(Site, [usize; 2])> {
        let mut out = Vec::new();
        for (stack, layer) in self.adapted_layers() {
            for &m in Self::matrices(stack) {
                let lin = self.linear_of(stack, layer, m).expect("layout covers matrix");
                let s = self.param(lin.w).shape();
                out.push((Site::Weight { stack, layer, matrix: m }, [s[0], s[1]]));
            }
        }
        out
    }

    /// Every bias vector (linear and layer-norm) in the adapted layers.
    pub fn bias_sites(&self) -> Vec<(Site, usize)> {
        let mut out = Vec::new();
        for (stack, layer) in self.adapted_layers() {
            for &m in Self::matrices(stack) {
                let lin = self.linear_of(stack, layer, m).expect("layout covers matrix");
                out.push((Site::Bias { stack, layer, bias: BiasRole::Linear(m) }, self.param(lin.b).len()));
            }
            for &n in Self::norms(stack) {
                let ids = self.norm_of(stack, layer, n).expect("layout covers norm");
                out.push((Site::Bias { stack, layer, bias: BiasRole::Norm(n) }, self.param(ids.b).len()));
            }
        }
        out
    }

    /// Post-attention and post-feed-forward junctions of the adapted layers.
    pub fn residual_sites(&self) -> Vec<Site> {
        self.adapted_layers()
            .flat_map(|(stack, layer)| {
                [Junction::PostAttn, Junction::PostFf].map(|junction| Site::Residual { stack, layer, junction })
            })
            .collect()
    }

    /// Base parameter behind a weight or bias site.
    pub fn site_param(&self, site: Site) -> Option<ParamId> {
        match site {
            Site::Weight { stack, layer, matrix } => self.linear_of(stack, layer, matrix).map(|l| l.w),
            Site::Bias { stack, layer, bias: BiasRole::Linear(m) } => self.linear_of(stack, layer, m).map(|l| l.b),
            Site::Bias { stack, layer, bias: BiasRole::Norm(n) } => self.norm_of(stack, layer, n).map(|l| l.b),
            Site::Vocab => Some(self.layout.embed),
            _ => None,
        }
    }

    /// Ids of every bias vector in the model (linear and layer-norm).
    pub fn all_bias_ids(&self) -> Vec<ParamId> {
        self.param_ids().filter(|id| self.names[id.0].ends_with(".bias")).collect()
    }
}
