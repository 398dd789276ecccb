use std::collections::HashMap;
use std::ops::Range;

use super::{AttentionIds, BaseModel, BiasRole, FeedForwardIds, Junction, LinearIds, Matrix, NormIds, NormRole, Site, Stack, LN_EPS};
use crate::ctc::{collapse, ctc_loss};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{EOS, SOS};

use super::train::TrainableSet;

/// Interception points for add-on modules.
///
/// Every method defaults to the identity, so an implementation only
/// overrides what it changes. `weight`, `bias` and `residual` are consulted
/// only for adapted layers; `input` and `vocab` always.
pub trait Hooks<'a> {
    /// Receives the raw features `[T, d_feat]`; returns the (possibly
    /// extended) sequence and the number of prepended rows.
    fn input(&mut self, _tape: &mut Tape<'a>, x: Var) -> Result<(Var, usize)> {
        Ok((x, 0))
    }

    fn weight(&mut self, _tape: &mut Tape<'a>, _site: Site, w: Var) -> Result<Var> {
        Ok(w)
    }

    fn bias(&mut self, _tape: &mut Tape<'a>, _site: Site, b: Var) -> Result<Var> {
        Ok(b)
    }

    fn residual(&mut self, _tape: &mut Tape<'a>, _site: Site, h: Var) -> Result<Var> {
        Ok(h)
    }

    fn vocab(&mut self, _tape: &mut Tape<'a>, e: Var) -> Result<Var> {
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl<'a> Hooks<'a> for NoHooks {}

/// Encoder activations of one utterance.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// `states[n]` is the output of encoder layer `n + 1`, prompt rows included.
    pub states: Vec<Var>,
    pub prompt_len: usize,
}

/// Per-utterance loss terms.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceLoss {
    pub ctc: Option<Var>,
    pub att: Option<Var>,
    pub total: Var,
}

/// A model bound to a tape together with the hooks of this pass.
///
/// Effective weights, biases and the vocabulary matrix are resolved once per
/// site and reused by every utterance recorded on the same tape.
pub struct Bound<'a, H> {
    model: &'a BaseModel,
    hooks: H,
    vars: Vec<Var>,
    positions: Var,
    weights: HashMap<Site, Var>,
    biases: HashMap<Site, Var>,
    vocab: Option<Var>,
    ctc_out: Option<Var>,
}

/// `λ·ctc + (1−λ)·att`, rejecting non-finite inputs.
pub fn hybrid_loss(ctc_nll: f64, att_nll: f64, lambda: f64) -> Result<f64> {
    if !ctc_nll.is_finite() || !att_nll.is_finite() {
        return Err(Error::NonFinite(format!("loss terms ctc={ctc_nll} att={att_nll}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * ctc_nll + (1.0 - lambda) * att_nll)
}

/// Framewise argmax, repeats merged, blanks (last column) dropped.
pub fn greedy_ctc_decode(log_probs: &Tensor) -> Vec<usize> {
    collapse(&log_probs.argmax_rows(), log_probs.cols() - 1)
}

impl<'a, H: Hooks<'a>> Bound<'a, H> {
    pub fn new(tape: &mut Tape<'a>, model: &'a BaseModel, trainable: &TrainableSet, hooks: H) -> Self {
        let vars = model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf_ref(p, !model.frozen && trainable.contains(super::ParamId(i))))
            .collect();
        let positions = tape.leaf_ref(&model.positions, false);
        Self { model, hooks, vars, positions, weights: HashMap::new(), biases: HashMap::new(), vocab: None, ctc_out: None }
    }

    pub fn model(&self) -> &'a BaseModel {
        self.model
    }

    pub fn hooks(&self) -> &H {
        &self.hooks
    }

    pub fn hooks_mut(&mut self) -> &mut H {
        &mut self.hooks
    }

    pub fn into_hooks(self) -> H {
        self.hooks
    }

    pub fn var(&self, id: super::ParamId) -> Var {
        self.vars[id.0]
    }

    fn adapted(&self, stack: Stack, layer: usize) -> bool {
        stack == Stack::Decoder || layer >= self.model.config.n_lp_split
    }

    fn linear(&mut self, tape: &mut Tape<'a>, x: Var, ids: LinearIds, at: Option<(Stack, usize, Matrix)>) -> Result<Var> {
        let (mut w, mut b) = (self.var(ids.w), self.var(ids.b));
        if let Some((stack, layer, matrix)) = at.filter(|&(s, l, _)| self.adapted(s, l)) {
            let ws = Site::Weight { stack, layer, matrix };
            w = match self.weights.get(&ws) {
                Some(&v) => v,
                None => {
                    let v = self.hooks.weight(tape, ws, w)?;
                    self.weights.insert(ws, v);
                    v
                }
            };
            b = self.resolve_bias(tape, Site::Bias { stack, layer, bias: BiasRole::Linear(matrix) }, b)?;
        }
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    fn resolve_bias(&mut self, tape: &mut Tape<'a>, site: Site, b: Var) -> Result<Var> {
        if let Some(&v) = self.biases.get(&site) {
            return Ok(v);
        }
        let v = self.hooks.bias(tape, site, b)?;
        self.biases.insert(site, v);
        Ok(v)
    }

    fn norm(&mut self, tape: &mut Tape<'a>, x: Var, ids: NormIds, at: Option<(Stack, usize, NormRole)>) -> Result<Var> {
        let mut b = self.var(ids.b);
        if let Some((stack, layer, role)) = at.filter(|&(s, l, _)| self.adapted(s, l)) {
            b = self.resolve_bias(tape, Site::Bias { stack, layer, bias: BiasRole::Norm(role) }, b)?;
        }
        let g = self.var(ids.g);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn residual(&mut self, tape: &mut Tape<'a>, h: Var, stack: Stack, layer: usize, junction: Junction) -> Result<Var> {
        if self.adapted(stack, layer) {
            self.hooks.residual(tape, Site::Residual { stack, layer, junction }, h)
        } else {
            Ok(h)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        tape: &mut Tape<'a>,
        xq: Var,
        xkv: Var,
        ids: AttentionIds,
        mats: [Matrix; 4],
        stack: Stack,
        layer: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(tape, xq, ids.q, Some((stack, layer, mats[0])))?;
        let k = self.linear(tape, xkv, ids.k, Some((stack, layer, mats[1])))?;
        let v = self.linear(tape, xkv, ids.v, Some((stack, layer, mats[2])))?;
        let (n_q, n_k) = (tape.value(q).rows(), tape.value(k).rows());
        let mask = causal.then(|| {
            let mut m = Tensor::zeros(&[n_q, n_k]);
            for i in 0..n_q {
                for j in (i + 1)..n_k {
                    m.data_mut()[i * n_k + j] = -1e30;
                }
            }
            tape.constant(m)
        });
        let heads = self.model.config.n_heads;
        let dh = self.model.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, cols.clone())?, tape.slice_cols(k, cols.clone())?, tape.slice_cols(v, cols)?)
            };
            let s = tape.matmul_nt(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, o, ids.o, Some((stack, layer, mats[3])))
    }

    fn feed_forward(&mut self, tape: &mut Tape<'a>, x: Var, ids: FeedForwardIds, stack: Stack, layer: usize) -> Result<Var> {
        let u = self.linear(tape, x, ids.up, Some((stack, layer, Matrix::Up)))?;
        let u = tape.gelu(u);
        self.linear(tape, u, ids.down, Some((stack, layer, Matrix::Down)))
    }

    fn pos(&mut self, tape: &mut Tape<'a>, rows: usize) -> Result<Var> {
        let avail = self.model.positions.rows();
        if rows > avail {
            return Err(Error::Shape(format!("sequence of {rows} positions exceeds table of {avail}")));
        }
        tape.slice_rows(self.positions, 0..rows)
    }

    /// Optional prompt prepending, input projection, positional encoding.
    pub fn embed_input(&mut self, tape: &mut Tape<'a>, features: Var, with_prompt: bool) -> Result<(Var, usize)> {
        let f = tape.value(features);
        if f.shape().len() != 2 || f.cols() != self.model.config.d_feat {
            return Err(Error::Shape(format!("features {:?}, expected [T, {}]", f.shape(), self.model.config.d_feat)));
        }
        if f.rows() > self.model.config.max_frames {
            return Err(Error::Shape(format!("{} frames exceeds max_frames {}", f.rows(), self.model.config.max_frames)));
        }
        let (f, n) = if with_prompt { self.hooks.input(tape, features)? } else { (features, 0) };
        let x = self.linear(tape, f, self.model.layout.input, None)?;
        let rows = tape.value(x).rows();
        let p = self.pos(tape, rows)?;
        Ok((tape.add(x, p)?, n))
    }

    /// Runs encoder layers `layers` (0-based) on `h`, returning each output.
    pub fn encoder_layers(&mut self, tape: &mut Tape<'a>, mut h: Var, layers: Range<usize>) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let ids = self.model.layout.encoder[l];
            let st = Stack::Encoder;
            let x = self.norm(tape, h, ids.norm_attn, Some((st, l, NormRole::Attn)))?;
            let a = self.attention(tape, x, x, ids.attn, [Matrix::Q, Matrix::K, Matrix::V, Matrix::O], st, l, false)?;
            h = tape.add(h, a)?;
            h = self.residual(tape, h, st, l, Junction::PostAttn)?;
            let x = self.norm(tape, h, ids.norm_ff, Some((st, l, NormRole::Ff)))?;
            let f = self.feed_forward(tape, x, ids.ff, st, l)?;
            h = tape.add(h, f)?;
            h = self.residual(tape, h, st, l, Junction::PostFf)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Full encoder pass.
    pub fn encode(&mut self, tape: &mut Tape<'a>, features: Var) -> Result<EncodedVars> {
        let (h, prompt_len) = self.embed_input(tape, features, true)?;
        let states = self.encoder_layers(tape, h, 0..self.model.config.n_enc_layers)?;
        Ok(EncodedVars { states, prompt_len })
    }

    /// Layers `1..=n_lp_split` with no prompt; these are never adapted.
    pub fn encode_lower(&mut self, tape: &mut Tape<'a>, features: Var) -> Result<Vec<Var>> {
        let (h, _) = self.embed_input(tape, features, false)?;
        self.encoder_layers(tape, h, 0..self.model.config.n_lp_split)
    }

    /// Continues a prompt-free lower pass through the adapted layers.
    pub fn encode_upper(&mut self, tape: &mut Tape<'a>, lower: Vec<Var>) -> Result<EncodedVars> {
        let split = self.model.config.n_lp_split;
        let h = *lower.last().ok_or_else(|| Error::Shape("empty lower encoder states".into()))?;
        let mut states = lower;
        states.extend(self.encoder_layers(tape, h, split..self.model.config.n_enc_layers)?);
        Ok(EncodedVars { states, prompt_len: 0 })
    }

    /// Final encoder output with prompt rows removed, `[T, d]`.
    pub fn memory(&mut self, tape: &mut Tape<'a>, enc: &EncodedVars) -> Result<Var> {
        let mut top = *enc.states.last().ok_or_else(|| Error::Shape("no encoder states".into()))?;
        if enc.prompt_len > 0 {
            let rows = tape.value(top).rows();
            top = tape.slice_rows(top, enc.prompt_len..rows)?;
        }
        let ids = self.model.layout.enc_norm;
        self.norm(tape, top, ids, None)
    }

    /// Effective embedding matrix after the vocabulary hook.
    pub fn vocab_matrix(&mut self, tape: &mut Tape<'a>) -> Result<Var> {
        if let Some(v) = self.vocab {
            return Ok(v);
        }
        let e = self.var(self.model.layout.embed);
        let v = self.hooks.vocab(tape, e)?;
        self.vocab = Some(v);
        Ok(v)
    }

    /// `[T, vocab_size + 1]` CTC log-probabilities, blank last.
    pub fn ctc_log_probs(&mut self, tape: &mut Tape<'a>, memory: Var) -> Result<Var> {
        let w = match self.ctc_out {
            Some(w) => w,
            None => {
                let e = self.vocab_matrix(tape)?;
                let blank = self.var(self.model.layout.ctc_blank);
                let w = tape.concat_rows(&[e, blank])?;
                self.ctc_out = Some(w);
                w
            }
        };
        let logits = tape.matmul_nt(memory, w)?;
        tape.log_softmax(logits, 1)
    }

    /// Teacher-forced decoder log-probabilities `[U+1, vocab_size]` for
    /// input `[SOS, y...]`.
    pub fn decoder_log_probs(&mut self, tape: &mut Tape<'a>, memory: Var, target: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        if let Some(&bad) = target.iter().find(|&&t| t >= cfg.vocab_size || t == SOS || t == EOS) {
            return Err(Error::Data(format!("target token {bad} not a content token of vocabulary {}", cfg.vocab_size)));
        }
        let scale = (cfg.d_model as f64).sqrt();
        let e = self.vocab_matrix(tape)?;
        let ids: Vec<usize> = std::iter::once(SOS).chain(target.iter().copied()).collect();
        let x = tape.gather_rows(e, &ids)?;
        let x = tape.scale(x, scale);
        let p = self.pos(tape, ids.len())?;
        let mut h = tape.add(x, p)?;
        for l in 0..self.model.config.n_dec_layers {
            let ids = self.model.layout.decoder[l];
            let st = Stack::Decoder;
            let x = self.norm(tape, h, ids.norm_self, Some((st, l, NormRole::Attn)))?;
            let a = self.attention(tape, x, x, ids.self_attn, [Matrix::Q, Matrix::K, Matrix::V, Matrix::O], st, l, true)?;
            h = tape.add(h, a)?;
            let x = self.norm(tape, h, ids.norm_cross, Some((st, l, NormRole::Cross)))?;
            let mats = [Matrix::CrossQ, Matrix::CrossK, Matrix::CrossV, Matrix::CrossO];
            let c = self.attention(tape, x, memory, ids.cross_attn, mats, st, l, false)?;
            h = tape.add(h, c)?;
            h = self.residual(tape, h, st, l, Junction::PostAttn)?;
            let x = self.norm(tape, h, ids.norm_ff, Some((st, l, NormRole::Ff)))?;
            let f = self.feed_forward(tape, x, ids.ff, st, l)?;
            h = tape.add(h, f)?;
            h = self.residual(tape, h, st, l, Junction::PostFf)?;
        }
        let ids = self.model.layout.dec_norm;
        let h = self.norm(tape, h, ids, None)?;
        let logits = tape.matmul_nt(h, e)?;
        tape.log_softmax(logits, 1)
    }

    /// Attention NLL of `[y..., EOS]` under teacher forcing.
    pub fn attention_nll(&mut self, tape: &mut Tape<'a>, memory: Var, target: &[usize]) -> Result<Var> {
        let lp = self.decoder_log_probs(tape, memory, target)?;
        let next: Vec<usize> = target.iter().copied().chain(std::iter::once(EOS)).collect();
        let picked = tape.pick(lp, &next)?;
        let s = tape.sum(picked);
        Ok(tape.scale(s, -1.0))
    }

    /// Hybrid loss from encoder memory. A zero-weighted term is not computed.
    pub fn loss_from_memory(&mut self, tape: &mut Tape<'a>, memory: Var, target: &[usize]) -> Result<UtteranceLoss> {
        let lambda = self.model.config.lambda_ctc;
        let ctc = if lambda > 0.0 {
            let lp = self.ctc_log_probs(tape, memory)?;
            Some(ctc_loss(tape, lp, target)?)
        } else {
            None
        };
        let att = if lambda < 1.0 { Some(self.attention_nll(tape, memory, target)?) } else { None };
        let total = match (ctc, att) {
            (Some(c), Some(a)) => {
                let c = tape.scale(c, lambda);
                let a = tape.scale(a, 1.0 - lambda);
                tape.add(c, a)?
            }
            (Some(c), None) => c,
            (None, Some(a)) => a,
            (None, None) => unreachable!("lambda is in [0, 1]"),
        };
        Ok(UtteranceLoss { ctc, att, total })
    }

    pub fn utterance_loss(&mut self, tape: &mut Tape<'a>, features: &'a Tensor, target: &[usize]) -> Result<UtteranceLoss> {
        let f = tape.leaf_ref(features, false);
        let enc = self.encode(tape, f)?;
        let memory = self.memory(tape, &enc)?;
        self.loss_from_memory(tape, memory, target)
    }

    /// Greedy CTC transcription of one utterance.
    pub fn transcribe(&mut self, tape: &mut Tape<'a>, features: &'a Tensor) -> Result<Vec<usize>> {
        let f = tape.leaf_ref(features, false);
        let enc = self.encode(tape, f)?;
        let memory = self.memory(tape, &enc)?;
        let lp = self.ctc_log_probs(tape, memory)?;
        Ok(greedy_ctc_decode(tape.value(lp)))
    }
}

impl BaseModel {
    /// Outputs of encoder layers `1..=n` (unadapted), as plain tensors.
    pub fn encoder_states(&self, features: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        if n == 0 || n > self.config.n_enc_layers {
            return Err(Error::Config(format!("layer count {n} outside 1..={}", self.config.n_enc_layers)));
        }
        let mut tape = Tape::new();
        let mut b = Bound::new(&mut tape, self, &TrainableSet::none(), NoHooks);
        let f = tape.leaf_ref(features, false);
        let (h, _) = b.embed_input(&mut tape, f, false)?;
        // unadapted pass: identity hooks make every layer the base layer
        let states = b.encoder_layers(&mut tape, h, 0..n)?;
        Ok(states.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Greedy CTC transcription with no add-on modules.
    pub fn transcribe(&self, features: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut b = Bound::new(&mut tape, self, &TrainableSet::none(), NoHooks);
        b.transcribe(&mut tape, features)
    }

    /// Hybrid loss of one utterance with no add-on modules.
    pub fn utterance_loss(&self, features: &Tensor, target: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut b = Bound::new(&mut tape, self, &TrainableSet::none(), NoHooks);
        let l = b.utterance_loss(&mut tape, features, target)?;
        Ok(tape.value(l.total).item())
    }
}
