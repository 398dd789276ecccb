//! Per-language add-on bundles over a frozen base, mixed by a weight vector.
//!
//! Slot `0` of an [`AlphaVector`] is the base model itself (a module that
//! contributes nothing); slot `l + 1` is bundle `l`. At every site the
//! bundles' contributions are combined as follows:
//!
//! * additive terms (low-rank deltas, scale deviations, adapter outputs,
//!   bias deltas, prompt rows, vocabulary deltas) are α-weighted sums;
//! * binary masks become `α₀·1 + Σ α_l·B_l` and multiply the weight.
//!
//! Slots with a zero weight are skipped unless the weights are being
//! trained, so a one-hot vector reproduces the single-bundle path exactly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::lid::LidModel;
use crate::model::{greedy_ctc_decode, AdamConfig, BaseModel, Bound, Hooks, NoHooks, Optimizer, Site, TrainableSet};
use crate::peft::{adapter_delta, compose_weight, modules_for, weight_terms, Family, PeftKind, PeftModule, WeightTerms};
use crate::synthlang::Utterance;
use crate::tensor::{Init, Rng, Tape, Tensor, Var};
use crate::vocab::{LanguageId, TokenRange};

pub const BUNDLE_KIND: &str = "bundle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector(pub Vec<f64>);

impl AlphaVector {
    pub fn one_hot(n_slots: usize, slot: usize) -> Result<Self> {
        if slot >= n_slots {
            return Err(Error::Config(format!("slot {slot} outside {n_slots} slots")));
        }
        let mut v = vec![0.0; n_slots];
        v[slot] = 1.0;
        Ok(Self(v))
    }

    /// All weight on the base slot.
    pub fn base(n_slots: usize) -> Self {
        Self::one_hot(n_slots.max(1), 0).expect("slot 0 exists")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Non-negative entries summing to one (within 1e-9).
    pub fn is_distribution(&self) -> bool {
        self.0.iter().all(|&a| a >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() < 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    LpPosterior,
    LpOneHot,
    GtOneHot,
    GtLearnable,
}

impl AlphaSource {
    pub fn uses_lid(&self) -> bool {
        matches!(self, AlphaSource::LpPosterior | AlphaSource::LpOneHot)
    }
}

impl std::str::FromStr for AlphaSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp_post" | "lp_posterior" => Ok(AlphaSource::LpPosterior),
            "lp_ohot" | "lp_one_hot" => Ok(AlphaSource::LpOneHot),
            "gt_ohot" | "gt_one_hot" => Ok(AlphaSource::GtOneHot),
            "gt_learn" | "gt_learnable" => Ok(AlphaSource::GtLearnable),
            other => Err(Error::Config(format!("unknown alpha source {other:?}"))),
        }
    }
}

/// Produces α over `n_slots` slots.
///
/// `posterior` is already in slot order; `true_slot` is the ground-truth
/// slot; `learned` holds trained weights (zero-padded to `n_slots`).
pub fn alpha_from_source(
    source: AlphaSource,
    n_slots: usize,
    posterior: Option<&[f64]>,
    true_slot: Option<usize>,
    learned: Option<&[f64]>,
) -> Result<AlphaVector> {
    let missing = |what: &str| Error::Config(format!("{source:?} needs {what}"));
    match source {
        AlphaSource::LpPosterior | AlphaSource::LpOneHot => {
            let p = posterior.ok_or_else(|| missing("a language posterior"))?;
            if p.len() != n_slots {
                return Err(Error::Shape(format!("posterior of {} slots, expected {n_slots}", p.len())));
            }
            if source == AlphaSource::LpPosterior {
                return Ok(AlphaVector(p.to_vec()));
            }
            let best = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            AlphaVector::one_hot(n_slots, best)
        }
        AlphaSource::GtOneHot => AlphaVector::one_hot(n_slots, true_slot.ok_or_else(|| missing("the true language"))?),
        AlphaSource::GtLearnable => {
            let Some(w) = learned else {
                return AlphaVector::one_hot(n_slots, true_slot.ok_or_else(|| missing("the true language"))?);
            };
            if w.len() > n_slots {
                return Err(Error::Shape(format!("{} learned weights for {n_slots} slots", w.len())));
            }
            let mut v = w.to_vec();
            v.resize(n_slots, 0.0);
            Ok(AlphaVector(v))
        }
    }
}

/// Maps a LID posterior over its classes to mixture slots: every class
/// without a bundle (a base language) feeds slot 0.
pub fn posterior_to_slots(lid: &LidModel, posterior: &[f64], bundles: &[&LanguageBundle]) -> Vec<f64> {
    let mut out = vec![0.0; bundles.len() + 1];
    for (class, &p) in lid.classes.iter().zip(posterior) {
        let slot = bundles.iter().position(|b| b.language == *class).map_or(0, |i| i + 1);
        out[slot] += p;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VocabMode {
    /// `ΔE = B·A` with `B: [range, r]`, `A: [r, d]`.
    LowRank { r: usize },
    /// Dense `ΔE: [range, d]`.
    Full,
}

/// Update of the embedding rows a language owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabUpdate {
    pub range: TokenRange,
    pub mode: VocabMode,
    pub tensors: Vec<Tensor>,
}

impl VocabUpdate {
    pub fn new(range: TokenRange, mode: VocabMode, d_model: usize, rng: &mut Rng) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::Config("vocabulary update over an empty range".into()));
        }
        let tensors = match mode {
            VocabMode::LowRank { r } if r >= 1 => vec![
                Tensor::zeros(&[range.len(), r]),
                Tensor::new(&[r, d_model], Init::Normal { mean: 0.0, std: crate::peft::FACTOR_STD, rng })?,
            ],
            VocabMode::LowRank { .. } => return Err(Error::Config("vocabulary rank must be at least 1".into())),
            VocabMode::Full => vec![Tensor::zeros(&[range.len(), d_model])],
        };
        Ok(Self { range, mode, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn names(&self) -> &'static [&'static str] {
        match self.mode {
            VocabMode::LowRank { .. } => &["b", "a"],
            VocabMode::Full => &["delta"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    /// Mean loss over the last (up to 50) steps; `None` if untrained.
    pub final_loss: Option<f64>,
    pub alpha_source: AlphaSource,
}

/// Everything trained for one extended language.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageBundle {
    pub language: LanguageId,
    pub kind: PeftKind,
    pub modules: Vec<PeftModule>,
    pub vocab: VocabUpdate,
    /// Trained mixture weights over `[base, earlier bundles.., this]`.
    pub learned_alpha: Option<Vec<f64>>,
    pub meta: TrainingMeta,
    pub base_checksum: u64,
}

impl LanguageBundle {
    /// Untrained bundle: every module a no-op.
    pub fn fresh(base: &BaseModel, language: LanguageId, range: TokenRange, kind: PeftKind, vocab: VocabMode, rng: &mut Rng) -> Result<Self> {
        let modules = modules_for(base, kind, rng)?;
        let vocab = VocabUpdate::new(range, vocab, base.config().d_model, rng)?;
        if range.hi > base.config().vocab_size {
            return Err(Error::Config(format!("token range {range:?} outside vocabulary {}", base.config().vocab_size)));
        }
        Ok(Self {
            language,
            kind,
            modules,
            vocab,
            learned_alpha: None,
            meta: TrainingMeta { steps: 0, seed: rng.seed(), final_loss: None, alpha_source: AlphaSource::GtOneHot },
            base_checksum: base.checksum(),
        })
    }

    /// Module parameters plus the vocabulary update.
    pub fn param_count(&self) -> usize {
        self.modules.iter().map(PeftModule::param_count).sum::<usize>() + self.vocab.param_count()
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.modules.iter_mut().flat_map(|m| m.tensors.iter_mut()).chain(self.vocab.tensors.iter_mut())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for m in &self.modules {
            for (role, t) in m.tensor_names().iter().zip(&m.tensors) {
                named.push((format!("{}.{role}", m.site), t));
            }
        }
        for (role, t) in self.vocab.names().iter().zip(&self.vocab.tensors) {
            named.push((format!("vocab.{role}"), t));
        }
        let meta = BundleMeta {
            base_model_checksum: container::format_checksum(self.base_checksum),
            language_id: self.language,
            peft_kind: self.kind,
            sites: self.modules.iter().map(|m| m.site).collect(),
            tensors_per_site: self.modules.iter().map(|m| m.tensors.len()).collect(),
            vocab_range: self.vocab.range,
            vocab_mode: self.vocab.mode,
            param_count: self.param_count(),
            training: self.meta.clone(),
            learned_alpha: self.learned_alpha.clone(),
        };
        container::write(path, BUNDLE_KIND, &meta, &named)
    }

    /// Loads a bundle, refusing one trained against a different base.
    pub fn load(path: &Path, base: &BaseModel) -> Result<Self> {
        let b = Self::load_unverified(path)?;
        if b.base_checksum != base.checksum() {
            return Err(Error::Checksum { expected: b.base_checksum, found: base.checksum() });
        }
        Ok(b)
    }

    /// Loads without checking the base checksum (inspection only).
    pub fn load_unverified(path: &Path) -> Result<Self> {
        let (manifest, tensors) = container::read::<BundleMeta>(path, BUNDLE_KIND)?;
        let meta = manifest.meta;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let base_checksum = container::parse_checksum(&meta.base_model_checksum).ok_or_else(|| bad("unreadable base checksum".into()))?;
        if meta.sites.len() != meta.tensors_per_site.len() {
            return Err(bad("site list and tensor counts disagree".into()));
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut modules = Vec::with_capacity(meta.sites.len());
        for (&site, &n) in meta.sites.iter().zip(&meta.tensors_per_site) {
            let ts: Vec<Tensor> = it.by_ref().take(n).collect();
            if ts.len() != n {
                return Err(bad("truncated module tensors".into()));
            }
            modules.push(PeftModule { kind: meta.peft_kind, site, tensors: ts });
        }
        let vocab = VocabUpdate { range: meta.vocab_range, mode: meta.vocab_mode, tensors: it.collect() };
        let b = Self {
            language: meta.language_id,
            kind: meta.peft_kind,
            modules,
            vocab,
            learned_alpha: meta.learned_alpha,
            meta: meta.training,
            base_checksum,
        };
        if b.param_count() != meta.param_count {
            return Err(bad(format!("param_count {} does not match tensors ({})", meta.param_count, b.param_count())));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    base_model_checksum: String,
    language_id: LanguageId,
    peft_kind: PeftKind,
    sites: Vec<Site>,
    tensors_per_site: Vec<usize>,
    vocab_range: TokenRange,
    vocab_mode: VocabMode,
    param_count: usize,
    training: TrainingMeta,
    learned_alpha: Option<Vec<f64>>,
}

struct BoundBundle<'a> {
    bundle: &'a LanguageBundle,
    modules: Vec<Vec<Var>>,
    by_site: HashMap<Site, usize>,
    vocab: Vec<Var>,
}

/// Mixture weights as seen by the hooks.
pub enum AlphaInput<'a> {
    Fixed(AlphaVector),
    /// One `[1]` tensor per slot, trained.
    Learnable(&'a [Tensor]),
}

/// [`Hooks`] realizing the α-weighted combination of bundles.
pub struct Mixture<'a> {
    bundles: Vec<BoundBundle<'a>>,
    alpha: Vec<f64>,
    alpha_vars: Option<Vec<Var>>,
    family: Option<Family>,
    force_prompt: bool,
}

impl<'a> Mixture<'a> {
    /// Binds `bundles` on `tape`. Bundle `trainable` (if any) records
    /// gradients. `force_prompt` prepends prompt rows even when they are all
    /// zero (needed to train a fresh prompt).
    pub fn new(
        tape: &mut Tape<'a>,
        bundles: &[&'a LanguageBundle],
        alpha: AlphaInput<'a>,
        trainable: Option<usize>,
        force_prompt: bool,
    ) -> Result<Self> {
        let n_slots = bundles.len() + 1;
        let (alpha, alpha_vars) = match alpha {
            AlphaInput::Fixed(a) => (a.0, None),
            AlphaInput::Learnable(ts) => {
                if ts.iter().any(|t| t.len() != 1) {
                    return Err(Error::Shape("learnable weights must be one-element tensors".into()));
                }
                (ts.iter().map(Tensor::item).collect(), Some(ts.iter().map(|t| tape.leaf_ref(t, true)).collect()))
            }
        };
        if alpha.len() != n_slots {
            return Err(Error::Shape(format!("alpha of length {} for {n_slots} slots", alpha.len())));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("mixture weight".into()));
        }
        let family = bundles.first().map(|b| b.kind.family());
        if let Some(b) = bundles.iter().find(|b| b.kind != bundles[0].kind) {
            return Err(Error::Config(format!("cannot mix {} with {}", bundles[0].kind.name(), b.kind.name())));
        }
        let bound = bundles
            .iter()
            .enumerate()
            .map(|(i, &bundle)| {
                let rg = trainable == Some(i);
                BoundBundle {
                    bundle,
                    modules: bundle.modules.iter().map(|m| m.bind(tape, rg)).collect(),
                    by_site: bundle.modules.iter().enumerate().map(|(j, m)| (m.site, j)).collect(),
                    vocab: bundle.vocab.tensors.iter().map(|t| tape.leaf_ref(t, rg)).collect(),
                }
            })
            .collect();
        Ok(Self { bundles: bound, alpha, alpha_vars, family, force_prompt })
    }

    fn active(&self, slot: usize) -> bool {
        self.alpha_vars.is_some() || self.alpha[slot] != 0.0
    }

    fn weigh(&self, tape: &mut Tape<'a>, x: Var, slot: usize) -> Result<Var> {
        match &self.alpha_vars {
            Some(v) => tape.scale_by(x, v[slot]),
            None if self.alpha[slot] == 1.0 => Ok(x),
            None => Ok(tape.scale(x, self.alpha[slot])),
        }
    }

    fn sum(tape: &mut Tape<'a>, terms: Vec<Var>) -> Result<Option<Var>> {
        let mut it = terms.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for t in it {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Slots (1-based) and module vars of the bundles acting at `site`.
    fn at_site(&self, site: Site) -> Vec<(usize, Vec<Var>)> {
        self.bundles
            .iter()
            .enumerate()
            .filter(|(l, _)| self.active(l + 1))
            .filter_map(|(l, b)| b.by_site.get(&site).map(|&j| (l + 1, b.modules[j].clone())))
            .collect()
    }

    /// Module and vocabulary vars of bundle `i`, in storage order.
    pub fn bundle_vars(&self, i: usize) -> Vec<Var> {
        let b = &self.bundles[i];
        b.modules.iter().flatten().chain(&b.vocab).copied().collect()
    }

    pub fn alpha_vars(&self) -> Option<&[Var]> {
        self.alpha_vars.as_deref()
    }
}

impl<'a> Hooks<'a> for Mixture<'a> {
    fn input(&mut self, tape: &mut Tape<'a>, x: Var) -> Result<(Var, usize)> {
        if self.family != Some(Family::Prompt) {
            return Ok((x, 0));
        }
        let mut terms = Vec::new();
        for (slot, vars) in self.at_site(Site::Input) {
            if let Some(&p) = vars.first() {
                terms.push(self.weigh(tape, p, slot)?);
            }
        }
        let Some(p) = Self::sum(tape, terms)? else { return Ok((x, 0)) };
        // an all-zero prompt is the identity element of the family
        if !self.force_prompt && tape.value(p).data().iter().all(|&v| v == 0.0) {
            return Ok((x, 0));
        }
        let n = tape.value(p).rows();
        Ok((tape.concat_rows(&[p, x])?, n))
    }

    fn weight(&mut self, tape: &mut Tape<'a>, site: Site, w0: Var) -> Result<Var> {
        let Some(family @ (Family::LowRank | Family::Mask | Family::MaskLowRank)) = self.family else { return Ok(w0) };
        let kind = self.bundles[0].bundle.kind;
        let acting = self.at_site(site);
        if acting.is_empty() {
            return Ok(w0);
        }
        let (mut devs, mut deltas, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for (slot, vars) in acting {
            let t = weight_terms(tape, kind, &vars)?;
            if let Some(v) = t.scale_dev {
                devs.push(self.weigh(tape, v, slot)?);
            }
            if let Some(v) = t.delta {
                deltas.push(self.weigh(tape, v, slot)?);
            }
            if let Some(v) = t.mask {
                masks.push(self.weigh(tape, v, slot)?);
            }
        }
        if family != Family::LowRank && self.active(0) {
            let shape = tape.value(w0).shape().to_vec();
            let ones = tape.constant(Tensor::full(&shape, 1.0));
            masks.insert(0, self.weigh(tape, ones, 0)?);
        }
        let terms = WeightTerms { scale_dev: Self::sum(tape, devs)?, delta: Self::sum(tape, deltas)?, mask: Self::sum(tape, masks)? };
        compose_weight(tape, w0, terms)
    }

    fn bias(&mut self, tape: &mut Tape<'a>, site: Site, b0: Var) -> Result<Var> {
        if self.family != Some(Family::Bias) {
            return Ok(b0);
        }
        let mut terms = Vec::new();
        for (slot, vars) in self.at_site(site) {
            terms.push(self.weigh(tape, vars[0], slot)?);
        }
        match Self::sum(tape, terms)? {
            Some(d) => tape.add(b0, d),
            None => Ok(b0),
        }
    }

    fn residual(&mut self, tape: &mut Tape<'a>, site: Site, h: Var) -> Result<Var> {
        if self.family != Some(Family::Adapter) {
            return Ok(h);
        }
        let mut terms = Vec::new();
        for (slot, vars) in self.at_site(site) {
            let d = adapter_delta(tape, h, &vars)?;
            terms.push(self.weigh(tape, d, slot)?);
        }
        match Self::sum(tape, terms)? {
            Some(d) => tape.add(h, d),
            None => Ok(h),
        }
    }

    fn vocab(&mut self, tape: &mut Tape<'a>, e: Var) -> Result<Var> {
        let mut out = e;
        for l in 0..self.bundles.len() {
            if !self.active(l + 1) {
                continue;
            }
            let b = &self.bundles[l];
            let (lo, mode, vars) = (b.bundle.vocab.range.lo, b.bundle.vocab.mode, b.vocab.clone());
            let d = match mode {
                VocabMode::LowRank { .. } => tape.matmul(vars[0], vars[1])?,
                VocabMode::Full => vars[0],
            };
            let d = self.weigh(tape, d, l + 1)?;
            out = tape.scatter_add_rows(out, d, lo)?;
        }
        Ok(out)
    }
}

/// Default peak learning rate of bundle training. The add-on modules start
/// at zero and train from scratch, so they take a larger step than full
/// fine-tuning of the base.
pub const BUNDLE_LR: f64 = 3e-3;

/// How a new language is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtendConfig {
    pub kind: PeftKind,
    pub vocab: VocabMode,
    pub alpha: AlphaSource,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ExtendConfig {
    fn default() -> Self {
        Self {
            kind: PeftKind::Adapter { d_bottleneck: 32 },
            vocab: VocabMode::LowRank { r: 4 },
            alpha: AlphaSource::GtOneHot,
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig { peak_lr: BUNDLE_LR, ..AdamConfig::default() },
        }
    }
}

/// Trains one bundle for `language` on its own data only.
///
/// With [`AlphaSource::GtLearnable`] the earlier bundles `prior` join the
/// mixture (frozen) and the weights start one-hot on the new slot;
/// otherwise the new bundle is trained alone.
pub fn extend_language(
    base: &BaseModel,
    prior: &[&LanguageBundle],
    language: LanguageId,
    range: TokenRange,
    train: &[&Utterance],
    cfg: &ExtendConfig,
    seed: u64,
) -> Result<LanguageBundle> {
    if !base.is_frozen() {
        return Err(Error::Config("extension requires a frozen base model".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !matches!(cfg.alpha, AlphaSource::GtOneHot | AlphaSource::GtLearnable) {
        return Err(Error::Config("extension trains with ground-truth weights".into()));
    }
    let root = Rng::new(seed);
    let mut bundle = LanguageBundle::fresh(base, language, range, cfg.kind, cfg.vocab, &mut root.fork(0))?;
    let learnable = cfg.alpha == AlphaSource::GtLearnable;
    let context: Vec<&LanguageBundle> = if learnable { prior.to_vec() } else { Vec::new() };
    let n_slots = context.len() + 2;
    let mut alpha: Vec<Tensor> = (0..n_slots).map(|s| Tensor::scalar(if s + 1 == n_slots { 1.0 } else { 0.0 })).collect();
    let force_prompt = cfg.kind.family() == Family::Prompt;
    let mut opt = Optimizer::new(cfg.adam.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = root.fork(1);
    let mut pos = order.len();
    let mut recent = Vec::new();
    for _ in 0..cfg.steps {
        let bs = cfg.batch_size.min(order.len());
        if pos + bs > order.len() {
            shuffle.shuffle(&mut order);
            pos = 0;
        }
        let batch: Vec<&Utterance> = order[pos..pos + bs].iter().map(|&i| train[i]).collect();
        pos += bs;
        let (loss, grads, alpha_grads) = {
            let mut tape = Tape::new();
            let mut mix_bundles = context.clone();
            mix_bundles.push(&bundle);
            let input = if learnable { AlphaInput::Learnable(&alpha) } else { AlphaInput::Fixed(AlphaVector::one_hot(n_slots, n_slots - 1)?) };
            let mix = Mixture::new(&mut tape, &mix_bundles, input, Some(mix_bundles.len() - 1), force_prompt)?;
            let mut bound = Bound::new(&mut tape, base, &TrainableSet::none(), mix);
            let mut terms = Vec::with_capacity(bs);
            for u in &batch {
                terms.push(bound.utterance_loss(&mut tape, &u.features, &u.tokens)?.total);
            }
            let cat = tape.concat_rows(&terms)?;
            let total = tape.mean(cat);
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("extension loss {loss}")));
            }
            tape.backward(total)?;
            let mix = bound.hooks();
            let grads: Vec<Tensor> = mix.bundle_vars(mix_bundles.len() - 1).iter().map(|&v| tape.grad(v).expect("trainable")).collect();
            let alpha_grads: Vec<Tensor> = mix.alpha_vars().map_or(Vec::new(), |vs| vs.iter().map(|&v| tape.grad(v).expect("trainable")).collect());
            (loss, grads, alpha_grads)
        };
        let mut refs: Vec<&mut Tensor> = bundle.tensors_mut().collect();
        let mut all_grads = grads;
        if learnable {
            refs.extend(alpha.iter_mut());
            all_grads.extend(alpha_grads);
        }
        opt.step(&mut refs, &all_grads)?;
        recent.push(loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
    }
    bundle.learned_alpha = learnable.then(|| alpha.iter().map(Tensor::item).collect());
    let final_loss = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
    bundle.meta = TrainingMeta { steps: cfg.steps, seed, final_loss, alpha_source: cfg.alpha };
    Ok(bundle)
}

/// Result of one extended forward.
#[derive(Debug, Clone)]
pub struct ExtendedOutput {
    pub tokens: Vec<usize>,
    /// `[T, vocab_size + 1]`.
    pub log_probs: Tensor,
    pub alpha: AlphaVector,
}

/// Decodes one utterance through the base plus the α-weighted bundles.
///
/// LP-based sources run the unadapted lower encoder first and classify its
/// last state; the adapted upper layers then continue from those states
/// (or, for prompts, the full encoder is re-run with the prompt prepended).
pub fn forward_extended(
    base: &BaseModel,
    bundles: &[&LanguageBundle],
    source: AlphaSource,
    lid: Option<&LidModel>,
    features: &Tensor,
    true_lang: Option<LanguageId>,
) -> Result<ExtendedOutput> {
    let n_slots = bundles.len() + 1;
    let true_slot = true_lang.map(|l| bundles.iter().position(|b| b.language == l).map_or(0, |i| i + 1));
    let mut tape = Tape::new();
    let fv = tape.leaf_ref(features, false);
    let mut lower_bound = Bound::new(&mut tape, base, &TrainableSet::none(), NoHooks);
    let lower = lower_bound.encode_lower(&mut tape, fv)?;
    let alpha = if source.uses_lid() {
        let lid = lid.ok_or_else(|| Error::Config("LP-based weights need a language ID model".into()))?;
        if lid.layer != base.config().n_lp_split {
            return Err(Error::Config(format!("language ID reads layer {}, split is {}", lid.layer, base.config().n_lp_split)));
        }
        let h = tape.value(*lower.last().expect("split >= 1"));
        let post = lid.posterior_from_states(h)?;
        let slots = posterior_to_slots(lid, &post, bundles);
        alpha_from_source(source, n_slots, Some(&slots), None, None)?
    } else {
        let learned = match (source, true_slot) {
            (AlphaSource::GtLearnable, Some(s)) if s > 0 => bundles[s - 1].learned_alpha.as_deref(),
            _ => None,
        };
        alpha_from_source(source, n_slots, None, true_slot, learned)?
    };
    let mix = Mixture::new(&mut tape, bundles, AlphaInput::Fixed(alpha.clone()), None, false)?;
    let mut bound = Bound::new(&mut tape, base, &TrainableSet::none(), mix);
    let (pre, _) = bound.embed_input(&mut tape, fv, true)?;
    let enc = if tape.value(pre).rows() != features.rows() {
        bound.encode(&mut tape, fv)?
    } else {
        bound.encode_upper(&mut tape, lower)?
    };
    let memory = bound.memory(&mut tape, &enc)?;
    let lp = bound.ctc_log_probs(&mut tape, memory)?;
    let log_probs = tape.value(lp).clone();
    Ok(ExtendedOutput { tokens: greedy_ctc_decode(&log_probs), log_probs, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::N_SPECIAL;

    fn small_base() -> BaseModel {
        let mut c = ModelConfig::desk(30, 5);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c.max_frames = 40;
        let mut m = BaseModel::new(c, &mut Rng::new(0)).unwrap();
        m.freeze();
        m
    }

    fn feats(t: usize, seed: u64) -> Tensor {
        Tensor::new(&[t, 5], Init::Normal { mean: 0.0, std: 1.0, rng: &mut Rng::new(seed) }).unwrap()
    }

    /// Fills every tensor of a bundle with noise so it is far from a no-op.
    fn perturb(b: &mut LanguageBundle, seed: u64) {
        let mut r = Rng::new(seed);
        for t in b.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.normal(0.0, 0.3));
        }
        if b.kind.tau().is_some() {
            for m in &mut b.modules {
                m.tensors[0].data_mut().iter_mut().for_each(|v| *v = r.normal(-2.9, 1.0));
            }
        }
    }

    fn bundle(base: &BaseModel, kind: &str, lang: u32, seed: u64) -> LanguageBundle {
        let lo = N_SPECIAL + 4 * lang as usize;
        let range = TokenRange { lo, hi: lo + 4 };
        let mut b = LanguageBundle::fresh(base, LanguageId(lang), range, PeftKind::desk(kind).unwrap(), VocabMode::LowRank { r: 2 }, &mut Rng::new(seed)).unwrap();
        perturb(&mut b, seed + 100);
        b
    }

    fn log_probs(base: &BaseModel, bundles: &[&LanguageBundle], alpha: AlphaVector, f: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mix = Mixture::new(&mut tape, bundles, AlphaInput::Fixed(alpha), None, false).unwrap();
        let mut b = Bound::new(&mut tape, base, &TrainableSet::none(), mix);
        let fv = tape.leaf_ref(f, false);
        let enc = b.encode(&mut tape, fv).unwrap();
        let m = b.memory(&mut tape, &enc).unwrap();
        let lp = b.ctc_log_probs(&mut tape, m).unwrap();
        tape.value(lp).clone()
    }

    fn base_log_probs(base: &BaseModel, f: &Tensor) -> Tensor {
        log_probs(base, &[], AlphaVector::base(1), f)
    }

    const KINDS: [&str; 7] = ["bitfit", "lora", "lora_star", "mask", "mask_lora_star", "adapter", "prompt"];

    #[test]
    fn base_slot_reverts_to_base() {
        let base = small_base();
        let f = feats(9, 1);
        let want = base_log_probs(&base, &f);
        for kind in KINDS {
            let (b1, b2) = (bundle(&base, kind, 0, 1), bundle(&base, kind, 1, 2));
            let got = log_probs(&base, &[&b1, &b2], AlphaVector::base(3), &f);
            assert_eq!(got, want, "{kind}");
        }
    }

    #[test]
    fn fresh_bundles_are_noops() {
        let base = small_base();
        let f = feats(9, 2);
        let want = base_log_probs(&base, &f);
        for kind in KINDS {
            let range = TokenRange { lo: 2, hi: 6 };
            let b = LanguageBundle::fresh(&base, LanguageId(0), range, PeftKind::desk(kind).unwrap(), VocabMode::LowRank { r: 2 }, &mut Rng::new(3)).unwrap();
            let got = log_probs(&base, &[&b], AlphaVector::one_hot(2, 1).unwrap(), &f);
            assert_eq!(got, want, "{kind}");
        }
    }

    #[test]
    fn one_hot_matches_single_bundle() {
        let base = small_base();
        let f = feats(7, 3);
        for kind in KINDS {
            let bs: Vec<LanguageBundle> = (0..3).map(|l| bundle(&base, kind, l, 10 + l as u64)).collect();
            let refs: Vec<&LanguageBundle> = bs.iter().collect();
            for l in 0..3 {
                let mixed = log_probs(&base, &refs, AlphaVector::one_hot(4, l + 1).unwrap(), &f);
                let alone = log_probs(&base, &[refs[l]], AlphaVector::one_hot(2, 1).unwrap(), &f);
                assert_eq!(mixed, alone, "{kind} slot {l}");
            }
        }
    }

    #[test]
    fn additive_families_superpose() {
        let base = small_base();
        let site = base.weight_sites()[3].0;
        let bias_site = base.bias_sites()[5].0;
        let res_site = base.residual_sites()[1];
        let h = Tensor::from_vec(&[4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for kind in ["lora", "adapter", "bitfit"] {
            let bs: Vec<LanguageBundle> = (0..2).map(|l| bundle(&base, kind, l, 40 + l as u64)).collect();
            let refs: Vec<&LanguageBundle> = bs.iter().collect();
            let contribution = |a: [f64; 2]| -> Tensor {
                let mut tape = Tape::new();
                let mut mix = Mixture::new(&mut tape, &refs, AlphaInput::Fixed(AlphaVector(vec![0.0, a[0], a[1]])), None, false).unwrap();
                let out = match kind {
                    "lora" => {
                        let w0 = tape.leaf_ref(base.param(base.site_param(site).unwrap()), false);
                        mix.weight(&mut tape, site, w0).unwrap()
                    }
                    "bitfit" => {
                        let b0 = tape.leaf_ref(base.param(base.site_param(bias_site).unwrap()), false);
                        mix.bias(&mut tape, bias_site, b0).unwrap()
                    }
                    _ => {
                        let hv = tape.leaf_ref(&h, false);
                        mix.residual(&mut tape, res_site, hv).unwrap()
                    }
                };
                tape.value(out).clone()
            };
            let zero = contribution([0.0, 0.0]);
            let mut rng = Rng::new(5);
            for _ in 0..5 {
                let a = [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
                let b = [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
                let (fa, fb, fab) = (contribution(a), contribution(b), contribution([a[0] + b[0], a[1] + b[1]]));
                for i in 0..zero.len() {
                    let lhs = fab.data()[i] - zero.data()[i];
                    let rhs = (fa.data()[i] - zero.data()[i]) + (fb.data()[i] - zero.data()[i]);
                    assert!((lhs - rhs).abs() < 1e-10, "{kind}");
                }
            }
        }
    }

    #[test]
    fn adapter_half_half_is_mean_delta() {
        let base = small_base();
        let site = base.residual_sites()[0];
        let bs: Vec<LanguageBundle> = (0..2).map(|l| bundle(&base, "adapter", l, 60 + l as u64)).collect();
        let h = Tensor::from_vec(&[3, 8], (0..24).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap();
        let j = bs[0].modules.iter().position(|m| m.site == site).unwrap();
        let d1 = crate::peft::apply_adapter(&h, &bs[0].modules[j]).unwrap();
        let d2 = crate::peft::apply_adapter(&h, &bs[1].modules[j]).unwrap();
        let mut tape = Tape::new();
        let refs: Vec<&LanguageBundle> = bs.iter().collect();
        let mut mix = Mixture::new(&mut tape, &refs, AlphaInput::Fixed(AlphaVector(vec![0.0, 0.5, 0.5])), None, false).unwrap();
        let hv = tape.leaf_ref(&h, false);
        let out = mix.residual(&mut tape, site, hv).unwrap();
        for i in 0..h.len() {
            let want = h.data()[i] + 0.5 * (d1.data()[i] - h.data()[i]) + 0.5 * (d2.data()[i] - h.data()[i]);
            assert!((tape.value(out).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_different_kinds_is_rejected() {
        let base = small_base();
        let (a, b) = (bundle(&base, "lora", 0, 1), bundle(&base, "adapter", 1, 2));
        let mut tape = Tape::new();
        assert!(Mixture::new(&mut tape, &[&a, &b], AlphaInput::Fixed(AlphaVector(vec![0.0, 0.5, 0.5])), None, false).is_err());
        assert!(Mixture::new(&mut tape, &[&a], AlphaInput::Fixed(AlphaVector(vec![1.0])), None, false).is_err());
    }

    #[test]
    fn alpha_sources() {
        assert_eq!(alpha_from_source(AlphaSource::GtOneHot, 3, None, Some(0), None).unwrap().0, vec![1.0, 0.0, 0.0]);
        let p = [0.1, 0.2, 0.6, 0.1];
        assert_eq!(alpha_from_source(AlphaSource::LpOneHot, 4, Some(&p), None, None).unwrap().0, vec![0.0, 0.0, 1.0, 0.0]);
        let post = alpha_from_source(AlphaSource::LpPosterior, 4, Some(&p), None, None).unwrap();
        assert_eq!(post.0, p.to_vec());
        assert!(post.is_distribution());
        assert_eq!(alpha_from_source(AlphaSource::GtLearnable, 4, None, None, Some(&[0.1, 0.9])).unwrap().0, vec![0.1, 0.9, 0.0, 0.0]);
        assert!(alpha_from_source(AlphaSource::LpPosterior, 4, None, None, None).is_err());
        assert!(alpha_from_source(AlphaSource::GtOneHot, 4, None, None, None).is_err());
    }

    #[test]
    fn bundle_file_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let base = small_base();
        for kind in KINDS {
            let mut b = bundle(&base, kind, 1, 7);
            b.learned_alpha = Some(vec![0.25, 0.75]);
            let p = dir.path().join(format!("{kind}.peleb"));
            b.save(&p).unwrap();
            assert_eq!(LanguageBundle::load(&p, &base).unwrap(), b);
        }
        let mut other = small_base();
        other.unfreeze();
        let id = other.find_param("dec0.ff.up.bias").unwrap();
        other.param_mut(id).data_mut()[0] += 1.0;
        let p = dir.path().join("adapter.peleb");
        assert!(matches!(LanguageBundle::load(&p, &other), Err(Error::Checksum { .. })));
    }

    #[test]
    fn extension_leaves_base_untouched_and_learns() {
        let base = small_base();
        let before = base.checksum();
        let range = TokenRange { lo: 10, hi: 14 };
        let utts: Vec<Utterance> = (0..6)
            .map(|i| Utterance { features: feats(6, 100 + i), tokens: vec![10 + (i as usize % 4), 11], language: LanguageId(3) })
            .collect();
        let refs: Vec<&Utterance> = utts.iter().collect();
        for kind in ["adapter", "prompt", "lora"] {
            let cfg = ExtendConfig { kind: PeftKind::desk(kind).unwrap(), steps: 30, batch_size: 3, adam: AdamConfig { warmup_steps: 5, peak_lr: 1e-2, ..AdamConfig::default() }, ..ExtendConfig::default() };
            let b = extend_language(&base, &[], LanguageId(3), range, &refs, &cfg, 1).unwrap();
            assert_eq!(base.checksum(), before);
            assert_eq!(b.base_checksum, before);
            assert_ne!(b, LanguageBundle::fresh(&base, LanguageId(3), range, cfg.kind, cfg.vocab, &mut Rng::new(1).fork(0)).unwrap());
            assert!(b.meta.final_loss.unwrap().is_finite());
            let again = extend_language(&base, &[], LanguageId(3), range, &refs, &cfg, 1).unwrap();
            assert_eq!(again, b, "{kind} deterministic");
        }
        let cfg = ExtendConfig { steps: 5, alpha: AlphaSource::GtLearnable, ..ExtendConfig::default() };
        let first = extend_language(&base, &[], LanguageId(3), range, &refs, &cfg, 1).unwrap();
        let second = extend_language(&base, &[&first], LanguageId(4), TokenRange { lo: 14, hi: 18 }, &refs, &cfg, 2).unwrap();
        assert_eq!(second.learned_alpha.as_ref().unwrap().len(), 3);
        let mut unfrozen = base.clone();
        unfrozen.unfreeze();
        assert!(extend_language(&unfrozen, &[], LanguageId(3), range, &refs, &cfg, 1).is_err());
        assert!(extend_language(&base, &[], LanguageId(3), range, &[], &cfg, 1).is_err());
    }

    #[test]
    fn forward_extended_endpoints() {
        let base = small_base();
        let f = feats(8, 4);
        let plain = base.transcribe(&f).unwrap();
        let out = forward_extended(&base, &[], AlphaSource::GtOneHot, None, &f, Some(LanguageId(9))).unwrap();
        assert_eq!(out.tokens, plain);
        assert_eq!(out.log_probs, base_log_probs(&base, &f));
        for kind in ["adapter", "prompt", "mask"] {
            let bs: Vec<LanguageBundle> = (0..2).map(|l| bundle(&base, kind, l, 20 + l as u64)).collect();
            let refs: Vec<&LanguageBundle> = bs.iter().collect();
            let out = forward_extended(&base, &refs, AlphaSource::GtOneHot, None, &f, Some(LanguageId(1))).unwrap();
            assert_eq!(out.alpha.0, vec![0.0, 0.0, 1.0]);
            assert_eq!(out.log_probs, log_probs(&base, &[refs[1]], AlphaVector::one_hot(2, 1).unwrap(), &f));
            let out = forward_extended(&base, &refs, AlphaSource::GtOneHot, None, &f, Some(LanguageId(7))).unwrap();
            assert_eq!(out.tokens, plain);
        }
    }
}
