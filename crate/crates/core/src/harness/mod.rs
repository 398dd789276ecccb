//! Experiment protocols: base training, the baselines, sequential
//! extension with bundles, and the kind-by-vocabulary sweep.

mod metrics;
mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{edit_distance, error_rate, median, EditCounts};
pub use report::{emit_report, text_table, Group, LanguageRow, ReportFormat};

use crate::error::{Error, Result};
use crate::lid::{LidMethod, LidModel, MlpConfig};
use crate::model::{train_step, AdamConfig, BaseModel, ModelConfig, Optimizer, TrainableSet};
use crate::pele::{extend_language, forward_extended, AlphaSource, ExtendConfig, LanguageBundle, VocabMode, BUNDLE_LR};
use crate::peft::PeftKind;
use crate::synthlang::{gen_language_spec, make_splits, Dataset, LanguageParams, LanguageSpec, Utterance};
use crate::tensor::Rng;
use crate::vocab::{LanguageId, VocabRegistry};

/// Synthetic universe: base languages the model is trained on and new
/// languages added afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_base_languages: usize,
    pub base_train: usize,
    /// Train-set size of each new language, in extension order.
    pub new_train: Vec<usize>,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_capacity: usize,
    pub language: LanguageParams,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_base_languages: 10,
            base_train: 300,
            new_train: vec![300, 150, 100, 60, 30],
            n_dev: 10,
            n_test: 30,
            vocab_capacity: 192,
            language: LanguageParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Mono,
    Raw,
    #[serde(rename = "fullft")]
    FullFt,
    Cjt,
    Er { cache_per_lang: usize },
    Pele { alpha: AlphaSource, peft: PeftKind },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Mono => "Mono".into(),
            Method::Raw => "Raw".into(),
            Method::FullFt => "FullFT".into(),
            Method::Cjt => "CJT".into(),
            Method::Er { cache_per_lang } => format!("ER ({cache_per_lang})"),
            Method::Pele { alpha, peft } => format!("PELE {} {}", peft.name(), alpha_label(*alpha)),
        }
    }
}

fn alpha_label(a: AlphaSource) -> &'static str {
    match a {
        AlphaSource::LpPosterior => "lp_post",
        AlphaSource::LpOneHot => "lp_ohot",
        AlphaSource::GtOneHot => "gt_ohot",
        AlphaSource::GtLearnable => "gt_learn",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidConfig {
    pub method: LidMethod,
    pub mlp: MlpConfig,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self { method: LidMethod::Gda, mlp: MlpConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub base_budget: TrainBudget,
    /// Budget of each extension, fine-tuning or monolingual run.
    pub budget: TrainBudget,
    /// Peak learning rate of bundle training; the rest of the schedule
    /// follows `budget.adam`.
    pub bundle_lr: f64,
    pub vocab: VocabMode,
    pub lid: LidConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            method: Method::Raw,
            model: ModelConfig::desk(data.vocab_capacity, data.language.d_feat),
            data,
            base_budget: TrainBudget::default(),
            budget: TrainBudget::default(),
            bundle_lr: BUNDLE_LR,
            vocab: VocabMode::LowRank { r: 4 },
            lid: LidConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.language.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.data.n_base_languages == 0 {
            return bad("need at least one base language".into());
        }
        if self.model.vocab_size != self.data.vocab_capacity || self.model.d_feat != self.data.language.d_feat {
            return bad("model vocabulary and feature size must match the data config".into());
        }
        if !(self.bundle_lr > 0.0 && self.bundle_lr.is_finite()) {
            return bad(format!("bundle_lr must be positive, got {}", self.bundle_lr));
        }
        for b in [&self.budget, &self.base_budget] {
            if b.batch_size == 0 {
                return bad("batch size must be positive".into());
            }
        }
        match &self.method {
            Method::Er { cache_per_lang: 0 } => bad("ER needs at least one cached utterance per language".into()),
            Method::Pele { peft, .. } => peft.validate(),
            _ => Ok(()),
        }
    }
}

/// One language of the universe.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub spec: LanguageSpec,
    pub data: Dataset,
}

/// All languages generated from a [`DataConfig`].
#[derive(Debug, Clone)]
pub struct Universe {
    pub registry: VocabRegistry,
    pub base: Vec<LanguageData>,
    pub new: Vec<LanguageData>,
}

impl Universe {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.language.validate()?;
        let mut registry = VocabRegistry::new(cfg.vocab_capacity)?;
        let root = Rng::new(cfg.seed);
        let mut spec_rng = root.fork(0);
        let split_rng = root.fork(1);
        let mut make = |id: usize, n_train: usize| -> Result<LanguageData> {
            let spec = gen_language_spec(LanguageId(id as u32), &mut registry, &cfg.language, &mut spec_rng)?;
            let data = make_splits(&spec, &cfg.language, n_train, cfg.n_dev, cfg.n_test, &split_rng)?;
            Ok(LanguageData { spec, data })
        };
        let base = (0..cfg.n_base_languages).map(|i| make(i, cfg.base_train)).collect::<Result<Vec<_>>>()?;
        let new = cfg.new_train.iter().enumerate().map(|(i, &n)| make(cfg.n_base_languages + i, n)).collect::<Result<Vec<_>>>()?;
        Ok(Self { registry, base, new })
    }

    pub fn all(&self) -> impl Iterator<Item = &LanguageData> {
        self.base.iter().chain(&self.new)
    }

    pub fn base_train(&self) -> Vec<&Utterance> {
        self.base.iter().flat_map(|l| &l.data.train).collect()
    }

    pub fn new_train(&self) -> Vec<&Utterance> {
        self.new.iter().flat_map(|l| &l.data.train).collect()
    }

    pub fn languages(&self) -> Vec<LanguageId> {
        self.all().map(|l| l.spec.id).collect()
    }
}

/// Trains every parameter of `model` on `utts` with shuffled mini-batches;
/// returns the mean loss of the last (up to 50) steps.
pub fn train_full(model: &mut BaseModel, utts: &[&Utterance], budget: &TrainBudget, seed: u64) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let all = TrainableSet::all(model);
    let mut opt = Optimizer::new(budget.adam.clone());
    let mut order = utts.to_vec();
    let mut rng = Rng::new(seed);
    let bs = budget.batch_size.min(order.len());
    let mut pos = order.len();
    let mut recent = std::collections::VecDeque::with_capacity(50);
    for _ in 0..budget.steps {
        if pos + bs > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let loss = train_step(model, &order[pos..pos + bs], &all, &mut opt)?;
        pos += bs;
        if recent.len() == 50 {
            recent.pop_front();
        }
        recent.push_back(loss);
    }
    Ok(if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 })
}

/// Trains and freezes the shared base model on the base languages.
pub fn train_base(cfg: &ExperimentConfig, universe: &Universe) -> Result<BaseModel> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut model = BaseModel::new(cfg.model.clone(), &mut root.fork(0))?;
    train_full(&mut model, &universe.base_train(), &cfg.base_budget, root.fork(1).next_u64())?;
    model.freeze();
    Ok(model)
}

/// Fits the language ID model on the split layer over every language.
pub fn fit_lid(cfg: &ExperimentConfig, base: &BaseModel, universe: &Universe) -> Result<LidModel> {
    let train: Vec<&Utterance> = universe.all().flat_map(|l| &l.data.train).collect();
    let mut rng = Rng::new(cfg.seed).fork(2);
    LidModel::fit(base, &train, universe.languages(), base.config().n_lp_split, cfg.lid.method, &cfg.lid.mlp, &mut rng)
}

/// Token error rate of the unadapted model on `utts`.
pub fn base_error(model: &BaseModel, utts: &[Utterance]) -> Result<f64> {
    let hyps = utts.iter().map(|u| model.transcribe(&u.features)).collect::<Result<Vec<_>>>()?;
    error_rate(utts.iter().zip(&hyps).map(|(u, h)| (&u.tokens[..], &h[..])))
}

/// Token error rate through the bundle mixture.
pub fn pele_error(
    base: &BaseModel,
    bundles: &[&LanguageBundle],
    source: AlphaSource,
    lid: Option<&LidModel>,
    utts: &[Utterance],
) -> Result<f64> {
    let hyps = utts
        .iter()
        .map(|u| forward_extended(base, bundles, source, lid, &u.features, Some(u.language)).map(|o| o.tokens))
        .collect::<Result<Vec<_>>>()?;
    error_rate(utts.iter().zip(&hyps).map(|(u, h)| (&u.tokens[..], &h[..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub seed: u64,
    pub languages: Vec<LanguageRow>,
    pub base_average: f64,
    pub new_average: f64,
    pub overall_average: f64,
    /// Mean over base languages of `error after − error before`.
    pub forgetting_delta: Option<f64>,
    /// Mean added parameters per new language.
    pub inc_params_avg: f64,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub wall_time_s: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ExperimentReport {
    /// Builds a report, deriving every summary column from the rows.
    pub fn from_rows(config: &ExperimentConfig, languages: Vec<LanguageRow>, wall_time_s: f64) -> Self {
        let mut r = Self {
            method: config.method.label(),
            seed: config.seed,
            languages,
            base_average: 0.0,
            new_average: 0.0,
            overall_average: 0.0,
            forgetting_delta: None,
            inc_params_avg: 0.0,
            config: config.clone(),
            wall_time_s,
        };
        r.recompute();
        r
    }

    fn summaries(&self) -> (f64, f64, f64, Option<f64>, f64) {
        let of = |g: Group| self.languages.iter().filter(move |l| l.group == g);
        let deltas: Vec<f64> = of(Group::Base).filter_map(|l| l.forgetting).collect();
        (
            mean(of(Group::Base).map(|l| l.error_rate)),
            mean(of(Group::New).map(|l| l.error_rate)),
            mean(self.languages.iter().map(|l| l.error_rate)),
            (!deltas.is_empty()).then(|| mean(deltas.into_iter())),
            mean(of(Group::New).map(|l| l.inc_params as f64)),
        )
    }

    fn recompute(&mut self) {
        let (b, n, o, f, p) = self.summaries();
        self.base_average = b;
        self.new_average = n;
        self.overall_average = o;
        self.forgetting_delta = f;
        self.inc_params_avg = p;
    }

    /// Stored summaries agree with the rows within 1e-12.
    pub fn is_consistent(&self) -> bool {
        let (b, n, o, f, p) = self.summaries();
        let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12;
        close(b, self.base_average)
            && close(n, self.new_average)
            && close(o, self.overall_average)
            && close(p, self.inc_params_avg)
            && match (f, self.forgetting_delta) {
                (Some(x), Some(y)) => close(x, y),
                (None, None) => true,
                _ => false,
            }
    }

    pub fn row(&self, language: LanguageId) -> Option<&LanguageRow> {
        self.languages.iter().find(|l| l.language == language)
    }
}

fn rows_for(
    universe: &Universe,
    before: Option<&[f64]>,
    mut error_of: impl FnMut(&LanguageData) -> Result<f64>,
    mut inc_of: impl FnMut(usize) -> usize,
) -> Result<Vec<LanguageRow>> {
    let mut rows = Vec::new();
    for (i, l) in universe.base.iter().enumerate() {
        let e = error_of(l)?;
        let b = before.map(|b| b[i]);
        rows.push(LanguageRow { language: l.spec.id, group: Group::Base, error_rate: e, error_before: b, forgetting: b.map(|b| e - b), inc_params: 0 });
    }
    for (i, l) in universe.new.iter().enumerate() {
        let e = error_of(l)?;
        rows.push(LanguageRow { language: l.spec.id, group: Group::New, error_rate: e, error_before: None, forgetting: None, inc_params: inc_of(i) });
    }
    Ok(rows)
}

/// Base-model test error on every base language.
pub fn base_errors(base: &BaseModel, universe: &Universe) -> Result<Vec<f64>> {
    universe.base.iter().map(|l| base_error(base, &l.data.test)).collect()
}

/// Runs one of the non-bundle protocols.
pub fn run_baseline(cfg: &ExperimentConfig, universe: &Universe, base: Option<&BaseModel>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let root = Rng::new(cfg.seed).fork(10);
    let need_base = || base.ok_or_else(|| Error::Config(format!("{} needs a trained base checkpoint", cfg.method.label())));
    let before = base.map(|b| base_errors(b, universe)).transpose()?;
    let rows = match &cfg.method {
        Method::Mono => {
            let mut k = 0u64;
            let mut per_model = 0;
            let rows = rows_for(
                universe,
                before.as_deref(),
                |l| {
                    k += 1;
                    let mut m = BaseModel::new(cfg.model.clone(), &mut root.fork(k))?;
                    per_model = m.num_params();
                    train_full(&mut m, &l.data.train.iter().collect::<Vec<_>>(), &cfg.budget, root.fork(1000 + k).next_u64())?;
                    base_error(&m, &l.data.test)
                },
                |_| 0,
            )?;
            rows.into_iter().map(|mut r| {
                if r.group == Group::New {
                    r.inc_params = per_model;
                }
                r
            }).collect()
        }
        Method::Raw => {
            let b = need_base()?;
            rows_for(universe, before.as_deref(), |l| base_error(b, &l.data.test), |_| 0)?
        }
        Method::FullFt | Method::Cjt | Method::Er { .. } => {
            let mut m = need_base()?.clone();
            m.unfreeze();
            let mut data = universe.new_train();
            match cfg.method {
                Method::Cjt => data.extend(universe.base_train()),
                Method::Er { cache_per_lang } => data.extend(replay_cache(universe, cache_per_lang, &root.fork(3))),
                _ => {}
            }
            train_full(&mut m, &data, &cfg.budget, root.fork(4).next_u64())?;
            rows_for(universe, before.as_deref(), |l| base_error(&m, &l.data.test), |_| 0)?
        }
        Method::Pele { .. } => return Err(Error::Config("bundle runs go through run_pele".into())),
    };
    Ok(ExperimentReport::from_rows(cfg, rows, start.elapsed().as_secs_f64()))
}

/// `cache_per_lang` utterances drawn without replacement from each base
/// language's train split.
pub fn replay_cache<'u>(universe: &'u Universe, cache_per_lang: usize, rng: &Rng) -> Vec<&'u Utterance> {
    let mut out = Vec::new();
    for (i, l) in universe.base.iter().enumerate() {
        let mut idx: Vec<usize> = (0..l.data.train.len()).collect();
        rng.fork(i as u64).shuffle(&mut idx);
        out.extend(idx.into_iter().take(cache_per_lang).map(|j| &l.data.train[j]));
    }
    out
}

/// Extends every new language in order, then evaluates all languages.
pub fn run_pele(
    cfg: &ExperimentConfig,
    universe: &Universe,
    base: Option<&BaseModel>,
    lid: Option<&LidModel>,
) -> Result<(ExperimentReport, Vec<LanguageBundle>)> {
    cfg.validate()?;
    let Method::Pele { alpha, peft } = cfg.method else {
        return Err(Error::Config("run_pele needs a PELE method".into()));
    };
    let base = base.ok_or_else(|| Error::Config("PELE needs a trained base checkpoint".into()))?;
    if alpha.uses_lid() && lid.is_none() {
        return Err(Error::Config("LP-based weights need a language ID model".into()));
    }
    let start = Instant::now();
    let bundles = extend_all(cfg, universe, base, peft, alpha)?;
    let refs: Vec<&LanguageBundle> = bundles.iter().collect();
    let mut report = evaluate_bundles(cfg, universe, base, &refs, alpha, lid)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((report, bundles))
}

/// Evaluates every language through already trained bundles. New
/// languages without a bundle are decoded by the base alone.
pub fn evaluate_bundles(
    cfg: &ExperimentConfig,
    universe: &Universe,
    base: &BaseModel,
    bundles: &[&LanguageBundle],
    alpha: AlphaSource,
    lid: Option<&LidModel>,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let before = base_errors(base, universe)?;
    let inc = |i: usize| {
        let id = universe.new[i].spec.id;
        bundles.iter().find(|b| b.language == id).map_or(0, |b| b.param_count())
    };
    let rows = rows_for(universe, Some(&before), |l| pele_error(base, bundles, alpha, lid, &l.data.test), inc)?;
    Ok(ExperimentReport::from_rows(cfg, rows, start.elapsed().as_secs_f64()))
}

impl ExperimentConfig {
    /// Bundle-training settings for `peft`. Every source other than
    /// `GtLearnable` trains with ground-truth one-hot weights.
    pub fn extend_config(&self, peft: PeftKind, alpha: AlphaSource) -> ExtendConfig {
        let train_alpha = if alpha == AlphaSource::GtLearnable { AlphaSource::GtLearnable } else { AlphaSource::GtOneHot };
        ExtendConfig {
            kind: peft,
            vocab: self.vocab,
            alpha: train_alpha,
            steps: self.budget.steps,
            batch_size: self.budget.batch_size,
            adam: AdamConfig { peak_lr: self.bundle_lr, ..self.budget.adam.clone() },
        }
    }
}

/// Sequentially trained bundles, one per new language.
pub fn extend_all(cfg: &ExperimentConfig, universe: &Universe, base: &BaseModel, peft: PeftKind, alpha: AlphaSource) -> Result<Vec<LanguageBundle>> {
    let ext = cfg.extend_config(peft, alpha);
    let root = Rng::new(cfg.seed).fork(20);
    let mut bundles: Vec<LanguageBundle> = Vec::new();
    for (i, l) in universe.new.iter().enumerate() {
        let prior: Vec<&LanguageBundle> = bundles.iter().collect();
        let train: Vec<&Utterance> = l.data.train.iter().collect();
        let b = extend_language(base, &prior, l.spec.id, l.spec.range, &train, &ext, root.fork(i as u64).next_u64())?;
        bundles.push(b);
    }
    Ok(bundles)
}

/// One row of the kind-by-vocabulary sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XlaRow {
    pub kind: String,
    pub vocab: VocabMode,
    pub params: usize,
    /// Held-out error per seed, in seed order.
    pub errors: Vec<f64>,
    pub median_error: f64,
}

/// Trains each kind on one new language under the same budget, once with
/// a low-rank and once with a dense vocabulary update.
pub fn xla_sweep(
    cfg: &ExperimentConfig,
    universe: &Universe,
    base: &BaseModel,
    target: usize,
    kinds: &[PeftKind],
    seeds: &[u64],
) -> Result<Vec<XlaRow>> {
    let lang = universe.new.get(target).ok_or_else(|| Error::Config(format!("no new language #{target}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let rank = match cfg.vocab {
        VocabMode::LowRank { r } => r,
        VocabMode::Full => 4,
    };
    let train: Vec<&Utterance> = lang.data.train.iter().collect();
    let mut rows = Vec::with_capacity(kinds.len() * 2);
    for &kind in kinds {
        kind.validate()?;
        for vocab in [VocabMode::LowRank { r: rank }, VocabMode::Full] {
            let mut ext = cfg.extend_config(kind, AlphaSource::GtOneHot);
            ext.vocab = vocab;
            let mut errors = Vec::with_capacity(seeds.len());
            let mut params = 0;
            for &s in seeds {
                let b = extend_language(base, &[], lang.spec.id, lang.spec.range, &train, &ext, s)?;
                params = b.param_count();
                errors.push(pele_error(base, &[&b], AlphaSource::GtOneHot, None, &lang.data.test)?);
            }
            rows.push(XlaRow { kind: kind.name().to_string(), vocab, params, median_error: median(&errors), errors });
        }
    }
    Ok(rows)
}
