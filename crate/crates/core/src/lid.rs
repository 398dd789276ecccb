//! Language identification from pooled encoder states.
//!
//! Features are the temporal mean of `H⁽ⁿ⁾`. Two classifiers: Gaussian
//! discriminant analysis with one covariance shared by all classes, and a
//! three-layer ReLU MLP.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{AdamConfig, BaseModel, Optimizer};
use crate::synthlang::Utterance;
use crate::tensor::{Init, Rng, Tape, Tensor, Var};
use crate::vocab::LanguageId;

pub const LID_KIND: &str = "lid";

/// Mean over time of a `[T, d]` sequence.
pub fn pool_features(h: &Tensor) -> Result<Vec<f64>> {
    if h.shape().len() != 2 || h.rows() == 0 {
        return Err(Error::Shape(format!("cannot pool {:?}", h.shape())));
    }
    let (t, d) = (h.rows(), h.cols());
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    Ok(out)
}

fn log_normalize(mut scores: Vec<f64>) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores.iter_mut().for_each(|s| *s = (*s - z).exp());
    scores
}

#[derive(Debug, Clone)]
pub struct GdaModel {
    /// `[K, d]`
    pub means: Tensor,
    /// Pooled within-class covariance plus `eps·I`, `[d, d]`.
    pub cov: Tensor,
    pub priors: Vec<f64>,
    pub eps: f64,
    chol: Cholesky<f64, Dyn>,
}

fn cholesky(cov: &Tensor) -> Result<Cholesky<f64, Dyn>> {
    let d = cov.rows();
    Cholesky::new(DMatrix::from_row_slice(d, d, cov.data()))
        .ok_or_else(|| Error::Data("covariance is not positive definite after shrinkage".into()))
}

impl GdaModel {
    fn from_parts(means: Tensor, cov: Tensor, priors: Vec<f64>, eps: f64) -> Result<Self> {
        let chol = cholesky(&cov)?;
        Ok(Self { means, cov, priors, eps, chol })
    }

    pub fn n_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Per-class `−½ Mahalanobis² + log prior` (the shared log-determinant
    /// and constant cancel in the posterior).
    pub fn log_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("feature of dim {} vs model dim {}", x.len(), self.dim())));
        }
        (0..self.n_classes())
            .map(|k| {
                let diff = DVector::from_iterator(x.len(), x.iter().zip(self.means.row(k)).map(|(a, b)| a - b));
                let z = self.chol.l().solve_lower_triangular(&diff).ok_or_else(|| Error::Data("singular factor".into()))?;
                Ok(-0.5 * z.norm_squared() + self.priors[k].ln())
            })
            .collect()
    }
}

/// Fits class means, the pooled covariance and class priors.
/// `eps = None` uses `1e-3·trace(Σ)/d`.
pub fn gda_fit(x: &[Vec<f64>], labels: &[usize], n_classes: usize, eps: Option<f64>) -> Result<GdaModel> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(Error::Data("features and labels must be non-empty and aligned".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("ragged feature vectors".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::Data(format!("label {l} outside {n_classes} classes")))? += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Data(format!("class {k} has {} samples, need at least 2", counts[k])));
    }
    let mut means = vec![0.0; n_classes * d];
    for (v, &l) in x.iter().zip(labels) {
        for (m, a) in means[l * d..(l + 1) * d].iter_mut().zip(v) {
            *m += a;
        }
    }
    for k in 0..n_classes {
        means[k * d..(k + 1) * d].iter_mut().for_each(|m| *m /= counts[k] as f64);
    }
    let mut cov = vec![0.0; d * d];
    for (v, &l) in x.iter().zip(labels) {
        let c: Vec<f64> = v.iter().zip(&means[l * d..(l + 1) * d]).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let dof = (x.len() - n_classes) as f64;
    cov.iter_mut().for_each(|c| *c /= dof);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let eps = eps.unwrap_or(1e-3 * trace / d as f64);
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("shrinkage {eps} must be non-negative")));
    }
    for i in 0..d {
        cov[i * d + i] += eps;
    }
    let priors = counts.iter().map(|&c| c as f64 / x.len() as f64).collect();
    GdaModel::from_parts(Tensor::from_vec(&[n_classes, d], means)?, Tensor::from_vec(&[d, d], cov)?, priors, eps)
}

/// Posterior over classes; sums to one.
pub fn gda_predict(model: &GdaModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(log_normalize(model.log_scores(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: 400, batch_size: 64, adam: AdamConfig { peak_lr: 3e-3, warmup_steps: 20, ..AdamConfig::default() } }
    }
}

/// `d → h → h → K` with ReLU, on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLid {
    /// `[w1, b1, w2, b2, w3, b3]`, weights stored `[out, in]`.
    pub params: Vec<Tensor>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MlpLid {
    fn forward<'a>(tape: &mut Tape<'a>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..3 {
            let y = tape.matmul_nt(h, p[2 * layer])?;
            h = tape.add_row(y, p[2 * layer + 1])?;
            if layer < 2 {
                h = tape.relu(h);
            }
        }
        tape.log_softmax(h, 1)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.params[5].len()
    }

    pub fn log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shift.len() {
            return Err(Error::Shape(format!("feature of dim {} vs model dim {}", x.len(), self.shift.len())));
        }
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf_ref(t, false)).collect();
        let xv = tape.leaf(Tensor::from_vec(&[1, x.len()], self.standardize(x))?, false);
        let out = Self::forward(&mut tape, &p, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Cross-entropy training; deterministic given `rng`.
pub fn mlp_fit(x: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &MlpConfig, rng: &mut Rng) -> Result<MlpLid> {
    if n_classes < 2 {
        return Err(Error::Data("MLP language ID needs at least two classes".into()));
    }
    if x.is_empty() || x.len() != labels.len() {
        return Err(Error::Data("features and labels must be non-empty and aligned".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!("label {l} outside {n_classes} classes")));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("hidden size and batch size must be positive".into()));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let shift: Vec<f64> = (0..d).map(|j| x.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> =
        (0..d).map(|j| (x.iter().map(|v| (v[j] - shift[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8)).collect();
    let h = cfg.hidden;
    let mut layer = |o: usize, i: usize| -> Result<[Tensor; 2]> {
        Ok([Tensor::new(&[o, i], Init::Normal { mean: 0.0, std: (2.0 / i as f64).sqrt(), rng })?, Tensor::zeros(&[o])])
    };
    let [w1, b1] = layer(h, d)?;
    let [w2, b2] = layer(h, h)?;
    let [w3, b3] = layer(n_classes, h)?;
    let mut model = MlpLid { params: vec![w1, b1, w2, b2, w3, b3], shift, scale };
    let xs: Vec<Vec<f64>> = x.iter().map(|v| model.standardize(v)).collect();
    let mut opt = Optimizer::new(cfg.adam.clone());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut pos = order.len();
    for _ in 0..cfg.steps {
        let bs = cfg.batch_size.min(order.len());
        if pos + bs > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let idx = &order[pos..pos + bs];
        pos += bs;
        let grads = {
            let mut tape = Tape::new();
            let p: Vec<Var> = model.params.iter().map(|t| tape.leaf_ref(t, true)).collect();
            let data = idx.iter().flat_map(|&i| xs[i].iter().copied()).collect();
            let xv = tape.leaf(Tensor::from_vec(&[bs, d], data)?, false);
            let lp = MlpLid::forward(&mut tape, &p, xv)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let picked = tape.pick(lp, &y)?;
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite("language ID training loss".into()));
            }
            tape.backward(loss)?;
            p.iter().map(|&v| tape.grad(v).expect("trainable")).collect::<Vec<_>>()
        };
        let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
        opt.step(&mut refs, &grads)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LidMethod {
    Gda,
    Mlp,
}

impl std::str::FromStr for LidMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gda" => Ok(LidMethod::Gda),
            "mlp" => Ok(LidMethod::Mlp),
            other => Err(Error::Config(format!("unknown LID method {other:?} (gda|mlp)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Gda(GdaModel),
    Mlp(MlpLid),
}

/// A classifier bound to an encoder layer and a list of languages.
#[derive(Debug, Clone)]
pub struct LidModel {
    /// Encoder layer, 1-based.
    pub layer: usize,
    pub classes: Vec<LanguageId>,
    pub classifier: Classifier,
}

/// Pooled `H⁽ⁿ⁾` for each requested layer, one vector per utterance.
pub fn pooled_states(base: &BaseModel, utts: &[&Utterance], layers: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    let deepest = layers.iter().copied().max().ok_or_else(|| Error::Config("no layers requested".into()))?;
    let mut out = vec![Vec::with_capacity(utts.len()); layers.len()];
    for u in utts {
        let states = base.encoder_states(&u.features, deepest)?;
        for (slot, &l) in out.iter_mut().zip(layers) {
            if l == 0 {
                return Err(Error::Config("layers are 1-based".into()));
            }
            slot.push(pool_features(&states[l - 1])?);
        }
    }
    Ok(out)
}

fn labels_for(utts: &[&Utterance], classes: &[LanguageId]) -> Result<Vec<usize>> {
    utts.iter()
        .map(|u| {
            classes.iter().position(|&c| c == u.language).ok_or_else(|| Error::Data(format!("utterance of unknown language {}", u.language)))
        })
        .collect()
}

impl LidModel {
    /// Fits on pooled features that were already extracted.
    pub fn fit_pooled(
        layer: usize,
        classes: Vec<LanguageId>,
        x: &[Vec<f64>],
        labels: &[usize],
        method: LidMethod,
        mlp: &MlpConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let classifier = match method {
            LidMethod::Gda => Classifier::Gda(gda_fit(x, labels, classes.len(), None)?),
            LidMethod::Mlp => Classifier::Mlp(mlp_fit(x, labels, classes.len(), mlp, rng)?),
        };
        Ok(Self { layer, classes, classifier })
    }

    pub fn fit(
        base: &BaseModel,
        utts: &[&Utterance],
        classes: Vec<LanguageId>,
        layer: usize,
        method: LidMethod,
        mlp: &MlpConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let x = pooled_states(base, utts, &[layer])?.remove(0);
        let labels = labels_for(utts, &classes)?;
        Self::fit_pooled(layer, classes, &x, &labels, method, mlp, rng)
    }

    pub fn method(&self) -> LidMethod {
        match self.classifier {
            Classifier::Gda(_) => LidMethod::Gda,
            Classifier::Mlp(_) => LidMethod::Mlp,
        }
    }

    /// Posterior over `classes` for one pooled feature.
    pub fn posterior(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        match &self.classifier {
            Classifier::Gda(g) => gda_predict(g, pooled),
            Classifier::Mlp(m) => Ok(m.log_posterior(pooled)?.into_iter().map(f64::exp).collect()),
        }
    }

    /// Posterior from the layer's unpooled states `[T, d]`.
    pub fn posterior_from_states(&self, h: &Tensor) -> Result<Vec<f64>> {
        self.posterior(&pool_features(h)?)
    }

    pub fn predict(&self, pooled: &[f64]) -> Result<LanguageId> {
        let p = self.posterior(pooled)?;
        Ok(self.classes[argmax(&p)])
    }

    pub fn accuracy_pooled(&self, x: &[Vec<f64>], langs: &[LanguageId]) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::Data("no samples to score".into()));
        }
        let mut hit = 0;
        for (v, &l) in x.iter().zip(langs) {
            hit += (self.predict(v)? == l) as usize;
        }
        Ok(hit as f64 / x.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (method, eps, tensors): (_, _, Vec<Tensor>) = match &self.classifier {
            Classifier::Gda(g) => {
                (LidMethod::Gda, g.eps, vec![g.means.clone(), g.cov.clone(), Tensor::from_vec(&[g.priors.len()], g.priors.clone())?])
            }
            Classifier::Mlp(m) => {
                let d = m.shift.len();
                let mut t = m.params.clone();
                t.push(Tensor::from_vec(&[d], m.shift.clone())?);
                t.push(Tensor::from_vec(&[d], m.scale.clone())?);
                (LidMethod::Mlp, 0.0, t)
            }
        };
        let meta = LidMeta { method, layer: self.layer, classes: self.classes.clone(), eps };
        let names = match method {
            LidMethod::Gda => vec!["means", "cov", "priors"],
            LidMethod::Mlp => vec!["w1", "b1", "w2", "b2", "w3", "b3", "shift", "scale"],
        };
        let named: Vec<(String, &Tensor)> = names.into_iter().map(String::from).zip(tensors.iter()).collect();
        container::write(path, LID_KIND, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = container::read::<LidMeta>(path, LID_KIND)?;
        let meta = manifest.meta;
        let mut t: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        let bad = |n: usize| Error::Format { path: path.to_path_buf(), reason: format!("expected {n} tensors") };
        let classifier = match meta.method {
            LidMethod::Gda => {
                if t.len() != 3 {
                    return Err(bad(3));
                }
                let priors = t.pop().expect("len checked").into_data();
                let cov = t.pop().expect("len checked");
                let means = t.pop().expect("len checked");
                Classifier::Gda(GdaModel::from_parts(means, cov, priors, meta.eps)?)
            }
            LidMethod::Mlp => {
                if t.len() != 8 {
                    return Err(bad(8));
                }
                let scale = t.pop().expect("len checked").into_data();
                let shift = t.pop().expect("len checked").into_data();
                Classifier::Mlp(MlpLid { params: t, shift, scale })
            }
        };
        Ok(Self { layer: meta.layer, classes: meta.classes, classifier })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LidMeta {
    method: LidMethod,
    layer: usize,
    classes: Vec<LanguageId>,
    eps: f64,
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// One row of a layer sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub method: LidMethod,
    pub seen_accuracy: f64,
    pub unseen_accuracy: Option<f64>,
}

/// A group of languages with train and test utterances for the sweep.
pub struct SweepSet<'d> {
    pub train: Vec<&'d Utterance>,
    pub test: Vec<&'d Utterance>,
}

impl SweepSet<'_> {
    fn classes(&self) -> Vec<LanguageId> {
        let mut c: Vec<LanguageId> = self.train.iter().map(|u| u.language).collect();
        c.sort();
        c.dedup();
        c
    }
}

/// LID accuracy per (layer, method): classifiers are fit on each set's
/// train split and scored on its test split.
pub fn lid_layer_sweep(
    base: &BaseModel,
    seen: &SweepSet<'_>,
    unseen: Option<&SweepSet<'_>>,
    layers: &[usize],
    methods: &[LidMethod],
    mlp: &MlpConfig,
    rng: &Rng,
) -> Result<Vec<SweepRow>> {
    let n_enc = base.config().n_enc_layers;
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > n_enc) {
        return Err(Error::Config(format!("layer {l} outside 1..={n_enc}")));
    }
    let score = |set: &SweepSet<'_>, li: usize, layer: usize, method: LidMethod, tag: u64| -> Result<f64> {
        let classes = set.classes();
        let tr = pooled_states(base, &set.train, &[layer])?.remove(0);
        let te = pooled_states(base, &set.test, &[layer])?.remove(0);
        let labels = labels_for(&set.train, &classes)?;
        let mut r = rng.fork(tag * 1000 + li as u64);
        let model = LidModel::fit_pooled(layer, classes, &tr, &labels, method, mlp, &mut r)?;
        model.accuracy_pooled(&te, &set.test.iter().map(|u| u.language).collect::<Vec<_>>())
    };
    let mut rows = Vec::with_capacity(layers.len() * methods.len());
    for (li, &layer) in layers.iter().enumerate() {
        for (mi, &method) in methods.iter().enumerate() {
            let tag = mi as u64 * 2;
            let seen_accuracy = score(seen, li, layer, method, tag)?;
            let unseen_accuracy = unseen.map(|u| score(u, li, layer, method, tag + 1)).transpose()?;
            rows.push(SweepRow { layer, method, seen_accuracy, unseen_accuracy });
        }
    }
    Ok(rows)
}
