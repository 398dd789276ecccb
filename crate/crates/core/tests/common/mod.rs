//! Shared oracle suites used by the integration tests and the acceptance
//! binary.
#![allow(dead_code)]

use std::collections::HashMap;

use langext::ctc::{ctc_brute_force, ctc_loss, ctc_nll, CtcProblem};
use langext::model::{BaseModel, Bound, Hooks, ModelConfig, Site, TrainableSet};
use langext::peft::{adapter_delta, compose_weight, make_module, weight_terms, PeftKind};
use langext::tensor::{grad_check, Init, Rng, Tape, Tensor, Var};
use langext::Result;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::new(shape, Init::Normal { mean: 0.0, std: 1.0, rng }).unwrap()
}

/// Entries pushed at least `gap` away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    let mut t = randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += gap.copysign(*v));
    t
}

type Case = Box<dyn Fn(&mut Tape<'static>, &[Var]) -> Result<Var>>;

/// `sum(y ⊙ r)` with a fixed random `r`, so every output element matters.
fn project(t: &mut Tape<'_>, y: Var, r: &Tensor) -> Result<Var> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

fn case(out_shape: &[usize], rng: &mut Rng, f: impl Fn(&mut Tape<'static>, &[Var]) -> Result<Var> + 'static) -> Case {
    let r = randn(out_shape, rng);
    Box::new(move |t, v| {
        let y = f(t, v)?;
        project(t, y, &r)
    })
}

/// Every differentiable tape op plus the composite losses, as
/// `(name, function, leaves)` for one seed.
pub fn gradient_cases(seed: u64) -> Vec<(String, Case, Vec<Tensor>)> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let mut cases: Vec<(String, Case, Vec<Tensor>)> = Vec::new();
    let mut push = |name: &str, c: Case, leaves: Vec<Tensor>| cases.push((name.to_string(), c, leaves));

    for (at, bt) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = randn(if at { &[4, 3] } else { &[3, 4] }, r);
        let b = randn(if bt { &[5, 4] } else { &[4, 5] }, r);
        push(&format!("matmul a_t={at} b_t={bt}"), case(&[3, 5], r, move |t, v| t.matmul_ext(v[0], v[1], at, bt)), vec![a, b]);
    }
    push("add", case(&[3, 4], r, |t, v| t.add(v[0], v[1])), vec![randn(&[3, 4], r), randn(&[3, 4], r)]);
    push("sub", case(&[3, 4], r, |t, v| t.sub(v[0], v[1])), vec![randn(&[3, 4], r), randn(&[3, 4], r)]);
    push("mul", case(&[3, 4], r, |t, v| t.mul(v[0], v[1])), vec![randn(&[3, 4], r), randn(&[3, 4], r)]);
    push("scale", case(&[3, 4], r, |t, v| Ok(t.scale(v[0], -1.7))), vec![randn(&[3, 4], r)]);
    push("scale_by", case(&[3, 4], r, |t, v| t.scale_by(v[0], v[1])), vec![randn(&[3, 4], r), randn(&[1], r)]);
    push("add_row", case(&[3, 4], r, |t, v| t.add_row(v[0], v[1])), vec![randn(&[3, 4], r), randn(&[4], r)]);
    push("sigmoid", case(&[3, 4], r, |t, v| Ok(t.sigmoid(v[0]))), vec![randn(&[3, 4], r)]);
    push("relu", case(&[3, 4], r, |t, v| Ok(t.relu(v[0]))), vec![away_from_zero(&[3, 4], 0.05, r)]);
    push("gelu", case(&[3, 4], r, |t, v| Ok(t.gelu(v[0]))), vec![randn(&[3, 4], r)]);
    for axis in [0, 1] {
        push(&format!("softmax axis={axis}"), case(&[3, 4], r, move |t, v| t.softmax(v[0], axis)), vec![randn(&[3, 4], r)]);
        push(&format!("log_softmax axis={axis}"), case(&[3, 4], r, move |t, v| t.log_softmax(v[0], axis)), vec![randn(&[3, 4], r)]);
    }
    push(
        "layer_norm",
        case(&[3, 5], r, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
    );
    push("sum", case(&[1], r, |t, v| Ok(t.sum(v[0]))), vec![randn(&[3, 4], r)]);
    push("mean", case(&[1], r, |t, v| Ok(t.mean(v[0]))), vec![randn(&[3, 4], r)]);
    push("slice_rows", case(&[2, 4], r, |t, v| t.slice_rows(v[0], 1..3)), vec![randn(&[4, 4], r)]);
    push("slice_cols", case(&[3, 2], r, |t, v| t.slice_cols(v[0], 2..4)), vec![randn(&[3, 5], r)]);
    push("concat_rows", case(&[5, 3], r, |t, v| t.concat_rows(&[v[0], v[1]])), vec![randn(&[2, 3], r), randn(&[3, 3], r)]);
    push("concat_cols", case(&[3, 5], r, |t, v| t.concat_cols(&[v[0], v[1]])), vec![randn(&[3, 2], r), randn(&[3, 3], r)]);
    push("gather_rows", case(&[4, 3], r, |t, v| t.gather_rows(v[0], &[2, 0, 2, 4])), vec![randn(&[5, 3], r)]);
    push("pick", case(&[3], r, |t, v| t.pick(v[0], &[1, 0, 3])), vec![randn(&[3, 4], r)]);
    push("scatter_add_rows", case(&[5, 3], r, |t, v| t.scatter_add_rows(v[0], v[1], 2)), vec![randn(&[5, 3], r), randn(&[2, 3], r)]);

    push(
        "ctc_loss",
        Box::new(|t, v| {
            let lp = t.log_softmax(v[0], 1)?;
            ctc_loss(t, lp, &[0, 2, 2])
        }),
        vec![randn(&[6, 4], r)],
    );

    let kind = PeftKind::LoRAStar { r_default: 2, r_boost: 3 };
    let site = Site::Weight { stack: langext::model::Stack::Encoder, layer: 2, matrix: langext::model::Matrix::O };
    let mut lora = make_module(kind, site, &[5, 4], r).unwrap();
    for t in &mut lora.tensors {
        t.data_mut().iter_mut().for_each(|x| *x = r.normal(0.0, 0.5));
    }
    let w0 = randn(&[5, 4], r);
    push(
        "low-rank weight composition",
        case(&[5, 4], r, move |t, v| {
            let w = t.leaf(w0.clone(), false);
            let terms = weight_terms(t, kind, v)?;
            compose_weight(t, w, terms)
        }),
        lora.tensors.clone(),
    );
    let h = randn(&[3, 6], r);
    push(
        "adapter delta",
        case(&[3, 6], r, move |t, v| {
            let hv = t.leaf(h.clone(), false);
            adapter_delta(t, hv, v)
        }),
        vec![randn(&[6, 2], r), randn(&[2], r), randn(&[2, 6], r), randn(&[6], r)],
    );

    let (f, leaves) = hybrid_loss_case(seed);
    push("hybrid ctc-attention loss", f, leaves);
    cases
}

/// Replaces chosen weights and the embedding with tape leaves.
struct Replace {
    weights: HashMap<Site, Var>,
    vocab: Option<Var>,
}

impl<'a> Hooks<'a> for Replace {
    fn weight(&mut self, _t: &mut Tape<'a>, site: Site, w: Var) -> Result<Var> {
        Ok(self.weights.get(&site).copied().unwrap_or(w))
    }

    fn vocab(&mut self, _t: &mut Tape<'a>, e: Var) -> Result<Var> {
        Ok(self.vocab.unwrap_or(e))
    }
}

/// Full hybrid loss of a tiny model as a function of an encoder weight, a
/// decoder cross-attention weight and the shared embedding.
fn hybrid_loss_case(seed: u64) -> (Case, Vec<Tensor>) {
    let mut cfg = ModelConfig::desk(7, 3);
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 6;
    cfg.n_enc_layers = 3;
    cfg.n_dec_layers = 1;
    cfg.n_lp_split = 1;
    cfg.max_frames = 16;
    let mut rng = Rng::new(seed ^ 0xA5A5);
    let model = BaseModel::new(cfg, &mut rng).unwrap();
    let sites: Vec<Site> = model
        .weight_sites()
        .into_iter()
        .map(|(s, _)| s)
        .filter(|s| matches!(s, Site::Weight { matrix: langext::model::Matrix::Down, layer: 2, .. } | Site::Weight { matrix: langext::model::Matrix::CrossQ, .. }))
        .collect();
    let mut leaves: Vec<Tensor> = sites.iter().map(|&s| model.param(model.site_param(s).unwrap()).clone()).collect();
    leaves.push(model.embedding().clone());
    // the bound model must outlive every tape the checker creates
    let model: &'static BaseModel = Box::leak(Box::new(model));
    let features: &'static Tensor = Box::leak(Box::new(randn(&[6, 3], &mut rng)));
    let target = vec![3usize, 5, 4];
    let f: Case = Box::new(move |t, v| {
        let hooks = Replace { weights: sites.iter().copied().zip(v.iter().copied()).collect(), vocab: Some(v[v.len() - 1]) };
        let mut b = Bound::new(t, model, &TrainableSet::none(), hooks);
        Ok(b.utterance_loss(t, features, &target)?.total)
    });
    (f, leaves)
}

#[derive(Debug, Clone)]
pub struct GradSuiteResult {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_abs_err: f64,
    pub pass: bool,
}

/// Runs every gradient case for every seed; one result per case name,
/// holding the worst error over seeds.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<GradSuiteResult> {
    let mut by_name: Vec<GradSuiteResult> = Vec::new();
    for seed in seeds {
        for (name, f, leaves) in gradient_cases(seed) {
            let (err, abs, pass) = match grad_check(|t, v| f(t, v), &leaves, FD_STEP, FD_TOL) {
                Ok(rep) => (rep.max_rel_err, rep.max_abs_err, rep.pass),
                Err(_) => (f64::INFINITY, f64::INFINITY, false),
            };
            match by_name.iter_mut().find(|r| r.name == name) {
                Some(r) => {
                    r.worst_rel_err = r.worst_rel_err.max(err);
                    r.worst_abs_err = r.worst_abs_err.max(abs);
                    r.pass &= pass;
                }
                None => by_name.push(GradSuiteResult { name, worst_rel_err: err, worst_abs_err: abs, pass }),
            }
        }
    }
    by_name
}

/// Every target over `V` labels up to length `max_len`.
fn targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for y in 0..v {
                let mut u: Vec<usize> = t.clone();
                u.push(y);
                next.push(u);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Worst `|DP − brute force|` over the grid `T ≤ max_t`, `V ≤ max_v`,
/// `|target| ≤ max_len`, random log-probs per cell; also the number of
/// cells compared. Infeasible targets must give `+∞` from both.
pub fn ctc_grid(max_t: usize, max_v: usize, max_len: usize, seed: u64) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let (mut worst, mut cells) = (0.0f64, 0);
    for t_len in 1..=max_t {
        for v in 1..=max_v {
            for target in targets(v, max_len) {
                let logits = randn(&[t_len, v + 1], &mut rng);
                let mut tape = Tape::new();
                let x = tape.leaf(logits, false);
                let lp = tape.log_softmax(x, 1).unwrap();
                let lp = tape.value(lp).clone();
                let p = CtcProblem { log_probs: &lp, target: &target };
                let dp = ctc_nll(p).unwrap();
                let bf = ctc_brute_force(p).unwrap();
                let diff = if dp.is_infinite() || bf.is_infinite() {
                    if dp == bf { 0.0 } else { f64::INFINITY }
                } else {
                    (dp - bf).abs()
                };
                worst = worst.max(diff);
                cells += 1;
            }
        }
    }
    (worst, cells)
}
