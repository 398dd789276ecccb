//! Connectionist temporal classification.
//!
//! Frames carry log-distributions over `V + 1` classes; the last class
//! (index `V`) is the blank. The negative log-likelihood of a target is
//! computed by the usual blank-augmented forward recursion in log space,
//! and its gradient with respect to the frame log-probabilities comes from
//! the matching backward recursion (state occupancies).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Log-space stand-in for probability zero.
pub const LOG_ZERO: f64 = -1e30;

/// Largest `(V + 1)^T` the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy)]
pub struct CtcProblem<'p> {
    /// `[T, V + 1]`, blank last.
    pub log_probs: &'p Tensor,
    /// Labels in `[0, V)`.
    pub target: &'p [usize],
}

impl CtcProblem<'_> {
    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn blank(&self) -> usize {
        self.log_probs.cols() - 1
    }

    /// Fewest frames any alignment of the target needs: one per label plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.target.windows(2).filter(|w| w[0] == w[1]).count();
        self.target.len() + repeats
    }

    pub fn is_feasible(&self) -> bool {
        self.min_frames() <= self.frames()
    }

    fn validate(&self) -> Result<()> {
        if self.log_probs.shape().len() != 2 || self.log_probs.cols() < 2 {
            return Err(Error::Shape(format!(
                "CTC log-probs must be [T, V+1] with V >= 1, got {:?}",
                self.log_probs.shape()
            )));
        }
        let blank = self.blank();
        if let Some(&bad) = self.target.iter().find(|&&y| y >= blank) {
            return Err(Error::Shape(format!("target label {bad} outside [0, {blank})")));
        }
        Ok(())
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Negative log-likelihood and its gradient with respect to `log_probs`.
/// `None` when the target cannot be aligned in the available frames.
pub fn ctc_nll_with_grad(problem: CtcProblem<'_>) -> Result<Option<(f64, Tensor)>> {
    problem.validate()?;
    if !problem.is_feasible() {
        return Ok(None);
    }
    let lp = problem.log_probs;
    let (t_len, classes) = (lp.rows(), lp.cols());
    let blank = problem.blank();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(problem.target.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s_len = ext.len();
    // skip transition s-2 -> s is allowed into a label differing from the previous label
    let can_skip: Vec<bool> = (0..s_len).map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]).collect();

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp.get2(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get2(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { LOG_ZERO };
            let c = if can_skip[s] { prev[s - 2] } else { LOG_ZERO };
            let sum = lse3(a, b, c);
            cur[s] = if sum <= LOG_ZERO { LOG_ZERO } else { sum + lp.get2(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p <= LOG_ZERO {
        return Ok(None);
    }

    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[last + s_len - 1] = lp.get2(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp.get2(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { LOG_ZERO };
            let c = if s + 2 < s_len && can_skip[s + 2] { next[s + 2] } else { LOG_ZERO };
            let sum = lse3(a, b, c);
            cur[s] = if sum <= LOG_ZERO { LOG_ZERO } else { sum + lp.get2(t, ext[s]) };
        }
    }

    let mut grad = Tensor::zeros(&[t_len, classes]);
    let gd = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if alpha[t * s_len + s] <= LOG_ZERO || beta[t * s_len + s] <= LOG_ZERO {
                continue;
            }
            let occupancy = (ab - lp.get2(t, ext[s]) - log_p).exp();
            gd[t * classes + ext[s]] -= occupancy;
        }
    }
    Ok(Some((-log_p, grad)))
}

/// `-log p(target | log_probs)`; `f64::INFINITY` when no alignment fits.
pub fn ctc_nll(problem: CtcProblem<'_>) -> Result<f64> {
    Ok(ctc_nll_with_grad(problem)?.map_or(f64::INFINITY, |(nll, _)| nll))
}

/// Records the CTC loss of `target` against `log_probs` (a `[T, V+1]` tape
/// value). An infeasible target is an error here: the tape only holds
/// finite values.
pub fn ctc_loss<'a>(tape: &mut Tape<'a>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let lp = tape.value(log_probs);
    let problem = CtcProblem { log_probs: lp, target };
    let Some((nll, grad)) = ctc_nll_with_grad(problem)? else {
        return Err(Error::Infeasible(format!(
            "target of length {} needs {} frames, have {}",
            target.len(),
            problem.min_frames(),
            lp.rows()
        )));
    };
    Ok(tape.custom(
        &[log_probs],
        Tensor::scalar(nll),
        Box::new(move |g, _, _| {
            let scale = g.item();
            let d = grad.data().iter().map(|v| v * scale).collect();
            vec![Some(Tensor::from_vec(grad.shape(), d).expect("same shape"))]
        }),
    ))
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(alignment: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Exact NLL by enumerating every frame alignment. Test oracle only.
pub fn ctc_brute_force(problem: CtcProblem<'_>) -> Result<f64> {
    problem.validate()?;
    let (t_len, classes) = (problem.frames(), problem.log_probs.cols());
    let total = (0..t_len).try_fold(1usize, |acc, _| acc.checked_mul(classes).filter(|&n| n <= BRUTE_FORCE_LIMIT));
    let Some(total) = total else {
        return Err(Error::Config(format!(
            "brute force over {classes}^{t_len} alignments exceeds {BRUTE_FORCE_LIMIT}"
        )));
    };
    let blank = problem.blank();
    let mut path = vec![0usize; t_len];
    let mut prob = 0.0;
    for mut code in 0..total {
        for slot in path.iter_mut() {
            *slot = code % classes;
            code /= classes;
        }
        if collapse(&path, blank) == problem.target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| problem.log_probs.get2(t, k)).sum();
            prob += lp.exp();
        }
    }
    Ok(if prob > 0.0 { -prob.ln() } else { f64::INFINITY })
}
