use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edit operations of one alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among optimal alignments the traceback (from the end) prefers a
/// diagonal step, then a deletion, then an insertion, so the split between
/// operation types is deterministic.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let miss = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + miss == here {
                c.sub += miss;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// `(S + D + I) / reference tokens` over `(reference, hypothesis)` pairs.
pub fn error_rate<'a, T: PartialEq + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> Result<f64> {
    let (mut errors, mut total) = (0usize, 0usize);
    for (r, h) in pairs {
        errors += edit_distance(r, h).total();
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Data("error rate needs at least one nonempty reference".into()));
    }
    Ok(errors as f64 / total as f64)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}
