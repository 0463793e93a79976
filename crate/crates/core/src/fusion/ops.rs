//! Feature-level fusion operators.

use crate::autograd::{concat, Var};
use crate::datamodel::PAD_DATE;
use crate::error::{Error, Result};

/// Merged sequence of [`mid_fuse`].
pub struct Merged<'g> {
    /// `[N, ΣT_m, F]`; usable steps first in chronological order, masked
    /// slots zero at the end.
    pub sequence: Var<'g>,
    pub dates: Vec<i32>,
    pub mask: Vec<bool>,
}

/// Interleaves per-modality sequences `[N, T_m, F]` chronologically; date
/// ties are ordered by modality position.
pub fn mid_fuse<'g>(features: &[Var<'g>], dates: &[&[i32]], masks: &[&[bool]]) -> Result<Merged<'g>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Invalid("mid fusion of no modalities".into()))?;
    let shape = first.shape();
    let (n, f) = (shape[0], shape[2]);
    let mut lens = Vec::with_capacity(features.len());
    for (m, x) in features.iter().enumerate() {
        let s = x.shape();
        if s.len() != 3 || s[0] != n || s[2] != f {
            return Err(Error::Invalid(format!(
                "mid fusion needs equal embedding widths: modality {m} has shape {s:?}, expected [{n}, _, {f}]"
            )));
        }
        if dates[m].len() != n * s[1] || masks[m].len() != n * s[1] {
            return Err(Error::Invalid(format!("dates or mask of modality {m} do not match its sequence")));
        }
        lens.push(s[1]);
    }
    let total: usize = lens.iter().sum();
    let mut index = Vec::with_capacity(n * total);
    let mut out_dates = Vec::with_capacity(n * total);
    let mut out_mask = Vec::with_capacity(n * total);
    for i in 0..n {
        let mut steps = Vec::new();
        let mut offset = 0;
        for (m, &t) in lens.iter().enumerate() {
            for s in 0..t {
                if masks[m][i * t + s] {
                    steps.push((dates[m][i * t + s], m, i * total + offset + s));
                }
            }
            offset += t;
        }
        steps.sort_by_key(|&(d, m, _)| (d, m));
        for &(d, _, row) in &steps {
            index.push(Some(row));
            out_dates.push(d);
            out_mask.push(true);
        }
        for _ in steps.len()..total {
            index.push(None);
            out_dates.push(PAD_DATE);
            out_mask.push(false);
        }
    }
    let sequence = concat(features, 1)
        .reshape(&[n * total, f])
        .gather_rows(&index)
        .reshape(&[n, total, f]);
    Ok(Merged {
        sequence,
        dates: out_dates,
        mask: out_mask,
    })
}

/// Channel concatenation of per-modality embeddings `[N, F_m, ...]`.
pub fn late_fuse<'g>(embeddings: &[Var<'g>]) -> Var<'g> {
    concat(embeddings, 1)
}

/// Mean of per-modality class probabilities, returned as log-probabilities.
/// Every input is `[R, K]` logits.
pub fn decision_fuse<'g>(logits: &[Var<'g>]) -> Result<Var<'g>> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Invalid("decision fusion of no predictions".into()))?;
    let shape = first.shape();
    if logits.iter().any(|l| l.shape() != shape) || shape.len() != 2 {
        return Err(Error::Invalid("decision fusion needs [R, K] predictions of equal shape".into()));
    }
    let flat = shape[0] * shape[1];
    let rows: Vec<Var<'g>> = logits
        .iter()
        .map(|l| l.log_softmax().reshape(&[1, flat]))
        .collect();
    Ok(concat(&rows, 0).log_mean_exp().reshape(&shape))
}
