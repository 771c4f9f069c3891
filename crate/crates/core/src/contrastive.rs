//! InfoNCE and the single-view, cross-view, pairwise and adaptive
//! multi-view losses built from it.
//!
//! Losses are recorded on a [`Tape`] so gradients reach the query-side
//! latents. Momentum-side latents and memory-bank negatives should be
//! constants on the tape.

use serde::{Deserialize, Serialize};

use crate::backend::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Softmax temperature.
    pub tau: f32,
    /// Weight of the cross-view terms.
    pub lambda: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.1, lambda: 0.5 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
    let nu = u.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

/// Negative keys on a tape, row-normalized once so every loss term can share
/// them.
#[derive(Clone, Copy, Debug)]
pub struct Negatives {
    rows: Option<Var>,
    count: usize,
}

impl Negatives {
    pub fn none() -> Self {
        Negatives { rows: None, count: 0 }
    }

    /// `bank` is `[n, d]`; an empty bank yields no negatives.
    pub fn new(tape: &mut Tape, bank: &Tensor) -> Result<Self> {
        let (n, _) = bank.dims2()?;
        if n == 0 {
            return Ok(Self::none());
        }
        if let Some(r) = (0..n).find(|&r| bank.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::Degenerate(format!("negative {r} is a zero vector")));
        }
        let c = tape.constant(bank.clone());
        let rows = tape.l2_normalize(c)?;
        Ok(Negatives { rows: Some(rows), count: n })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn as_row(tape: &mut Tape, v: Var) -> Result<Var> {
    match tape.shape(v) {
        [1, _] => Ok(v),
        [d] => {
            let d = *d;
            tape.reshape(v, &[1, d])
        }
        s => Err(Error::shape("latent vector", s, &[1, 0])),
    }
}

/// `-log(e^{s(q,k)/tau} / (e^{s(q,k)/tau} + sum_i e^{s(q,t_i)/tau}))` with
/// cosine similarity `s`, evaluated through a max-shifted log-sum-exp.
pub fn info_nce(tape: &mut Tape, q: Var, k: Var, negatives: &Negatives, tau: f32) -> Result<Var> {
    let q = as_row(tape, q)?;
    let k = as_row(tape, k)?;
    if tape.shape(q) != tape.shape(k) {
        return Err(Error::shape("info_nce", tape.shape(q), tape.shape(k)));
    }
    for (name, v) in [("query", q), ("key", k)] {
        if tape.value(v).data().iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(format!("info_nce {name} is a zero vector")));
        }
    }
    let qn = tape.l2_normalize(q)?;
    let kn = tape.l2_normalize(k)?;
    let keys = match negatives.rows {
        Some(neg) => tape.concat(&[kn, neg], 0)?,
        None => kn,
    };
    let sims = tape.matmul(qn, keys, true)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let loss = tape.softmax_cross_entropy(logits, &[0])?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite(format!(
            "info_nce with similarities {:?}",
            tape.value(sims).data()
        )));
    }
    Ok(loss)
}

/// Value-only InfoNCE over plain vectors.
pub fn info_nce_value(q: &[f32], k: &[f32], negatives: &[Vec<f32>], tau: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::from_vec(q.to_vec()));
    let kv = tape.constant(Tensor::from_vec(k.to_vec()));
    let negs = if negatives.is_empty() {
        Negatives::none()
    } else {
        let bank = Tensor::stack(&negatives.iter().map(|v| Tensor::from_vec(v.clone())).collect::<Vec<_>>())?;
        Negatives::new(&mut tape, &bank)?
    };
    let l = info_nce(&mut tape, qv, kv, &negs, tau)?;
    Ok(tape.value(l).item())
}

/// One patient's latents. `*1` come from query encoders, `*2` from momentum
/// encoders; `f` is the transverse view and `g` the longitudinal one.
#[derive(Clone, Copy, Debug, Default)]
pub struct ViewLatents {
    pub y_f1: Option<Var>,
    pub y_f2: Option<Var>,
    pub y_g1: Option<Var>,
    pub y_g2: Option<Var>,
}

impl ViewLatents {
    pub fn new(f: Option<(Var, Var)>, g: Option<(Var, Var)>) -> Self {
        ViewLatents {
            y_f1: f.map(|p| p.0),
            y_f2: f.map(|p| p.1),
            y_g1: g.map(|p| p.0),
            y_g2: g.map(|p| p.1),
        }
    }

    /// Transverse presence indicator.
    pub fn a(&self) -> bool {
        self.y_f1.is_some()
    }

    /// Longitudinal presence indicator.
    pub fn b(&self) -> bool {
        self.y_g1.is_some()
    }

    /// Exchanges the transverse and longitudinal sides.
    pub fn swapped(&self) -> Self {
        ViewLatents {
            y_f1: self.y_g1,
            y_f2: self.y_g2,
            y_g1: self.y_f1,
            y_g2: self.y_f2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_f1.is_some() != self.y_f2.is_some() || self.y_g1.is_some() != self.y_g2.is_some() {
            return Err(Error::InvalidArgument(
                "each present view needs both a query and a momentum latent".into(),
            ));
        }
        Ok(())
    }
}

/// `(L_ff, L_gg)`, each present only when its view is.
pub fn single_view_losses(
    tape: &mut Tape,
    latents: &ViewLatents,
    negatives: &Negatives,
    tau: f32,
) -> Result<(Option<Var>, Option<Var>)> {
    latents.validate()?;
    let ff = match (latents.y_f1, latents.y_f2) {
        (Some(q), Some(k)) => Some(info_nce(tape, q, k, negatives, tau)?),
        _ => None,
    };
    let gg = match (latents.y_g1, latents.y_g2) {
        (Some(q), Some(k)) => Some(info_nce(tape, q, k, negatives, tau)?),
        _ => None,
    };
    Ok((ff, gg))
}

/// `(L_fg, L_gf)`, present only when both views are.
pub fn cross_view_losses(
    tape: &mut Tape,
    latents: &ViewLatents,
    negatives: &Negatives,
    tau: f32,
) -> Result<(Option<Var>, Option<Var>)> {
    latents.validate()?;
    match (latents.y_f1, latents.y_f2, latents.y_g1, latents.y_g2) {
        (Some(f1), Some(f2), Some(g1), Some(g2)) => {
            let fg = info_nce(tape, f1, g2, negatives, tau)?;
            let gf = info_nce(tape, g1, f2, negatives, tau)?;
            Ok((Some(fg), Some(gf)))
        }
        _ => Ok((None, None)),
    }
}

/// `(L_ff + L_gg) + (L_fg + L_gf)`; requires both views.
pub fn pair_loss(tape: &mut Tape, latents: &ViewLatents, negatives: &Negatives, tau: f32) -> Result<Var> {
    if !(latents.a() && latents.b()) {
        return Err(Error::InvalidArgument("pair loss needs both views".into()));
    }
    let (ff, gg) = single_view_losses(tape, latents, negatives, tau)?;
    let (fg, gf) = cross_view_losses(tape, latents, negatives, tau)?;
    let single = tape.add(ff.expect("a"), gg.expect("b"))?;
    let cross = tape.add(fg.expect("ab"), gf.expect("ab"))?;
    tape.add(single, cross)
}

/// `a L_ff + b L_gg + a b lambda (L_fg + L_gf)`.
///
/// Absent terms are omitted rather than multiplied by zero, and the cross
/// terms are skipped entirely when `lambda == 0`.
pub fn adaptive_loss(
    tape: &mut Tape,
    latents: &ViewLatents,
    negatives: &Negatives,
    config: &ContrastiveConfig,
) -> Result<Var> {
    let (ff, gg) = single_view_losses(tape, latents, negatives, config.tau)?;
    let single = match (ff, gg) {
        (Some(ff), Some(gg)) => tape.add(ff, gg)?,
        (Some(l), None) | (None, Some(l)) => l,
        (None, None) => return Err(Error::InvalidArgument("patient has no views".into())),
    };
    if !(latents.a() && latents.b()) || config.lambda == 0.0 {
        return Ok(single);
    }
    let (fg, gf) = cross_view_losses(tape, latents, negatives, config.tau)?;
    let cross = tape.add(fg.expect("paired"), gf.expect("paired"))?;
    let cross = if config.lambda == 1.0 {
        cross
    } else {
        tape.scale(cross, config.lambda)
    };
    tape.add(single, cross)
}

/// Mean of [`adaptive_loss`] over the patients of a batch.
pub fn batch_loss(
    tape: &mut Tape,
    patients: &[ViewLatents],
    negatives: &Negatives,
    config: &ContrastiveConfig,
) -> Result<Var> {
    if patients.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for (i, p) in patients.iter().enumerate() {
        let l = adaptive_loss(tape, p, negatives, config).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("patient {i}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("patient {i}: {m}")),
            other => other,
        })?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("nonempty");
    if patients.len() == 1 {
        return Ok(total);
    }
    Ok(tape.scale(total, 1.0 / patients.len() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: &[f32]) -> Var {
        tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-7);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        assert_eq!(info_nce_value(&[1.0, 0.0], &[0.3, 0.1], &[], 0.1).unwrap(), 0.0);
        let l = info_nce_value(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 0.1).unwrap();
        let expect = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((l as f64 - expect).abs() < 1e-7, "{l} vs {expect}");
        for tau in [0.05, 0.1, 1.0, 3.0] {
            let l = info_nce_value(&[1.0, 0.0], &[0.0, 1.0], &[vec![0.0, -1.0]], tau).unwrap();
            assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_query_rejects() {
        assert!(info_nce_value(&[0.0, 0.0], &[1.0, 0.0], &[], 0.1).is_err());
    }

    #[test]
    fn missing_views_drop_terms() {
        let mut t = Tape::new();
        let g1 = row(&mut t, &[0.6, 0.8]);
        let g2 = row(&mut t, &[0.8, 0.6]);
        let lat = ViewLatents::new(None, Some((g1, g2)));
        let negs = Negatives::none();
        let (ff, gg) = single_view_losses(&mut t, &lat, &negs, 0.1).unwrap();
        assert!(ff.is_none() && gg.is_some());
        let (fg, gf) = cross_view_losses(&mut t, &lat, &negs, 0.1).unwrap();
        assert!(fg.is_none() && gf.is_none());
        assert!(pair_loss(&mut t, &lat, &negs, 0.1).is_err());
        let empty = ViewLatents::default();
        assert!(adaptive_loss(&mut t, &empty, &negs, &ContrastiveConfig::default()).is_err());
    }

    #[test]
    fn batch_mean() {
        let mut t = Tape::new();
        let negs = Negatives::none();
        let a = row(&mut t, &[1.0, 0.0]);
        let lat = ViewLatents::new(Some((a, a)), None);
        let l = batch_loss(&mut t, &[lat, lat], &negs, &ContrastiveConfig::default()).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        assert!(batch_loss(&mut t, &[], &negs, &ContrastiveConfig::default()).is_err());
    }
}
