//! Smoothed LOO criteria and their gradients.
//!
//! Each criterion replaces hard LOO decisions by the positive-class
//! probabilities, so A(θ) = Σ_{yᵢ=+1} p(yᵢ=+1) plays the role of the true
//! positive count and m₊(θ) = Σᵢ p(yᵢ=+1) the predicted positive count.

use crate::error::{Error, Result};
use crate::loo::LooPredictive;
use std::fmt;
use std::str::FromStr;

/// Smallest probability allowed inside 1/pᵢ in the NLP gradient.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    Nlp,
    SmoothedF,
    SmoothedWer,
    SmoothedAuc,
}

impl CriterionKind {
    /// True when larger values are better.
    pub fn maximize(self) -> bool {
        matches!(self, CriterionKind::SmoothedF | CriterionKind::SmoothedAuc)
    }

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Nlp => "nlp",
            CriterionKind::SmoothedF => "fmeasure",
            CriterionKind::SmoothedWer => "wer",
            CriterionKind::SmoothedAuc => "auc",
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nlp" => Ok(CriterionKind::Nlp),
            "f" | "fm" | "fmeasure" | "f-measure" => Ok(CriterionKind::SmoothedF),
            "wer" => Ok(CriterionKind::SmoothedWer),
            "auc" => Ok(CriterionKind::SmoothedAuc),
            other => Err(Error::Input(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Smoothed counts behind the ratio criteria.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CriterionAux {
    pub smoothed_tp_count: Option<f64>,
    pub smoothed_pos_count: Option<f64>,
    pub tp_rate: Option<f64>,
    pub fp_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionValue {
    pub kind: CriterionKind,
    pub value: f64,
    /// Empty when the predictive carries no jacobian.
    pub gradient: Vec<f64>,
    pub aux: CriterionAux,
}

/// Class counts and the smoothed A, m₊ with their gradients.
struct Smoothed {
    n_pos: f64,
    n_neg: f64,
    tp: f64,
    pos: f64,
    d_tp: Vec<f64>,
    d_pos: Vec<f64>,
}

fn smoothed(loo: &LooPredictive, y: &[f64]) -> Result<Smoothed> {
    if y.len() != loo.len() {
        return Err(Error::Input(format!("{} labels for {} predictions", y.len(), loo.len())));
    }
    let p = loo.n_params();
    let mut s = Smoothed {
        n_pos: 0.0,
        n_neg: 0.0,
        tp: 0.0,
        pos: 0.0,
        d_tp: vec![0.0; p],
        d_pos: vec![0.0; p],
    };
    for (i, &label) in y.iter().enumerate() {
        let q = loo.prob_pos[i];
        s.pos += q;
        if label > 0.0 {
            s.n_pos += 1.0;
            s.tp += q;
        } else {
            s.n_neg += 1.0;
        }
        if let Some(jac) = &loo.jac_pos {
            for j in 0..p {
                let g = jac[(i, j)];
                s.d_pos[j] += g;
                if label > 0.0 {
                    s.d_tp[j] += g;
                }
            }
        }
    }
    Ok(s)
}

/// Mean negative log LOO probability.
pub fn nlp(loo: &LooPredictive) -> Result<CriterionValue> {
    let n = loo.len();
    if n == 0 {
        return Err(Error::UndefinedCriterion("NLP of an empty set".into()));
    }
    let nf = n as f64;
    let value = -loo.log_prob_label.iter().sum::<f64>() / nf;
    let gradient = match &loo.jac_label {
        Some(jac) => (0..jac.ncols())
            .map(|j| {
                -(0..n)
                    .map(|i| jac[(i, j)] / loo.prob_label[i].max(PROB_FLOOR))
                    .sum::<f64>()
                    / nf
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(CriterionValue {
        kind: CriterionKind::Nlp,
        value,
        gradient,
        aux: CriterionAux::default(),
    })
}

/// A / (ζ n₊ + (1−ζ) m₊)
pub fn smoothed_fmeasure(loo: &LooPredictive, y: &[f64], zeta: f64) -> Result<CriterionValue> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Input(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    let s = smoothed(loo, y)?;
    if s.n_pos == 0.0 {
        return Err(Error::UndefinedCriterion("F-measure needs at least one positive example".into()));
    }
    let eta = zeta * s.n_pos + (1.0 - zeta) * s.pos;
    let value = s.tp / eta;
    let gradient = s
        .d_tp
        .iter()
        .zip(&s.d_pos)
        .map(|(da, dm)| (eta * da - s.tp * (1.0 - zeta) * dm) / (eta * eta))
        .collect();
    Ok(CriterionValue {
        kind: CriterionKind::SmoothedF,
        value,
        gradient,
        aux: CriterionAux {
            smoothed_tp_count: Some(s.tp),
            smoothed_pos_count: Some(s.pos),
            tp_rate: Some(s.tp / s.n_pos),
            fp_rate: (s.n_neg > 0.0).then(|| (s.pos - s.tp) / s.n_neg),
        },
    })
}

fn check_both_classes(s: &Smoothed, what: &str) -> Result<()> {
    if s.n_pos == 0.0 || s.n_neg == 0.0 {
        return Err(Error::UndefinedCriterion(format!("{what} needs both classes")));
    }
    Ok(())
}

/// (n₊(1−TP) + τ n₋ FP) / (n₊ + τ n₋), to be minimized.
pub fn smoothed_wer(loo: &LooPredictive, y: &[f64], tau: f64) -> Result<CriterionValue> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("tau must lie in [0, 1], got {tau}")));
    }
    let s = smoothed(loo, y)?;
    check_both_classes(&s, "WER")?;
    let denom = s.n_pos + tau * s.n_neg;
    let value = (s.n_pos - s.tp + tau * (s.pos - s.tp)) / denom;
    let gradient = s
        .d_tp
        .iter()
        .zip(&s.d_pos)
        .map(|(da, dm)| (-(1.0 + tau) * da + tau * dm) / denom)
        .collect();
    Ok(CriterionValue {
        kind: CriterionKind::SmoothedWer,
        value,
        gradient,
        aux: CriterionAux {
            smoothed_tp_count: Some(s.tp),
            smoothed_pos_count: Some(s.pos),
            tp_rate: Some(s.tp / s.n_pos),
            fp_rate: Some((s.pos - s.tp) / s.n_neg),
        },
    })
}

/// (1 + TP − FP) / 2, to be maximized.
pub fn smoothed_auc(loo: &LooPredictive, y: &[f64]) -> Result<CriterionValue> {
    let s = smoothed(loo, y)?;
    check_both_classes(&s, "AUC")?;
    let tp = s.tp / s.n_pos;
    let fp = (s.pos - s.tp) / s.n_neg;
    let gradient = s
        .d_tp
        .iter()
        .zip(&s.d_pos)
        .map(|(da, dm)| 0.5 * (da / s.n_pos - (dm - da) / s.n_neg))
        .collect();
    Ok(CriterionValue {
        kind: CriterionKind::SmoothedAuc,
        value: 0.5 * (1.0 + tp - fp),
        gradient,
        aux: CriterionAux {
            smoothed_tp_count: Some(s.tp),
            smoothed_pos_count: Some(s.pos),
            tp_rate: Some(tp),
            fp_rate: Some(fp),
        },
    })
}

/// Evaluate `kind` with the usual parameters.
pub fn evaluate(kind: CriterionKind, loo: &LooPredictive, y: &[f64], zeta: f64, tau: f64) -> Result<CriterionValue> {
    match kind {
        CriterionKind::Nlp => nlp(loo),
        CriterionKind::SmoothedF => smoothed_fmeasure(loo, y, zeta),
        CriterionKind::SmoothedWer => smoothed_wer(loo, y, tau),
        CriterionKind::SmoothedAuc => smoothed_auc(loo, y),
    }
}
