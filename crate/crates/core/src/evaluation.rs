//! Hard-decision test metrics.

use crate::criteria::PROB_FLOOR;
use crate::error::{Error, Result};

/// Binary confusion counts: a = true positives, b = false negatives,
/// c = false positives, d = true negatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl ConfusionCounts {
    pub fn n_pos(&self) -> usize {
        self.a + self.b
    }

    pub fn n_neg(&self) -> usize {
        self.c + self.d
    }

    pub fn n(&self) -> usize {
        self.n_pos() + self.n_neg()
    }

    pub fn errors(&self) -> usize {
        self.b + self.c
    }
}

fn check_inputs(prob_pos: &[f64], y: &[f64]) -> Result<()> {
    if prob_pos.len() != y.len() {
        return Err(Error::Input(format!("{} probabilities for {} labels", prob_pos.len(), y.len())));
    }
    if let Some(i) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Input(format!("label {i} is {} (expected ±1)", y[i])));
    }
    Ok(())
}

/// Predict positive iff prob ≥ threshold.
pub fn confusion(prob_pos: &[f64], y: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(prob_pos, y)?;
    let mut cc = ConfusionCounts::default();
    for (&p, &label) in prob_pos.iter().zip(y) {
        match (label > 0.0, p >= threshold) {
            (true, true) => cc.a += 1,
            (true, false) => cc.b += 1,
            (false, true) => cc.c += 1,
            (false, false) => cc.d += 1,
        }
    }
    Ok(cc)
}

/// a / (a + ζb + (1−ζ)c). Returns 0 when there are no true positives and an
/// error when all of a, b, c are zero.
pub fn true_fmeasure(cc: &ConfusionCounts, zeta: f64) -> Result<f64> {
    let denom = cc.a as f64 + zeta * cc.b as f64 + (1.0 - zeta) * cc.c as f64;
    if cc.a + cc.b + cc.c == 0 {
        return Err(Error::UndefinedCriterion("F-measure with no positives predicted or present".into()));
    }
    if cc.a == 0 {
        return Ok(0.0);
    }
    Ok(cc.a as f64 / denom)
}

/// Test metrics; class-conditional quantities are `None` when undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSuite {
    pub counts: ConfusionCounts,
    /// (b + c) / n
    pub error_rate: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fmeasure: Option<f64>,
    /// True when F was set to 0 because no positive was correctly found.
    pub fmeasure_degenerate: bool,
    pub tp_rate: Option<f64>,
    pub fp_rate: Option<f64>,
    pub wer: Option<f64>,
    pub auc: Option<f64>,
    /// Mean negative log probability of the true labels.
    pub nlp: f64,
}

pub fn metric_suite(prob_pos: &[f64], y: &[f64], zeta: f64, tau: f64) -> Result<MetricSuite> {
    let counts = confusion(prob_pos, y, 0.5)?;
    let n = counts.n();
    if n == 0 {
        return Err(Error::Input("no test examples".into()));
    }
    let n_pos = counts.n_pos() as f64;
    let n_neg = counts.n_neg() as f64;
    let (a, b, c) = (counts.a as f64, counts.b as f64, counts.c as f64);
    let tp_rate = (n_pos > 0.0).then(|| a / n_pos);
    let fp_rate = (n_neg > 0.0).then(|| c / n_neg);
    let nlp = -prob_pos
        .iter()
        .zip(y)
        .map(|(&p, &label)| {
            let q = if label > 0.0 { p } else { 1.0 - p };
            q.max(PROB_FLOOR).ln()
        })
        .sum::<f64>()
        / n as f64;
    let fmeasure = true_fmeasure(&counts, zeta).ok();
    Ok(MetricSuite {
        counts,
        error_rate: counts.errors() as f64 / n as f64,
        precision: (a + c > 0.0).then(|| a / (a + c)),
        recall: tp_rate,
        fmeasure,
        fmeasure_degenerate: fmeasure.is_some() && counts.a == 0,
        tp_rate,
        fp_rate,
        wer: (n_pos > 0.0 && n_neg > 0.0).then(|| (b + tau * c) / (n_pos + tau * n_neg)),
        auc: tp_rate.zip(fp_rate).map(|(tp, fp)| 0.5 * (1.0 + tp - fp)),
        nlp,
    })
}
