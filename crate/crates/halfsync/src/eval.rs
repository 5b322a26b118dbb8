//! Disruption-alarm scoring and ROC/AUC construction.
//!
//! Evaluation is shot-level: a shot's score is the maximum disruptivity the
//! model emitted inside the shot's *legal alarm window*. For a disruptive
//! shot that window ends 30 ms (= 30 timesteps) before the disruption — an
//! alarm later than that is too late to act on — while for a non-disruptive
//! shot any timestep can raise a false alarm, so the window is the whole
//! trace. Sweeping a threshold over the scores traces the ROC curve; the
//! area under it is the figure of merit.

use crate::data::Shot;
use crate::{Error, Result};

/// Timesteps before a disruption within which an alarm no longer counts.
pub const ALARM_CUTOFF: usize = 30;

/// Reduce a per-timestep disruptivity trace to the shot's alarm score.
/// Returns `Ok(None)` (with a warning) for disruptive shots whose
/// `t_disrupt < 30`, which have no legal alarm window and are excluded from
/// the ROC.
pub fn shot_score(trace: &[f64], shot: &Shot) -> Result<Option<f64>> {
    if trace.len() != shot.t_len() {
        return Err(Error::ShapeMismatch(format!(
            "trace length {} vs shot {} length {}",
            trace.len(),
            shot.id,
            shot.t_len()
        )));
    }
    let window = match shot.t_disrupt {
        Some(td) => {
            let td = td as usize;
            if td < ALARM_CUTOFF {
                log::warn!(
                    "shot {}: disruption at t={td} leaves no alarm window; excluded",
                    shot.id
                );
                return Ok(None);
            }
            &trace[..=td - ALARM_CUTOFF]
        }
        None => trace,
    };
    let mut best = f64::NEG_INFINITY;
    for &v in window {
        if v.is_nan() {
            return Err(Error::NumericFault(format!(
                "NaN disruptivity in shot {}",
                shot.id
            )));
        }
        best = best.max(v);
    }
    Ok(Some(best))
}

/// One ROC point; `threshold` is the alarm level that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold-swept ROC curve, anchored at (0,0) and (1,1) with both
/// coordinates non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Build the ROC curve and its area for shot-level `(score, disruptive)`
/// pairs. An alarm fires when `score > threshold` (ties break toward "no
/// alarm"); thresholds sweep the distinct score values from high to low, so
/// tied scores move together. AUC comes from trapezoidal integration and
/// equals the Mann-Whitney statistic with ties counted 1/2.
pub fn roc_auc(scored: &[(f64, bool)]) -> Result<(RocCurve, f64)> {
    let pos = scored.iter().filter(|(_, label)| *label).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} disruptive / {neg} quiet"
        )));
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NumericFault("NaN score in ROC input".into()));
    }

    // Distinct thresholds, descending. The highest threshold fires no alarm
    // at all (strict inequality), giving the (0,0) anchor.
    let mut thresholds: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let (p, n) = (pos as f64, neg as f64);
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for &th in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for &(s, label) in scored {
            if s > th {
                if label {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push(RocPoint { threshold: th, fpr: fp as f64 / n, tpr: tp as f64 / p });
    }
    // Below the lowest score everything alarms: the (1,1) anchor.
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });

    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    Ok((RocCurve { points }, auc))
}

/// Write a curve as `threshold,fpr,tpr` CSV rows.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
