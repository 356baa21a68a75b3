//! Robustness evaluation: natural-accuracy filtering, ε-sweeps, robust
//! accuracy curves, improvement over the best baseline, and report files.

mod report;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{emit_reports, write_curve_csv, ReportFiles};
pub use sweep::{epsilon_sweep, AttackRecord, SweepOptions, SweepOutput};

pub const CIFAR_EPS_GRID: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];
pub const IMAGENET_EPS_GRID: [f64; 7] = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5];
/// Budgets at which improvements over the baselines are reported.
pub const SMALL_EPS: [f64; 3] = [0.005, 0.01, 0.02];

/// `1 − (naturally misclassified + adversarial found) / total`.
pub fn robust_accuracy(total: usize, nat_misclassified: usize, adv_found: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Counts("no images".into()));
    }
    if nat_misclassified + adv_found > total {
        return Err(Error::Counts(format!(
            "{nat_misclassified} misclassified + {adv_found} adversarial exceed {total} images"
        )));
    }
    Ok(1.0 - (nat_misclassified + adv_found) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model: String,
    pub attack_id: String,
    /// `(ε, robust accuracy)` in grid order.
    pub points: Vec<(f64, f64)>,
}

impl RobustnessCurve {
    pub fn accuracy_at(&self, eps: f64) -> Option<f64> {
        self.points.iter().find(|p| (p.0 - eps).abs() <= 1e-12).map(|p| p.1)
    }
}

/// Accuracy difference of one effect model against the best baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub model: String,
    pub attack_id: String,
    pub eps: f64,
    pub accuracy: f64,
    pub best_baseline: f64,
    pub delta: f64,
}

/// Deltas of every non-baseline curve at each ε of `eps`, against the best
/// of the `baselines` curves with the same attack id.
pub fn improvement_over_best_baseline(
    curves: &[RobustnessCurve],
    baselines: &[&str],
    eps: &[f64],
) -> Result<Vec<Delta>> {
    let mut out = Vec::new();
    for c in curves.iter().filter(|c| !baselines.contains(&c.model.as_str())) {
        for &e in eps {
            let accuracy = c
                .accuracy_at(e)
                .ok_or_else(|| Error::config(format!("curve {}/{} has no point at eps {e}", c.model, c.attack_id)))?;
            let mut best: Option<f64> = None;
            for b in baselines {
                let bc = curves
                    .iter()
                    .find(|x| x.model == *b && x.attack_id == c.attack_id)
                    .ok_or_else(|| Error::config(format!("baseline {b} has no curve for {}", c.attack_id)))?;
                let acc = bc
                    .accuracy_at(e)
                    .ok_or_else(|| Error::config(format!("baseline {b}/{} has no point at eps {e}", c.attack_id)))?;
                best = Some(best.map_or(acc, |x: f64| x.max(acc)));
            }
            let best_baseline = best.ok_or_else(|| Error::config("no baseline models given"))?;
            out.push(Delta {
                model: c.model.clone(),
                attack_id: c.attack_id.clone(),
                eps: e,
                accuracy,
                best_baseline,
                delta: accuracy - best_baseline,
            });
        }
    }
    Ok(out)
}

/// Pointwise median over curves sharing an attack id and grid (one curve
/// per seed), labelled `model`.
pub fn median_curve(model: &str, curves: &[&RobustnessCurve]) -> Result<RobustnessCurve> {
    let first = curves.first().ok_or_else(|| Error::config("median of no curves"))?;
    let mut points = Vec::with_capacity(first.points.len());
    for (i, &(eps, _)) in first.points.iter().enumerate() {
        let mut v = Vec::with_capacity(curves.len());
        for c in curves {
            match c.points.get(i) {
                Some(&(e, a)) if (e - eps).abs() <= 1e-12 && c.attack_id == first.attack_id => v.push(a),
                _ => return Err(Error::config("median over curves with different grids")),
            }
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        points.push((eps, m));
    }
    Ok(RobustnessCurve { model: model.to_string(), attack_id: first.attack_id.clone(), points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(model: &str, acc: &[f64]) -> RobustnessCurve {
        RobustnessCurve {
            model: model.into(),
            attack_id: "a".into(),
            points: SMALL_EPS.iter().copied().zip(acc.iter().copied()).collect(),
        }
    }

    #[test]
    fn accuracy_formula() {
        assert_eq!(robust_accuracy(100, 10, 40).unwrap(), 0.5);
        assert_eq!(robust_accuracy(37, 0, 0).unwrap(), 1.0);
        assert_eq!(robust_accuracy(37, 37, 0).unwrap(), 0.0);
        assert!(matches!(robust_accuracy(10, 6, 5), Err(Error::Counts(_))));
    }

    #[test]
    fn grids() {
        assert_eq!(CIFAR_EPS_GRID, [0.001, 0.005, 0.01, 0.05, 0.1, 0.5]);
        assert_eq!(IMAGENET_EPS_GRID, [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5]);
    }

    #[test]
    fn deltas() {
        let cs = vec![
            curve("standard", &[0.5, 0.4, 0.3]),
            curve("coarse", &[0.55, 0.3, 0.3]),
            curve("retinal", &[0.6, 0.4, 0.2]),
        ];
        let d = improvement_over_best_baseline(&cs, &["standard", "coarse"], &SMALL_EPS).unwrap();
        assert_eq!(d.len(), 3);
        assert!((d[0].delta - 0.05).abs() < 1e-12);
        assert_eq!(d[1].delta, 0.0);
        assert!((d[2].delta + 0.1).abs() < 1e-12);
        let same = vec![curve("standard", &[0.5; 3]), curve("coarse", &[0.5; 3]), curve("x", &[0.5; 3])];
        let d = improvement_over_best_baseline(&same, &["standard", "coarse"], &SMALL_EPS).unwrap();
        assert!(d.iter().all(|d| d.delta == 0.0));
        assert!(improvement_over_best_baseline(&cs, &["standard", "coarse"], &[0.3]).is_err());
    }

    #[test]
    fn medians() {
        let (a, b, c) = (curve("s", &[0.1, 0.2, 0.3]), curve("s", &[0.3, 0.1, 0.3]), curve("s", &[0.2, 0.0, 0.9]));
        let m = median_curve("s", &[&a, &b, &c]).unwrap();
        assert_eq!(m.points.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.2, 0.1, 0.3]);
    }
}
