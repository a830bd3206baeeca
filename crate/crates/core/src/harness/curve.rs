//! Certified-accuracy curves and the best-of-σ envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::run::CertRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: f64,
    pub certified_accuracy: f64,
    pub clean_accuracy: f64,
    /// The noise level this point was taken from.
    pub sigma_used: f64,
}

/// Fraction of records certified correctly at each radius. Abstentions and
/// failed samples count as misses; the denominator is every record.
pub fn certified_accuracy_curve(records: &[CertRecord], radii: &[f64]) -> Result<Vec<CurvePoint>> {
    let Some(first) = records.first() else {
        return Err(Error::domain("no records to build a curve from"));
    };
    if let Some(r) = records.iter().find(|r| r.sigma != first.sigma) {
        return Err(Error::domain(format!(
            "records mix noise levels {} and {}",
            first.sigma, r.sigma
        )));
    }
    let n = records.len() as f64;
    let clean = records.iter().filter(|r| r.clean_correct()).count() as f64 / n;
    Ok(radii
        .iter()
        .map(|&radius| CurvePoint {
            radius,
            certified_accuracy: records.iter().filter(|r| r.certified_at(radius)).count() as f64 / n,
            clean_accuracy: clean,
            sigma_used: first.sigma,
        })
        .collect())
}

/// Pointwise best curve; ties go to the smaller σ.
pub fn multi_sigma_envelope(curves: &[Vec<CurvePoint>]) -> Result<Vec<CurvePoint>> {
    let Some(first) = curves.first() else {
        return Err(Error::domain("no curves to combine"));
    };
    for c in curves {
        if c.len() != first.len() || c.iter().zip(first).any(|(a, b)| a.radius != b.radius) {
            return Err(Error::dim("curves use different radius grids"));
        }
    }
    Ok((0..first.len())
        .map(|j| {
            curves
                .iter()
                .map(|c| &c[j])
                .reduce(|best, p| {
                    let better = p.certified_accuracy > best.certified_accuracy
                        || (p.certified_accuracy == best.certified_accuracy && p.sigma_used < best.sigma_used);
                    if better {
                        p
                    } else {
                        best
                    }
                })
                .expect("at least one curve")
                .clone()
        })
        .collect())
}

/// One curve per noise level, in the order of `sigmas`, plus their envelope.
pub fn curves_by_sigma(
    records: &[CertRecord],
    sigmas: &[f64],
    radii: &[f64],
) -> Result<(Vec<Vec<CurvePoint>>, Vec<CurvePoint>)> {
    let per_sigma = (0..sigmas.len())
        .map(|s| {
            let subset: Vec<CertRecord> = records.iter().filter(|r| r.sigma_index == s).cloned().collect();
            certified_accuracy_curve(&subset, radii)
        })
        .collect::<Result<Vec<_>>>()?;
    let envelope = multi_sigma_envelope(&per_sigma)?;
    Ok((per_sigma, envelope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{Certificate, CertifyOutcome};
    use crate::stats::Probability;

    fn record(sigma: f64, label: usize, radius: Option<f64>) -> CertRecord {
        CertRecord {
            sample_index: 0,
            true_label: 1,
            sigma,
            sigma_index: 0,
            outcome: Some(match radius {
                None => CertifyOutcome::Abstain,
                Some(radius) => CertifyOutcome::Certified(Certificate {
                    label,
                    radius,
                    pa_lower: Probability::new(0.9).unwrap(),
                    counts: vec![],
                }),
            }),
            clean_prediction: Some(1),
            entropy: None,
            wall_time_ms: None,
            error: None,
        }
    }

    #[test]
    fn single_record_is_a_step() {
        let c = certified_accuracy_curve(&[record(0.25, 1, Some(0.5))], &[0.0, 0.25, 0.5, 0.75]).unwrap();
        let acc: Vec<f64> = c.iter().map(|p| p.certified_accuracy).collect();
        assert_eq!(acc, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn abstentions_and_wrong_labels_never_count() {
        let recs = [record(0.5, 1, None), record(0.5, 0, Some(2.0))];
        let c = certified_accuracy_curve(&recs, &[0.0, 1.0]).unwrap();
        assert!(c.iter().all(|p| p.certified_accuracy == 0.0));
        assert_eq!(c[0].clean_accuracy, 1.0);
    }

    #[test]
    fn empty_and_mixed_inputs_fail() {
        assert!(certified_accuracy_curve(&[], &[0.1]).is_err());
        assert!(certified_accuracy_curve(&[record(0.1, 1, None), record(0.2, 1, None)], &[0.1]).is_err());
        assert!(multi_sigma_envelope(&[]).is_err());
    }

    #[test]
    fn envelope_ties_prefer_smaller_sigma() {
        let a = certified_accuracy_curve(&[record(0.5, 1, Some(1.0))], &[0.5]).unwrap();
        let b = certified_accuracy_curve(&[record(0.25, 1, Some(1.0))], &[0.5]).unwrap();
        let e = multi_sigma_envelope(&[a, b]).unwrap();
        assert_eq!(e[0].sigma_used, 0.25);
    }
}
