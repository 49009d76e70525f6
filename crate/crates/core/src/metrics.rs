//! MAE, ε-error, per-group MAE spread σ and AAR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_margin::{GROUP_COUNT, GROUP_NAMES};

/// Evaluation summary. Empty groups carry `None` and are left out of σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub group_mae: [Option<f64>; GROUP_COUNT],
    pub group_counts: [usize; GROUP_COUNT],
    pub sigma: f64,
    pub aar: f64,
    pub epsilon_error: Option<f64>,
    /// Number of non-empty groups that entered σ.
    pub sigma_groups: usize,
}

fn check_lengths(predictions: &[f64], labels: &[f64]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn mae(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let total: f64 = predictions.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum();
    Ok(total / predictions.len() as f64)
}

/// `1 - mean exp(-(y - ŷ)² / 2σ²)`. A zero std counts as an exact-match
/// indicator.
pub fn epsilon_error(predictions: &[f64], labels: &[f64], label_stds: &[f64]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    if label_stds.len() != labels.len() {
        return Err(Error::Shape(format!("{} stds for {} labels", label_stds.len(), labels.len())));
    }
    if let Some(s) = label_stds.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("label std {s} is negative")));
    }
    let mut total = 0.0;
    for ((p, l), s) in predictions.iter().zip(labels).zip(label_stds) {
        let d = p - l;
        total += if *s == 0.0 {
            if d == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-d * d / (2.0 * s * s)).exp()
        };
    }
    Ok((1.0 - total / predictions.len() as f64).clamp(0.0, 1.0))
}

/// `max(0, 7 - MAE) + max(0, 3 - σ)`.
pub fn aar_score(mae: f64, sigma: f64) -> f64 {
    (7.0 - mae).max(0.0) + (3.0 - sigma).max(0.0)
}

/// Full report: overall MAE, per-group MAE, σ over non-empty groups, AAR,
/// and ε-error when label stds are supplied.
pub fn aar(predictions: &[f64], labels: &[f64], groups: &[usize], label_stds: Option<&[f64]>) -> Result<MetricsReport> {
    check_lengths(predictions, labels)?;
    if groups.len() != labels.len() {
        return Err(Error::Shape(format!("{} group ids for {} labels", groups.len(), labels.len())));
    }
    let mut sums = [0.0; GROUP_COUNT];
    let mut counts = [0usize; GROUP_COUNT];
    for ((p, l), &g) in predictions.iter().zip(labels).zip(groups) {
        if g >= GROUP_COUNT {
            return Err(Error::InvalidArgument(format!("group id {g}")));
        }
        sums[g] += (p - l).abs();
        counts[g] += 1;
    }
    let overall = mae(predictions, labels)?;
    let mut group_mae = [None; GROUP_COUNT];
    for g in 0..GROUP_COUNT {
        if counts[g] > 0 {
            group_mae[g] = Some(sums[g] / counts[g] as f64);
        }
    }
    let present: Vec<f64> = group_mae.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("every group is empty".into()));
    }
    let sigma = (present.iter().map(|m| (m - overall).powi(2)).sum::<f64>() / present.len() as f64).sqrt();
    let epsilon = label_stds.map(|s| epsilon_error(predictions, labels, s)).transpose()?;
    Ok(MetricsReport {
        mae: overall,
        group_mae,
        group_counts: counts,
        sigma,
        aar: aar_score(overall, sigma),
        epsilon_error: epsilon,
        sigma_groups: present.len(),
    })
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "schema,group,count,mae,sigma,aar,epsilon_error";

    /// Header plus one row per group and a final `overall` row.
    pub fn to_csv(&self, schema: u32) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let blank = String::new();
        for g in 0..GROUP_COUNT {
            let m = self.group_mae[g].map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{schema},{},{},{m},{blank},{blank},{blank}\n", GROUP_NAMES[g], self.group_counts[g]));
        }
        let eps = self.epsilon_error.map(|v| format!("{v}")).unwrap_or_default();
        let total: usize = self.group_counts.iter().sum();
        out.push_str(&format!(
            "{schema},overall,{total},{},{},{},{eps}\n",
            self.mae, self.sigma, self.aar
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_aar_rows() {
        assert!((aar_score(2.09, 1.25) - 6.66).abs() < 1e-9);
        assert!((aar_score(1.68, 1.17) - 7.15).abs() < 1e-9);
        assert_eq!(aar_score(7.5, 3.2), 0.0);
        assert_eq!(aar_score(7.0, 3.0), 0.0);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[20.0, 30.0], &[22.0, 27.0]).unwrap(), 2.5);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn epsilon_cases() {
        assert_eq!(epsilon_error(&[3.0, 4.0], &[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
        let e = epsilon_error(&[32.0], &[30.0], &[2.0]).unwrap();
        assert!((e - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((e - 0.39347).abs() < 1e-5);
        // zero std: exact match scores 1, anything else 0
        assert_eq!(epsilon_error(&[5.0, 6.0], &[5.0, 7.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(epsilon_error(&[1.0], &[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn random_batches_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..90.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..90.0)).collect();
        let stds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        let groups: Vec<usize> = labels.iter().map(|&l| crate::group_margin::group_of_age(l).unwrap()).collect();
        let report = aar(&preds, &labels, &groups, Some(&stds)).unwrap();

        let mut overall = 0.0;
        for i in 0..n {
            overall += (preds[i] - labels[i]).abs();
        }
        overall /= n as f64;
        assert!((report.mae - overall).abs() < 1e-12);
        let mut per = Vec::new();
        for g in 0..4 {
            let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
            assert_eq!(report.group_counts[g], idx.len());
            if idx.is_empty() {
                assert!(report.group_mae[g].is_none());
                continue;
            }
            let m = idx.iter().map(|&i| (preds[i] - labels[i]).abs()).sum::<f64>() / idx.len() as f64;
            assert!((report.group_mae[g].unwrap() - m).abs() < 1e-12);
            per.push(m);
        }
        let sigma = (per.iter().map(|m| (m - overall) * (m - overall)).sum::<f64>() / per.len() as f64).sqrt();
        assert!((report.sigma - sigma).abs() < 1e-12);
        assert!((report.aar - ((7.0 - overall).max(0.0) + (3.0 - sigma).max(0.0))).abs() < 1e-12);
        let eps = 1.0 - (0..n).map(|i| (-(preds[i] - labels[i]).powi(2) / (2.0 * stds[i] * stds[i])).exp()).sum::<f64>() / n as f64;
        assert!((report.epsilon_error.unwrap() - eps).abs() < 1e-12);
    }

    #[test]
    fn empty_groups_drop_out_of_sigma() {
        let r = aar(&[20.0, 30.0, 70.0], &[21.0, 33.0, 70.0], &[2, 2, 3], None).unwrap();
        assert_eq!(r.sigma_groups, 2);
        assert_eq!(r.group_mae[0], None);
        assert!(aar(&[1.0], &[1.0], &[4], None).is_err());
    }

    #[test]
    fn equal_group_errors_have_zero_sigma() {
        let r = aar(&[1.0, 14.0, 21.0, 72.0], &[2.0, 15.0, 20.0, 71.0], &[0, 1, 2, 3], None).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.aar, 6.0 + 3.0);
    }

    #[test]
    fn csv_has_a_row_per_group_plus_overall() {
        let r = aar(&[1.0, 14.0, 21.0], &[2.0, 15.0, 20.0], &[0, 1, 2], None).unwrap();
        let csv = r.to_csv(1);
        assert_eq!(csv.lines().count(), 1 + GROUP_COUNT + 1);
    }

    proptest! {
        #[test]
        fn mae_is_translation_invariant(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..20), c in -50.0f64..50.0) {
            let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let shifted_p: Vec<f64> = p.iter().map(|x| x + c).collect();
            let shifted_l: Vec<f64> = l.iter().map(|x| x + c).collect();
            let a = mae(&p, &l).unwrap();
            let b = mae(&shifted_p, &shifted_l).unwrap();
            // the shift is applied in floating point on both sides
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn aar_is_monotone(m1 in 0.0f64..10.0, m2 in 0.0f64..10.0, s in 0.0f64..5.0) {
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            prop_assert!(aar_score(hi, s) <= aar_score(lo, s));
            prop_assert!(aar_score(s, hi) <= aar_score(s, lo));
        }

        #[test]
        fn epsilon_stays_in_unit_interval(v in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..10.0), 1..20)) {
            let p: Vec<f64> = v.iter().map(|t| t.0).collect();
            let l: Vec<f64> = v.iter().map(|t| t.1).collect();
            let s: Vec<f64> = v.iter().map(|t| t.2).collect();
            let e = epsilon_error(&p, &l, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
