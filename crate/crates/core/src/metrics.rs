//! Segmentation quality and uncertainty-quality metrics: Dice, sample
//! uncertainty, Dice/uncertainty correlation, pixel ECE and
//! uncertainty–error mutual information.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::mask::Mask;
use crate::numerics::pearson;
use crate::uncertainty::UncertaintyMap;

/// `2|P∩G| / (|P|+|G|)` pooled over the foreground classes; 1 when both
/// foregrounds are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        total += (p != 0) as usize + (g != 0) as usize;
        inter += (p != 0 && p == g) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Sum of the uncertainty map over the number of predicted foreground
/// pixels.
pub fn sample_uncertainty(u: &UncertaintyMap, pred: &Mask) -> Result<f64> {
    check_spatial(u, pred)?;
    let fg = pred.foreground_count();
    if fg == 0 {
        return Err(CrispError::EmptyForeground(
            "sample uncertainty is undefined without predicted foreground".into(),
        ));
    }
    Ok(u.values.iter().sum::<f64>() / fg as f64)
}

fn check_spatial(u: &UncertaintyMap, m: &Mask) -> Result<()> {
    if (u.height, u.width) != (m.height(), m.width()) {
        return Err(CrispError::Dimension(format!(
            "uncertainty map {}x{} vs mask {}x{}",
            u.height,
            u.width,
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Pixels where the prediction disagrees with the ground truth.
pub fn error_map(pred: &Mask, gt: &Mask) -> Result<Vec<bool>> {
    pred.check_same_shape(gt)?;
    Ok(pred.labels().iter().zip(gt.labels()).map(|(p, g)| p != g).collect())
}

/// `|pearson(dice, sample_uncertainty)|` over the records that have a
/// defined sample uncertainty.
pub fn correlation_metric(records: &[SampleRecord]) -> Result<f64> {
    let (dice, unc): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.sample_uncertainty.map(|u| (r.dice, u)))
        .unzip();
    Ok(pearson(&dice, &unc)?.abs())
}

/// Equal-width bins over `[0,1]` with right-inclusive edges; `0` joins the
/// first bin.
fn ece_bin(c: f64, bins: usize) -> usize {
    ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Expected calibration error: `Σ_b (|B_b|/n)·|acc(B_b) − conf(B_b)|`.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(CrispError::Dimension(format!(
            "{} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(CrispError::Config("ECE needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CrispError::Input(format!("confidence {c} outside [0,1]")));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ece_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Mutual information (nats) between the uncertainty map, quantized into
/// `u_bins` equal-width bins, and the binary error map.
pub fn uncertainty_error_mi(u: &UncertaintyMap, errors: &[bool], u_bins: usize) -> Result<f64> {
    if u.values.len() != errors.len() {
        return Err(CrispError::Dimension(format!(
            "{} uncertainty values vs {} error flags",
            u.values.len(),
            errors.len()
        )));
    }
    if u_bins < 2 {
        return Err(CrispError::Config("MI needs at least two uncertainty bins".into()));
    }
    if errors.is_empty() {
        return Ok(0.0);
    }
    let mut joint = vec![[0usize; 2]; u_bins];
    for (&v, &e) in u.values.iter().zip(errors) {
        let b = ((v.clamp(0.0, 1.0) * u_bins as f64).floor() as usize).min(u_bins - 1);
        joint[b][e as usize] += 1;
    }
    let n = errors.len() as f64;
    let p_e = [0, 1].map(|e| joint.iter().map(|row| row[e]).sum::<usize>() as f64 / n);
    let mut mi = 0.0;
    for row in &joint {
        let p_u = (row[0] + row[1]) as f64 / n;
        for e in 0..2 {
            if row[e] > 0 {
                let p = row[e] as f64 / n;
                mi += p * (p / (p_u * p_e[e])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub ece_bins: usize,
    pub mi_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { ece_bins: 10, mi_bins: 32 }
    }
}

/// Per-test-image quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub dice: f64,
    /// `None` when the prediction has no foreground.
    pub sample_uncertainty: Option<f64>,
    pub error_pixel_count: usize,
    pub mi: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub ece_bins: usize,
    pub mi_bins: usize,
    pub mi_unit: String,
    pub ece_binning: String,
    pub confidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` when the correlation is undefined (e.g. constant columns).
    pub correlation: Option<f64>,
    pub correlation_degenerate: bool,
    pub ece: f64,
    pub weighted_mi: f64,
    /// Every prediction was perfect, so no sample carries MI weight.
    pub all_perfect: bool,
    pub samples: usize,
    pub excluded_from_correlation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub per_sample: Vec<SampleRecord>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn records(&self) -> &[SampleRecord] {
        &self.per_sample
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("index,dice,sample_uncertainty,error_pixels,mi,ece\n");
        for r in &self.per_sample {
            let su = r.sample_uncertainty.map_or_else(String::new, |v| v.to_string());
            writeln!(out, "{},{},{},{},{},{}", r.index, r.dice, su, r.error_pixel_count, r.mi, r.ece).unwrap();
        }
        out
    }
}

/// Scores aligned lists of ground truths, predictions and uncertainty maps.
/// ECE pools every pixel of every sample, using confidence `1 − u`.
pub fn evaluate(gts: &[Mask], preds: &[Mask], maps: &[UncertaintyMap], config: &MetricsConfig) -> Result<EvalReport> {
    if gts.len() != preds.len() || gts.len() != maps.len() {
        return Err(CrispError::Input(format!(
            "{} ground truths, {} predictions, {} maps",
            gts.len(),
            preds.len(),
            maps.len()
        )));
    }
    if gts.is_empty() {
        return Err(CrispError::Input("nothing to evaluate".into()));
    }
    let mut records = Vec::with_capacity(gts.len());
    let mut pooled_conf = Vec::new();
    let mut pooled_ok = Vec::new();
    for (index, ((gt, pred), u)) in gts.iter().zip(preds).zip(maps).enumerate() {
        check_spatial(u, pred)?;
        let errors = error_map(pred, gt)?;
        let conf = u.confidences();
        let ok: Vec<bool> = errors.iter().map(|e| !e).collect();
        let sample_u = match sample_uncertainty(u, pred) {
            Ok(v) => Some(v),
            Err(CrispError::EmptyForeground(_)) => None,
            Err(e) => return Err(e),
        };
        records.push(SampleRecord {
            index,
            dice: dice_score(pred, gt)?,
            sample_uncertainty: sample_u,
            error_pixel_count: errors.iter().filter(|&&e| e).count(),
            mi: uncertainty_error_mi(u, &errors, config.mi_bins)?,
            ece: ece(&conf, &ok, config.ece_bins)?,
        });
        pooled_conf.extend(conf);
        pooled_ok.extend(ok);
    }
    let total_errors: usize = records.iter().map(|r| r.error_pixel_count).sum();
    let weighted_mi = if total_errors == 0 {
        0.0
    } else {
        records.iter().map(|r| r.mi * r.error_pixel_count as f64).sum::<f64>() / total_errors as f64
    };
    let correlation = correlation_metric(&records).ok();
    Ok(EvalReport {
        config: ReportConfig {
            ece_bins: config.ece_bins,
            mi_bins: config.mi_bins,
            mi_unit: "nats".into(),
            ece_binning: "equal-width, right-inclusive, pooled over all pixels".into(),
            confidence: "1 - uncertainty".into(),
        },
        aggregate: Aggregate {
            correlation,
            correlation_degenerate: correlation.is_none(),
            ece: ece(&pooled_conf, &pooled_ok, config.ece_bins)?,
            weighted_mi,
            all_perfect: total_errors == 0,
            samples: records.len(),
            excluded_from_correlation: records.iter().filter(|r| r.sample_uncertainty.is_none()).count(),
        },
        per_sample: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(size: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut m = Mask::background(size, size, 2);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.labels_mut()[y * size + x] = 1;
            }
        }
        m
    }

    fn umap(h: usize, w: usize, v: Vec<f64>) -> UncertaintyMap {
        UncertaintyMap::new(h, w, v).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = square(20, 5, 5, 10);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &square(20, 0, 15, 4)).unwrap(), 0.0);
        assert!((dice_score(&a, &square(20, 5, 6, 10)).unwrap() - 0.9).abs() < 1e-15);
        let empty = Mask::background(20, 20, 2);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert!(dice_score(&a, &Mask::background(20, 19, 2)).is_err());
    }

    #[test]
    fn dice_counts_class_agreement() {
        let a = Mask::new(1, 4, 3, vec![1, 2, 2, 0]).unwrap();
        let b = Mask::new(1, 4, 3, vec![1, 1, 2, 0]).unwrap();
        // |P∩G| = 2 (pixels 0 and 2), |P| = |G| = 3
        assert!((dice_score(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_permutation_invariant(a in proptest::collection::vec(0u8..3, 16), b in proptest::collection::vec(0u8..3, 16)) {
            let ma = Mask::new(4, 4, 3, a.clone()).unwrap();
            let mb = Mask::new(4, 4, 3, b.clone()).unwrap();
            prop_assert_eq!(dice_score(&ma, &mb).unwrap(), dice_score(&mb, &ma).unwrap());
            let swap = |v: &[u8]| v.iter().map(|&l| match l { 1 => 2, 2 => 1, x => x }).collect::<Vec<_>>();
            let pa = Mask::new(4, 4, 3, swap(&a)).unwrap();
            let pb = Mask::new(4, 4, 3, swap(&b)).unwrap();
            prop_assert_eq!(dice_score(&ma, &mb).unwrap(), dice_score(&pa, &pb).unwrap());
        }

        #[test]
        fn correlation_invariant_to_increasing_affine(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<SampleRecord> = (0..8).map(|i| record(i, rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0))).collect();
            let moved: Vec<SampleRecord> = recs.iter().map(|r| SampleRecord {
                sample_uncertainty: r.sample_uncertainty.map(|u| u * scale + shift),
                ..r.clone()
            }).collect();
            let a = correlation_metric(&recs).unwrap();
            let b = correlation_metric(&moved).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn mi_is_non_negative(vals in proptest::collection::vec(0.0f64..=1.0, 30), errs in proptest::collection::vec(any::<bool>(), 30)) {
            let mi = uncertainty_error_mi(&umap(5, 6, vals), &errs, 8).unwrap();
            prop_assert!(mi >= 0.0);
        }

        #[test]
        fn ece_confidence_uncertainty_duality(us in proptest::collection::vec(0.0f64..=1.0, 20), ok in proptest::collection::vec(any::<bool>(), 20)) {
            let map = umap(4, 5, us.clone());
            let conf: Vec<f64> = us.iter().map(|u| 1.0 - u).collect();
            prop_assert_eq!(ece(&conf, &ok, 10).unwrap(), ece(&map.confidences(), &ok, 10).unwrap());
        }
    }

    fn record(index: usize, dice: f64, u: f64) -> SampleRecord {
        SampleRecord {
            index,
            dice,
            sample_uncertainty: Some(u),
            error_pixel_count: 0,
            mi: 0.0,
            ece: 0.0,
        }
    }

    #[test]
    fn sample_uncertainty_cases() {
        let pred = Mask::new(2, 2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(sample_uncertainty(&UncertaintyMap::zeros(2, 2), &pred).unwrap(), 0.0);
        assert_eq!(sample_uncertainty(&umap(2, 2, vec![1.0; 4]), &pred).unwrap(), 2.0);
        assert!(matches!(
            sample_uncertainty(&UncertaintyMap::zeros(2, 2), &Mask::background(2, 2, 2)),
            Err(CrispError::EmptyForeground(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let pred = Mask::new(8, 8, 3, labels.clone()).unwrap();
        let mut sum = 0.0;
        let mut fg = 0;
        for i in 0..64 {
            sum += vals[i];
            if labels[i] > 0 {
                fg += 1;
            }
        }
        let got = sample_uncertainty(&umap(8, 8, vals), &pred).unwrap();
        assert!((got - sum / fg as f64).abs() < 1e-12);
    }

    #[test]
    fn correlation_cases() {
        let recs: Vec<SampleRecord> = [0.2, 0.5, 0.9, 0.7].iter().enumerate().map(|(i, &d)| record(i, d, 1.0 - d)).collect();
        assert!((correlation_metric(&recs).unwrap() - 1.0).abs() < 1e-12);
        let flat: Vec<SampleRecord> = (0..4).map(|i| record(i, i as f64 / 4.0, 0.3)).collect();
        assert!(matches!(correlation_metric(&flat), Err(CrispError::UndefinedCorrelation(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<SampleRecord> = (0..10).map(|i| record(i, rng.gen_range(0.0..1.0), rng.gen_range(0.0..3.0))).collect();
        let d: Vec<f64> = recs.iter().map(|r| r.dice).collect();
        let u: Vec<f64> = recs.iter().map(|r| r.sample_uncertainty.unwrap()).collect();
        let (md, mu) = (d.iter().sum::<f64>() / 10.0, u.iter().sum::<f64>() / 10.0);
        let cov: f64 = d.iter().zip(&u).map(|(a, b)| (a - md) * (b - mu)).sum::<f64>() / 9.0;
        let sd = (d.iter().map(|a| (a - md).powi(2)).sum::<f64>() / 9.0).sqrt();
        let su = (u.iter().map(|b| (b - mu).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((correlation_metric(&recs).unwrap() - (cov / (sd * su)).abs()).abs() < 1e-12);
    }

    #[test]
    fn ece_cases() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
        assert_eq!(ece(&[1.0; 5], &[false; 5], 10).unwrap(), 1.0);
        let got = ece(&[0.2, 0.2, 0.9, 0.9], &[false, true, true, true], 2).unwrap();
        assert!((got - 0.2).abs() < 1e-15);
        assert!(matches!(ece(&[1.2], &[true], 10), Err(CrispError::Input(_))));
        assert!(ece(&[0.5], &[true, false], 10).is_err());
    }

    #[test]
    fn ece_bin_edges_are_right_inclusive() {
        assert_eq!(ece_bin(0.0, 10), 0);
        assert_eq!(ece_bin(0.1, 10), 0);
        assert_eq!(ece_bin(0.1000001, 10), 1);
        assert_eq!(ece_bin(1.0, 10), 9);
        assert_eq!(ece_bin(0.5, 2), 0);
    }

    #[test]
    fn mi_cases() {
        let constant = umap(2, 2, vec![0.4; 4]);
        assert_eq!(uncertainty_error_mi(&constant, &[true, false, true, false], 32).unwrap(), 0.0);
        let errs = [true, false, true, false, false, true];
        let indicator = umap(2, 3, errs.iter().map(|&e| e as u8 as f64).collect());
        let mi = uncertainty_error_mi(&indicator, &errs, 32).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mi_matches_naive_joint_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let errs: Vec<bool> = vals.iter().map(|v| rng.gen_bool(0.3 + 0.4 * v)).collect();
        let bins = 4;
        let bin_of = |v: f64| if v >= 1.0 { bins - 1 } else { (v * bins as f64) as usize };
        let mut mi = 0.0;
        for b in 0..bins {
            for e in [false, true] {
                let joint = (0..64).filter(|&i| bin_of(vals[i]) == b && errs[i] == e).count() as f64 / 64.0;
                let pu = (0..64).filter(|&i| bin_of(vals[i]) == b).count() as f64 / 64.0;
                let pe = (0..64).filter(|&i| errs[i] == e).count() as f64 / 64.0;
                if joint > 0.0 {
                    mi += joint * (joint / (pu * pe)).ln();
                }
            }
        }
        let got = uncertainty_error_mi(&umap(8, 8, vals), &errs, bins).unwrap();
        assert!((got - mi).abs() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let gts = vec![square(8, 2, 2, 3), square(8, 1, 1, 4)];
        let maps = vec![UncertaintyMap::zeros(8, 8), umap(8, 8, vec![0.1; 64])];
        let r = evaluate(&gts, &gts, &maps, &MetricsConfig::default()).unwrap();
        assert!(r.per_sample.iter().all(|s| s.dice == 1.0));
        assert_eq!(r.aggregate.weighted_mi, 0.0);
        assert!(r.aggregate.all_perfect);
        assert!(r.aggregate.correlation_degenerate);
    }

    #[test]
    fn evaluate_singleton_mi() {
        let gt = square(8, 2, 2, 4);
        let pred = square(8, 2, 3, 4);
        let errs = error_map(&pred, &gt).unwrap();
        let u = umap(8, 8, errs.iter().map(|&e| if e { 0.9 } else { 0.05 }).collect());
        let r = evaluate(&[gt], &[pred], &[u.clone()], &MetricsConfig::default()).unwrap();
        assert_eq!(r.aggregate.weighted_mi, r.per_sample[0].mi);
        assert!(r.per_sample[0].mi > 0.0);
    }

    #[test]
    fn evaluate_three_sample_hand_case() {
        // 1x4 images, binary
        let m = |v: Vec<u8>| Mask::new(1, 4, 2, v).unwrap();
        let gts = vec![m(vec![1, 1, 0, 0]), m(vec![1, 1, 1, 0]), m(vec![0, 1, 1, 0])];
        let preds = vec![m(vec![1, 1, 0, 0]), m(vec![1, 0, 0, 0]), m(vec![1, 1, 0, 0])];
        let maps = vec![
            umap(1, 4, vec![0.0, 0.0, 0.0, 0.0]),
            umap(1, 4, vec![0.0, 1.0, 1.0, 0.0]),
            umap(1, 4, vec![1.0, 0.0, 0.5, 0.0]),
        ];
        let r = evaluate(&gts, &preds, &maps, &MetricsConfig { ece_bins: 2, mi_bins: 2 }).unwrap();
        let dice: Vec<f64> = r.per_sample.iter().map(|s| s.dice).collect();
        assert_eq!(dice, vec![1.0, 0.5, 0.5]);
        let su: Vec<f64> = r.per_sample.iter().map(|s| s.sample_uncertainty.unwrap()).collect();
        assert_eq!(su, vec![0.0, 2.0, 0.75]);
        let errs: Vec<usize> = r.per_sample.iter().map(|s| s.error_pixel_count).collect();
        assert_eq!(errs, vec![0, 2, 2]);
        // sample 1: u bins {0,1,1,0} equal the error flags with p(e)=1/2 → ln 2
        assert!((r.per_sample[1].mi - 2f64.ln()).abs() < 1e-12);
        // sample 2: u bins {1,0,1,0} (0.5 falls in the lower bin → bin 1 since floor(0.5·2)=1),
        // errors {1,0,1,0} → also a perfect indicator
        assert!((r.per_sample[2].mi - 2f64.ln()).abs() < 1e-12);
        assert!((r.aggregate.weighted_mi - 2f64.ln()).abs() < 1e-12);
        // pooled ECE: confidences {1,1,1,1, 1,0,0,1, 0,1,0.5,1}; correct {T,T,T,T, T,F,F,T, F,T,F,T}
        // bin (0.5,1]: 8 pixels at conf 1, all correct → gap 0
        // bin [0,0.5]: conf {0,0,0,0.5}, all wrong → acc 0, conf 0.125 → weight 4/12
        assert!((r.aggregate.ece - (4.0 / 12.0) * 0.125).abs() < 1e-15);
        // correlation over (1,0), (0.5,2), (0.5,0.75)
        let want = pearson(&[1.0, 0.5, 0.5], &[0.0, 2.0, 0.75]).unwrap().abs();
        assert!((r.aggregate.correlation.unwrap() - want).abs() < 1e-15);
        assert!(r.per_sample_csv().starts_with("index,dice,sample_uncertainty,error_pixels,mi,ece\n"));
    }

    #[test]
    fn evaluate_rejects_misaligned_inputs() {
        let gt = square(8, 2, 2, 3);
        assert!(matches!(
            evaluate(&[gt.clone()], &[], &[], &MetricsConfig::default()),
            Err(CrispError::Input(_))
        ));
        assert!(evaluate(&[gt.clone()], &[gt], &[UncertaintyMap::zeros(4, 4)], &MetricsConfig::default()).is_err());
    }

    #[test]
    fn empty_prediction_is_excluded_from_correlation() {
        let gts = vec![square(8, 2, 2, 3), square(8, 1, 1, 4), square(8, 3, 3, 2)];
        let preds = vec![square(8, 2, 2, 3), square(8, 1, 1, 3), Mask::background(8, 8, 2)];
        let maps = vec![umap(8, 8, vec![0.01; 64]), umap(8, 8, vec![0.2; 64]), umap(8, 8, vec![0.5; 64])];
        let r = evaluate(&gts, &preds, &maps, &MetricsConfig::default()).unwrap();
        assert_eq!(r.aggregate.excluded_from_correlation, 1);
        assert!(r.per_sample[2].sample_uncertainty.is_none());
        assert!(r.aggregate.correlation.is_some());
    }
}
