//! Test-time augmentation and trimmed-mean aggregation of fused grade
//! scores across checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply, Transform};
use crate::data::{Dataset, Grade};
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, ThreeHeadModel};
use crate::scalar::Scalar;
use crate::GRADE_CAP;

/// Fraction trimmed from *each* tail before averaging; 0.25 keeps the
/// central half of the members.
pub const DEFAULT_TRIM: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub tta: Vec<Transform>,
    pub trim: f64,
    pub emit_raw: bool,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config(format!(
                "trim fraction must be in [0, 0.5), got {}",
                self.trim
            )));
        }
        if self.tta.is_empty() {
            return Err(Error::Config("TTA set must not be empty".into()));
        }
        for t in &self.tta {
            if !t.is_deterministic() {
                return Err(Error::Config(format!(
                    "TTA transform '{}' is not deterministic",
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let mut tta = vec![Transform::Identity];
        tta.extend(crate::augment::default_tta_kinds());
        EnsembleConfig { tta, trim: DEFAULT_TRIM, emit_raw: false }
    }
}

/// Mean after sorting and dropping floor(trim * n) values at each end.
pub fn trimmed_mean(values: &[f64], trim: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("trimmed mean of an empty list".into()));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Metric(format!(
            "trim fraction must be in [0, 0.5), got {trim}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value in trimmed mean".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = (trim * sorted.len() as f64).floor() as usize;
    let kept = &sorted[drop..sorted.len() - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Clamp into [0, GRADE_CAP] then round half away from zero.
pub fn round_to_grade(score: f64) -> Result<Grade> {
    if score.is_nan() {
        return Err(Error::Metric("cannot round NaN to a grade".into()));
    }
    let clamped = score.clamp(0.0, GRADE_CAP);
    Grade::new(clamped.round() as u8)
        .ok_or_else(|| Error::Metric(format!("score {score} rounded outside the grade range")))
}

/// Fused scalar for one image under each TTA transform, in TTA order,
/// clamped into the valid grade score range. Evaluation mode throughout.
pub fn predict_one<S: Scalar>(
    model: &ThreeHeadModel<S>,
    image: &crate::tensor::Tensor<S>,
    tta: &[Transform],
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scores = Vec::with_capacity(tta.len());
    for t in tta {
        let view = apply(t, image)?;
        let shape = view.shape().to_vec();
        let batch = view.reshaped(&[1, shape[0], shape[1], shape[2]]);
        let (outs, _) = forward(model, batch, Mode::Eval, &mut rng)?;
        let fused = outs[0].fused.as_f64();
        scores.push(fused.clamp(0.0, GRADE_CAP));
    }
    Ok(scores)
}

#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub id: String,
    /// One score per (model, transform) pair, models outermost.
    pub raw: Vec<f64>,
    pub aggregated: f64,
    pub grade: Grade,
}

/// Predict every sample in the dataset with every model under every TTA
/// transform and aggregate with the trimmed mean.
pub fn ensemble_predict<S: Scalar>(
    models: &[ThreeHeadModel<S>],
    dataset: &Dataset<S>,
    config: &EnsembleConfig,
) -> Result<Vec<PredictionRecord>> {
    config.validate()?;
    if models.is_empty() {
        return Err(Error::Config("ensemble needs at least one model".into()));
    }
    let mut records = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let mut raw = Vec::with_capacity(models.len() * config.tta.len());
        for model in models {
            raw.extend(predict_one(model, &sample.pixels, &config.tta)?);
        }
        let aggregated = trimmed_mean(&raw, config.trim)?;
        records.push(PredictionRecord {
            id: sample.id.clone(),
            raw,
            aggregated,
            grade: round_to_grade(aggregated)?,
        });
    }
    Ok(records)
}

/// Column names for the raw scores: `raw_m{model}_{transform}`.
pub fn raw_column_names(n_models: usize, tta: &[Transform]) -> Vec<String> {
    let mut names = Vec::with_capacity(n_models * tta.len());
    for m in 0..n_models {
        for t in tta {
            names.push(format!("raw_m{m}_{}", t.name()));
        }
    }
    names
}

/// `id,aggregated,grade` plus optional raw columns.
pub fn predictions_to_csv(
    records: &[PredictionRecord],
    raw_names: Option<&[String]>,
) -> String {
    let mut out = String::from("id,aggregated,grade");
    if let Some(names) = raw_names {
        for n in names {
            out.push(',');
            out.push_str(n);
        }
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{:.6},{}", r.id, r.aggregated, r.grade.value()));
        if raw_names.is_some() {
            for v in &r.raw {
                out.push_str(&format!(",{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn trimmed_mean_hand_cases() {
        // n = 5, trim 0.25 -> drop floor(1.25) = 1 from each end.
        let v = [0.0, 1.0, 2.0, 3.0, 100.0];
        assert_eq!(trimmed_mean(&v, 0.25).unwrap(), 2.0);
        // trim 0 is the plain mean.
        assert_eq!(trimmed_mean(&v, 0.0).unwrap(), 21.2);
        // Single element.
        assert_eq!(trimmed_mean(&[7.5], 0.25).unwrap(), 7.5);
    }

    #[test]
    fn trimmed_mean_errors() {
        assert!(trimmed_mean(&[], 0.25).is_err());
        assert!(trimmed_mean(&[1.0], 0.5).is_err());
        assert!(trimmed_mean(&[1.0], -0.1).is_err());
        assert!(trimmed_mean(&[f64::NAN], 0.25).is_err());
    }

    #[test]
    fn trimmed_mean_permutation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let tm = trimmed_mean(&v, 0.25).unwrap();
            let mut shuffled = v.clone();
            // Fisher-Yates.
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            assert_eq!(trimmed_mean(&shuffled, 0.25).unwrap(), tm);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(tm >= lo - 1e-12 && tm <= hi + 1e-12);
        }
    }

    // Independent oracle: recompute with explicit index arithmetic.
    #[test]
    fn trimmed_mean_matches_oracle_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=40);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let trim = rng.gen_range(0.0..0.49);
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = (trim * n as f64).floor() as usize;
            let oracle: f64 = s[d..n - d].iter().sum::<f64>() / (n - 2 * d) as f64;
            assert!((trimmed_mean(&v, trim).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn trimmed_mean_robust_to_corrupted_member() {
        // 19 values near 2.0 plus one wild outlier: the trimmed mean stays
        // near 2 while the plain mean does not.
        let mut v = vec![2.0; 19];
        v.push(1000.0);
        let tm = trimmed_mean(&v, 0.25).unwrap();
        assert!((tm - 2.0).abs() < 1e-12);
        let mean = trimmed_mean(&v, 0.0).unwrap();
        assert!(mean > 50.0);
    }

    #[test]
    fn rounding_cases() {
        assert_eq!(round_to_grade(0.0).unwrap().value(), 0);
        assert_eq!(round_to_grade(0.5).unwrap().value(), 1);
        assert_eq!(round_to_grade(2.49).unwrap().value(), 2);
        assert_eq!(round_to_grade(2.5).unwrap().value(), 3);
        assert_eq!(round_to_grade(4.2).unwrap().value(), 4);
        // Above the cap: clamped to 4.499 then rounded to 4.
        assert_eq!(round_to_grade(4.9).unwrap().value(), 4);
        assert_eq!(round_to_grade(100.0).unwrap().value(), 4);
        assert_eq!(round_to_grade(-3.0).unwrap().value(), 0);
        assert!(round_to_grade(f64::NAN).is_err());
    }

    #[test]
    fn predict_one_identity_first_and_deterministic() {
        let model = ThreeHeadModel::<f64>::new_default(4).unwrap();
        let mut img = crate::tensor::Tensor::zeros(&[3, 16, 16]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f64 / 17.0;
        }
        let tta = crate::augment::tta_set(&crate::augment::default_tta_kinds()).unwrap();
        let a = predict_one(&model, &img, &tta).unwrap();
        let b = predict_one(&model, &img, &tta).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        for v in &a {
            assert!((0.0..=GRADE_CAP).contains(v));
        }
        // Identity member equals a bare forward pass.
        let bare = predict_one(&model, &img, &[Transform::Identity]).unwrap();
        assert_eq!(a[0], bare[0]);
    }

    #[test]
    fn ensemble_shapes_and_csv() {
        let models = vec![
            ThreeHeadModel::<f64>::new_default(1).unwrap(),
            ThreeHeadModel::<f64>::new_default(2).unwrap(),
        ];
        let cfg = crate::data::SyntheticConfig::domain_a(6, 99);
        let ds = crate::data::generate_synthetic::<f64>(&cfg).unwrap();
        let ens = EnsembleConfig::default();
        let recs = ensemble_predict(&models, &ds, &ens).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            assert_eq!(r.raw.len(), 2 * ens.tta.len());
            assert!((0.0..=GRADE_CAP).contains(&r.aggregated));
        }
        let names = raw_column_names(2, &ens.tta);
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "raw_m0_identity");
        let csv = predictions_to_csv(&recs, Some(&names));
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("id,aggregated,grade,raw_m0_identity"));
        assert_eq!(csv.lines().count(), 7);
        let no_raw = predictions_to_csv(&recs, None);
        assert_eq!(no_raw.lines().next().unwrap(), "id,aggregated,grade");
    }

    #[test]
    fn ensemble_rejects_bad_config() {
        let models = vec![ThreeHeadModel::<f64>::new_default(1).unwrap()];
        let cfg = crate::data::SyntheticConfig::domain_a(5, 1);
        let ds = crate::data::generate_synthetic::<f64>(&cfg).unwrap();
        let mut ens = EnsembleConfig::default();
        ens.trim = 0.5;
        assert!(ensemble_predict(&models, &ds, &ens).is_err());
        let ens = EnsembleConfig::default();
        let empty: Vec<ThreeHeadModel<f64>> = vec![];
        assert!(ensemble_predict(&empty, &ds, &ens).is_err());
    }
}
