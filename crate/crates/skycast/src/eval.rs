//! Persistence baseline, error metrics, skill scores and per-weather
//! reports.
//!
//! Errors are computed in watts: predicted variations leave normalized
//! log space through the inverse transform before any metric. The
//! persistence baseline is recomputed inside [`evaluate`] on the exact
//! same sample set, so the skill-score denominator can never drift from
//! the filtered samples.

use crate::batching::assemble_batch;
use crate::datapipe::{
    transform::{q_from_watts, watts_from_q},
    Dataset, ExposureSelection, Sample, WeatherClass,
};
use crate::models::Model;
use crate::tensor::Element;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric over an empty sample list")]
    EmptyInput,
    #[error("skill score undefined: baseline error is zero")]
    ZeroBaseline,
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// The persistence model: the future power equals the current power.
pub fn persistence_predict(sample: &Sample) -> f64 {
    sample.watts_t0
}

/// Mean absolute error, watts.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::EmptyInput);
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Root mean squared error, watts.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::EmptyInput);
    }
    Ok((pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

/// Forecast skill score: (1 − E_pred / E_base) · 100%.
pub fn skill_score(e_pred: f64, e_base: f64) -> Result<f64> {
    if e_base == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok((1.0 - e_pred / e_base) * 100.0)
}

/// Model watts at t₀+x, following p̂ = p_t₀ + Δp̂ with the variation
/// linearized from normalized log space. A zero Δq̂ yields exactly the
/// persistence value.
pub fn predicted_watts(sample: &Sample, delta_q_hat: f64, alpha: f64) -> f64 {
    let q0 = q_from_watts(sample.watts_t0, alpha);
    let delta_watts = watts_from_q(q0 + delta_q_hat, alpha) - watts_from_q(q0, alpha);
    (sample.watts_t0 + delta_watts).max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub count: usize,
    pub mae_w: f64,
    pub rmse_w: f64,
    pub ss_mae_pct: f64,
    pub ss_rmse_pct: f64,
}

/// Per-class and aggregate metrics for one model on one sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub horizon_minutes: u32,
    /// FNV-1a hash of the (day, t₀) pairs; identical hashes guarantee
    /// the model and its persistence baseline saw the same samples.
    pub sample_set_hash: String,
    /// Ordered clear, partly, overcast, all; empty classes are omitted.
    pub classes: Vec<ClassReport>,
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == name)
    }
}

/// FNV-1a over the sample identities, for the shared-set assertion.
pub fn sample_set_hash(samples: &[&Sample]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for s in samples {
        feed(s.day_index as u64);
        feed(s.t0 as u64);
    }
    format!("fnv1a:{h:016x}")
}

/// Per-sample prediction rows for external plotting (day curves).
#[derive(Debug, Clone, Serialize)]
pub struct PredictionRow {
    pub timestamp: i64,
    pub truth_w: f64,
    pub persistence_w: f64,
    pub prediction_w: f64,
}

/// Eval-mode Δq̂ for every sample, in order, batched for speed.
pub fn predict_all<T: Element>(
    model: &mut Model<T>,
    dataset: &Dataset,
    samples: &[&Sample],
    selection: ExposureSelection,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let with_images = model.kind().uses_images();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = assemble_batch::<T>(dataset, chunk, selection, with_images);
        let deltas = model.predict_batch(&batch)?;
        out.extend(deltas.into_iter().map(|d| d.to_f64_val()));
    }
    Ok(out)
}

/// Full prediction rows (truth, persistence, model watts) per sample.
pub fn prediction_rows<T: Element>(
    model: &mut Model<T>,
    dataset: &Dataset,
    samples: &[&Sample],
    alpha: f64,
    selection: ExposureSelection,
) -> Result<Vec<PredictionRow>> {
    let deltas = predict_all(model, dataset, samples, selection, 64)?;
    Ok(samples
        .iter()
        .zip(deltas)
        .map(|(s, d)| PredictionRow {
            timestamp: s.t0 + s.horizon_minutes as i64 * 60,
            truth_w: s.watts_target,
            persistence_w: persistence_predict(s),
            prediction_w: predicted_watts(s, d, alpha),
        })
        .collect())
}

pub fn write_prediction_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("timestamp,truth_w,persistence_w,prediction_w\n");
    for r in rows {
        let dt = chrono::DateTime::from_timestamp(r.timestamp, 0).expect("valid time");
        out.push_str(&format!(
            "{},{},{},{}\n",
            dt.format("%Y-%m-%dT%H:%M:%SZ"),
            r.truth_w,
            r.persistence_w,
            r.prediction_w
        ));
    }
    out
}

/// Evaluates a model against the persistence baseline on `samples`,
/// stratified by weather class. Deterministic: samples are processed in
/// the given order with an ordered final reduction.
pub fn evaluate<T: Element>(
    model: &mut Model<T>,
    dataset: &Dataset,
    samples: &[&Sample],
    alpha: f64,
    selection: ExposureSelection,
    model_id: &str,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let deltas = predict_all(model, dataset, samples, selection, 64)?;

    let mut report = MetricsReport {
        model_id: model_id.to_string(),
        horizon_minutes: samples[0].horizon_minutes,
        sample_set_hash: sample_set_hash(samples),
        classes: Vec::new(),
    };

    let groups: [(Option<WeatherClass>, &str); 4] = [
        (Some(WeatherClass::Clear), "clear"),
        (Some(WeatherClass::Partly), "partly"),
        (Some(WeatherClass::Overcast), "overcast"),
        (None, "all"),
    ];
    for (class, name) in groups {
        let mut truth = Vec::new();
        let mut model_pred = Vec::new();
        let mut persist = Vec::new();
        for (s, &d) in samples.iter().zip(&deltas) {
            if class.map(|c| s.weather == c).unwrap_or(true) {
                truth.push(s.watts_target);
                model_pred.push(predicted_watts(s, d, alpha));
                persist.push(persistence_predict(s));
            }
        }
        if truth.is_empty() {
            continue; // class omitted from the report
        }
        let mae_m = mae(&model_pred, &truth)?;
        let rmse_m = rmse(&model_pred, &truth)?;
        let mae_p = mae(&persist, &truth)?;
        let rmse_p = rmse(&persist, &truth)?;
        report.classes.push(ClassReport {
            class: name.to_string(),
            count: truth.len(),
            mae_w: mae_m,
            rmse_w: rmse_m,
            ss_mae_pct: skill_score(mae_m, mae_p)?,
            ss_rmse_pct: skill_score(rmse_m, rmse_p)?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{
        DatasetMeta, DayRecords, ExposureStack, GrayImage, MinuteRecord, SolarPosition,
        EXPOSURES_MS, INSTANTS_PER_MINUTE,
    };
    use crate::models::{build_model, ModelConfig, ModelKind};

    #[test]
    fn persistence_is_current_power() {
        let s = dummy_sample(500.0, 600.0);
        assert_eq!(persistence_predict(&s), 500.0);
    }

    #[test]
    fn mae_rmse_hand_values() {
        // errors [3, −4]
        let truth = vec![10.0, 10.0];
        let pred = vec![13.0, 6.0];
        assert!((mae(&pred, &truth).unwrap() - 3.5).abs() < 1e-12);
        assert!((rmse(&pred, &truth).unwrap() - 3.5355339059327378).abs() < 1e-12);
        // errors [0, 0, 6]: RMSE ≥ MAE
        let truth = vec![1.0, 1.0, 1.0];
        let pred = vec![1.0, 1.0, 7.0];
        let m = mae(&pred, &truth).unwrap();
        let r = rmse(&pred, &truth).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
        assert!((r - 12.0f64.sqrt()).abs() < 1e-12);
        assert!(r >= m);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn equal_predictions_zero_error() {
        let v = vec![4.0, 5.0];
        assert_eq!(mae(&v, &v).unwrap(), 0.0);
        assert_eq!(rmse(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn skill_score_formula_and_paper_rows() {
        assert_eq!(skill_score(5.0, 5.0).unwrap(), 0.0);
        // 1-min horizon row: LSTM-Full vs persistence, all-class.
        let ss_mae = skill_score(60.7, 81.6).unwrap();
        assert!((ss_mae - 25.5).abs() < 0.2, "SS-MAE {ss_mae}");
        let ss_rmse = skill_score(140.5, 177.5).unwrap();
        assert!((ss_rmse - 20.8).abs() < 0.2, "SS-RMSE {ss_rmse}");
        assert!(matches!(skill_score(1.0, 0.0), Err(EvalError::ZeroBaseline)));
    }

    #[test]
    fn skill_score_strictly_decreasing_in_prediction_error() {
        let mut last = f64::INFINITY;
        for e in [10.0, 20.0, 30.0, 40.0] {
            let ss = skill_score(e, 25.0).unwrap();
            assert!(ss < last);
            last = ss;
        }
    }

    #[test]
    fn zero_variation_prediction_is_exactly_persistence() {
        let alpha = 1.0 / 2500f64.ln();
        for watts in [1.0, 57.3, 812.0, 2499.0] {
            let s = dummy_sample(watts, watts * 1.1);
            assert_eq!(predicted_watts(&s, 0.0, alpha), watts);
        }
    }

    fn dummy_sample(watts_t0: f64, watts_target: f64) -> Sample {
        Sample {
            day_index: 0,
            weather: WeatherClass::Partly,
            horizon_minutes: 1,
            t0: 600,
            step_minute_idx: (0..6).collect(),
            step_q: vec![0.5; 6],
            step_theta: vec![[0.4, 0.2]; 6],
            watts_t0,
            watts_target,
            delta_q: 0.01,
            delta_theta: [0.001, 0.0005],
            delta_s: 0.002,
        }
    }

    fn tiny_dataset() -> (Dataset, Vec<Sample>, f64) {
        let stack = ExposureStack {
            minute: 0,
            channels: (0..INSTANTS_PER_MINUTE * EXPOSURES_MS.len())
                .map(|_| GrayImage::new(2, vec![0.5; 4]))
                .collect(),
        };
        let mk_minutes = |n: usize| {
            (0..n)
                .map(|i| MinuteRecord {
                    timestamp: i as i64 * 60,
                    power_w: 400.0 + 10.0 * i as f64,
                    stack: stack.clone(),
                    sun: SolarPosition {
                        azimuth: 2.0,
                        elevation: 0.9,
                    },
                    sky_intensity: 0.3,
                })
                .collect::<Vec<_>>()
        };
        let weathers = [
            WeatherClass::Clear,
            WeatherClass::Partly,
            WeatherClass::Overcast,
        ];
        let days = (0..3)
            .map(|d| DayRecords {
                date: chrono::NaiveDate::from_ymd_opt(2017, 6, 1 + d as u32).unwrap(),
                weather: weathers[d],
                minutes: mk_minutes(10),
            })
            .collect();
        let dataset = Dataset {
            meta: DatasetMeta {
                schema_version: 1,
                latitude_deg: 35.0,
                longitude_deg: 135.0,
                panel_capacity_w: 2500.0,
                resolution: 2,
                days: vec![],
            },
            days,
        };
        let alpha = 1.0 / 2500f64.ln();
        let samples: Vec<Sample> = (0..3)
            .flat_map(|d| crate::datapipe::make_samples(&dataset, d, 1, alpha))
            .collect();
        (dataset, samples, alpha)
    }

    fn mlp_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Mlp,
            history_len: 6,
            resolution: 2,
            input_channels: 20,
            seed: 3,
            power_hidden: 8,
            power_latent: 8,
            predictor_width: 8,
            lstm_hidden: 8,
            fire_channels: vec![],
        }
    }

    #[test]
    fn fresh_model_has_exactly_zero_skill() {
        let (dataset, samples, alpha) = tiny_dataset();
        assert!(!samples.is_empty());
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut model = build_model::<f64>(mlp_config()).unwrap();
        let report = evaluate(
            &mut model,
            &dataset,
            &refs,
            alpha,
            ExposureSelection::All,
            "mlp-fresh",
        )
        .unwrap();
        for class in &report.classes {
            assert_eq!(class.ss_mae_pct, 0.0, "{}", class.class);
            assert_eq!(class.ss_rmse_pct, 0.0, "{}", class.class);
        }
        // Aggregate count equals the sum of class counts.
        let all = report.class("all").unwrap();
        let sum: usize = report
            .classes
            .iter()
            .filter(|c| c.class != "all")
            .map(|c| c.count)
            .sum();
        assert_eq!(all.count, sum);
        assert_eq!(report.sample_set_hash, sample_set_hash(&refs));
    }

    #[test]
    fn missing_class_is_omitted() {
        let (dataset, samples, alpha) = tiny_dataset();
        let refs: Vec<&Sample> = samples
            .iter()
            .filter(|s| s.weather == WeatherClass::Partly)
            .collect();
        let mut model = build_model::<f64>(mlp_config()).unwrap();
        let report = evaluate(
            &mut model,
            &dataset,
            &refs,
            alpha,
            ExposureSelection::All,
            "m",
        )
        .unwrap();
        assert!(report.class("clear").is_none());
        assert!(report.class("partly").is_some());
        assert!(report.class("all").is_some());
    }
}
