//! Displacement metrics. ADE at a horizon is the mean Euclidean error over
//! every step up to the horizon, FDE the error at the horizon itself. Both
//! are averaged over samples at 1..6 s lookaheads (two steps per second).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::map::sample::Sample;
use crate::model::{forward, ModelConfig, PredictorParams};
use crate::tensor::ParamSet;

pub const FRAMES_PER_SECOND: usize = 2;
pub const REPORT_HORIZONS_S: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Anything that can turn a sample into displacement predictions relative
/// to the sample's last observed position.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, sample: &Sample) -> Result<Vec<[f64; 2]>>;
}

/// (ADE, FDE) of the first `steps` predicted displacements.
pub fn ade_fde(pred: &[[f64; 2]], target: &[[f64; 2]], steps: usize) -> Result<(f64, f64)> {
    if steps == 0 {
        return Err(Error::Eval("horizon of zero steps".into()));
    }
    if pred.len() < steps || target.len() < steps {
        return Err(Error::Eval(format!(
            "horizon needs {} steps, prediction has {} and target {}",
            steps,
            pred.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut last = 0.0;
    for j in 0..steps {
        let dx = pred[j][0] - target[j][0];
        let dy = pred[j][1] - target[j][1];
        last = (dx * dx + dy * dy).sqrt();
        sum += last;
    }
    Ok((sum / steps as f64, last))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonRow {
    pub horizon_s: usize,
    pub steps: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub n_samples: usize,
    pub rows: Vec<HorizonRow>,
}

impl MetricsReport {
    pub fn row(&self, horizon_s: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.horizon_s == horizon_s)
    }
}

/// Evaluates a predictor over samples at the given lookaheads (seconds).
pub fn evaluate(predictor: &dyn Predictor, samples: &[Sample], horizons_s: &[usize]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    if horizons_s.is_empty() {
        return Err(Error::Eval("no horizons requested".into()));
    }
    let max_steps = horizons_s.iter().map(|h| h * FRAMES_PER_SECOND).max().unwrap_or(0);
    for s in samples {
        if s.tau < max_steps {
            return Err(Error::Eval(format!(
                "sample {}/{} predicts {} steps, the longest horizon needs {}",
                s.scenario_id, s.agent_id, s.tau, max_steps
            )));
        }
    }

    let per_sample: Result<Vec<Vec<(f64, f64)>>> = samples
        .par_iter()
        .map(|s| {
            let pred = predictor.predict(s)?;
            horizons_s
                .iter()
                .map(|&h| ade_fde(&pred, &s.target, h * FRAMES_PER_SECOND))
                .collect()
        })
        .collect();
    let per_sample = per_sample?;

    let n = samples.len() as f64;
    let rows = horizons_s
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let (ade, fde) = per_sample
                .iter()
                .fold((0.0, 0.0), |acc, row| (acc.0 + row[k].0, acc.1 + row[k].1));
            HorizonRow {
                horizon_s: h,
                steps: h * FRAMES_PER_SECOND,
                ade: ade / n,
                fde: fde / n,
            }
        })
        .collect();
    Ok(MetricsReport {
        predictor: predictor.name().to_string(),
        n_samples: samples.len(),
        rows,
    })
}

/// The trained model behind the [`Predictor`] interface.
pub struct ModelPredictor {
    pub cfg: ModelConfig,
    pub layout: PredictorParams,
    pub params: ParamSet,
}

impl Predictor for ModelPredictor {
    fn name(&self) -> &str {
        "capsule"
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<[f64; 2]>> {
        forward(&self.cfg, &self.layout, &self.params, sample)
    }
}

/// Fixed-width comparison table, one predictor per row, ADE/FDE per column.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let horizons: Vec<usize> = reports
        .first()
        .map(|r| r.rows.iter().map(|row| row.horizon_s).collect())
        .unwrap_or_default();
    out.push_str(&format!("{:<16}", "ADE/FDE [m]"));
    for h in &horizons {
        out.push_str(&format!("{:>13}", format!("{h}s")));
    }
    out.push('\n');
    for report in reports {
        out.push_str(&format!("{:<16}", report.predictor));
        for h in &horizons {
            match report.row(*h) {
                Some(row) => out.push_str(&format!("{:>13}", format!("{:.2}/{:.2}", row.ade, row.fde))),
                None => out.push_str(&format!("{:>13}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
