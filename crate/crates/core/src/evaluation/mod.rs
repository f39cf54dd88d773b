//! Accuracy, sharpness and per-layer quantization telemetry.

mod sharpness;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use sharpness::{sharpness, sharpness_of, ModelObjective, Objective, QuadraticObjective, SharpnessConfig};

use crate::autodiff::Tape;
use crate::data_io::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{ForwardMode, Model};
use crate::quantizer::{diagnostics, QuantizationDiagnostics};

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTelemetry {
    pub name: String,
    pub max_abs_weight: f64,
    /// `None` while the layer is full precision.
    pub quant: Option<QuantizationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub sharpness: Option<f64>,
    pub layers: Vec<LayerTelemetry>,
}

/// Top-1 accuracy and mean cross-entropy in evaluation mode, summed in
/// dataset order.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    let mut m = model.clone();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.len())).collect();
        let (x, labels) = data.gather(&idx)?;
        let tape = Tape::new();
        let xv = tape.constant(x);
        let out = m.forward(&tape, xv, &mut ForwardMode::eval())?;
        let loss = out.logits.softmax_cross_entropy(&labels)?;
        loss_sum += loss.value().item()? * idx.len() as f64;
        let pred = out.logits.value().argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(EvalReport {
        top1: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        sharpness: None,
        layers: telemetry_snapshot(model)?,
    })
}

/// Per-layer step size, quantization error, max |w| and clip fraction.
pub fn telemetry_snapshot(model: &Model) -> Result<Vec<LayerTelemetry>> {
    model
        .layers()
        .into_iter()
        .map(|v| {
            Ok(LayerTelemetry {
                max_abs_weight: v.layer.weight.max_abs(),
                quant: v.layer.quantizer.as_ref().map(|q| diagnostics(&v.layer.weight, q)).transpose()?,
                name: v.name,
            })
        })
        .collect()
}

/// One line of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
    pub loss: f64,
    pub lr: f64,
    pub policy_scale: f64,
    pub layers: Vec<LayerTelemetry>,
    pub sharpness: Option<f64>,
}

/// Writes rows as CSV: `epoch,split,top1,loss,lr,policy_scale`, then
/// `<layer>.step_size,<layer>.mean_abs_qerr,<layer>.max_abs_w` per layer,
/// then `sharpness`. Full-precision layers leave the first two empty.
pub fn write_metrics_csv(out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "split", "top1", "loss", "lr", "policy_scale"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some(first) = rows.first() {
        for l in &first.layers {
            header.push(format!("{}.step_size", l.name));
            header.push(format!("{}.mean_abs_qerr", l.name));
            header.push(format!("{}.max_abs_w", l.name));
        }
    }
    header.push("sharpness".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            match r.split {
                Split::Train => "train".into(),
                Split::Test => "test".into(),
            },
            r.top1.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
            r.policy_scale.to_string(),
        ];
        for l in &r.layers {
            rec.push(opt(l.quant.map(|q| q.step_size)));
            rec.push(opt(l.quant.map(|q| q.mean_abs_error)));
            rec.push(l.max_abs_weight.to_string());
        }
        rec.push(opt(r.sharpness));
        if rec.len() != header.len() {
            return Err(Error::Param(format!(
                "metrics row for epoch {} has {} layers, header has {}",
                r.epoch,
                r.layers.len(),
                (header.len() - 7) / 3
            )));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, ModelSpec};
    use crate::noise_policy::NoisePolicy;
    use crate::rng::RandomSource;
    use crate::tensor::Tensor;

    fn toy_data(n: usize, labels: Vec<usize>) -> Dataset {
        let mut r = RandomSource::new(1);
        let mut x = Tensor::zeros(&[n, 4]);
        r.fill_normal(x.data_mut());
        Dataset::new(x, labels, 3).unwrap()
    }

    fn constant_model() -> Model {
        let mut m = build(&ModelSpec::mlp(4, &[], 3), &mut RandomSource::new(0)).unwrap();
        m.for_each_param_mut(|i, _, d| {
            for v in d.iter_mut() {
                *v = 0.0;
            }
            if i == 1 {
                d[2] = 1.0;
            }
        });
        m
    }

    #[test]
    fn constant_logits_score_the_majority_rate() {
        let data = toy_data(5, vec![2, 2, 0, 1, 2]);
        let r = evaluate(&constant_model(), &data).unwrap();
        assert!((r.top1 - 0.6).abs() < 1e-15);
        assert!(evaluate(&constant_model(), &data.subset(0).unwrap()).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = toy_data(300, (0..300).map(|i| i % 3).collect());
        let mut m = build(&ModelSpec::mlp(4, &[8], 3), &mut RandomSource::new(2)).unwrap();
        m.enable_qat(2, &NoisePolicy::default(), false).unwrap();
        assert_eq!(evaluate(&m, &data).unwrap(), evaluate(&m, &data).unwrap());
    }

    #[test]
    fn telemetry_tracks_bit_width() {
        let spec = ModelSpec::resnet_tiny([3, 8, 8], 4, 10);
        let base = build(&spec, &mut RandomSource::new(3)).unwrap();
        let mean_err = |bits| {
            let mut m = base.clone();
            m.enable_qat(bits, &NoisePolicy::default(), false).unwrap();
            let t = telemetry_snapshot(&m).unwrap();
            t.iter().map(|l| l.quant.unwrap().mean_abs_error).sum::<f64>() / t.len() as f64
        };
        assert!(mean_err(8) < mean_err(2));
        let fp = telemetry_snapshot(&base).unwrap();
        assert!(fp.iter().all(|l| l.quant.is_none() && l.max_abs_weight > 0.0));
    }

    #[test]
    fn zero_weight_layer_reports_zeros() {
        let mut m = constant_model();
        m.enable_qat(4, &NoisePolicy::default(), false).unwrap();
        let t = telemetry_snapshot(&m).unwrap();
        assert_eq!(t[0].max_abs_weight, 0.0);
        assert_eq!(t[0].quant.unwrap().mean_abs_error, 0.0);
    }

    #[test]
    fn sharpness_is_repeatable_and_nonnegative() {
        let data = toy_data(64, (0..64).map(|i| i % 3).collect());
        let m = build(&ModelSpec::mlp(4, &[6], 3), &mut RandomSource::new(4)).unwrap();
        let mut cfg = SharpnessConfig::new(1e-2);
        cfg.batch_size = 16;
        cfg.batches = 4;
        let a = sharpness(&m, &data, &cfg).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, sharpness(&m, &data, &cfg).unwrap());
        cfg.rho = 0.0;
        assert_eq!(sharpness(&m, &data, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let mut m = build(&ModelSpec::mlp(4, &[6], 3), &mut RandomSource::new(5)).unwrap();
        m.enable_qat(4, &NoisePolicy::default(), false).unwrap();
        let row = MetricsRow {
            epoch: 1,
            split: Split::Test,
            top1: 0.5,
            loss: 1.25,
            lr: 0.01,
            policy_scale: 1.0,
            layers: telemetry_snapshot(&m).unwrap(),
            sharpness: None,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,split,top1,loss,lr,policy_scale,fc0.step_size,fc0.mean_abs_qerr,fc0.max_abs_w,\
             fc1.step_size,fc1.mean_abs_qerr,fc1.max_abs_w,sharpness"
        );
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(&fields[..6], &["1", "test", "0.5", "1.25", "0.01", "1"]);
        assert_eq!(fields[12], "");
    }
}
