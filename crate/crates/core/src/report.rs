//! Evaluation reports and box overlays.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::box_math::DetectionScores;
use crate::domain::{GroundingSample, Prediction};
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::text_metrics::{score_phrases, PhraseScores};

pub const TRUTH_COLOR: [u8; 3] = [0, 255, 0];
pub const PREDICTION_COLOR: [u8; 3] = [255, 0, 0];
pub const STROKE: usize = 2;

/// Detection columns and BLEU/ROUGE-L in percent, CIDEr raw; all rounded to
/// two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap10: f64,
    pub ap30: f64,
    pub ap50: f64,
    pub miou: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_samples: usize,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl MetricsReport {
    pub fn new(det: &DetectionScores, phrase: &PhraseScores, n_samples: usize) -> Self {
        let pct = |v: f64| round2(100.0 * v);
        MetricsReport {
            ap10: pct(det.ap10),
            ap30: pct(det.ap30),
            ap50: pct(det.ap50),
            miou: pct(det.miou),
            bleu1: pct(phrase.bleu1),
            bleu2: pct(phrase.bleu2),
            rouge_l: pct(phrase.rouge_l),
            cider: round2(phrase.cider),
            n_samples,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7}",
            "AP10", "AP30", "AP50", "mIOU", "BLEU1", "BLEU2", "ROUGE_L", "CIDEr"
        );
        let _ = writeln!(
            s,
            "{:>7.2} {:>7.2} {:>7.2} {:>7.2} | {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            self.ap10, self.ap30, self.ap50, self.miou, self.bleu1, self.bleu2, self.rouge_l, self.cider
        );
        let _ = writeln!(s, "n = {}", self.n_samples);
        s
    }
}

/// Unrounded scores of predictions against their samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub detection: DetectionScores,
    pub phrase: PhraseScores,
    pub n_samples: usize,
}

impl Evaluation {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::new(&self.detection, &self.phrase, self.n_samples)
    }
}

/// Every sample must have a prediction with the same id.
pub fn evaluate(preds: &[Prediction], refs: &[GroundingSample]) -> Result<Evaluation> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let pairs = refs
        .iter()
        .map(|s| {
            let p = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::MissingPrediction(s.id.clone()))?;
            Ok((p.bbox, s.normalized_box()?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        detection: DetectionScores::from_pairs(&pairs)?,
        phrase: score_phrases(preds, refs)?,
        n_samples: refs.len(),
    })
}

/// The sample image with its ground-truth box and, if present, the
/// predicted box.
pub fn render_overlay(sample: &GroundingSample, image: &GrayImage, pred: &Prediction) -> Result<RgbImage> {
    let mut rgb = RgbImage::from_gray(image);
    rgb.stroke_box(&sample.bbox.to_pixel(sample.width, sample.height)?, STROKE, TRUTH_COLOR);
    if let Some(b) = &pred.bbox {
        rgb.stroke_box(&b.to_pixel(sample.width, sample.height)?, STROKE, PREDICTION_COLOR);
    }
    Ok(rgb)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlaySummary {
    pub written: Vec<String>,
    /// Sample ids without a prediction.
    pub skipped: Vec<String>,
}

/// Writes `{id}.ppm` for each sample with a prediction, plus `phrases.tsv`
/// with `id`, predicted phrase and ground-truth phrase per line.
pub fn write_overlays(
    samples: &[GroundingSample],
    preds: &[Prediction],
    base_dir: &Path,
    out_dir: &Path,
) -> Result<OverlaySummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let mut summary = OverlaySummary::default();
    let mut sidecar = String::from("id\tpredicted\tground_truth\n");
    for s in samples {
        let Some(pred) = by_id.get(s.id.as_str()) else {
            summary.skipped.push(s.id.clone());
            continue;
        };
        let image = GrayImage::read_pgm(base_dir.join(&s.image))?;
        render_overlay(s, &image, pred)?.write_ppm(out_dir.join(format!("{}.ppm", s.id)))?;
        let _ = writeln!(sidecar, "{}\t{}\t{}", s.id, pred.phrase, s.phrase);
        summary.written.push(s.id.clone());
    }
    let path = out_dir.join("phrases.tsv");
    fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
