//! Core records: boxes, grounding samples, predictions, and the
//! patient-disjoint train/validation/test split.
//!
//! Boxes are `(x, y, w, h)` with `(x, y)` the top-left corner. Normalized
//! coordinates divide `x`/`w` by the image width and `y`/`h` by the height.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSpace {
    Pixel,
    Normalized,
}

/// Axis-aligned rectangle. `w` and `h` are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub space: CoordSpace,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, space: CoordSpace) -> Result<Self> {
        let b = BoundingBox { x, y, w, h, space };
        b.check()?;
        Ok(b)
    }

    pub fn pixel(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, w, h, CoordSpace::Pixel)
    }

    pub fn normalized(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, w, h, CoordSpace::Normalized)
    }

    fn check(&self) -> Result<()> {
        let v = [self.x, self.y, self.w, self.h];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {v:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        if self.space == CoordSpace::Normalized
            && (self.x < 0.0 || self.y < 0.0 || self.x + self.w > 1.0 || self.y + self.h > 1.0)
        {
            return Err(Error::InvalidBox(format!(
                "normalized box {v:?} leaves the unit square"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Whether the box lies inside a `width` x `height` pixel image.
    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= width as f64
            && self.bottom() <= height as f64
    }

    pub fn to_normalized(&self, width: u32, height: u32) -> Result<Self> {
        match self.space {
            CoordSpace::Normalized => Ok(*self),
            CoordSpace::Pixel => {
                let (fw, fh) = (width as f64, height as f64);
                Self::normalized(self.x / fw, self.y / fh, self.w / fw, self.h / fh)
            }
        }
    }

    pub fn to_pixel(&self, width: u32, height: u32) -> Result<Self> {
        match self.space {
            CoordSpace::Pixel => Ok(*self),
            CoordSpace::Normalized => {
                let (fw, fh) = (width as f64, height as f64);
                Self::pixel(self.x * fw, self.y * fh, self.w * fw, self.h * fh)
            }
        }
    }
}

/// One report/image/phrase/box record belonging to a patient.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub patient_id: String,
    /// Image path, relative to the dataset file's directory unless absolute.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub report: String,
    pub phrase: String,
    /// Ground-truth box in pixel coordinates.
    pub bbox: BoundingBox,
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Case-insensitive substring test after collapsing runs of whitespace.
pub fn phrase_in_report(phrase: &str, report: &str) -> bool {
    collapse_whitespace(report).contains(&collapse_whitespace(phrase))
}

impl GroundingSample {
    /// Checks every per-sample rule. Id uniqueness is a dataset-level rule,
    /// see [`validate_dataset`].
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if id.is_empty() {
            return Err(Error::validation(id, "id is empty"));
        }
        if self.patient_id.is_empty() {
            return Err(Error::validation(id, "patient_id is empty"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(id, "image dimensions must be positive"));
        }
        if self.bbox.space != CoordSpace::Pixel {
            return Err(Error::validation(id, "box must be in pixel coordinates"));
        }
        if self.bbox.w <= 0.0 || self.bbox.h <= 0.0 {
            return Err(Error::validation(id, "box width and height must be positive"));
        }
        if !self.bbox.fits_in(self.width, self.height) {
            return Err(Error::validation(
                id,
                format!(
                    "box [{}, {}, {}, {}] extends past the {}x{} image",
                    self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h, self.width, self.height
                ),
            ));
        }
        if self.phrase.trim().is_empty() {
            return Err(Error::validation(id, "phrase is empty"));
        }
        if !phrase_in_report(&self.phrase, &self.report) {
            return Err(Error::validation(id, "phrase is not a substring of the report"));
        }
        Ok(())
    }

    pub fn normalized_box(&self) -> Result<BoundingBox> {
        self.bbox.to_normalized(self.width, self.height)
    }
}

pub fn validate_dataset(samples: &[GroundingSample]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in samples {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::validation(&s.id, "duplicate id"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    patient_id: String,
    image: String,
    width: u32,
    height: u32,
    report: String,
    phrase: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

impl From<&GroundingSample> for SampleRecord {
    fn from(s: &GroundingSample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            patient_id: s.patient_id.clone(),
            image: s.image.clone(),
            width: s.width,
            height: s.height,
            report: s.report.clone(),
            phrase: s.phrase.clone(),
            bbox: s.bbox.to_array(),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads a JSON-lines dataset and validates every sample. Blank lines are
/// skipped; order is preserved.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let [x, y, w, h] = rec.bbox;
        // Geometry is checked by `validate` so the error names the sample.
        let bbox = BoundingBox {
            x,
            y,
            w,
            h,
            space: CoordSpace::Pixel,
        };
        samples.push(GroundingSample {
            id: rec.id,
            patient_id: rec.patient_id,
            image: rec.image,
            width: rec.width,
            height: rec.height,
            report: rec.report,
            phrase: rec.phrase,
            bbox,
        });
    }
    validate_dataset(&samples)?;
    Ok(samples)
}

pub fn save_dataset(samples: &[GroundingSample], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<SampleRecord> = samples.iter().map(SampleRecord::from).collect();
    write_jsonl(path.as_ref(), &records)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Model output for one sample. `bbox` is `None` when the language model
/// never emitted `<BOX>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub phrase: String,
    pub bbox: Option<BoundingBox>,
}

impl Prediction {
    pub fn box_valid(&self) -> bool {
        self.bbox.is_some()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    sample_id: String,
    phrase: String,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    box_valid: bool,
}

pub fn save_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| PredictionRecord {
            sample_id: p.sample_id.clone(),
            phrase: p.phrase.clone(),
            bbox: p.bbox.map(|b| b.to_array()),
            box_valid: p.box_valid(),
        })
        .collect();
    write_jsonl(path.as_ref(), &records)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let mut preds = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let bbox = match (rec.box_valid, rec.bbox) {
            (false, _) => None,
            (true, Some([x, y, w, h])) => Some(
                BoundingBox::normalized(x, y, w, h)
                    .map_err(|e| Error::validation(&rec.sample_id, e.to_string()))?,
            ),
            (true, None) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "box_valid is true but box is missing".into(),
                })
            }
        };
        preds.push(Prediction {
            sample_id: rec.sample_id,
            phrase: rec.phrase,
            bbox,
        });
    }
    Ok(preds)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<GroundingSample>,
    pub validation: Vec<GroundingSample>,
    pub test: Vec<GroundingSample>,
}

/// Patient counts per split for `n` patients.
///
/// Each split first gets `floor(n * r_i / sum(r))`. The leftover patients are
/// dealt one at a time to the splits in order of decreasing ratio (train
/// first on ties), so 867 patients at 7:1:2 become 607/86/174. If a split is
/// still empty, one patient moves to it from the largest split.
pub fn split_counts(n: usize, ratios: (u32, u32, u32)) -> Result<[usize; 3]> {
    let r = [ratios.0 as usize, ratios.1 as usize, ratios.2 as usize];
    if r.iter().any(|&x| x == 0) {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if n < 3 {
        return Err(Error::TooFewPatients(n));
    }
    let total: usize = r.iter().sum();
    let mut counts = r.map(|ri| n * ri / total);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| r[b].cmp(&r[a]).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], 3 - j)).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Shuffles the distinct patient ids with `seed` and deals them into
/// train/validation/test by [`split_counts`]. Samples keep their input order
/// within each split.
pub fn split_by_patient(
    samples: &[GroundingSample],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetSplit> {
    let mut patients: Vec<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    let [n_train, n_val, _] = split_counts(patients.len(), ratios)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let part: BTreeMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let which = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (*p, which)
        })
        .collect();

    let mut split = DatasetSplit::default();
    for s in samples {
        match part[s.patient_id.as_str()] {
            0 => split.train.push(s.clone()),
            1 => split.validation.push(s.clone()),
            _ => split.test.push(s.clone()),
        }
    }
    Ok(split)
}
