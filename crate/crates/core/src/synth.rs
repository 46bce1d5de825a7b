//! Deterministic synthetic corpus: X-ray-like grayscale images with one
//! finding each, a templated findings report, and the ground-truth phrase and
//! box.
//!
//! Every sample draws from its own ChaCha stream (`seed`, stream = index + 1),
//! so a sample's content does not depend on how many samples precede it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{save_dataset, BoundingBox, GroundingSample};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Finding {
    Cardiomegaly,
    PleuralEffusion,
    Pneumothorax,
    Opacity,
    Atelectasis,
    Nodule,
}

impl Finding {
    pub const ALL: [Finding; 6] = [
        Finding::Cardiomegaly,
        Finding::PleuralEffusion,
        Finding::Pneumothorax,
        Finding::Opacity,
        Finding::Atelectasis,
        Finding::Nodule,
    ];

    pub fn noun(self) -> &'static str {
        match self {
            Finding::Cardiomegaly => "cardiomegaly",
            Finding::PleuralEffusion => "pleural effusion",
            Finding::Pneumothorax => "pneumothorax",
            Finding::Opacity => "airspace opacity",
            Finding::Atelectasis => "atelectasis",
            Finding::Nodule => "pulmonary nodule",
        }
    }

    fn modifiers(self) -> &'static [&'static str] {
        match self {
            Finding::Cardiomegaly => &["mild", "moderate", "severe"],
            Finding::PleuralEffusion => &["small", "moderate", "large"],
            Finding::Pneumothorax => &["small", "apical", "large"],
            Finding::Opacity => &["patchy", "focal", "hazy"],
            Finding::Atelectasis => &["linear", "subsegmental", "plate"],
            Finding::Nodule => &["small", "calcified", "solitary"],
        }
    }

    /// Box width and height ranges as fractions of the image side.
    fn size_range(self) -> ((f64, f64), (f64, f64)) {
        match self {
            Finding::Cardiomegaly => ((0.26, 0.40), (0.20, 0.30)),
            Finding::PleuralEffusion => ((0.18, 0.32), (0.12, 0.22)),
            Finding::Pneumothorax => ((0.12, 0.22), (0.22, 0.36)),
            Finding::Opacity => ((0.12, 0.25), (0.10, 0.22)),
            Finding::Atelectasis => ((0.18, 0.32), (0.07, 0.11)),
            Finding::Nodule => ((0.05, 0.09), (0.05, 0.09)),
        }
    }

    /// Pneumothorax is drawn darker than the background, the rest brighter.
    fn intensity_range(self) -> (f64, f64) {
        match self {
            Finding::Pneumothorax => (0.0, 0.3),
            _ => (0.6, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Zone {
    Upper,
    Mid,
    Lower,
}

/// Patient-side lung zone. Patient left appears on the image right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub side: Side,
    pub zone: Zone,
}

impl Location {
    pub fn all() -> Vec<Location> {
        let mut out = Vec::with_capacity(6);
        for side in [Side::Left, Side::Right] {
            for zone in [Zone::Upper, Zone::Mid, Zone::Lower] {
                out.push(Location { side, zone });
            }
        }
        out
    }

    pub fn words(self) -> String {
        let side = match self.side {
            Side::Left => "left",
            Side::Right => "right",
        };
        let zone = match self.zone {
            Zone::Upper => "upper",
            Zone::Mid => "mid",
            Zone::Lower => "lower",
        };
        format!("{side} {zone}")
    }

    /// Normalized center of the zone.
    fn center(self) -> (f64, f64) {
        let cx = match self.side {
            Side::Left => 0.70,
            Side::Right => 0.30,
        };
        let cy = match self.zone {
            Zone::Upper => 0.28,
            Zone::Mid => 0.50,
            Zone::Lower => 0.70,
        };
        (cx, cy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FindingSpec {
    pub finding: Finding,
    pub location: Location,
    pub modifier: &'static str,
    /// 0 draws a dark shape, 1 a bright one.
    pub intensity: f64,
    /// Pixel-space box the shape fills.
    pub bbox: BoundingBox,
}

impl FindingSpec {
    pub fn random(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let finding = Finding::ALL[rng.random_range(0..Finding::ALL.len())];
        let locations = Location::all();
        let location = locations[rng.random_range(0..locations.len())];
        Self::random_with(rng, finding, location, width, height)
    }

    pub fn random_with(
        rng: &mut impl Rng,
        finding: Finding,
        location: Location,
        width: usize,
        height: usize,
    ) -> Self {
        let mods = finding.modifiers();
        let modifier = mods[rng.random_range(0..mods.len())];
        let ((w0, w1), (h0, h1)) = finding.size_range();
        let w = rng.random_range(w0..w1);
        let h = if finding == Finding::Nodule {
            w
        } else {
            rng.random_range(h0..h1)
        };
        let (cx, cy) = location.center();
        let cx = cx + rng.random_range(-0.06..0.06);
        let cy = cy + rng.random_range(-0.06..0.06);
        let margin = 0.02;
        let x = (cx - w / 2.0).clamp(margin, 1.0 - margin - w);
        let y = (cy - h / 2.0).clamp(margin, 1.0 - margin - h);
        // Integer pixel boxes keep the raster and the label aligned.
        let (fw, fh) = (width as f64, height as f64);
        let px = (x * fw).round();
        let py = (y * fh).round();
        let pw = (w * fw).round().max(8.0).min(fw - px);
        let ph = (h * fh).round().max(8.0).min(fh - py);
        let (i0, i1) = finding.intensity_range();
        FindingSpec {
            finding,
            location,
            modifier,
            intensity: rng.random_range(i0..=i1),
            bbox: BoundingBox::pixel(px, py, pw, ph).expect("positive box"),
        }
    }

    pub fn phrase(&self) -> String {
        format!(
            "{} {} {}",
            self.modifier,
            self.location.words(),
            self.finding.noun()
        )
    }

    /// Whether pixel `(px, py)` belongs to the drawn shape.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let b = &self.bbox;
        let u = (px as f64 + 0.5 - b.x) / b.w;
        let v = (py as f64 + 0.5 - b.y) / b.h;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        // Mirror so lateral features sit on the outer side of the lung.
        let lateral = match self.location.side {
            Side::Left => u,
            Side::Right => 1.0 - u,
        };
        let (du, dv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        match self.finding {
            Finding::Cardiomegaly | Finding::Nodule => du * du + dv * dv <= 1.0,
            Finding::PleuralEffusion => v >= 0.85 * (1.0 - lateral),
            Finding::Pneumothorax => {
                let outer = du * du + dv * dv <= 1.0;
                let dl = 2.0 * lateral - 1.0 + 0.3;
                let inner = dl * dl / 0.5625 + dv * dv / 0.64 < 1.0;
                outer && !inner
            }
            Finding::Opacity => du.powi(4) + dv.powi(4) <= 1.0,
            Finding::Atelectasis => (v - (0.5 + 0.3 * (u - 0.5))).abs() <= 0.36,
        }
    }
}

fn shape_delta(intensity: f64) -> f64 {
    if intensity < 0.5 {
        -(60.0 + 80.0 * (0.5 - intensity))
    } else {
        60.0 + 80.0 * (intensity - 0.5)
    }
}

/// Smooth low-frequency background plus the finding's shape.
pub fn render_image(spec: &FindingSpec, width: usize, height: usize, noise_seed: u64) -> Result<GrayImage> {
    if !spec.bbox.fits_in(width as u32, height as u32) {
        return Err(Error::InvalidBox(format!(
            "box {:?} outside {width}x{height} image",
            spec.bbox.to_array()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(2.0..6.0),
                rng.random_range(0.5..2.5) / width as f64,
                rng.random_range(0.5..2.5) / height as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let delta = shape_delta(spec.intensity);
    let mut img = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut v = 125.0;
            for &(amp, fx, fy, phase) in &waves {
                v += amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).cos();
            }
            v += rng.random_range(-3.0..=3.0);
            if spec.covers(x, y) {
                v += delta;
            }
            img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(img)
}

const KEY_TEMPLATES: [&str; 5] = [
    "There is evidence of {}.",
    "Findings are consistent with {}.",
    "Again noted is {}.",
    "Imaging demonstrates {}.",
    "The study shows {}.",
];

/// Normal-anatomy statements, each with the finding it would contradict.
const DISTRACTORS: [(&str, Option<Finding>); 13] = [
    ("The heart size is normal.", Some(Finding::Cardiomegaly)),
    ("No pleural effusion is seen.", Some(Finding::PleuralEffusion)),
    ("There is no pneumothorax.", Some(Finding::Pneumothorax)),
    ("No focal consolidation is identified.", Some(Finding::Opacity)),
    ("The lungs are otherwise clear.", None),
    ("The mediastinal contours are unremarkable.", None),
    ("No acute osseous abnormality.", None),
    ("The hilar structures are within normal limits.", None),
    ("Pulmonary vasculature is not engorged.", None),
    ("The trachea is midline.", None),
    ("Degenerative changes of the thoracic spine.", None),
    ("The diaphragm is well defined.", None),
    ("Lines and tubes are absent.", None),
];

/// Builds a report of `n_distractors` normal statements around one key
/// sentence that contains the phrase verbatim.
pub fn make_report(spec: &FindingSpec, n_distractors: usize, rng: &mut impl Rng) -> (String, String) {
    let phrase = spec.phrase();
    let template = KEY_TEMPLATES[rng.random_range(0..KEY_TEMPLATES.len())];
    let key = template.replace("{}", &phrase);
    let mut pool: Vec<&str> = DISTRACTORS
        .iter()
        .filter(|(_, excl)| *excl != Some(spec.finding))
        .map(|(s, _)| *s)
        .collect();
    pool.shuffle(rng);
    let mut sentences: Vec<String> = pool
        .into_iter()
        .take(n_distractors)
        .map(str::to_string)
        .collect();
    let at = rng.random_range(0..=sentences.len());
    sentences.insert(at, key);
    (sentences.join(" "), phrase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_patients: usize,
    pub samples_per_patient: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Inclusive range of distractor sentences per report.
    pub distractors: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_patients: 16,
            samples_per_patient: 1,
            width: 224,
            height: 224,
            seed: 0,
            distractors: (1, 4),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.samples_per_patient == 0 {
            return Err(Error::Config("patient and per-patient counts must be positive".into()));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("image sides must be at least 32 pixels".into()));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(Error::Config("distractor range is empty".into()));
        }
        Ok(())
    }
}

/// One generated sample with its raster, before anything is written.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: GroundingSample,
    pub spec: FindingSpec,
    pub image: GrayImage,
}

pub fn generate_sample(config: &CorpusConfig, index: usize) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let spec = FindingSpec::random(&mut rng, config.width, config.height);
    let (lo, hi) = config.distractors;
    let n_distractors = rng.random_range(lo..=hi);
    let (report, phrase) = make_report(&spec, n_distractors, &mut rng);
    let noise_seed: u64 = rng.random();
    let image = render_image(&spec, config.width, config.height, noise_seed)?;
    let patient = index / config.samples_per_patient;
    let id = format!("p{patient:04}_s{}", index % config.samples_per_patient);
    let sample = GroundingSample {
        image: format!("images/{id}.pgm"),
        id,
        patient_id: format!("p{patient:04}"),
        width: config.width as u32,
        height: config.height as u32,
        report,
        phrase,
        bbox: spec.bbox,
    };
    Ok(SyntheticSample { sample, spec, image })
}

/// Generates every sample in memory.
pub fn generate_samples(config: &CorpusConfig) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    (0..config.n_patients * config.samples_per_patient)
        .map(|i| generate_sample(config, i))
        .collect()
}

/// Writes `dataset.jsonl` and `images/*.pgm` under `out_dir`.
pub fn generate_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(config)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &samples {
        s.image.write_pgm(out_dir.join(&s.sample.image))?;
    }
    let records: Vec<GroundingSample> = samples.into_iter().map(|s| s.sample).collect();
    save_dataset(&records, out_dir.join("dataset.jsonl"))?;
    Ok(records)
}

/// Finding counts keyed by noun, for the generator manifest.
pub fn class_histogram(samples: &[GroundingSample]) -> BTreeMap<&'static str, usize> {
    let mut hist = BTreeMap::new();
    for s in samples {
        let phrase = s.phrase.to_lowercase();
        if let Some(f) = Finding::ALL.iter().find(|f| phrase.ends_with(f.noun())) {
            *hist.entry(f.noun()).or_insert(0) += 1;
        }
    }
    hist
}
