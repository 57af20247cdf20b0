//! Datasets: graded samples, Kaggle-format CSV ingestion, the synthetic
//! two-domain generator, and stratified fold/holdout splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const N_GRADES: usize = 5;

/// Disease severity grade, 0 (none) through 4 (proliferative).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Grade(u8);

impl Grade {
    pub fn new(value: u8) -> Option<Grade> {
        (value <= 4).then_some(Grade(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Grade> {
        (0..5).map(Grade)
    }
}

/// One image paired with its grade. Pixels are a [3, H, W] tensor in [0, 1].
#[derive(Clone, Debug)]
pub struct GradedSample<S: Scalar> {
    pub id: String,
    pub pixels: Tensor<S>,
    pub grade: Grade,
}

impl<S: Scalar> GradedSample<S> {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<S: Scalar> {
    pub samples: Vec<GradedSample<S>>,
    pub domain_tag: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Vec<GradedSample<S>>, domain_tag: &str) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Dataset {
            samples,
            domain_tag: domain_tag.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn by_id(&self, id: &str) -> Option<&GradedSample<S>> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Column names of a label CSV. Defaults to the 2019 schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CsvSchema {
    pub id_column: String,
    pub grade_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id_column: "id_code".into(),
            grade_column: "diagnosis".into(),
        }
    }
}

impl CsvSchema {
    /// The 2015 competition schema (`image,level`).
    pub fn schema_2015() -> Self {
        CsvSchema {
            id_column: "image".into(),
            grade_column: "level".into(),
        }
    }
}

pub fn load_kaggle_csv<S: Scalar>(
    labels_path: &Path,
    images_dir: &Path,
    schema: &CsvSchema,
    domain_tag: &str,
) -> Result<Dataset<S>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(labels_path)
        .map_err(|e| Error::CsvParse {
            line: 0,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::CsvParse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let id_idx = headers
        .iter()
        .position(|h| h == schema.id_column)
        .ok_or_else(|| Error::Data(format!("missing column `{}`", schema.id_column)))?;
    let grade_idx = headers
        .iter()
        .position(|h| h == schema.grade_column)
        .ok_or_else(|| Error::Data(format!("missing column `{}`", schema.grade_column)))?;

    let mut samples = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2; // header is line 1
        let record = record.map_err(|e| Error::CsvParse {
            line,
            msg: e.to_string(),
        })?;
        let id = record
            .get(id_idx)
            .ok_or_else(|| Error::CsvParse {
                line,
                msg: "short row".into(),
            })?
            .to_string();
        let raw_grade: i64 = record
            .get(grade_idx)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::CsvParse {
                line,
                msg: "unparsable grade".into(),
            })?;
        let grade = u8::try_from(raw_grade)
            .ok()
            .and_then(Grade::new)
            .ok_or(Error::GradeOutOfRange {
                row: line,
                value: raw_grade,
            })?;
        let pixels = load_image_for(&id, images_dir)?;
        samples.push(GradedSample { id, pixels, grade });
    }
    Dataset::new(samples, domain_tag)
}

fn load_image_for<S: Scalar>(id: &str, images_dir: &Path) -> Result<Tensor<S>> {
    for ext in ["png", "jpg", "jpeg"] {
        let path = images_dir.join(format!("{id}.{ext}"));
        if path.exists() {
            let img = image::open(&path)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
                .to_rgb8();
            return Ok(image_to_tensor(&img));
        }
    }
    Err(Error::MissingImage {
        id: id.to_string(),
        path: images_dir.join(format!("{id}.png")),
    })
}

pub fn image_to_tensor<S: Scalar>(img: &image::RgbImage) -> Tensor<S> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                let i = (c * h + y) * w + x;
                t.data_mut()[i] = S::of_f64(p.0[c] as f64 / 255.0);
            }
        }
    }
    t
}

pub fn tensor_to_image<S: Scalar>(t: &Tensor<S>) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = t.data()[(c * h + y) * w + x].as_f64();
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Per-channel tint giving the synthetic images a fundus-like cast.
const CHANNEL_TINT: [f64; 3] = [1.0, 0.82, 0.55];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub domain_tag: String,
    pub image_size: usize,
    pub class_proportions: [f64; 5],
    pub noise_std: f64,
    pub background: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Pretraining domain: darker background, noisier capture.
    pub fn domain_a(n: usize, seed: u64) -> Self {
        SyntheticConfig {
            n,
            domain_tag: "pretrain".into(),
            image_size: 64,
            class_proportions: [0.49, 0.10, 0.27, 0.05, 0.09],
            noise_std: 0.06,
            background: 0.35,
            seed,
        }
    }

    /// Main-training domain: brighter, cleaner.
    pub fn domain_b(n: usize, seed: u64) -> Self {
        SyntheticConfig {
            n,
            domain_tag: "main".into(),
            image_size: 64,
            class_proportions: [0.49, 0.10, 0.27, 0.05, 0.09],
            noise_std: 0.03,
            background: 0.50,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "class proportions sum to {sum}, expected 1"
            )));
        }
        if self.n < 5 {
            return Err(Error::Config("synthetic n must be >= 5".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        Ok(())
    }
}

fn sample_gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders the noise-free image for a sample: disc background plus one
/// bright gaussian blob per grade level.
fn render_clean(size: usize, grade: Grade, background: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let center = size as f64 / 2.0;
    let disc_r = 0.46 * size as f64;
    let sigma = (size as f64 / 12.0).max(1.8);
    let mut min_sep = 5.0 * sigma;

    let mut blobs: Vec<(f64, f64)> = Vec::new();
    let mut rejections = 0u32;
    while blobs.len() < grade.index() {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = disc_r * 0.75 * rng.gen_range(0.0f64..1.0).sqrt();
        let (bx, by) = (center + radius * angle.cos(), center + radius * angle.sin());
        if blobs
            .iter()
            .all(|&(x, y)| ((x - bx).powi(2) + (y - by).powi(2)).sqrt() >= min_sep)
        {
            blobs.push((bx, by));
        } else {
            // On small canvases the requested separation may not fit;
            // relax it rather than rejection-sample forever.
            rejections += 1;
            if rejections % 64 == 0 {
                min_sep *= 0.5;
            }
        }
    }

    let mut lum = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - center).powi(2) + (y as f64 - center).powi(2)).sqrt();
            let mut v = if d <= disc_r { background } else { 0.0 };
            for &(bx, by) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                v += 0.55 * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            lum[y * size + x] = v;
        }
    }
    lum
}

pub fn generate_synthetic<S: Scalar>(config: &SyntheticConfig) -> Result<Dataset<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;
    let mut samples = Vec::with_capacity(config.n);

    for i in 0..config.n {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut grade = Grade::new(4).unwrap();
        for (g, &p) in config.class_proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                grade = Grade::new(g as u8).unwrap();
                break;
            }
        }

        let lum = render_clean(size, grade, config.background, &mut rng);
        let mut pixels = Tensor::zeros(&[3, size, size]);
        for (j, &v) in lum.iter().enumerate() {
            let noise = sample_gaussian(&mut rng, config.noise_std);
            for c in 0..3 {
                pixels.data_mut()[c * size * size + j] =
                    S::of_f64(((v + noise) * CHANNEL_TINT[c]).clamp(0.0, 1.0));
            }
        }
        samples.push(GradedSample {
            id: format!("{}_{:05}", config.domain_tag, i),
            pixels,
            grade,
        });
    }
    Dataset::new(samples, &config.domain_tag)
}

/// Stratified fold assignment plus a disjoint holdout.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub n_folds: usize,
    pub assignments: BTreeMap<String, usize>,
    pub holdout_ids: BTreeSet<String>,
}

impl FoldSplit {
    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

pub fn split_folds<S: Scalar>(
    dataset: &Dataset<S>,
    n_folds: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::Config("n_folds must be >= 2".into()));
    }
    if !(0.0..0.5).contains(&holdout_fraction) {
        return Err(Error::Config("holdout_fraction must be in [0, 0.5)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_grade: Vec<Vec<&GradedSample<S>>> = vec![Vec::new(); N_GRADES];
    for s in &dataset.samples {
        by_grade[s.grade.index()].push(s);
    }
    for class in by_grade.iter_mut() {
        // Fisher-Yates on the per-class lists.
        for i in (1..class.len()).rev() {
            let j = rng.gen_range(0..=i);
            class.swap(i, j);
        }
    }

    // Largest-remainder allocation so the holdout totals round(frac * N).
    let total_holdout = (holdout_fraction * dataset.len() as f64).round() as usize;
    let mut quotas: Vec<(usize, f64, usize)> = by_grade
        .iter()
        .enumerate()
        .map(|(g, class)| {
            let exact = holdout_fraction * class.len() as f64;
            (g, exact - exact.floor(), exact.floor() as usize)
        })
        .collect();
    let mut allocated: usize = quotas.iter().map(|q| q.2).sum();
    quotas.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut extra = vec![0usize; N_GRADES];
    for q in &quotas {
        if allocated >= total_holdout {
            break;
        }
        if q.2 + 1 <= by_grade[q.0].len() {
            extra[q.0] = 1;
            allocated += 1;
        }
    }

    let mut holdout_ids = BTreeSet::new();
    let mut assignments = BTreeMap::new();
    let mut next_fold = 0usize;
    for (g, class) in by_grade.iter().enumerate() {
        let base = (holdout_fraction * class.len() as f64).floor() as usize;
        let take = base + extra[g];
        let remaining = class.len().saturating_sub(take);
        if !class.is_empty() && remaining < n_folds {
            return Err(Error::Data(format!(
                "grade {g} has only {remaining} samples after holdout removal, need >= {n_folds}"
            )));
        }
        for (i, s) in class.iter().enumerate() {
            if i < take {
                holdout_ids.insert(s.id.clone());
            } else {
                assignments.insert(s.id.clone(), next_fold % n_folds);
                next_fold += 1;
            }
        }
    }

    Ok(FoldSplit {
        n_folds,
        assignments,
        holdout_ids,
    })
}

/// Per-grade counts and proportions.
pub fn class_distribution<S: Scalar>(dataset: &Dataset<S>) -> Result<([usize; 5], [f64; 5])> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut counts = [0usize; 5];
    for s in &dataset.samples {
        counts[s.grade.index()] += 1;
    }
    let n = dataset.len() as f64;
    let mut props = [0.0; 5];
    for (p, &c) in props.iter_mut().zip(&counts) {
        *p = c as f64 / n;
    }
    Ok((counts, props))
}

/// Persists a dataset as `labels.csv` + one PNG per sample + `manifest`.
pub fn save_dataset<S: Scalar>(
    dataset: &Dataset<S>,
    dir: &Path,
    schema: &CsvSchema,
    manifest: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join("labels.csv");
    let mut writer = csv::Writer::from_path(&labels_path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", labels_path.display())))?;
    writer
        .write_record([&schema.id_column, &schema.grade_column])
        .map_err(|e| Error::Data(e.to_string()))?;
    for s in &dataset.samples {
        writer
            .write_record([s.id.as_str(), &s.grade.value().to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
        let img = tensor_to_image(&s.pixels);
        let img_path = dir.join(format!("{}.png", s.id));
        img.save(&img_path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", img_path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(&labels_path, e))?;
    fs::write(dir.join("manifest"), manifest).map_err(|e| Error::io(dir.join("manifest"), e))?;
    Ok(())
}
