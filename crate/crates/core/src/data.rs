//! Dataset ingestion, deterministic splits, a procedural aging dataset and a
//! resumable batch sampler.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ::image::imageops::FilterType;
use ::image::{ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{bin_age, AgeGroupLabel, AgeGroupScheme, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// One face image with its age and subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Source file, or `None` for generated images.
    pub path: Option<PathBuf>,
    pub image: ImageTensor,
    pub age: u32,
    pub subject_id: String,
}

impl DatasetRecord {
    pub fn label(&self, scheme: &AgeGroupScheme) -> Result<AgeGroupLabel> {
        bin_age(self.age, scheme)
    }
}

/// Maps an 8-bit RGB image to `[-1, 1]`: `v / 127.5 - 1`.
pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    ImageTensor::new(h, w, data).expect("rgb image is 3-channel and finite")
}

/// Inverse of [`from_rgb8`], clamping to the valid range first.
pub fn to_rgb8(image: &ImageTensor) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let map = image.map();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| {
            let v = map.get(c, y as usize, x as usize).clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round() as u8
        };
        ::image::Rgb([px(0), px(1), px(2)])
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestError {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<DatasetRecord>,
    pub errors: Vec<IngestError>,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        format!("{} records ingested, {} files rejected", self.records.len(), self.errors.len())
    }
}

#[derive(Debug, Deserialize)]
struct MetadataRow {
    filename: String,
    age: u32,
    subject_id: String,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn load_resized(path: &Path, resolution: (usize, usize)) -> std::result::Result<ImageTensor, String> {
    let decoded = ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let (h, w) = resolution;
    let rgb = if decoded.dimensions() == (w as u32, h as u32) {
        decoded
    } else {
        ::image::imageops::resize(&decoded, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(from_rgb8(&rgb))
}

/// Reads every image under `root` (non-recursive) that has a row in the
/// `filename,age,subject_id` metadata CSV. Undecodable files, files without
/// metadata, metadata rows without files and out-of-scheme ages are reported
/// per file; everything else becomes a record, in filename order.
pub fn ingest_directory(
    root: &Path,
    metadata_file: &Path,
    resolution: (usize, usize),
    scheme: &AgeGroupScheme,
) -> Result<IngestReport> {
    let mut reader = csv::Reader::from_path(metadata_file)
        .map_err(|e| Error::Data(format!("{}: {e}", metadata_file.display())))?;
    let mut report = IngestReport::default();
    let mut meta: BTreeMap<String, MetadataRow> = BTreeMap::new();
    for (line, row) in reader.deserialize::<MetadataRow>().enumerate() {
        match row {
            Ok(row) => {
                meta.insert(row.filename.clone(), row);
            }
            Err(e) => report.errors.push(IngestError {
                file: format!("{}:{}", metadata_file.display(), line + 2),
                reason: e.to_string(),
            }),
        }
    }

    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                files.insert(name.to_string());
            }
        }
    }

    for name in &files {
        let reject = |reason: String| IngestError {
            file: name.clone(),
            reason,
        };
        let Some(row) = meta.get(name) else {
            report.errors.push(reject("no metadata row".into()));
            continue;
        };
        if row.subject_id.trim().is_empty() {
            report.errors.push(reject("empty subject_id".into()));
            continue;
        }
        if let Err(e) = bin_age(row.age, scheme) {
            report.errors.push(reject(e.to_string()));
            continue;
        }
        let path = root.join(name);
        match load_resized(&path, resolution) {
            Ok(image) => report.records.push(DatasetRecord {
                path: Some(path),
                image,
                age: row.age,
                subject_id: row.subject_id.clone(),
            }),
            Err(e) => report.errors.push(reject(format!("cannot decode: {e}"))),
        }
    }
    for name in meta.keys().filter(|n| !files.contains(*n)) {
        report.errors.push(IngestError {
            file: name.clone(),
            reason: "listed in metadata but not found".into(),
        });
    }
    for e in &report.errors {
        log::warn!("skipping {}: {}", e.file, e.reason);
    }
    log::info!("{}", report.summary());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub by_subject: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            seed: 0,
            by_subject: false,
        }
    }
}

/// Train and test record indices for `records` under `plan`. Both index
/// lists are sorted ascending.
pub fn split_indices(records: &[DatasetRecord], plan: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty record list".into()));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train_fraction must lie in (0, 1), got {}",
            plan.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let (mut train, mut test) = if plan.by_subject {
        let subjects: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        let mut subjects: Vec<&str> = subjects.into_iter().collect();
        subjects.shuffle(&mut rng);
        let k = (subjects.len() as f64 * plan.train_fraction).round() as usize;
        let train_subjects: BTreeSet<&str> = subjects[..k.min(subjects.len())].iter().copied().collect();
        (0..records.len()).partition(|&i| train_subjects.contains(records[i].subject_id.as_str()))
    } else {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        let k = (records.len() as f64 * plan.train_fraction).round() as usize;
        let test = order.split_off(k.min(order.len()));
        (order, test)
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "train_fraction {} leaves the {} side empty ({} records)",
            plan.train_fraction,
            if train.is_empty() { "train" } else { "test" },
            records.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(records: &[DatasetRecord], plan: &SplitSpec) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let (train, test) = split_indices(records, plan)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// Rows `[H/2, H)` and columns `[W/4, 3W/4)`: the only pixels the synthetic
/// age features touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgingRegion {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl AgingRegion {
    pub fn for_resolution(h: usize, w: usize) -> Self {
        AgingRegion {
            top: h / 2,
            bottom: h,
            left: w / 4,
            right: 3 * w / 4,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Default scheme's age range for group `k` in the synthetic corpus; the
/// open last group is capped at 77.
fn synth_age_range(k: usize) -> (u32, u32) {
    let scheme = AgeGroupScheme::default();
    let (lo, hi) = scheme.range(k);
    (lo, hi.unwrap_or(77))
}

struct Identity {
    base: [f32; 3],
    freq: (f32, f32),
    phase: f32,
    amplitude: f32,
    shape_center: (f32, f32),
    shape_radius: f32,
    shape_color: [f32; 3],
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let mut color = || [rng.random_range(-0.2..0.8f32), rng.random_range(-0.2..0.8), rng.random_range(-0.2..0.8)];
        let base = color();
        let shape_color = color();
        Identity {
            base,
            shape_color,
            freq: (rng.random_range(0.15..0.6), rng.random_range(0.15..0.6)),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            amplitude: rng.random_range(0.05..0.2),
            shape_center: (
                rng.random_range(0.15..0.35) * h as f32,
                rng.random_range(0.2..0.8) * w as f32,
            ),
            shape_radius: rng.random_range(0.08..0.16) * h.min(w) as f32,
        }
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        let (yf, xf) = (y as f32, x as f32);
        let (cy, cx) = self.shape_center;
        if (yf - cy).powi(2) + (xf - cx).powi(2) <= self.shape_radius.powi(2) {
            return self.shape_color[c];
        }
        let texture = (self.freq.0 * yf + self.phase).sin() * (self.freq.1 * xf + c as f32).cos();
        self.base[c] + self.amplitude * texture
    }
}

/// Darkening factor for an age: 1 at 11 years, falling linearly to 0.3 at 77.
fn darkening(age: u32) -> f32 {
    1.0 - 0.7 * (age.saturating_sub(11) as f32 / 66.0).min(1.0)
}

/// Rows of the horizontal strokes drawn for group `k` (`k` strokes).
fn stroke_rows(region: &AgingRegion, k: usize) -> Vec<usize> {
    let span = region.bottom - region.top;
    let pitch = (span / (NUM_GROUPS + 1)).max(1);
    (0..k)
        .map(|i| region.top + pitch * (i + 1))
        .filter(|&r| r < region.bottom)
        .collect()
}

/// Renders subject `identity` at `age`: identity texture and shape everywhere,
/// then darkening and `group` strokes inside the aging region only.
fn render(identity: &Identity, age: u32, group: usize, h: usize, w: usize) -> ImageTensor {
    let region = AgingRegion::for_resolution(h, w);
    let strokes = stroke_rows(&region, group);
    let factor = darkening(age);
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = identity.pixel(c, y, x).clamp(-1.0, 1.0);
                if region.contains(y, x) {
                    v = -1.0 + (v + 1.0) * factor;
                    if strokes.contains(&y) {
                        v = -0.9;
                    }
                }
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    ImageTensor::new(h, w, data).expect("rendered image is finite")
}

/// `n` procedurally rendered faces. Record `i` belongs to group `i % 5` and
/// subject `i / 5`, so every subject appears once per group and images of one
/// subject differ only inside [`AgingRegion`].
pub fn synth_dataset(n: usize, resolution: (usize, usize), seed: u64) -> Result<Vec<DatasetRecord>> {
    if n < NUM_GROUPS {
        return Err(Error::Argument(format!("synth_dataset needs n >= {NUM_GROUPS}, got {n}")));
    }
    let (h, w) = resolution;
    if h < 4 || w < 4 {
        return Err(Error::Argument(format!("synthetic resolution {h}x{w} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities: HashMap<usize, Identity> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (group, subject) = (i % NUM_GROUPS, i / NUM_GROUPS);
        let identity = identities
            .entry(subject)
            .or_insert_with(|| Identity::sample(&mut rng, h, w));
        let (lo, hi) = synth_age_range(group);
        let age = rng.random_range(lo..=hi);
        out.push(DatasetRecord {
            path: None,
            image: render(identity, age, group, h, w),
            age,
            subject_id: format!("synth-{subject:05}"),
        });
        if group == NUM_GROUPS - 1 {
            identities.remove(&subject);
        }
    }
    Ok(out)
}

/// Writes records as PNG files plus a `metadata.csv` that
/// [`ingest_directory`] reads back. Returns the written file names.
pub fn materialize(records: &[DatasetRecord], out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta_path = out_dir.join("metadata.csv");
    let mut writer =
        csv::Writer::from_path(&meta_path).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", meta_path.display()));
    writer.write_record(["filename", "age", "subject_id"]).map_err(csv_err)?;
    let mut names = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = format!("{i:05}_{}_{}.png", r.subject_id, r.age);
        let path = out_dir.join(&name);
        to_rgb8(&r.image)
            .save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        writer
            .write_record([name.as_str(), &r.age.to_string(), &r.subject_id])
            .map_err(csv_err)?;
        names.push(name);
    }
    writer.flush().map_err(|e| Error::io(&meta_path, e))?;
    Ok(names)
}

/// Shuffled mini-batches without replacement within an epoch. The batch for a
/// given step depends only on `(seed, step)`, so a resumed run sees exactly
/// the batches an uninterrupted run would.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::Argument(format!(
                "batch sampler needs records and a positive batch size (len {len}, batch {batch_size})"
            )));
        }
        Ok(BatchSampler {
            len,
            batch_size,
            seed,
            cached: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.len.div_ceil(self.batch_size) as u64
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut rng);
            self.cached = Some((epoch, order));
        }
        &self.cached.as_ref().expect("filled above").1
    }

    /// Record indices of the batch consumed at `step` (0-based). Positions run
    /// on continuously across epoch boundaries.
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch_size as u64;
        (0..self.batch_size as u64)
            .map(|j| {
                let pos = start + j;
                let (epoch, offset) = (pos / self.len as u64, (pos % self.len as u64) as usize);
                self.permutation(epoch)[offset]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_scaling_endpoints() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { ::image::Rgb([255; 3]) } else { ::image::Rgb([0; 3]) });
        let t = from_rgb8(&img);
        assert_eq!(t.map().get(0, 0, 0), 1.0);
        assert_eq!(t.map().get(2, 0, 1), -1.0);
        assert_eq!(to_rgb8(&t), img);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let records = synth_dataset(100, (8, 8), 3).unwrap();
        let plan = SplitSpec::default();
        let (a, b) = split_indices(&records, &plan).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(&records, &plan).unwrap(), (a, b));
    }

    #[test]
    fn split_rejects_empty_side() {
        let records = synth_dataset(5, (8, 8), 3).unwrap();
        let plan = SplitSpec {
            train_fraction: 0.95,
            ..Default::default()
        };
        assert!(matches!(split_indices(&records, &plan), Err(Error::Data(_))));
        assert!(split_indices(&[], &SplitSpec::default()).is_err());
    }

    #[test]
    fn by_subject_split_is_disjoint() {
        let records = synth_dataset(15, (8, 8), 1).unwrap();
        let plan = SplitSpec {
            train_fraction: 0.6,
            seed: 9,
            by_subject: true,
        };
        let (train, test) = split(&records, &plan).unwrap();
        let a: BTreeSet<_> = train.iter().map(|r| r.subject_id.clone()).collect();
        let b: BTreeSet<_> = test.iter().map(|r| r.subject_id.clone()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(train.len() + test.len(), 15);
    }

    #[test]
    fn synth_is_class_balanced() {
        let scheme = AgeGroupScheme::default();
        for n in [5, 12, 2000] {
            let records = synth_dataset(n, (8, 8), 0).unwrap();
            let mut counts = [0usize; NUM_GROUPS];
            for r in &records {
                counts[r.label(&scheme).unwrap().index()] += 1;
            }
            for c in counts {
                assert!(c == n / NUM_GROUPS || c == n.div_ceil(NUM_GROUPS), "{counts:?}");
            }
        }
        assert!(synth_dataset(4, (8, 8), 0).is_err());
    }

    #[test]
    fn synth_subjects_differ_only_in_region() {
        let (h, w) = (32, 32);
        let records = synth_dataset(10, (h, w), 5).unwrap();
        let region = AgingRegion::for_resolution(h, w);
        assert_eq!(region.area() * 4, h * w);
        for pair in [(0, 4), (1, 3), (5, 9)] {
            let (a, b) = (&records[pair.0], &records[pair.1]);
            assert_eq!(a.subject_id, b.subject_id);
            let mut inside_differs = false;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (va, vb) = (a.image.map().get(c, y, x), b.image.map().get(c, y, x));
                        if region.contains(y, x) {
                            inside_differs |= va != vb;
                        } else {
                            assert_eq!(va, vb);
                        }
                    }
                }
            }
            assert!(inside_differs);
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 4, 7).unwrap();
        let mut first_epoch: Vec<usize> = (0..2).flat_map(|k| s.batch(k)).collect();
        first_epoch.extend(s.batch(2).into_iter().take(2));
        first_epoch.sort_unstable();
        assert_eq!(first_epoch, (0..10).collect::<Vec<_>>());
        let mut fresh = BatchSampler::new(10, 4, 7).unwrap();
        assert_eq!(fresh.batch(5), s.batch(5));
    }
}
