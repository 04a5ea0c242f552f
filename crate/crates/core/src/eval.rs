//! Age-distribution and identity-verification metrics with pluggable
//! backends, mask triptych export, and a small oracle age classifier that
//! serves as the default backend on synthetic data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use attnage_tensor::{grad, no_grad, Adam, AdamConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AgeGroupLabel, AgeGroupScheme, NUM_GROUPS};
use crate::data::{to_rgb8, AgingRegion, DatasetRecord};
use crate::error::{Error, Result};
use crate::image::{stack_images, FeatureMap, ImageTensor};
use crate::losses::{onehot_batch, softmax_cross_entropy};
use crate::models::layers::{Conv2d, Linear, Params, ParamsExt};
use crate::models::MaskPair;

/// Threshold of the verification tables (confidence scale 0..100).
pub const DEFAULT_THRESHOLD: f64 = 73.975;

/// Maps an image to an estimated age in years.
pub trait AgeEstimator {
    fn estimate_age(&self, image: &ImageTensor) -> Result<f64>;
}

/// Maps an image to a unit-norm embedding; similarity is the cosine.
pub trait IdentityEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;

    /// Attainable cosine range. Embedders with nonnegative coordinates
    /// declare `(0, 1)`.
    fn similarity_range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    /// Affine map of the similarity range onto `[0, 100]`.
    fn confidence(&self, similarity: f64) -> f64 {
        let (lo, hi) = self.similarity_range();
        (100.0 * (similarity - lo) / (hi - lo)).clamp(0.0, 100.0)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit Euclidean norm; `None` for a zero or non-finite vector.
pub fn normalize(v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// `mean(discrepancy)` with two decimals, e.g. `25.92(0.80)`.
pub fn format_cell(mean: f64, discrepancy: f64) -> String {
    format!("{mean:.2}({discrepancy:.2})")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeGroupRow {
    pub group: usize,
    pub name: String,
    pub mean_generated: f64,
    pub mean_generic: f64,
    pub discrepancy: f64,
    pub generated_count: usize,
    pub generic_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeDistributionReport {
    pub rows: Vec<AgeGroupRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl AgeDistributionReport {
    /// Report from already-estimated ages, one list per target group.
    pub fn from_ages(generated: &[Vec<f64>], generic: &[Vec<f64>], scheme: &AgeGroupScheme) -> Result<Self> {
        if generated.len() != NUM_GROUPS || generic.len() != NUM_GROUPS {
            return Err(Error::Argument(format!(
                "expected {NUM_GROUPS} groups, got {} generated and {} generic",
                generated.len(),
                generic.len()
            )));
        }
        let mut rows = Vec::with_capacity(NUM_GROUPS);
        for k in 0..NUM_GROUPS {
            let name = scheme.group_name(k);
            for (which, set) in [("generated", &generated[k]), ("generic", &generic[k])] {
                if set.is_empty() {
                    return Err(Error::Data(format!("age group {name} has no {which} images")));
                }
            }
            let (g, r) = (mean(&generated[k]), mean(&generic[k]));
            rows.push(AgeGroupRow {
                group: k,
                name,
                mean_generated: g,
                mean_generic: r,
                discrepancy: (g - r).abs(),
                generated_count: generated[k].len(),
                generic_count: generic[k].len(),
            });
        }
        Ok(AgeDistributionReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,mean_generated,mean_generic,discrepancy,generated_count,generic_count\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name, r.mean_generated, r.mean_generic, r.discrepancy, r.generated_count, r.generic_count
            );
        }
        out
    }

    /// One-row table: generic means, then generated `mean(discrepancy)` cells.
    pub fn to_markdown(&self) -> String {
        let header: Vec<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        let mut out = format!("| | {} |\n|---|{}\n", header.join(" | "), "---|".repeat(header.len()));
        let generic: Vec<String> = self.rows.iter().map(|r| format!("{:.2}", r.mean_generic)).collect();
        let generated: Vec<String> = self
            .rows
            .iter()
            .map(|r| format_cell(r.mean_generated, r.discrepancy))
            .collect();
        let _ = writeln!(out, "| Generic | {} |", generic.join(" | "));
        let _ = writeln!(out, "| Generated | {} |", generated.join(" | "));
        out
    }
}

/// Mean estimated age per target group for generated images versus real
/// ("generic") images of that group.
pub fn age_discrepancy(
    estimator: &dyn AgeEstimator,
    generated: &[Vec<ImageTensor>],
    generic: &[Vec<ImageTensor>],
    scheme: &AgeGroupScheme,
) -> Result<AgeDistributionReport> {
    let estimate = |sets: &[Vec<ImageTensor>]| -> Result<Vec<Vec<f64>>> {
        sets.iter()
            .map(|set| set.iter().map(|img| estimator.estimate_age(img)).collect())
            .collect()
    };
    AgeDistributionReport::from_ages(&estimate(generated)?, &estimate(generic)?, scheme)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationRow {
    pub group: String,
    pub pairs: usize,
    pub mean_confidence: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub rows: Vec<VerificationRow>,
    pub threshold: f64,
    pub far_note: String,
    /// Pairs dropped because an embedding could not be computed.
    pub excluded: usize,
}

impl VerificationReport {
    /// Report from per-pair confidences, grouped by the given names in order
    /// of first appearance, plus an `all` row.
    pub fn from_confidences(confidences: &[(String, f64)], threshold: f64, excluded: usize) -> Result<Self> {
        if confidences.is_empty() {
            return Err(Error::Data("no verification pairs left to score".into()));
        }
        let mut order: Vec<&str> = Vec::new();
        for (g, _) in confidences {
            if !order.contains(&g.as_str()) {
                order.push(g);
            }
        }
        let row = |name: &str, values: Vec<f64>| VerificationRow {
            group: name.to_string(),
            pairs: values.len(),
            mean_confidence: mean(&values),
            rate: values.iter().filter(|&&c| c >= threshold).count() as f64 / values.len() as f64,
        };
        let mut rows: Vec<VerificationRow> = order
            .iter()
            .map(|g| {
                let values = confidences.iter().filter(|(n, _)| n == g).map(|(_, c)| *c).collect();
                row(g, values)
            })
            .collect();
        rows.push(row("all", confidences.iter().map(|(_, c)| *c).collect()));
        Ok(VerificationReport {
            rows,
            threshold,
            far_note: "input-vs-generated pairs; threshold taken from the reference verification table (FAR 1e-5 there), \
                       not calibrated for this embedder"
                .into(),
            excluded,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,pairs,mean_confidence,rate,threshold\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.group, r.pairs, r.mean_confidence, r.rate, self.threshold);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Threshold = {}; {}\n\n| Target group | Pairs | Mean confidence | Verification rate |\n|---|---|---|---|\n",
            self.threshold, self.far_note
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {:.2}% |",
                r.group,
                r.pairs,
                r.mean_confidence,
                100.0 * r.rate
            );
        }
        if self.excluded > 0 {
            let _ = writeln!(out, "\n{} pairs excluded (embedding failed).", self.excluded);
        }
        out
    }
}

/// One input/generated pair and the group it is reported under.
#[derive(Debug, Clone)]
pub struct VerificationPair {
    pub group: String,
    pub input: ImageTensor,
    pub generated: ImageTensor,
}

/// Confidence that each generated image keeps its input's identity.
pub fn verification(
    embedder: &dyn IdentityEmbedder,
    pairs: &[VerificationPair],
    threshold: f64,
) -> Result<VerificationReport> {
    if pairs.is_empty() {
        return Err(Error::Argument("verification needs at least one pair".into()));
    }
    let mut confidences = Vec::with_capacity(pairs.len());
    let mut excluded = 0;
    for (i, p) in pairs.iter().enumerate() {
        match (embedder.embed(&p.input), embedder.embed(&p.generated)) {
            (Ok(a), Ok(b)) => confidences.push((p.group.clone(), embedder.confidence(cosine(&a, &b)))),
            (Err(e), _) | (_, Err(e)) => {
                excluded += 1;
                log::warn!("pair {i} excluded from verification: {e}");
            }
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} of {} pairs excluded from verification", pairs.len());
    }
    VerificationReport::from_confidences(&confidences, threshold, excluded)
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Composite of `3H x (W * columns)`: generated outputs on the first row,
/// attention masks (0 black, 1 white) on the second, color masks on the third.
pub fn triptych(input: &ImageTensor, columns: &[(MaskPair, ImageTensor)]) -> Result<::image::RgbImage> {
    let (h, w) = (input.height(), input.width());
    if columns.is_empty() {
        return Err(Error::Argument("triptych needs at least one column".into()));
    }
    for (masks, out) in columns {
        let a = &masks.attention;
        if a.channels() != 1
            || (a.height(), a.width()) != (h, w)
            || (masks.color.height(), masks.color.width()) != (h, w)
            || (out.height(), out.width()) != (h, w)
        {
            return Err(Error::Shape(format!("triptych column does not match {h}x{w} input")));
        }
    }
    let mut canvas = ::image::RgbImage::new((w * columns.len()) as u32, (3 * h) as u32);
    for (col, (masks, out)) in columns.iter().enumerate() {
        let x0 = (col * w) as u32;
        let rgb_out = to_rgb8(out);
        let rgb_color = to_rgb8(&masks.color);
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                canvas.put_pixel(x0 + x, y, *rgb_out.get_pixel(x, y));
                let g = gray(masks.attention.get(0, y as usize, x as usize));
                canvas.put_pixel(x0 + x, h as u32 + y, ::image::Rgb([g, g, g]));
                canvas.put_pixel(x0 + x, 2 * h as u32 + y, *rgb_color.get_pixel(x, y));
            }
        }
    }
    Ok(canvas)
}

/// Writes [`triptych`] as a PNG.
pub fn export_triptych(input: &ImageTensor, columns: &[(MaskPair, ImageTensor)], path: &Path) -> Result<()> {
    let canvas = triptych(input, columns)?;
    canvas.save(path).map_err(|e| match e {
        ::image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalityScore {
    pub score: f64,
    /// Total edit mass was zero (every mask all ones); the score is then 0.
    pub zero_mass: bool,
}

/// Share of the edit mass `1 - A` that falls inside `region`, pooled over all
/// masks.
pub fn attention_locality_score(masks: &[FeatureMap], region: &AgingRegion) -> Result<LocalityScore> {
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for m in masks {
        if m.channels() != 1 || region.bottom > m.height() || region.right > m.width() {
            return Err(Error::Shape(format!(
                "attention mask {}x{}x{} does not cover the aging region",
                m.channels(),
                m.height(),
                m.width()
            )));
        }
        for y in 0..m.height() {
            for x in 0..m.width() {
                let edit = 1.0 - m.get(0, y, x) as f64;
                total += edit;
                if region.contains(y, x) {
                    inside += edit;
                }
            }
        }
    }
    if total <= 0.0 {
        log::warn!("attention masks carry no edit mass; locality score set to 0");
        return Ok(LocalityScore {
            score: 0.0,
            zero_mass: true,
        });
    }
    Ok(LocalityScore {
        score: inside / total,
        zero_mass: false,
    })
}

/// Mean absolute per-pixel change between inputs and outputs, inside and
/// outside `region`, pooled over all pairs and channels.
pub fn region_difference(pairs: &[(&ImageTensor, &ImageTensor)], region: &AgingRegion) -> Result<(f64, f64)> {
    let (mut inside, mut outside, mut n_in, mut n_out) = (0.0f64, 0.0f64, 0usize, 0usize);
    for (a, b) in pairs {
        if (a.height(), a.width()) != (b.height(), b.width()) {
            return Err(Error::Shape("input/output sizes differ".into()));
        }
        for c in 0..3 {
            for y in 0..a.height() {
                for x in 0..a.width() {
                    let d = (a.map().get(c, y, x) - b.map().get(c, y, x)).abs() as f64;
                    if region.contains(y, x) {
                        inside += d;
                        n_in += 1;
                    } else {
                        outside += d;
                        n_out += 1;
                    }
                }
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::Argument("region difference needs pixels on both sides of the region".into()));
    }
    Ok((inside / n_in as f64, outside / n_out as f64))
}

/// How well a generator hits requested groups while editing only the aging
/// region of synthetic inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditEvaluation {
    /// Oracle accuracy of generated images against their target groups.
    pub target_accuracy: f64,
    pub locality: LocalityScore,
    /// Mean absolute input/output change inside the aging region.
    pub inside_change: f64,
    /// Mean absolute input/output change outside the aging region.
    pub outside_change: f64,
}

impl EditEvaluation {
    /// `outside_change / inside_change` (infinite when nothing changed inside).
    pub fn leakage_ratio(&self) -> f64 {
        if self.inside_change > 0.0 {
            self.outside_change / self.inside_change
        } else {
            f64::INFINITY
        }
    }
}

/// Generates every `(input, target)` pair in batches and scores the results.
pub fn evaluate_edits(
    generator: &crate::models::Generator<f32>,
    oracle: &OracleClassifier,
    inputs: &[&ImageTensor],
    targets: &[AgeGroupLabel],
    region: &AgingRegion,
) -> Result<EditEvaluation> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Argument("evaluate_edits needs one target per input".into()));
    }
    let (h, w) = generator.resolution();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut masks = Vec::with_capacity(inputs.len());
    for (chunk, labels) in inputs.chunks(128).zip(targets.chunks(128)) {
        let x = stack_images::<f32>(chunk)?;
        let cond = crate::models::condition_batch::<f32>(labels, h, w);
        let (a, out) = no_grad(|| -> Result<_> {
            let m = generator.forward(&x, &cond)?;
            let out = crate::models::compose_tensors(&x, &m.attention, &m.color);
            Ok((m.attention, out))
        })?;
        masks.extend(crate::image::unstack(&a)?);
        for map in crate::image::unstack(&out)? {
            outputs.push(ImageTensor::from_map(map)?);
        }
    }
    let out_refs: Vec<&ImageTensor> = outputs.iter().collect();
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = inputs.iter().copied().zip(out_refs.iter().copied()).collect();
    let (inside_change, outside_change) = region_difference(&pairs, region)?;
    Ok(EditEvaluation {
        target_accuracy: oracle.accuracy(&out_refs, targets)?,
        locality: attention_locality_score(&masks, region)?,
        inside_change,
        outside_change,
    })
}

/// Flattened, mean-centered pixels: a backend-free identity embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

impl IdentityEmbedder for PixelEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let m = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len() as f64;
        normalize(image.data().iter().map(|&v| v as f64 - m).collect())
            .ok_or_else(|| Error::Numeric {
                location: "pixel embedding of a constant image".into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub channels: usize,
    pub embedding: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            channels: 8,
            embedding: 32,
            steps: 600,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1234,
        }
    }
}

/// Small CNN age-group classifier trained on real images only. Its ReLU
/// embedding layer doubles as an identity embedder, and the softmax-weighted
/// group midpoints as an age estimator.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    resolution: (usize, usize),
    scheme: AgeGroupScheme,
    convs: Vec<Conv2d<f32>>,
    embed: Linear<f32>,
    head: Linear<f32>,
}

impl Params<f32> for OracleClassifier {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f32>)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.convs.collect(&p("convs"), out);
        self.embed.collect(&p("embed"), out);
        self.head.collect(&p("head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<f32>>) {
        self.convs.collect_mut(out);
        self.embed.collect_mut(out);
        self.head.collect_mut(out);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredOracle {
    version: u32,
    resolution: [usize; 2],
    scheme: AgeGroupScheme,
    channels: usize,
    embedding: usize,
    params: Vec<(String, StoredTensor)>,
}

const ORACLE_VERSION: u32 = 1;

impl OracleClassifier {
    fn build(
        resolution: (usize, usize),
        scheme: &AgeGroupScheme,
        channels: usize,
        embedding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (h, w) = resolution;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("oracle resolution {h}x{w} must be a multiple of 4")));
        }
        let convs = vec![
            Conv2d::new(rng, 3, channels, 3, 1, 1),
            Conv2d::new(rng, channels, 2 * channels, 4, 2, 1),
            Conv2d::new(rng, 2 * channels, 2 * channels, 4, 2, 1),
        ];
        let features = 2 * channels * (h / 4) * (w / 4);
        Ok(OracleClassifier {
            resolution,
            scheme: scheme.clone(),
            convs,
            embed: Linear::new(rng, features, embedding),
            head: Linear::new(rng, embedding, NUM_GROUPS),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn scheme(&self) -> &AgeGroupScheme {
        &self.scheme
    }

    fn embedding_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.resolution {
            return Err(Error::Shape(format!(
                "oracle expects (N,3,{},{}) images, got {s:?}",
                self.resolution.0, self.resolution.1
            )));
        }
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(0.2);
        }
        let n = s[0];
        let f = h.numel() / n;
        Ok(self.embed.forward(&h.reshape(&[n, f])).relu())
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.head.forward(&self.embedding_tensor(x)?))
    }

    /// Predicted group per image, batched.
    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let logits = no_grad(|| self.logits(&stack_images(chunk)?))?;
            for row in logits.data().chunks(NUM_GROUPS) {
                let best = (0..NUM_GROUPS)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("nonempty");
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Fraction of images whose predicted group equals the given label.
    pub fn accuracy(&self, images: &[&ImageTensor], labels: &[AgeGroupLabel]) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Argument("accuracy needs equally many images and labels".into()));
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| **p == l.index()).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Trains on `records` with Adam and softmax cross-entropy.
    pub fn train(
        records: &[DatasetRecord],
        scheme: &AgeGroupScheme,
        resolution: (usize, usize),
        config: &OracleConfig,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("oracle training needs records".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Self::build(resolution, scheme, config.channels, config.embedding, &mut rng)?;
        let labels: Vec<AgeGroupLabel> = records.iter().map(|r| r.label(scheme)).collect::<Result<_>>()?;
        let mut opt = Adam::new(AdamConfig {
            lr: config.learning_rate,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut cursor = order.len();
        for step in 0..config.steps {
            let mut idx = Vec::with_capacity(config.batch_size);
            while idx.len() < config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let images: Vec<&ImageTensor> = idx.iter().map(|&i| &records[i].image).collect();
            let batch_labels: Vec<AgeGroupLabel> = idx.iter().map(|&i| labels[i]).collect();
            let loss = softmax_cross_entropy(&model.logits(&stack_images(&images)?)?, &onehot_batch(&batch_labels))?;
            let grads = grad(&loss, &model.parameters(), false)?;
            opt.step(&mut model.parameters_mut(), &grads)?;
            if (step + 1) % 200 == 0 {
                log::debug!("oracle step {}: loss {:.4}", step + 1, loss.item());
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredOracle {
            version: ORACLE_VERSION,
            resolution: [self.resolution.0, self.resolution.1],
            scheme: self.scheme.clone(),
            channels: self.convs[0].bias.numel(),
            embedding: self.embed.bias.numel(),
            params: self
                .named_parameters()
                .into_iter()
                .map(|(n, t)| {
                    (
                        n,
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_string(&stored).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: StoredOracle =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if stored.version != ORACLE_VERSION {
            return Err(Error::Data(format!(
                "{}: oracle format version {} (expected {ORACLE_VERSION})",
                path.display(),
                stored.version
            )));
        }
        let resolution = (stored.resolution[0], stored.resolution[1]);
        let mut model = Self::build(
            resolution,
            &stored.scheme,
            stored.channels,
            stored.embedding,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        if names.len() != stored.params.len() {
            return Err(Error::Data(format!("{}: parameter count mismatch", path.display())));
        }
        for ((name, p), (stored_name, t)) in names.iter().zip(model.parameters_mut()).zip(stored.params) {
            if *name != stored_name || t.shape != p.shape() {
                return Err(Error::Data(format!("{}: unexpected parameter {stored_name}", path.display())));
            }
            *p = Tensor::parameter(t.data, &t.shape)?;
        }
        Ok(model)
    }
}

impl AgeEstimator for OracleClassifier {
    /// Expected age under the softmax over group midpoints.
    fn estimate_age(&self, image: &ImageTensor) -> Result<f64> {
        let logits = no_grad(|| self.logits(&stack_images(&[image])?))?;
        let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        Ok((0..NUM_GROUPS).map(|k| weights[k] / z * self.scheme.midpoint(k)).sum())
    }
}

impl IdentityEmbedder for OracleClassifier {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let e = no_grad(|| self.embedding_tensor(&stack_images(&[image])?))?;
        normalize(e.data().iter().map(|&v| v as f64).collect()).ok_or_else(|| Error::Numeric {
            location: "oracle embedding (all units inactive)".into(),
        })
    }

    fn similarity_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_format_matches_table_syntax() {
        assert_eq!(format_cell(25.92, 0.80), "25.92(0.80)");
        assert_eq!(format_cell(25.92, (25.92f64 - 25.12).abs()), "25.92(0.80)");
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(normalize(vec![0.0; 4]).is_none());
        let v = normalize(vec![3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn locality_on_uniform_edit_is_region_share() {
        let region = AgingRegion::for_resolution(8, 8);
        let masks = vec![FeatureMap::filled(1, 8, 8, 0.5)];
        let s = attention_locality_score(&masks, &region).unwrap();
        assert!((s.score - 0.25).abs() < 1e-12);
        let ones = vec![FeatureMap::filled(1, 8, 8, 1.0)];
        let s = attention_locality_score(&ones, &region).unwrap();
        assert!(s.zero_mass && s.score == 0.0);
    }
}
