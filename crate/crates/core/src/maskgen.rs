//! Training-free mask creation.
//!
//! A text-conditioned semantic branch and an unconditioned structural branch
//! each compare features of the normal and the generated image. Their score
//! maps are fused by an elementwise product and binarized at a per-category
//! threshold calibrated on a handful of reference masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{b64_encode, derive_seed, EndpointConfig, HttpJsonClient};
use crate::error::{BackendError, Error, Result};
use crate::genclient::{mask_path, score_path, TimestampMode};
use crate::image::{read_image, Image};
use crate::manifest::{dataset_root, read_manifest, rewrite_manifest, GenerationRecord, RecordStatus};
use crate::mask::{read_mask_png, write_mask_png, BinaryMask, ScoreMap};
use crate::metrics::{auroc, LabeledScores};
use crate::tensor::{read_score_map, write_score_map, FeatureLayer, FeatureStack};

pub const CANDIDATE_THRESHOLDS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticExtractorSpec {
    pub backend: String,
    pub layer: String,
    /// Square side the images are resized to before extraction.
    pub input_resolution: Option<u32>,
}

impl Default for SemanticExtractorSpec {
    fn default() -> Self {
        Self {
            backend: "mock".into(),
            layer: "last_fusion".into(),
            input_resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuralExtractorSpec {
    pub backend: String,
    pub layers: Vec<String>,
    pub input_resolution: Option<u32>,
}

impl Default for StructuralExtractorSpec {
    fn default() -> Self {
        Self {
            backend: "mock".into(),
            layers: vec!["pyramid_0".into(), "pyramid_1".into(), "pyramid_2".into()],
            input_resolution: None,
        }
    }
}

impl StructuralExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("structural extractor needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Image (and optional text) to intermediate feature maps.
pub trait FeatureExtractor: Send + Sync {
    fn extract(
        &self,
        image: &Image,
        text: Option<&str>,
        layers: &[String],
    ) -> std::result::Result<FeatureStack, BackendError>;

    /// Whether `extract` may be called from several threads at once.
    fn concurrency_safe(&self) -> bool {
        true
    }
}

/// Bilinear resampling with the half-pixel convention. `sy`/`sx` are source
/// cells per output pixel; source coordinates are clamped to the grid.
pub fn bilinear_resample(
    src: &[f32],
    gh: usize,
    gw: usize,
    out_h: usize,
    out_w: usize,
    sy: f64,
    sx: f64,
) -> Vec<f32> {
    let coord = |i: usize, scale: f64, n: usize| {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, sx, gw)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, sy, gh);
        for &(x0, x1, fx) in &xs {
            let v = |yy: usize, xx: usize| f64::from(src[yy * gw + xx]);
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Bilinear upsampling of a `gh x gw` grid onto `out_h x out_w`.
pub fn bilinear_upsample(src: &[f32], gh: usize, gw: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    bilinear_resample(src, gh, gw, out_h, out_w, gh as f64 / out_h as f64, gw as f64 / out_w as f64)
}

/// Per-location L2 norm over channels of `a - b`.
pub fn channel_l2_diff(a: &FeatureLayer, b: &FeatureLayer) -> Result<Vec<f32>> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::validation(format!(
            "feature layer {} has shape {}x{}x{} in one image and {}x{}x{} in the other",
            a.id, a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let n = a.height * a.width;
    let mut acc = vec![0.0f64; n];
    for c in 0..a.channels {
        for ((s, x), y) in acc.iter_mut().zip(a.channel(c)).zip(b.channel(c)) {
            let d = f64::from(x - y);
            *s += d * d;
        }
    }
    Ok(acc.into_iter().map(|s| s.sqrt() as f32).collect())
}

/// Upsampled difference map of one layer. `extent` is the (height, width) of
/// the image the extractor saw, which may differ from the output size.
fn layer_diff_map(
    normal: &FeatureLayer,
    anomalous: &FeatureLayer,
    extent: (usize, usize),
    out: (usize, usize),
) -> Result<ScoreMap> {
    let diff = channel_l2_diff(anomalous, normal)?;
    let stride = normal.stride as f64;
    let sy = extent.0 as f64 / stride / out.0 as f64;
    let sx = extent.1 as f64 / stride / out.1 as f64;
    let up = bilinear_resample(&diff, normal.height, normal.width, out.0, out.1, sy, sx);
    ScoreMap::new(out.0, out.1, up)
}

/// Semantic map from already extracted features: channel L2 diff, then
/// bilinear upsampling to `out`.
pub fn semantic_map_from_features(
    normal: &FeatureLayer,
    anomalous: &FeatureLayer,
    out: (usize, usize),
) -> Result<ScoreMap> {
    let diff = channel_l2_diff(anomalous, normal)?;
    ScoreMap::new(out.0, out.1, bilinear_upsample(&diff, normal.height, normal.width, out.0, out.1))
}

/// Structural map from already extracted layer pairs: per-layer diff,
/// upsample, min-max normalize, then the mean over layers.
pub fn structural_map_from_features(
    pairs: &[(&FeatureLayer, &FeatureLayer)],
    out: (usize, usize),
) -> Result<ScoreMap> {
    if pairs.is_empty() {
        return Err(Error::validation("structural map needs at least one layer"));
    }
    let maps = pairs
        .iter()
        .map(|(n, a)| semantic_map_from_features(n, a, out).map(|m| m.min_max_normalized()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of_maps(&maps, out))
}

fn mean_of_maps(maps: &[ScoreMap], out: (usize, usize)) -> ScoreMap {
    let mut acc = vec![0.0f64; out.0 * out.1];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += f64::from(v);
        }
    }
    let l = maps.len() as f64;
    let values = acc.into_iter().map(|a| ((a / l) as f32).clamp(0.0, 1.0)).collect();
    ScoreMap::new(out.0, out.1, values).expect("mean of normalized maps is valid")
}

fn check_same_dims(normal: &Image, anomalous: &Image) -> Result<()> {
    if normal.dims() != anomalous.dims() {
        return Err(Error::validation(format!(
            "normal image is {:?} but anomalous image is {:?}",
            normal.dims(),
            anomalous.dims()
        )));
    }
    Ok(())
}

fn prepare(image: &Image, resolution: Option<u32>) -> std::borrow::Cow<'_, Image> {
    match resolution {
        Some(r) if (r as usize, r as usize) != image.dims() => {
            std::borrow::Cow::Owned(image.resized(r as usize, r as usize))
        }
        _ => std::borrow::Cow::Borrowed(image),
    }
}

fn find_layer<'s>(stack: &'s FeatureStack, id: &str) -> std::result::Result<&'s FeatureLayer, BackendError> {
    stack
        .layer(id)
        .ok_or_else(|| BackendError::InvalidResponse(format!("extractor returned no layer {id}")))
}

/// Text-conditioned feature difference, upsampled to the image size.
pub fn semantic_diff(
    normal: &Image,
    anomalous: &Image,
    keywords: &str,
    extractor: &dyn FeatureExtractor,
    spec: &SemanticExtractorSpec,
) -> Result<ScoreMap> {
    check_same_dims(normal, anomalous)?;
    if keywords.trim().is_empty() {
        return Err(Error::validation("semantic branch needs non-empty keywords"));
    }
    let (n, a) = (prepare(normal, spec.input_resolution), prepare(anomalous, spec.input_resolution));
    let layers = std::slice::from_ref(&spec.layer);
    let fs_n = extractor.extract(&n, Some(keywords), layers)?;
    let fs_a = extractor.extract(&a, Some(keywords), layers)?;
    let (ln, la) = (find_layer(&fs_n, &spec.layer)?, find_layer(&fs_a, &spec.layer)?);
    ln.check_covers(n.height(), n.width())?;
    layer_diff_map(ln, la, n.dims(), normal.dims())
}

/// Unconditioned multi-layer feature difference in `[0, 1]`.
pub fn structural_diff(
    normal: &Image,
    anomalous: &Image,
    extractor: &dyn FeatureExtractor,
    spec: &StructuralExtractorSpec,
) -> Result<ScoreMap> {
    check_same_dims(normal, anomalous)?;
    spec.validate()?;
    let (n, a) = (prepare(normal, spec.input_resolution), prepare(anomalous, spec.input_resolution));
    let fs_n = extractor.extract(&n, None, &spec.layers)?;
    let fs_a = extractor.extract(&a, None, &spec.layers)?;
    let mut maps = Vec::with_capacity(spec.layers.len());
    for id in &spec.layers {
        let (ln, la) = (find_layer(&fs_n, id)?, find_layer(&fs_a, id)?);
        ln.check_covers(n.height(), n.width())?;
        maps.push(layer_diff_map(ln, la, n.dims(), normal.dims())?.min_max_normalized());
    }
    Ok(mean_of_maps(&maps, normal.dims()))
}

/// Elementwise product of two maps in `[0, 1]`.
pub fn fuse(semantic: &ScoreMap, structural: &ScoreMap) -> Result<ScoreMap> {
    if semantic.dims() != structural.dims() {
        return Err(Error::validation(format!(
            "cannot fuse a {:?} map with a {:?} map",
            semantic.dims(),
            structural.dims()
        )));
    }
    if semantic.values().iter().chain(structural.values()).any(|&v| v > 1.0) {
        return Err(Error::validation("fused maps must lie in [0, 1]"));
    }
    let values = semantic
        .values()
        .iter()
        .zip(structural.values())
        .map(|(a, b)| a * b)
        .collect();
    ScoreMap::new(semantic.height(), semantic.width(), values)
}

/// `1[S > tau]`.
pub fn binarize(map: &ScoreMap, tau: f64) -> BinaryMask {
    map.threshold(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub category: String,
    pub tau_star: f64,
    pub criterion_value: f64,
    pub num_reference_masks: usize,
    pub candidate_count: usize,
    /// Threshold-free AUROC of the continuous maps against the references.
    pub continuous_auroc: f64,
}

/// `CANDIDATE_THRESHOLDS` evenly spaced quantiles (linear interpolation) of
/// sorted values.
pub fn quantile_candidates(sorted: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    let last = (CANDIDATE_THRESHOLDS - 1) as f64;
    (0..CANDIDATE_THRESHOLDS)
        .map(|k| {
            let pos = k as f64 * (n - 1) as f64 / last;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < n {
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            } else {
                sorted[n - 1]
            }
        })
        .collect()
}

/// Balanced accuracy of a thresholded predictor from confusion counts.
pub fn balanced_accuracy(tp: usize, positives: usize, tn: usize, negatives: usize) -> f64 {
    0.5 * (tp as f64 / positives as f64 + tn as f64 / negatives as f64)
}

/// Picks the candidate threshold maximizing the pooled balanced accuracy of
/// `1[S > tau]` against the reference masks; ties go to the smaller threshold.
pub fn calibrate_threshold(
    category: &str,
    maps: &[ScoreMap],
    references: &[BinaryMask],
) -> Result<CalibrationResult> {
    if maps.is_empty() {
        return Err(Error::Calibration("no reference masks given".into()));
    }
    if maps.len() != references.len() {
        return Err(Error::Calibration(format!(
            "{} score maps but {} reference masks",
            maps.len(),
            references.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (m, r) in maps.iter().zip(references) {
        if m.dims() != r.dims() {
            return Err(Error::Calibration(format!(
                "score map {:?} and reference mask {:?} differ in size",
                m.dims(),
                r.dims()
            )));
        }
        for (&s, &l) in m.values().iter().zip(r.values()) {
            if l == 1 {
                pos.push(f64::from(s));
            } else {
                neg.push(f64::from(s));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Calibration(format!(
            "reference masks for {category} are all {}",
            if pos.is_empty() { "negative" } else { "positive" }
        )));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut pooled: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let candidates = quantile_candidates(&pooled);

    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &tau in &candidates {
        let tp = pos.len() - pos.partition_point(|&s| s <= tau);
        let tn = neg.partition_point(|&s| s <= tau);
        let crit = balanced_accuracy(tp, pos.len(), tn, neg.len());
        if crit > best.0 || (crit == best.0 && tau < best.1) {
            best = (crit, tau);
        }
    }
    let labels: Vec<bool> = std::iter::repeat_n(true, pos.len())
        .chain(std::iter::repeat_n(false, neg.len()))
        .collect();
    let scores = pos.into_iter().chain(neg).collect();
    let continuous_auroc = auroc(&LabeledScores { scores, labels })?;
    Ok(CalibrationResult {
        category: category.to_string(),
        tau_star: best.1,
        criterion_value: best.0,
        num_reference_masks: maps.len(),
        candidate_count: candidates.len(),
        continuous_auroc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub tau_star: f64,
    pub criterion_value: f64,
    pub num_reference_masks: usize,
}

impl From<&CalibrationResult> for CalibrationEntry {
    fn from(r: &CalibrationResult) -> Self {
        Self {
            tau_star: r.tau_star,
            criterion_value: r.criterion_value,
            num_reference_masks: r.num_reference_masks,
        }
    }
}

pub type CalibrationTable = BTreeMap<String, CalibrationEntry>;

pub fn read_calibration(path: &Path) -> Result<CalibrationTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        message: format!("{}: {e}", path.display()),
        raw: text.clone(),
    })
}

pub fn write_calibration(path: &Path, table: &CalibrationTable) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = serde_json::to_string_pretty(table).map_err(|e| Error::Format(e.to_string()))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Adds or replaces one category in a calibration file, creating it if needed.
pub fn update_calibration_file(path: &Path, result: &CalibrationResult) -> Result<CalibrationTable> {
    let mut table = if path.exists() {
        read_calibration(path)?
    } else {
        CalibrationTable::new()
    };
    table.insert(result.category.clone(), result.into());
    write_calibration(path, &table)?;
    Ok(table)
}

fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
                if let Some(stem) = p.file_stem() {
                    out.insert(stem.to_string_lossy().to_string(), p);
                }
            }
        }
    }
    Ok(out)
}

/// Loads score maps and reference masks matched by file stem, in stem order,
/// keeping at most `max_pairs`.
pub fn load_calibration_set(
    scores_dir: &Path,
    refs_dir: &Path,
    max_pairs: Option<usize>,
) -> Result<(Vec<ScoreMap>, Vec<BinaryMask>)> {
    let scores = files_by_stem(scores_dir, "mten")?;
    let refs = files_by_stem(refs_dir, "png")?;
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for (stem, sp) in &scores {
        if max_pairs.is_some_and(|m| maps.len() >= m) {
            break;
        }
        if let Some(rp) = refs.get(stem) {
            maps.push(read_score_map(sp)?);
            masks.push(read_mask_png(rp)?);
        }
    }
    if maps.is_empty() {
        return Err(Error::Calibration(format!(
            "no score map in {} matches a reference mask in {}",
            scores_dir.display(),
            refs_dir.display()
        )));
    }
    Ok((maps, masks))
}

/// Both extractors with their layer selections.
pub struct MaskBranches<'a> {
    pub semantic: &'a dyn FeatureExtractor,
    pub semantic_spec: SemanticExtractorSpec,
    pub structural: &'a dyn FeatureExtractor,
    pub structural_spec: StructuralExtractorSpec,
}

impl MaskBranches<'_> {
    /// Fused score map `S` for one pair.
    pub fn score(&self, normal: &Image, anomalous: &Image, keywords: &str) -> Result<ScoreMap> {
        let sem = semantic_diff(normal, anomalous, keywords, self.semantic, &self.semantic_spec)?;
        let st = structural_diff(normal, anomalous, self.structural, &self.structural_spec)?;
        fuse(&sem.min_max_normalized(), &st)
    }

    fn concurrency_safe(&self) -> bool {
        self.semantic.concurrency_safe() && self.structural.concurrency_safe()
    }
}

fn rel(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Scores one generated record and, when a threshold is given, writes its
/// binary mask. Extractor failures mark the record failed instead of erroring.
pub fn mask_pipeline(
    root: &Path,
    record: &GenerationRecord,
    branches: &MaskBranches<'_>,
    tau: Option<f64>,
    timestamps: TimestampMode,
) -> Result<GenerationRecord> {
    if record.status != RecordStatus::Generated {
        return Err(Error::validation(format!(
            "record {} has status {:?}, expected generated",
            record.record_id, record.status
        )));
    }
    let generated = record
        .generated_image
        .as_ref()
        .ok_or_else(|| Error::validation(format!("record {} has no generated image", record.record_id)))?;
    let normal = read_image(&root.join(&record.normal_image.path))?;
    let anomalous = read_image(&root.join(&generated.path))?;
    let mut keywords = record.defect.grounding_text();
    if keywords.trim().is_empty() {
        keywords = record.defect.name.clone();
    }
    let mut out = record.clone();
    let map = match branches.score(&normal, &anomalous, &keywords) {
        Ok(m) => m,
        Err(Error::Backend(e)) => {
            out.status = RecordStatus::Failed;
            out.error = Some(format!("mask extraction failed: {e}"));
            out.updated_at_ms = timestamps.now_ms();
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let slug = record.defect.slug();
    let sp = score_path(root, &record.category, &slug, &record.record_id);
    write_score_map(&map, &sp)?;
    out.score_path = Some(rel(root, &sp));
    if let Some(tau) = tau {
        let mp = mask_path(root, &record.category, &slug, &record.record_id);
        write_mask_png(&binarize(&map, tau), &mp)?;
        out.mask_path = Some(rel(root, &mp));
        out.threshold_used = Some(tau);
        out.status = RecordStatus::Masked;
    }
    out.updated_at_ms = timestamps.now_ms();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub scored: usize,
    pub masked: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Runs the mask pipeline over every generated record of a manifest and
/// rewrites it. With `calibration = None` only score maps are written.
pub fn mask_manifest(
    manifest_path: &Path,
    branches: &MaskBranches<'_>,
    calibration: Option<&CalibrationTable>,
    timestamps: TimestampMode,
) -> Result<MaskSummary> {
    let root = dataset_root(manifest_path);
    let mut records = read_manifest(manifest_path)?;
    let todo: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.status == RecordStatus::Generated)
        .map(|(i, _)| i)
        .collect();
    let mut taus = BTreeMap::new();
    if let Some(table) = calibration {
        for &i in &todo {
            let cat = &records[i].category;
            let entry = table
                .get(cat)
                .ok_or_else(|| Error::Config(format!("no calibration for category {cat}")))?;
            taus.insert(cat.clone(), entry.tau_star);
        }
    }
    let run = |i: &usize| {
        let r = &records[*i];
        mask_pipeline(&root, r, branches, taus.get(&r.category).copied(), timestamps)
    };
    let updated: Vec<GenerationRecord> = if branches.concurrency_safe() {
        todo.par_iter().map(run).collect::<Result<_>>()?
    } else {
        todo.iter().map(run).collect::<Result<_>>()?
    };
    let mut summary = MaskSummary {
        skipped: records.len() - todo.len(),
        ..Default::default()
    };
    for (i, rec) in todo.into_iter().zip(updated) {
        match rec.status {
            RecordStatus::Failed => summary.failed += 1,
            RecordStatus::Masked => {
                summary.scored += 1;
                summary.masked += 1;
            }
            _ => summary.scored += 1,
        }
        records[i] = rec;
    }
    rewrite_manifest(manifest_path, &records)?;
    Ok(summary)
}

/// Seeded deterministic extractor. Each feature cell is a random projection
/// of the pixels of its `stride x stride` patch squashed by `tanh`; text
/// scales every channel by a seeded gain. A pixel change therefore only moves
/// the features of the cells that contain it.
pub struct MockExtractor {
    seed: u64,
    channels: usize,
    strides: BTreeMap<String, usize>,
}

impl MockExtractor {
    pub fn new(seed: u64, channels: usize, strides: BTreeMap<String, usize>) -> Self {
        Self {
            seed,
            channels,
            strides,
        }
    }

    /// Layers `last_fusion` (stride 4) and `pyramid_0..2` (strides 1, 2, 4).
    pub fn standard(seed: u64) -> Self {
        let strides = [("last_fusion", 4), ("pyramid_0", 1), ("pyramid_1", 2), ("pyramid_2", 4)]
            .into_iter()
            .map(|(k, s)| (k.to_string(), s))
            .collect();
        Self::new(seed, 16, strides)
    }

    fn projection(&self, layer: &str, n_in: usize) -> Vec<f32> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[b"layer", layer.as_bytes()]));
        (0..self.channels * n_in).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn text_gain(&self, text: Option<&str>) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        match text {
            None => vec![1.0; self.channels],
            Some(t) => {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[b"text", t.as_bytes()]));
                (0..self.channels).map(|_| 0.5 + rng.random::<f32>()).collect()
            }
        }
    }

    fn layer(&self, image: &Image, id: &str, stride: usize, gain: &[f32]) -> FeatureLayer {
        let (h, w) = image.dims();
        let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
        let n_in = stride * stride * 3;
        let proj = self.projection(id, n_in);
        let norm = (n_in as f32).sqrt();
        let mut values = vec![0.0f32; self.channels * gh * gw];
        let mut patch = vec![0.0f32; n_in];
        for gy in 0..gh {
            for gx in 0..gw {
                patch.iter_mut().for_each(|p| *p = 0.0);
                for dy in 0..stride {
                    for dx in 0..stride {
                        let (y, x) = (gy * stride + dy, gx * stride + dx);
                        if y < h && x < w {
                            let px = image.pixel(x, y);
                            let o = (dy * stride + dx) * 3;
                            for k in 0..3 {
                                patch[o + k] = px[k] - 0.5;
                            }
                        }
                    }
                }
                for c in 0..self.channels {
                    let row = &proj[c * n_in..(c + 1) * n_in];
                    let s: f32 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    values[c * gh * gw + gy * gw + gx] = (2.0 * s / norm).tanh() * gain[c];
                }
            }
        }
        FeatureLayer {
            id: id.to_string(),
            channels: self.channels,
            height: gh,
            width: gw,
            stride,
            values,
        }
    }
}

impl FeatureExtractor for MockExtractor {
    fn extract(
        &self,
        image: &Image,
        text: Option<&str>,
        layers: &[String],
    ) -> std::result::Result<FeatureStack, BackendError> {
        let gain = self.text_gain(text);
        let layers = layers
            .iter()
            .map(|id| {
                let stride = *self
                    .strides
                    .get(id)
                    .ok_or_else(|| BackendError::InvalidResponse(format!("mock extractor has no layer {id}")))?;
                Ok(self.layer(image, id, stride, &gain))
            })
            .collect::<std::result::Result<_, BackendError>>()?;
        Ok(FeatureStack { layers })
    }
}

#[derive(Serialize)]
struct ExtractRequestBody<'a> {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    layers: &'a [String],
}

#[derive(Deserialize)]
struct LayerBody {
    id: String,
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    values: Vec<f32>,
}

#[derive(Deserialize)]
struct ExtractResponseBody {
    layers: Vec<LayerBody>,
}

/// Client for a feature server wrapping a pretrained detector or segmenter:
/// `{image, text?, layers}` -> `{layers: [{id, channels, height, width, stride, values}]}`.
pub struct HttpExtractor {
    client: HttpJsonClient,
}

impl HttpExtractor {
    pub fn new(config: EndpointConfig) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
        })
    }
}

impl FeatureExtractor for HttpExtractor {
    fn extract(
        &self,
        image: &Image,
        text: Option<&str>,
        layers: &[String],
    ) -> std::result::Result<FeatureStack, BackendError> {
        let png = image
            .encode_png()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let resp: ExtractResponseBody = self.client.post(&ExtractRequestBody {
            image: b64_encode(&png),
            text,
            layers,
        })?;
        let layers = resp
            .layers
            .into_iter()
            .map(|l| {
                FeatureLayer::new(l.id, l.channels, l.height, l.width, l.stride, l.values)
                    .map_err(|e| BackendError::InvalidResponse(e.to_string()))
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(FeatureStack { layers })
    }

    fn concurrency_safe(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(id: &str, c: usize, h: usize, w: usize, stride: usize, v: Vec<f32>) -> FeatureLayer {
        FeatureLayer::new(id, c, h, w, stride, v).unwrap()
    }

    #[test]
    fn upsample_hand_oracle() {
        let up = bilinear_upsample(&[5.0, 0.0, 0.0, 0.0], 2, 2, 4, 4);
        let expect = [
            5.0, 3.75, 1.25, 0.0, 3.75, 2.8125, 0.9375, 0.0, 1.25, 0.9375, 0.3125, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        for (a, b) in up.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{up:?}");
        }
    }

    #[test]
    fn semantic_bump_peaks_at_its_cell() {
        let zeros = layer("s", 2, 4, 4, 4, vec![0.0; 32]);
        let mut v = vec![0.0; 32];
        v[16 + 2 * 4 + 1] = 1.0; // channel 1, cell (2, 1)
        let bump = layer("s", 2, 4, 4, 4, v);
        let m = semantic_map_from_features(&zeros, &bump, (16, 16)).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for y in 0..16 {
            for x in 0..16 {
                if m.get(y, x) > best {
                    best = m.get(y, x);
                    at = (y, x);
                }
            }
        }
        // pixel centres sit 1/8 of a cell from the nearest grid centre
        assert!((best - 0.875f32 * 0.875).abs() < 1e-6, "{best}");
        assert_eq!((at.0 / 4, at.1 / 4), (2, 1));
    }

    #[test]
    fn structural_one_hot_normalizes_to_one() {
        let zeros = layer("p", 1, 2, 2, 1, vec![0.0; 4]);
        let hot = layer("p", 1, 2, 2, 1, vec![0.0, 3.0, 0.0, 0.0]);
        let m = structural_map_from_features(&[(&zeros, &hot)], (2, 2)).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn structural_two_layers_average() {
        let z = layer("p", 1, 2, 2, 1, vec![0.0; 4]);
        let a = layer("p", 1, 2, 2, 1, vec![0.0, 2.0, 1.0, 0.0]);
        let b = layer("q", 1, 2, 2, 1, vec![4.0, 0.0, 0.0, 0.0]);
        let m = structural_map_from_features(&[(&z, &a), (&z, &b)], (2, 2)).unwrap();
        let expect = [0.5, 0.5, 0.25, 0.0];
        for (x, e) in m.values().iter().zip(expect) {
            assert!((x - e).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_identities() {
        let m = ScoreMap::new(1, 3, vec![0.2, 0.7, 1.0]).unwrap();
        assert_eq!(fuse(&m, &ScoreMap::zeros(1, 3)).unwrap(), ScoreMap::zeros(1, 3));
        let ones = ScoreMap::new(1, 3, vec![1.0; 3]).unwrap();
        assert_eq!(fuse(&m, &ones).unwrap(), m);
        assert!(fuse(&m, &ScoreMap::zeros(3, 1)).is_err());
    }

    #[test]
    fn binarize_edges() {
        let m = ScoreMap::new(1, 4, vec![0.0, 0.3, 0.9, 0.3]).unwrap();
        assert_eq!(binarize(&m, 0.9).count_ones(), 0);
        assert_eq!(binarize(&m, -1.0).count_ones(), 4);
        assert_eq!(binarize(&m, f64::from(0.3f32)).count_ones(), 1);
    }

    #[test]
    fn separable_calibration() {
        let m = ScoreMap::new(4, 4, (0..16).map(|i| if i < 3 { 0.8 + i as f32 * 0.05 } else { 0.1 + i as f32 * 0.01 }).collect()).unwrap();
        let r = BinaryMask::from_fn(4, 4, |y, x| y * 4 + x < 3);
        let c = calibrate_threshold("c", &[m], &[r]).unwrap();
        assert_eq!(c.criterion_value, 1.0);
        assert!(c.tau_star >= 0.25 && c.tau_star < 0.8, "{}", c.tau_star);
        assert_eq!(c.continuous_auroc, 1.0);
        assert_eq!(c.candidate_count, 256);
    }

    #[test]
    fn constant_map_calibration() {
        let m = ScoreMap::new(2, 2, vec![0.4; 4]).unwrap();
        let r = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let c = calibrate_threshold("c", &[m], &[r]).unwrap();
        assert_eq!(c.criterion_value, 0.5);
        assert!((c.tau_star - 0.4).abs() < 1e-7);
    }

    #[test]
    fn degenerate_references() {
        let m = ScoreMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let e = calibrate_threshold("c", &[m.clone()], &[BinaryMask::zeros(2, 2)]).unwrap_err();
        assert!(matches!(e, Error::Calibration(_)));
        let ones = BinaryMask::new(2, 2, vec![1; 4]).unwrap();
        assert!(matches!(calibrate_threshold("c", &[m], &[ones]), Err(Error::Calibration(_))));
        assert!(calibrate_threshold("c", &[], &[]).is_err());
    }

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identical_pair_gives_zero_map() {
        let ex = MockExtractor::standard(3);
        let img = noise_image(1, 20, 28);
        let branches = MaskBranches {
            semantic: &ex,
            semantic_spec: SemanticExtractorSpec::default(),
            structural: &ex,
            structural_spec: StructuralExtractorSpec::default(),
        };
        let first = ex.extract(&img, Some("scratch"), &["pyramid_1".into()]).unwrap();
        assert_eq!(first, ex.extract(&img, Some("scratch"), &["pyramid_1".into()]).unwrap());
        let s = branches.score(&img, &img, "scratch").unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branches_are_swap_symmetric() {
        let ex = MockExtractor::standard(5);
        let a = noise_image(1, 16, 16);
        let b = noise_image(2, 16, 16);
        let sem = SemanticExtractorSpec::default();
        assert_eq!(
            semantic_diff(&a, &b, "dent", &ex, &sem).unwrap(),
            semantic_diff(&b, &a, "dent", &ex, &sem).unwrap()
        );
        let st = StructuralExtractorSpec::default();
        assert_eq!(structural_diff(&a, &b, &ex, &st).unwrap(), structural_diff(&b, &a, &ex, &st).unwrap());
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let ex = MockExtractor::standard(5);
        let a = noise_image(1, 16, 16);
        let b = noise_image(2, 16, 12);
        assert!(matches!(
            semantic_diff(&a, &b, "dent", &ex, &SemanticExtractorSpec::default()),
            Err(Error::Validation(_))
        ));
        assert!(semantic_diff(&a, &a, " ", &ex, &SemanticExtractorSpec::default()).is_err());
    }

    #[test]
    fn input_resolution_still_maps_to_image_size() {
        let ex = MockExtractor::standard(5);
        let a = noise_image(1, 30, 20);
        let b = noise_image(2, 30, 20);
        let spec = SemanticExtractorSpec {
            input_resolution: Some(16),
            ..Default::default()
        };
        assert_eq!(semantic_diff(&a, &b, "dent", &ex, &spec).unwrap().dims(), (30, 20));
    }
}
