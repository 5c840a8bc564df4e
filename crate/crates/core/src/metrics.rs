//! Evaluation metrics: AUROC (pixel and image level), Inception Score and
//! intra-cluster perceptual distance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{b64_encode, derive_seed, EndpointConfig, HttpJsonClient};
use crate::error::{BackendError, Error, Result};
use crate::image::{read_image, Image};
use crate::manifest::{dataset_root, read_manifest, RecordStatus};
use crate::mask::{read_mask_png, BinaryMask, ScoreMap};
use crate::tensor::read_score_map;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::validation("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }
}

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks;
/// tied positive/negative pairs count one half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let n_pos = data.labels.iter().filter(|&&l| l).count();
    let n_neg = data.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && data.scores[order[j + 1]] == data.scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| data.labels[k]).count();
        rank_sum_pos += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Pools every pixel of every map into one AUROC.
pub fn pixel_auroc(maps: &[ScoreMap], masks: &[BinaryMask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::validation(format!(
            "{} score maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let total: usize = maps.iter().map(|m| m.values().len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(Error::validation(format!(
                "score map {:?} and mask {:?} differ in size",
                m.dims(),
                g.dims()
            )));
        }
        scores.extend(m.values().iter().map(|&v| f64::from(v)));
        labels.extend(g.values().iter().map(|&v| v == 1));
    }
    auroc(&LabeledScores { scores, labels })
}

/// How an image-level score is derived from a pixel map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "k")]
pub enum ImageScoreRule {
    #[default]
    Max,
    TopKMean(usize),
}

impl ImageScoreRule {
    pub fn score(self, map: &ScoreMap) -> f64 {
        match self {
            ImageScoreRule::Max => f64::from(map.max()),
            ImageScoreRule::TopKMean(k) => {
                let mut v: Vec<f32> = map.values().to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                let k = k.clamp(1, v.len());
                v[..k].iter().map(|&x| f64::from(x)).sum::<f64>() / k as f64
            }
        }
    }
}

pub fn image_auroc(maps: &[ScoreMap], anomalous: &[bool], rule: ImageScoreRule) -> Result<f64> {
    if maps.len() != anomalous.len() {
        return Err(Error::validation(format!(
            "{} score maps but {} image labels",
            maps.len(),
            anomalous.len()
        )));
    }
    let scores = maps.iter().map(|m| rule.score(m)).collect();
    auroc(&LabeledScores {
        scores,
        labels: anomalous.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probabilities: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::validation("class distribution is empty"));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation("class probabilities must be finite and >= 0"));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("class probabilities sum to {sum}")));
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

/// `exp(E_x KL(p(y|x) || p(y)))` with `0 log 0 = 0`; no split averaging.
pub fn inception_score(dists: &[ClassDistribution]) -> Result<f64> {
    let first = dists
        .first()
        .ok_or_else(|| Error::validation("inception score needs at least one image"))?;
    let k = first.probabilities.len();
    if dists.iter().any(|d| d.probabilities.len() != k) {
        return Err(Error::validation("class distributions disagree on class count"));
    }
    let n = dists.len() as f64;
    let mut marginal = vec![0.0; k];
    for d in dists {
        for (m, p) in marginal.iter_mut().zip(&d.probabilities) {
            *m += p / n;
        }
    }
    let mean_kl = dists
        .iter()
        .map(|d| {
            d.probabilities
                .iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

/// Perceptual distance between two images (LPIPS-like).
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &Image, b: &Image) -> std::result::Result<f64, BackendError>;
}

/// Mean over clusters of the mean pairwise distance within each cluster.
pub fn ic_lpips(clusters: &[Vec<Image>], perceptual: &dyn PerceptualDistance) -> Result<f64> {
    if clusters.is_empty() {
        return Err(Error::validation("IC-LPIPS needs at least one cluster"));
    }
    let mut total = 0.0;
    for (ci, cluster) in clusters.iter().enumerate() {
        if cluster.len() < 2 {
            return Err(Error::validation(format!(
                "cluster {ci} has {} image(s); at least 2 are required",
                cluster.len()
            )));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..cluster.len() {
            for j in i + 1..cluster.len() {
                sum += perceptual.distance(&cluster[i], &cluster[j])?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / clusters.len() as f64)
}

/// Image classifier producing a distribution over classes.
pub trait ImageClassifier: Send + Sync {
    fn classify(&self, image: &Image) -> std::result::Result<ClassDistribution, BackendError>;
}

/// Softmax over a seeded random projection of a 16x16 thumbnail.
pub struct MockClassifier {
    classes: usize,
    weights: Vec<f32>,
    temperature: f64,
}

impl MockClassifier {
    pub fn new(seed: u64, classes: usize) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"classifier"]));
        let weights = (0..classes * 16 * 16 * 3)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            classes,
            weights,
            temperature: 0.5,
        }
    }
}

impl ImageClassifier for MockClassifier {
    fn classify(&self, image: &Image) -> std::result::Result<ClassDistribution, BackendError> {
        let thumb = image.resized(16, 16);
        let n = 16 * 16 * 3;
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * n..(c + 1) * n];
                let s: f32 = w.iter().zip(thumb.data()).map(|(w, x)| w * (x - 0.5)).sum();
                f64::from(s) / (n as f64).sqrt() / self.temperature
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        ClassDistribution::new(exps.into_iter().map(|e| e / z).collect())
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

/// Mean absolute difference between 32x32 thumbnails.
pub struct MockPerceptual;

impl PerceptualDistance for MockPerceptual {
    fn distance(&self, a: &Image, b: &Image) -> std::result::Result<f64, BackendError> {
        let (ta, tb) = (a.resized(32, 32), b.resized(32, 32));
        let n = ta.data().len() as f64;
        Ok(ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f64::from((x - y).abs()))
            .sum::<f64>()
            / n)
    }
}

#[derive(Serialize)]
struct ClassifyRequestBody {
    image: String,
}

#[derive(Deserialize)]
struct ClassifyResponseBody {
    probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct DistanceRequestBody {
    image_a: String,
    image_b: String,
}

#[derive(Deserialize)]
struct DistanceResponseBody {
    distance: f64,
}

fn png_b64(img: &Image) -> std::result::Result<String, BackendError> {
    img.encode_png()
        .map(|b| b64_encode(&b))
        .map_err(|e| BackendError::InvalidResponse(e.to_string()))
}

pub struct HttpClassifier {
    client: HttpJsonClient,
}

impl HttpClassifier {
    pub fn new(config: EndpointConfig) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
        })
    }
}

impl ImageClassifier for HttpClassifier {
    fn classify(&self, image: &Image) -> std::result::Result<ClassDistribution, BackendError> {
        let r: ClassifyResponseBody = self.client.post(&ClassifyRequestBody {
            image: png_b64(image)?,
        })?;
        ClassDistribution::new(r.probabilities).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

pub struct HttpPerceptual {
    client: HttpJsonClient,
}

impl HttpPerceptual {
    pub fn new(config: EndpointConfig) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
        })
    }
}

impl PerceptualDistance for HttpPerceptual {
    fn distance(&self, a: &Image, b: &Image) -> std::result::Result<f64, BackendError> {
        let r: DistanceResponseBody = self.client.post(&DistanceRequestBody {
            image_a: png_b64(a)?,
            image_b: png_b64(b)?,
        })?;
        Ok(r.distance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub images: usize,
    pub inception_score: f64,
    pub ic_lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub categories: BTreeMap<String, QualityRow>,
    pub mean_inception_score: f64,
    pub mean_ic_lpips: Option<f64>,
}

/// IS and IC-LPIPS per category over the kept generated images of a dataset.
/// Clusters are the images sharing a defect type; defects with a single image
/// are left out of IC-LPIPS.
pub fn quality_report(
    manifest_path: &Path,
    classifier: &dyn ImageClassifier,
    perceptual: &dyn PerceptualDistance,
) -> Result<QualityReport> {
    let root = dataset_root(manifest_path);
    let records = read_manifest(manifest_path)?;
    let mut by_cat: BTreeMap<String, BTreeMap<String, Vec<PathBuf>>> = BTreeMap::new();
    for r in &records {
        if !matches!(r.status, RecordStatus::Generated | RecordStatus::Masked) {
            continue;
        }
        if let Some(g) = &r.generated_image {
            by_cat
                .entry(r.category.clone())
                .or_default()
                .entry(r.defect.slug())
                .or_default()
                .push(root.join(&g.path));
        }
    }
    if by_cat.is_empty() {
        return Err(Error::validation("no generated images to evaluate"));
    }
    let mut categories = BTreeMap::new();
    for (cat, defects) in by_cat {
        let mut dists = Vec::new();
        let mut clusters = Vec::new();
        for paths in defects.values() {
            let imgs = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
            for img in &imgs {
                dists.push(classifier.classify(img)?);
            }
            if imgs.len() >= 2 {
                clusters.push(imgs);
            }
        }
        let ic = if clusters.is_empty() {
            None
        } else {
            Some(ic_lpips(&clusters, perceptual)?)
        };
        categories.insert(
            cat,
            QualityRow {
                images: dists.len(),
                inception_score: inception_score(&dists)?,
                ic_lpips: ic,
            },
        );
    }
    let n = categories.len() as f64;
    let mean_inception_score = categories.values().map(|r| r.inception_score).sum::<f64>() / n;
    let ics: Vec<f64> = categories.values().filter_map(|r| r.ic_lpips).collect();
    let mean_ic_lpips = (!ics.is_empty()).then(|| ics.iter().sum::<f64>() / ics.len() as f64);
    Ok(QualityReport {
        categories,
        mean_inception_score,
        mean_ic_lpips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEvalRow {
    pub images: usize,
    pub pixel_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEvalReport {
    pub categories: BTreeMap<String, MaskEvalRow>,
    /// Mean of the per-category values.
    pub overall: f64,
}

fn collect_files(dir: &Path, ext: &[&str], out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, ext, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ext.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Pairs `<scores>/<category>/**/<stem>.mten` with `<gts>/<category>/**/<stem>.png`
/// and reports pooled pixel AUROC per category.
pub fn mask_report(scores_dir: &Path, gts_dir: &Path) -> Result<MaskEvalReport> {
    let mut score_files = Vec::new();
    collect_files(scores_dir, &["mten"], &mut score_files)?;
    let mut gt_files = Vec::new();
    collect_files(gts_dir, &["png"], &mut gt_files)?;
    let key = |root: &Path, p: &Path| -> Option<(String, String)> {
        let relp = p.strip_prefix(root).ok()?;
        let cat = relp.components().next()?.as_os_str().to_string_lossy().to_string();
        let stem = p.file_stem()?.to_string_lossy().to_string();
        Some((cat, stem))
    };
    let gts: BTreeMap<(String, String), PathBuf> = gt_files
        .into_iter()
        .filter_map(|p| key(gts_dir, &p).map(|k| (k, p)))
        .collect();
    let mut per_cat: BTreeMap<String, (Vec<ScoreMap>, Vec<BinaryMask>)> = BTreeMap::new();
    score_files.sort();
    for sp in score_files {
        let Some(k) = key(scores_dir, &sp) else { continue };
        let Some(gp) = gts.get(&k) else {
            log::warn!("no ground truth for {}", sp.display());
            continue;
        };
        let entry = per_cat.entry(k.0.clone()).or_default();
        entry.0.push(read_score_map(&sp)?);
        entry.1.push(read_mask_png(gp)?);
    }
    if per_cat.is_empty() {
        return Err(Error::validation("no score map matched a ground-truth mask"));
    }
    let mut categories = BTreeMap::new();
    for (cat, (maps, masks)) in per_cat {
        categories.insert(
            cat,
            MaskEvalRow {
                images: maps.len(),
                pixel_auroc: pixel_auroc(&maps, &masks)?,
            },
        );
    }
    let overall = categories.values().map(|r| r.pixel_auroc).sum::<f64>() / categories.len() as f64;
    Ok(MaskEvalReport {
        categories,
        overall,
    })
}
