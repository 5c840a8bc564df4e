//! Image-text similarity quality filter.
//!
//! Four cosine similarities are computed between the normal/generated images
//! and the normal/anomaly prompts. A generated image is kept when
//!
//! * C1: `sim(I_a, p_a) >= sim(I_n, p_n)`
//! * C2: `sim(I_a, p_a) >= sim(I_a, p_n)`
//! * C3: `sim(I_a, p_a) >= sim(I_n, p_a)`

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{b64_encode, derive_seed, EndpointConfig, HttpJsonClient};
use crate::error::{BackendError, Error, Result};
use crate::image::{read_image, Image};
use crate::manifest::{dataset_root, read_manifest, rewrite_manifest, GenerationRecord, RecordStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityQuad {
    /// sim(I_a, p_a)
    pub s_aa: f64,
    /// sim(I_n, p_n)
    pub s_nn: f64,
    /// sim(I_a, p_n)
    pub s_an: f64,
    /// sim(I_n, p_a)
    pub s_na: f64,
}

impl SimilarityQuad {
    pub fn new(s_aa: f64, s_nn: f64, s_an: f64, s_na: f64) -> Result<Self> {
        let q = Self {
            s_aa,
            s_nn,
            s_an,
            s_na,
        };
        for v in [s_aa, s_nn, s_an, s_na] {
            if !v.is_finite() || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::validation(format!("similarity {v} outside [-1, 1]")));
            }
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub normal_prompt: String,
    pub anomaly_prompt: String,
}

impl PromptPair {
    /// `"a normal <category>"` against the full defect description.
    pub fn for_defect(category: &str, description: &str) -> Result<Self> {
        let p = Self {
            normal_prompt: format!("a normal {}", category.trim()),
            anomaly_prompt: description.trim().to_string(),
        };
        if category.trim().is_empty() || p.anomaly_prompt.is_empty() {
            return Err(Error::validation("filter prompts must be non-empty"));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    C1,
    C2,
    C3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard(Vec<Condition>),
}

impl Verdict {
    pub fn is_keep(&self) -> bool {
        matches!(self, Verdict::Keep)
    }
}

pub fn apply_filter(q: &SimilarityQuad) -> Verdict {
    let mut violated = Vec::new();
    if q.s_aa < q.s_nn {
        violated.push(Condition::C1);
    }
    if q.s_aa < q.s_an {
        violated.push(Condition::C2);
    }
    if q.s_aa < q.s_na {
        violated.push(Condition::C3);
    }
    if violated.is_empty() {
        Verdict::Keep
    } else {
        Verdict::Discard(violated)
    }
}

/// Joint image-text embedding model. Both methods return unit vectors of
/// length [`ImageTextEmbedder::dim`].
pub trait ImageTextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> std::result::Result<Vec<f32>, BackendError>;
    fn embed_text(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError>;
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / n) as f32;
        }
    }
    v
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn check_dim(v: &[f32], dim: usize) -> std::result::Result<(), BackendError> {
    if v.len() != dim {
        return Err(BackendError::InvalidResponse(format!(
            "embedding has {} entries, expected {dim}",
            v.len()
        )));
    }
    Ok(())
}

/// Two image and two text embeddings, then the four cosines.
pub fn compute_similarities(
    normal: &Image,
    anomalous: &Image,
    prompts: &PromptPair,
    embedder: &dyn ImageTextEmbedder,
) -> Result<SimilarityQuad> {
    let dim = embedder.dim();
    let e_n = embedder.embed_image(normal)?;
    let e_a = embedder.embed_image(anomalous)?;
    let t_n = embedder.embed_text(&prompts.normal_prompt)?;
    let t_a = embedder.embed_text(&prompts.anomaly_prompt)?;
    for v in [&e_n, &e_a, &t_n, &t_a] {
        check_dim(v, dim)?;
    }
    SimilarityQuad::new(
        cosine(&e_a, &t_a),
        cosine(&e_n, &t_n),
        cosine(&e_a, &t_n),
        cosine(&e_n, &t_a),
    )
}

/// Memoizes text embeddings and image embeddings keyed by a caller-supplied
/// string (the image path), so repeated prompts and normals cost one call.
pub struct CachingEmbedder<'a> {
    inner: &'a dyn ImageTextEmbedder,
    texts: Mutex<HashMap<String, Vec<f32>>>,
    images: Mutex<HashMap<String, Vec<f32>>>,
}

impl<'a> CachingEmbedder<'a> {
    pub fn new(inner: &'a dyn ImageTextEmbedder) -> Self {
        Self {
            inner,
            texts: Mutex::new(HashMap::new()),
            images: Mutex::new(HashMap::new()),
        }
    }

    pub fn image_keyed(&self, key: &str, image: &Image) -> std::result::Result<Vec<f32>, BackendError> {
        if let Some(v) = self.images.lock().expect("cache poisoned").get(key) {
            return Ok(v.clone());
        }
        let v = self.inner.embed_image(image)?;
        self.images
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), v.clone());
        Ok(v)
    }
}

impl ImageTextEmbedder for CachingEmbedder<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_image(&self, image: &Image) -> std::result::Result<Vec<f32>, BackendError> {
        self.inner.embed_image(image)
    }

    fn embed_text(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError> {
        if let Some(v) = self.texts.lock().expect("cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed_text(text)?;
        self.texts
            .lock()
            .expect("cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Seeded stand-in embedder.
///
/// Text embeddings are pseudo-random unit vectors keyed by the text. Image
/// embeddings are a fixed random projection of an 8x8 thumbnail plus, for
/// every pixel that departs strongly from its neighbourhood, a pull towards
/// the "anomaly direction" shared by all non-"a normal ..." prompts. Generated
/// images with visible localized defects therefore tend to score higher
/// against anomaly prompts than their normal source.
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    projection: Vec<f32>,
}

const THUMB: usize = 8;

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"projection"]));
        let projection = (0..dim * THUMB * THUMB * 3)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        Self {
            seed,
            dim,
            projection,
        }
    }

    fn seeded_unit(&self, label: &[u8]) -> Vec<f32> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[label]));
        normalize((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn anomaly_direction(&self) -> Vec<f32> {
        self.seeded_unit(b"anomaly-direction")
    }

    fn outlier_fraction(image: &Image) -> f64 {
        let (h, w) = image.dims();
        if h < 3 || w < 3 {
            return 0.0;
        }
        let mut count = 0usize;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = image.pixel(x, y);
                let mut dev = 0.0f32;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let n = image.pixel((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                    dev = dev.max((0..3).map(|k| (c[k] - n[k]).abs()).fold(0.0, f32::max));
                }
                if dev > 0.2 {
                    count += 1;
                }
            }
        }
        count as f64 / ((h - 2) * (w - 2)) as f64
    }
}

impl ImageTextEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> std::result::Result<Vec<f32>, BackendError> {
        let thumb = image.resized(THUMB, THUMB);
        let n_in = THUMB * THUMB * 3;
        let mut v: Vec<f32> = (0..self.dim)
            .map(|d| {
                let row = &self.projection[d * n_in..(d + 1) * n_in];
                let s: f32 = row.iter().zip(thumb.data()).map(|(p, x)| p * (x - 0.5)).sum();
                s / (n_in as f32).sqrt()
            })
            .collect();
        let base = normalize(v.clone());
        let pull = (Self::outlier_fraction(image) * 40.0).min(2.0) as f32;
        for ((x, b), a) in v.iter_mut().zip(&base).zip(self.anomaly_direction()) {
            *x = 0.3 * b + pull * a;
        }
        Ok(normalize(v))
    }

    fn embed_text(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError> {
        let own = self.seeded_unit(text.as_bytes());
        if text.starts_with("a normal ") {
            return Ok(own);
        }
        let a = self.anomaly_direction();
        Ok(normalize(own.iter().zip(&a).map(|(o, a)| 0.5 * o + a).collect()))
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EmbedRequestBody<'a> {
    Image { image: String },
    Text { text: &'a str },
}

#[derive(Deserialize)]
struct EmbedResponseBody {
    embedding: Vec<f32>,
}

/// Client for an embedding service wrapping a pretrained image-text encoder.
pub struct HttpEmbedder {
    client: HttpJsonClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(config: EndpointConfig, dim: usize) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
            dim,
        })
    }
}

impl ImageTextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> std::result::Result<Vec<f32>, BackendError> {
        let png = image
            .encode_png()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let r: EmbedResponseBody = self.client.post(&EmbedRequestBody::Image {
            image: b64_encode(&png),
        })?;
        check_dim(&r.embedding, self.dim)?;
        Ok(normalize(r.embedding))
    }

    fn embed_text(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError> {
        let r: EmbedResponseBody = self.client.post(&EmbedRequestBody::Text { text })?;
        check_dim(&r.embedding, self.dim)?;
        Ok(normalize(r.embedding))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeepStats {
    pub total: usize,
    pub kept: usize,
    pub keep_rate: f64,
}

impl KeepStats {
    fn add(&mut self, kept: bool) {
        self.total += 1;
        self.kept += usize::from(kept);
        self.keep_rate = self.kept as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub per_category: BTreeMap<String, KeepStats>,
    pub per_defect: BTreeMap<String, KeepStats>,
    pub errors: usize,
}

impl FilterReport {
    pub fn overall_keep_rate(&self) -> f64 {
        let (t, k) = self
            .per_category
            .values()
            .fold((0, 0), |(t, k), s| (t + s.total, k + s.kept));
        if t == 0 {
            0.0
        } else {
            k as f64 / t as f64
        }
    }
}

fn filter_record(
    root: &Path,
    rec: &GenerationRecord,
    embedder: &CachingEmbedder<'_>,
) -> Result<SimilarityQuad> {
    let gen = rec
        .generated_image
        .as_ref()
        .ok_or_else(|| Error::validation(format!("record {} has no image", rec.record_id)))?;
    let normal_path = root.join(&rec.normal_image.path);
    let normal = read_image(&normal_path)?;
    let anomalous = read_image(&root.join(&gen.path))?;
    let prompts = PromptPair::for_defect(&rec.category, &rec.defect.description)?;
    let dim = embedder.dim();
    let e_n = embedder.image_keyed(&normal_path.to_string_lossy(), &normal)?;
    let e_a = embedder.embed_image(&anomalous)?;
    let t_n = embedder.embed_text(&prompts.normal_prompt)?;
    let t_a = embedder.embed_text(&prompts.anomaly_prompt)?;
    for v in [&e_n, &e_a, &t_n, &t_a] {
        check_dim(v, dim)?;
    }
    SimilarityQuad::new(
        cosine(&e_a, &t_a),
        cosine(&e_n, &t_n),
        cosine(&e_a, &t_n),
        cosine(&e_n, &t_a),
    )
}

/// Scores every `generated` record that has no similarities yet, marks the
/// failures `filtered_out`, and rewrites the manifest.
pub fn filter_records(
    root: &Path,
    records: &mut [GenerationRecord],
    embedder: &dyn ImageTextEmbedder,
    timestamp_ms: u64,
) -> FilterReport {
    let cache = CachingEmbedder::new(embedder);
    let mut report = FilterReport::default();
    for rec in records.iter_mut() {
        if rec.status != RecordStatus::Generated || rec.similarities.is_some() {
            continue;
        }
        match filter_record(root, rec, &cache) {
            Ok(q) => {
                let verdict = apply_filter(&q);
                rec.similarities = Some(q);
                rec.filter_reasons = match &verdict {
                    Verdict::Keep => Vec::new(),
                    Verdict::Discard(c) => c.iter().map(|c| format!("{c:?}")).collect(),
                };
                if !verdict.is_keep() {
                    rec.status = RecordStatus::FilteredOut;
                }
                report
                    .per_category
                    .entry(rec.category.clone())
                    .or_default()
                    .add(verdict.is_keep());
                report
                    .per_defect
                    .entry(format!("{}/{}", rec.category, rec.defect.slug()))
                    .or_default()
                    .add(verdict.is_keep());
            }
            Err(e) => {
                log::warn!("filtering {} failed: {e}", rec.record_id);
                rec.error = Some(e.to_string());
                report.errors += 1;
            }
        }
        rec.updated_at_ms = timestamp_ms;
    }
    report
}

pub fn filter_manifest(
    manifest_path: &Path,
    embedder: &dyn ImageTextEmbedder,
    timestamp_ms: u64,
) -> Result<FilterReport> {
    let mut records = read_manifest(manifest_path)?;
    if !records.iter().any(|r| r.status == RecordStatus::Generated) {
        return Err(Error::validation("manifest has no generated records to filter"));
    }
    let root = dataset_root(manifest_path);
    let report = filter_records(&root, &mut records, embedder, timestamp_ms);
    rewrite_manifest(manifest_path, &records)?;
    Ok(report)
}
