//! Anomalous image generation through a black-box image-editing backend.
//!
//! For every (normal image, defect) pair in a plan the orchestrator issues one
//! backend call (plus retries), stores the result under the dataset layout
//!
//! ```text
//! <root>/<category>/normal/<file>
//! <root>/<category>/anomalous/<defect>/<record_id>.png
//! <root>/<category>/masks/<defect>/<record_id>.png
//! ```
//!
//! and appends a [`GenerationRecord`] to `<root>/manifest.jsonl`. Records
//! already present in the manifest are skipped, so an interrupted run resumes
//! where it stopped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    b64_decode, b64_encode, derive_seed, EndpointConfig, HttpJsonClient, RetryPolicy, TokenBucket,
};
use crate::error::{BackendError, Error, Result};
use crate::image::{read_image, write_image_png, Image, ImageRef, ImageRole};
use crate::manifest::{read_manifest, GenerationRecord, ManifestWriter, RecordStatus};
use crate::mask::{write_mask_png, BinaryMask};
use crate::promptgen::DefectDescription;

pub const GENERATION_PROMPT_VERSION: &str = "gen-v1";

pub fn build_generation_prompt(defect: &DefectDescription) -> Result<String> {
    defect.validate()?;
    Ok(format!(
        "Edit this photograph of a {category} so that it shows the following manufacturing \
         defect. {name}: {description} Keep the background, lighting, camera viewpoint, \
         colours and overall appearance of the object unchanged everywhere except at the \
         defect, and make the defect look photorealistic.",
        category = defect.category,
        name = defect.name,
        description = defect.description,
    ))
}

#[derive(Debug, Clone)]
pub struct GenerationPlan {
    pub category: String,
    pub defects: Vec<DefectDescription>,
    pub per_defect: usize,
    pub normal_pool: Vec<ImageRef>,
    pub seed: u64,
}

/// One unit of work: which normal image gets which defect, and the stable id
/// of the resulting record.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPair {
    pub record_id: String,
    pub normal: ImageRef,
    pub defect: DefectDescription,
}

/// Draws `per_defect` normal images uniformly (with replacement) for every
/// defect. Deterministic for a fixed seed.
pub fn sample_plan(plan: &GenerationPlan) -> Result<Vec<PlannedPair>> {
    if plan.per_defect == 0 {
        return Err(Error::validation("per_defect must be at least 1"));
    }
    if plan.normal_pool.is_empty() {
        return Err(Error::validation(format!(
            "no normal images for category {}",
            plan.category
        )));
    }
    if plan.defects.is_empty() {
        return Err(Error::validation(format!("no defects for category {}", plan.category)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[plan.category.as_bytes()]));
    let mut used_slugs: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(plan.defects.len() * plan.per_defect);
    for defect in &plan.defects {
        let base = defect.slug();
        let n = used_slugs.entry(base.clone()).or_default();
        let slug = if *n == 0 { base.clone() } else { format!("{base}_{n}") };
        *n += 1;
        for j in 0..plan.per_defect {
            let normal = plan
                .normal_pool
                .choose(&mut rng)
                .expect("pool checked non-empty")
                .clone();
            out.push(PlannedPair {
                record_id: format!("{}__{}__{:04}", slugify_category(&plan.category), slug, j),
                normal,
                defect: defect.clone(),
            });
        }
    }
    Ok(out)
}

fn slugify_category(c: &str) -> String {
    crate::promptgen::slugify(c)
}

/// A generative model: (image, prompt) -> edited image.
pub trait ImageGenerator: Send + Sync {
    fn generate(&self, image: &Image, prompt: &str) -> std::result::Result<Image, BackendError>;

    /// Ground-truth region of the injected defect, for backends that know it.
    fn reference_mask(&self, _image: &Image, _prompt: &str) -> Option<BinaryMask> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockShape {
    Ellipse,
    Line,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockGeneratorConfig {
    pub seed: u64,
    /// Defect area as a fraction of the image, sampled uniformly in this range.
    pub area_fraction: (f64, f64),
    pub shape: MockShape,
    /// Per-channel intensity change inside the defect.
    pub color_shift: f32,
}

impl Default for MockGeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            area_fraction: (0.01, 0.04),
            shape: MockShape::Mixed,
            color_shift: 0.35,
        }
    }
}

/// Deterministic stand-in generator: paints a seeded ellipse or thick line of
/// shifted colour onto the input. Everything outside the defect is untouched.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    pub config: MockGeneratorConfig,
}

impl MockGenerator {
    pub fn new(config: MockGeneratorConfig) -> Self {
        Self { config }
    }

    fn call_seed(&self, image: &Image, prompt: &str) -> u64 {
        let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        derive_seed(self.config.seed, &[prompt.as_bytes(), &bytes])
    }

    /// The exact set of pixels `generate` modifies for this input.
    pub fn defect_region(&self, image: &Image, prompt: &str) -> BinaryMask {
        let (h, w) = image.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(self.call_seed(image, prompt));
        let (lo, hi) = self.config.area_fraction;
        let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let area = (frac * (h * w) as f64).max(1.0);
        let line = match self.config.shape {
            MockShape::Ellipse => false,
            MockShape::Line => true,
            MockShape::Mixed => rng.random_bool(0.3),
        };
        let (hf, wf) = (h as f64, w as f64);
        if line {
            let thickness = (hf.min(wf) / 40.0).clamp(1.5, 4.0);
            let length = (area / thickness).min(0.8 * hf.min(wf));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos() * length / 2.0, angle.sin() * length / 2.0);
            let cx = rng.random_range(dx.abs() + thickness..(wf - dx.abs() - thickness).max(dx.abs() + thickness + 1.0));
            let cy = rng.random_range(dy.abs() + thickness..(hf - dy.abs() - thickness).max(dy.abs() + thickness + 1.0));
            let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
            let len2 = (bx - ax).powi(2) + (by - ay).powi(2);
            BinaryMask::from_fn(h, w, |y, x| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (ax + t * (bx - ax), ay + t * (by - ay));
                ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() <= thickness / 2.0
            })
        } else {
            let aspect = rng.random_range(0.5..2.0f64);
            let ry = (area / (std::f64::consts::PI * aspect)).sqrt();
            let rx = ry * aspect;
            let cx = rng.random_range(rx.min(wf / 2.0)..(wf - rx).max(wf / 2.0 + 1e-9));
            let cy = rng.random_range(ry.min(hf / 2.0)..(hf - ry).max(hf / 2.0 + 1e-9));
            BinaryMask::from_fn(h, w, |y, x| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
            })
        }
    }
}

impl ImageGenerator for MockGenerator {
    fn generate(&self, image: &Image, prompt: &str) -> std::result::Result<Image, BackendError> {
        let region = self.defect_region(image, prompt);
        let shift = self.config.color_shift;
        let mut out = image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if region.get(y, x) {
                    let p = image.pixel(x, y);
                    let q = p.map(|v| if v > 0.5 { v - shift } else { v + shift });
                    out.set_pixel(x, y, q);
                }
            }
        }
        Ok(out)
    }

    fn reference_mask(&self, image: &Image, prompt: &str) -> Option<BinaryMask> {
        Some(self.defect_region(image, prompt))
    }
}

#[derive(Serialize)]
struct GenerateRequestBody<'a> {
    prompt: &'a str,
    image: String,
}

#[derive(Deserialize)]
struct GenerateResponseBody {
    image: String,
}

/// JSON client: `{prompt, image: base64 PNG}` -> `{image: base64 PNG|JPEG}`.
pub struct HttpGenerator {
    client: HttpJsonClient,
}

impl HttpGenerator {
    pub fn new(config: EndpointConfig) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
        })
    }
}

impl ImageGenerator for HttpGenerator {
    fn generate(&self, image: &Image, prompt: &str) -> std::result::Result<Image, BackendError> {
        let png = image
            .encode_png()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let resp: GenerateResponseBody = self.client.post(&GenerateRequestBody {
            prompt,
            image: b64_encode(&png),
        })?;
        let bytes = b64_decode(&resp.image)?;
        let out = Image::decode(&bytes).map_err(BackendError::InvalidResponse)?;
        if out.dims() != image.dims() {
            // keep masks aligned with the source resolution
            return Ok(out.resized(image.width(), image.height()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampMode {
    Wall,
    /// Every timestamp is this value; makes manifests byte-reproducible.
    Fixed(u64),
}

impl TimestampMode {
    pub fn now_ms(self) -> u64 {
        match self {
            TimestampMode::Fixed(t) => t,
            TimestampMode::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Calls per second across all workers; `None` disables limiting.
    pub rate_limit: Option<f64>,
    pub timestamps: TimestampMode,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            retry: RetryPolicy::default(),
            rate_limit: None,
            timestamps: TimestampMode::Wall,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub planned: usize,
    pub skipped_existing: usize,
    pub attempted: usize,
    pub generated: usize,
    pub failed: usize,
    pub backend_calls: usize,
}

fn rel(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Copies the normal image into `<root>/<category>/normal/` and returns a
/// reference relative to the dataset root.
fn stage_normal(root: &Path, normal: &ImageRef) -> Result<(ImageRef, Image)> {
    let img = read_image(&normal.path)?;
    let file = normal
        .path
        .file_name()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("normal.png"));
    let dest = root.join(&normal.category).join("normal").join(file);
    if !dest.exists() {
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&normal.path, &dest).map_err(|e| Error::io(&dest, e))?;
    }
    Ok((
        ImageRef {
            path: rel(root, &dest),
            category: normal.category.clone(),
            role: ImageRole::Normal,
            width: img.width() as u32,
            height: img.height() as u32,
        },
        img,
    ))
}

pub fn anomalous_path(root: &Path, category: &str, defect_slug: &str, record_id: &str) -> PathBuf {
    root.join(category)
        .join("anomalous")
        .join(defect_slug)
        .join(format!("{record_id}.png"))
}

pub fn mask_path(root: &Path, category: &str, defect_slug: &str, record_id: &str) -> PathBuf {
    root.join(category)
        .join("masks")
        .join(defect_slug)
        .join(format!("{record_id}.png"))
}

pub fn reference_path(root: &Path, category: &str, defect_slug: &str, record_id: &str) -> PathBuf {
    root.join(category)
        .join("reference")
        .join(defect_slug)
        .join(format!("{record_id}.png"))
}

pub fn score_path(root: &Path, category: &str, defect_slug: &str, record_id: &str) -> PathBuf {
    root.join(category)
        .join("scores")
        .join(defect_slug)
        .join(format!("{record_id}.mten"))
}

fn process_pair(
    root: &Path,
    pair: &PlannedPair,
    generator: &dyn ImageGenerator,
    opts: &RunOptions,
    limiter: Option<&TokenBucket>,
    calls: &AtomicUsize,
) -> Result<GenerationRecord> {
    let created = opts.timestamps.now_ms();
    let prompt = build_generation_prompt(&pair.defect)?;
    let (normal_ref, normal_img) = stage_normal(root, &pair.normal)?;
    let slug = pair.defect.slug();
    let out_path = anomalous_path(root, &pair.normal.category, &slug, &pair.record_id);
    let mut rec = GenerationRecord {
        record_id: pair.record_id.clone(),
        category: pair.normal.category.clone(),
        defect: pair.defect.clone(),
        normal_image: normal_ref,
        generated_image: None,
        generation_prompt: prompt.clone(),
        prompt_version: GENERATION_PROMPT_VERSION.to_string(),
        status: RecordStatus::Pending,
        similarities: None,
        filter_reasons: Vec::new(),
        score_path: None,
        mask_path: None,
        reference_mask_path: None,
        threshold_used: None,
        attempts: 0,
        error: None,
        seed: opts.seed,
        created_at_ms: created,
        updated_at_ms: created,
    };

    let generated = if out_path.exists() {
        // an earlier interrupted run already produced this image
        read_image(&out_path)?
    } else {
        let (res, attempts) = opts.retry.run(|| {
            if let Some(l) = limiter {
                l.acquire();
            }
            calls.fetch_add(1, Ordering::SeqCst);
            generator.generate(&normal_img, &prompt)
        });
        rec.attempts = attempts;
        match res {
            Ok(img) => {
                write_image_png(&img, &out_path)?;
                img
            }
            Err(e) => {
                rec.status = RecordStatus::Failed;
                rec.error = Some(e.to_string());
                rec.updated_at_ms = opts.timestamps.now_ms();
                return Ok(rec);
            }
        }
    };

    if let Some(reference) = generator.reference_mask(&normal_img, &prompt) {
        let p = reference_path(root, &rec.category, &slug, &rec.record_id);
        write_mask_png(&reference, &p)?;
        rec.reference_mask_path = Some(rel(root, &p));
    }
    rec.generated_image = Some(ImageRef {
        path: rel(root, &out_path),
        category: rec.category.clone(),
        role: ImageRole::Generated,
        width: generated.width() as u32,
        height: generated.height() as u32,
    });
    rec.status = RecordStatus::Generated;
    rec.updated_at_ms = opts.timestamps.now_ms();
    Ok(rec)
}

/// Runs every planned pair whose record id is not yet in the manifest.
///
/// Backend failures are recorded per record (status `failed`) and the run
/// continues; I/O and configuration errors abort. Records are appended in plan
/// order regardless of completion order.
pub fn run_generation(
    pairs: &[PlannedPair],
    generator: &dyn ImageGenerator,
    manifest_path: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    if opts.concurrency == 0 {
        return Err(Error::Config("concurrency must be at least 1".into()));
    }
    let root = crate::manifest::dataset_root(manifest_path);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let existing: HashSet<String> = read_manifest(manifest_path)?
        .into_iter()
        .map(|r| r.record_id)
        .collect();
    let pending: Vec<&PlannedPair> = pairs
        .iter()
        .filter(|p| !existing.contains(&p.record_id))
        .collect();
    let mut summary = RunSummary {
        planned: pairs.len(),
        skipped_existing: pairs.len() - pending.len(),
        attempted: pending.len(),
        ..RunSummary::default()
    };
    let mut writer = ManifestWriter::open(manifest_path)?;
    let limiter = opts.rate_limit.map(|r| TokenBucket::new(r, opts.concurrency as u32));
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<GenerationRecord>)>();

    let outcome: Result<()> = std::thread::scope(|scope| {
        for _ in 0..opts.concurrency.min(pending.len().max(1)) {
            let tx = tx.clone();
            let (pending, next, calls, root, limiter) = (&pending, &next, &calls, &root, &limiter);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let res = process_pair(root, pending[i], generator, opts, limiter.as_ref(), calls);
                let abort = res.is_err();
                if tx.send((i, res)).is_err() || abort {
                    // stop handing out work once anything fatal happened
                    next.store(pending.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, GenerationRecord> = BTreeMap::new();
        let mut next_to_write = 0;
        let mut first_err = None;
        for (i, res) in rx {
            match res {
                Ok(rec) => {
                    buffer.insert(i, rec);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
            while let Some(rec) = buffer.remove(&next_to_write) {
                match rec.status {
                    RecordStatus::Failed => summary.failed += 1,
                    _ => summary.generated += 1,
                }
                writer.append(&rec)?;
                next_to_write += 1;
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    });
    summary.backend_calls = calls.load(Ordering::SeqCst);
    outcome.map(|_| summary)
}
