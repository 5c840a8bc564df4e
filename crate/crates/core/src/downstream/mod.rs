//! Downstream check: train a binary segmentation U-Net on synthetic
//! image-mask pairs balanced with normal images, then score it on a labelled
//! test split.

mod unet;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{b64_decode, b64_encode, derive_seed};
use crate::error::{Error, Result};
use crate::image::{list_images, normal_images_for, read_image, Image};
use crate::manifest::{dataset_root, read_manifest, RecordStatus};
use crate::mask::{read_mask_png, BinaryMask, ScoreMap};
use crate::metrics::{image_auroc, pixel_auroc, ImageScoreRule};

use unet::{Act, Adam, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pairs_per_category: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Square input side; must be divisible by `2^(levels - 1)`.
    pub resolution: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pairs_per_category: 100,
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            resolution: 256,
            levels: 4,
            base_channels: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_category == 0 || self.batch_size == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "pairs_per_category, batch_size and base_channels must be positive".into(),
            ));
        }
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        let unit = 1usize << (self.levels - 1);
        if self.resolution == 0 || self.resolution % unit != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of {unit}",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub category: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
}

impl TrainingSet {
    pub fn synthetic_count(&self) -> usize {
        self.samples.iter().filter(|s| s.synthetic).count()
    }

    pub fn normal_count(&self) -> usize {
        self.samples.len() - self.synthetic_count()
    }
}

/// Per category, up to `pairs_per_category` masked records (seeded sample)
/// and the same number of normal images with all-zero masks.
pub fn assemble_training_set(manifest: &Path, normals_dir: &Path, cfg: &TrainConfig) -> Result<TrainingSet> {
    cfg.validate()?;
    if !normals_dir.is_dir() {
        return Err(Error::validation(format!(
            "normal image directory {} does not exist",
            normals_dir.display()
        )));
    }
    let root = dataset_root(manifest);
    let mut by_cat: BTreeMap<String, Vec<(PathBuf, PathBuf)>> = BTreeMap::new();
    for r in read_manifest(manifest)? {
        if r.status != RecordStatus::Masked {
            continue;
        }
        if let (Some(img), Some(mask)) = (&r.generated_image, &r.mask_path) {
            by_cat
                .entry(r.category.clone())
                .or_default()
                .push((root.join(&img.path), root.join(mask)));
        }
    }
    if by_cat.is_empty() {
        return Err(Error::validation("manifest has no masked records"));
    }
    let res = cfg.resolution;
    let mut samples = Vec::new();
    for (cat, mut pairs) in by_cat {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[b"assemble", cat.as_bytes()]));
        pairs.shuffle(&mut rng);
        if pairs.len() < cfg.pairs_per_category {
            log::warn!(
                "category {cat}: only {} masked records, wanted {}",
                pairs.len(),
                cfg.pairs_per_category
            );
        }
        pairs.truncate(cfg.pairs_per_category);
        let n = pairs.len();
        for (ip, mp) in pairs {
            samples.push(Sample {
                category: cat.clone(),
                image: read_image(&ip)?.resized(res, res),
                mask: read_mask_png(&mp)?.resized(res, res),
                synthetic: true,
            });
        }
        let mut normals = normal_images_for(normals_dir, &cat)?;
        normals.shuffle(&mut rng);
        if normals.len() < n {
            log::warn!("category {cat}: {} normal images for {n} pairs; sampling with replacement", normals.len());
        }
        for j in 0..n {
            let p = if j < normals.len() {
                normals[j].clone()
            } else {
                normals[rng.random_range(0..normals.len())].clone()
            };
            samples.push(Sample {
                category: cat.clone(),
                image: read_image(&p)?.resized(res, res),
                mask: BinaryMask::zeros(res, res),
                synthetic: false,
            });
        }
    }
    Ok(TrainingSet { samples })
}

/// Anything producing a per-pixel anomaly map for an image.
pub trait Segmenter: Send + Sync {
    fn predict(&self, image: &Image) -> Result<ScoreMap>;
}

/// Trained U-Net; outputs sigmoid probabilities at the training resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetSegmenter {
    config: TrainConfig,
    net: Network,
}

fn to_act(image: &Image) -> Act {
    let (h, w) = image.dims();
    let mut d = vec![0.0f32; 3 * h * w];
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            d[c * h * w + i] = px[c] - 0.5;
        }
    }
    Act { c: 3, h, w, d }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Serialize, Deserialize)]
struct ConvFile {
    cin: usize,
    cout: usize,
    k: usize,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: TrainConfig,
    convs: Vec<ConvFile>,
}

fn f32s_to_b64(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    b64_encode(&bytes)
}

fn b64_to_f32s(s: &str) -> Result<Vec<f32>> {
    let bytes = b64_decode(s).map_err(|e| Error::Format(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("weight blob length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl UNetSegmenter {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(
            config.levels,
            config.base_channels,
            derive_seed(config.seed, &[b"unet-init"]),
        );
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// All parameters, flattened in layer order.
    pub fn parameters(&self) -> Vec<f32> {
        self.net
            .convs
            .iter()
            .flat_map(|c| c.w.iter().chain(&c.b).copied())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            config: self.config.clone(),
            convs: self
                .net
                .convs
                .iter()
                .map(|c| ConvFile {
                    cin: c.cin,
                    cout: c.cout,
                    k: c.k,
                    weights: f32s_to_b64(&c.w),
                    bias: f32s_to_b64(&c.b),
                })
                .collect(),
        };
        let body = serde_json::to_vec(&file).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            message: format!("{}: {e}", path.display()),
            raw: String::new(),
        })?;
        let mut model = Self::new(file.config)?;
        if model.net.convs.len() != file.convs.len() {
            return Err(Error::Format("model file layer count does not match its config".into()));
        }
        for (conv, f) in model.net.convs.iter_mut().zip(file.convs) {
            let (w, b) = (b64_to_f32s(&f.weights)?, b64_to_f32s(&f.bias)?);
            if (conv.cin, conv.cout, conv.k, conv.w.len(), conv.b.len()) != (f.cin, f.cout, f.k, w.len(), b.len()) {
                return Err(Error::Format("model file layer shape mismatch".into()));
            }
            conv.w = w;
            conv.b = b;
        }
        Ok(model)
    }

    fn logits(&self, image: &Image) -> Act {
        let r = self.config.resolution;
        let img = if image.dims() == (r, r) {
            image.clone()
        } else {
            image.resized(r, r)
        };
        self.net.forward(to_act(&img))
    }
}

impl Segmenter for UNetSegmenter {
    fn predict(&self, image: &Image) -> Result<ScoreMap> {
        let z = self.logits(image);
        ScoreMap::new(z.h, z.w, z.d.iter().map(|&v| sigmoid(v)).collect())
    }
}

/// Numerically stable binary cross-entropy on logits; returns (sum, dL/dz).
fn bce_with_logits(z: &Act, target: &BinaryMask, scale: f32) -> (f64, Act) {
    let mut g = Act::zeros(1, z.h, z.w);
    let mut loss = 0.0f64;
    for ((gv, &zv), &t) in g.d.iter_mut().zip(&z.d).zip(target.values()) {
        let t = f32::from(t);
        loss += f64::from(zv.max(0.0) - zv * t + (-zv.abs()).exp().ln_1p());
        *gv = (sigmoid(zv) - t) * scale;
    }
    (loss, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean per-pixel loss of each epoch, measured during the epoch.
    pub loss_curve: Vec<f64>,
}

/// Mini-batch Adam on pixelwise BCE. Per-sample gradients are computed in
/// parallel and summed in sample order, so runs are deterministic.
pub fn train_segmenter(set: &TrainingSet, cfg: &TrainConfig) -> Result<(UNetSegmenter, TrainOutcome)> {
    let mut model = UNetSegmenter::new(cfg.clone())?;
    if set.samples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let r = cfg.resolution;
    let inputs: Vec<(Act, BinaryMask)> = set
        .samples
        .iter()
        .map(|s| {
            let img = if s.image.dims() == (r, r) { s.image.clone() } else { s.image.resized(r, r) };
            let mask = if s.mask.dims() == (r, r) { s.mask.clone() } else { s.mask.resized(r, r) };
            (to_act(&img), mask)
        })
        .collect();
    let mut adam = Adam::new(&model.net, cfg.learning_rate as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[b"train-order"]));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let pixels = (r * r) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / (batch.len() as f64 * pixels) as f32;
            let net = &model.net;
            let per_sample: Vec<(f64, unet::Grads)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = &inputs[i];
                    let (z, cache) = net.forward_train(x.clone());
                    let (loss, g) = bce_with_logits(&z, y, scale);
                    let mut grads = net.zero_grads();
                    net.backward(&cache, &g, &mut grads);
                    (loss, grads)
                })
                .collect();
            let mut total = model.net.zero_grads();
            for (loss, grads) in per_sample {
                epoch_loss += loss;
                for ((tw, tb), (gw, gb)) in total.iter_mut().zip(grads) {
                    tw.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
                    tb.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
                }
            }
            adam.step(&mut model.net, &total);
        }
        let mean = epoch_loss / (inputs.len() as f64 * pixels);
        if !mean.is_finite() {
            return Err(Error::Training { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok((model, TrainOutcome { loss_curve: curve }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub category: String,
    pub image: Image,
    pub mask: Option<BinaryMask>,
    pub anomalous: bool,
}

/// Reads an MVTec-style split: `<dir>/<category>/test/<type>/<name>.png`, with
/// `good` for normal images and masks at
/// `<dir>/<category>/ground_truth/<type>/<name>_mask.png`.
pub fn load_test_set(dir: &Path) -> Result<Vec<TestSample>> {
    let mut out = Vec::new();
    let mut cats: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("test").is_dir())
        .collect();
    cats.sort();
    if cats.is_empty() {
        return Err(Error::validation(format!("no <category>/test directories in {}", dir.display())));
    }
    for cat_dir in cats {
        let cat = cat_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let test = cat_dir.join("test");
        let mut types: Vec<PathBuf> = std::fs::read_dir(&test)
            .map_err(|e| Error::io(&test, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        types.sort();
        for tdir in types {
            let ty = tdir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let anomalous = ty != "good";
            for p in list_images(&tdir)? {
                let image = read_image(&p)?;
                let mask = if anomalous {
                    let stem = p.file_stem().unwrap_or_default().to_string_lossy();
                    let mp = cat_dir.join("ground_truth").join(&ty).join(format!("{stem}_mask.png"));
                    if !mp.exists() {
                        return Err(Error::validation(format!("missing ground-truth mask {}", mp.display())));
                    }
                    Some(read_mask_png(&mp)?)
                } else {
                    None
                };
                out.push(TestSample {
                    category: cat.clone(),
                    image,
                    mask,
                    anomalous,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub images: usize,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: BTreeMap<String, EvalRow>,
    pub mean_image_auroc: f64,
    pub mean_pixel_auroc: f64,
    pub image_score_rule: ImageScoreRule,
}

/// Pixel and image AUROC per category. Ground-truth masks are resized (nearest)
/// to the prediction size; normal images count as all-zero masks.
pub fn evaluate_segmenter(
    model: &dyn Segmenter,
    test: &[TestSample],
    rule: ImageScoreRule,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::validation("test set is empty"));
    }
    if let Some(s) = test.iter().find(|s| s.anomalous && s.mask.is_none()) {
        return Err(Error::validation(format!(
            "anomalous test image in {} has no ground-truth mask",
            s.category
        )));
    }
    let preds: Vec<ScoreMap> = test.par_iter().map(|s| model.predict(&s.image)).collect::<Result<_>>()?;
    let mut by_cat: BTreeMap<&str, (Vec<ScoreMap>, Vec<BinaryMask>, Vec<bool>)> = BTreeMap::new();
    for (s, p) in test.iter().zip(preds) {
        let (h, w) = p.dims();
        let gt = match &s.mask {
            Some(m) if m.dims() == (h, w) => m.clone(),
            Some(m) => m.resized(h, w),
            None => BinaryMask::zeros(h, w),
        };
        let e = by_cat.entry(&s.category).or_default();
        e.0.push(p);
        e.1.push(gt);
        e.2.push(s.anomalous);
    }
    let mut categories = BTreeMap::new();
    for (cat, (maps, masks, labels)) in by_cat {
        categories.insert(
            cat.to_string(),
            EvalRow {
                images: maps.len(),
                image_auroc: image_auroc(&maps, &labels, rule)?,
                pixel_auroc: pixel_auroc(&maps, &masks)?,
            },
        );
    }
    let n = categories.len() as f64;
    Ok(EvalReport {
        mean_image_auroc: categories.values().map(|r| r.image_auroc).sum::<f64>() / n,
        mean_pixel_auroc: categories.values().map(|r| r.pixel_auroc).sum::<f64>() / n,
        categories,
        image_score_rule: rule,
    })
}
