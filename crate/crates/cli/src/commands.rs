use std::collections::BTreeMap;
use std::path::Path;

use mirage_core::backend::{derive_seed, EndpointConfig};
use mirage_core::config::PipelineConfig;
use mirage_core::downstream::{
    assemble_training_set, evaluate_segmenter, load_test_set, train_segmenter, TrainConfig,
};
use mirage_core::filter::{filter_manifest, HttpEmbedder, ImageTextEmbedder, MockEmbedder};
use mirage_core::genclient::{
    run_generation, sample_plan, GenerationPlan, HttpGenerator, ImageGenerator, MockGenerator,
    MockGeneratorConfig, RunOptions, TimestampMode,
};
use mirage_core::image::{normal_images_for, read_image_ref, ImageRole};
use mirage_core::maskgen::{
    calibrate_threshold, load_calibration_set, mask_manifest, read_calibration,
    update_calibration_file, FeatureExtractor, HttpExtractor, MaskBranches, MockExtractor,
};
use mirage_core::metrics::{
    mask_report, quality_report, HttpClassifier, HttpPerceptual, ImageClassifier, MockClassifier,
    MockPerceptual, PerceptualDistance,
};
use mirage_core::promptgen::{
    propose_defects, read_defects_file, write_defects_file, DefectProposer, HttpProposer,
    MockProposer, ProposalRequest,
};
use mirage_core::study::{rank_methods, read_vote_log, serve_study, ImagePool, StudyService, TrueSkillParams};
use mirage_core::{BackendError, Error, Result};
use serde_json::{json, Value};

use crate::{
    Backend, CalibrateArgs, Cli, Command, DownstreamArgs, EmbedBackend, EvalCommand, FilterArgs,
    GenerateArgs, MaskArgs, MaskEvalArgs, ProposeArgs, QualityArgs, SemanticBackend,
    StructuralBackend, StudyCommand,
};

/// Number of classes of the mock classifier used by `eval quality`.
const MOCK_CLASSES: usize = 1000;

struct Ctx {
    config: PipelineConfig,
    timestamps: TimestampMode,
    seed_flag: Option<u64>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Seed for one named component, so mocks of different stages differ.
    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, &[stage.as_bytes()])
    }
}

fn endpoint(ep: &Option<EndpointConfig>, key: &str) -> Result<EndpointConfig> {
    ep.clone()
        .ok_or_else(|| Error::Config(format!("{key} is not configured")))
}

/// A stage whose every backend call failed is reported as a transport error;
/// the failures are already recorded in the manifest.
fn all_failed(what: &str) -> Error {
    Error::Backend(BackendError::Transport(format!("{what} failed; see the manifest")))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("serializable report") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<Value> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let timestamps = match config.fixed_timestamp_ms {
        Some(t) => TimestampMode::Fixed(t),
        None => TimestampMode::Wall,
    };
    let ctx = Ctx {
        config,
        timestamps,
        seed_flag: cli.seed,
    };
    match cli.command {
        Command::Propose(a) => propose(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Filter(a) => filter(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::Mask(a) => mask(&ctx, a),
        Command::Eval(EvalCommand::Quality(a)) => eval_quality(&ctx, a),
        Command::Eval(EvalCommand::Masks(a)) => eval_masks(a),
        Command::Eval(EvalCommand::Downstream(a)) => eval_downstream(&ctx, a),
        Command::Study(StudyCommand::Serve(a)) => {
            let pool = ImagePool::load(&a.pools)?;
            let service = StudyService::new(pool, &a.votes, ctx.seed(), ctx.timestamps)?;
            let port = a.port.unwrap_or(ctx.config.study.port);
            serve_study(service, (a.host, port).into())?;
            Ok(json!({ "stopped": true }))
        }
        Command::Study(StudyCommand::Rank(a)) => {
            let log = read_vote_log(&a.votes)?;
            Ok(json!(&rank_methods(&log, &TrueSkillParams::default())))
        }
    }
}

/// `k` images spread evenly over the sorted pool.
fn spread<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    let k = k.min(items.len());
    (0..k).map(|i| items[i * items.len() / k].clone()).collect()
}

fn propose(ctx: &Ctx, a: ProposeArgs) -> Result<Value> {
    let cfg = &ctx.config.propose;
    let pool = normal_images_for(&a.normals, &a.category)?;
    let k = a.k.unwrap_or(cfg.k_reference_images);
    let reference_images = spread(&pool, k)
        .iter()
        .map(|p| read_image_ref(p, &a.category, ImageRole::Normal).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let req = ProposalRequest {
        category: a.category.clone(),
        reference_images,
        count: a.count.unwrap_or(cfg.defects_per_category),
    };
    let proposer: Box<dyn DefectProposer> = match a.backend {
        Backend::Http => Box::new(HttpProposer::new(endpoint(&cfg.endpoint, "propose.endpoint")?)?),
        Backend::Mock => {
            let dir = a
                .mock_responses
                .ok_or_else(|| Error::validation("--mock-responses is required with --backend mock"))?;
            Box::new(MockProposer::new(dir))
        }
    };
    let defects = propose_defects(&req, proposer.as_ref(), &ctx.config.generate.retry)?;
    let mut all = if a.out.exists() {
        read_defects_file(&a.out)?
    } else {
        Vec::new()
    };
    all.retain(|d| d.category != req.category);
    all.extend(defects.iter().cloned());
    write_defects_file(&all, &a.out)?;
    Ok(json!({
        "category": req.category,
        "reference_images": req.reference_images.len(),
        "defects": defects.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "out": a.out,
    }))
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<Value> {
    let cfg = &ctx.config.generate;
    let defects = read_defects_file(&a.defects)?;
    if defects.is_empty() {
        return Err(Error::validation(format!("{} lists no defects", a.defects.display())));
    }
    let mut by_cat: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for d in defects {
        by_cat.entry(d.category.clone()).or_default().push(d);
    }
    let per_defect = a.per_defect.unwrap_or(cfg.per_defect);
    let mut pairs = Vec::new();
    for (category, defects) in by_cat {
        let normal_pool = normal_images_for(&a.normals, &category)?
            .iter()
            .map(|p| read_image_ref(p, &category, ImageRole::Normal).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()?;
        pairs.extend(sample_plan(&GenerationPlan {
            category,
            defects,
            per_defect,
            normal_pool,
            seed: ctx.seed(),
        })?);
    }
    let generator: Box<dyn ImageGenerator> = match a.backend {
        Backend::Http => Box::new(HttpGenerator::new(endpoint(&cfg.endpoint, "generate.endpoint")?)?),
        Backend::Mock => Box::new(MockGenerator::new(MockGeneratorConfig {
            seed: ctx.stage_seed("generate"),
            ..MockGeneratorConfig::default()
        })),
    };
    let opts = RunOptions {
        concurrency: a.concurrency.unwrap_or(cfg.concurrency),
        retry: cfg.retry.clone(),
        rate_limit: cfg.rate_limit,
        timestamps: ctx.timestamps,
        seed: ctx.seed(),
    };
    let manifest = a.out.join("manifest.jsonl");
    let summary = run_generation(&pairs, generator.as_ref(), &manifest, &opts)?;
    if summary.attempted > 0 && summary.generated == 0 {
        return Err(all_failed(&format!("all {} generation calls", summary.attempted)));
    }
    let mut v = json!(&summary);
    v["manifest"] = json!(manifest);
    v["seed"] = json!(ctx.seed());
    Ok(v)
}

fn filter(ctx: &Ctx, a: FilterArgs) -> Result<Value> {
    let cfg = &ctx.config.filter;
    let embedder: Box<dyn ImageTextEmbedder> = match a.backend {
        EmbedBackend::Clip => Box::new(HttpEmbedder::new(
            endpoint(&cfg.endpoint, "filter.endpoint")?,
            cfg.embedding_dim,
        )?),
        EmbedBackend::Mock => Box::new(MockEmbedder::new(ctx.stage_seed("filter"), cfg.embedding_dim)),
    };
    let report = filter_manifest(&a.manifest, embedder.as_ref(), ctx.timestamps.now_ms())?;
    if report.errors > 0 && report.per_category.is_empty() {
        return Err(all_failed(&format!("all {} embedding requests", report.errors)));
    }
    let mut v = json!(&report);
    if let Some(path) = &a.report {
        write_json(path, &v)?;
    }
    v["overall_keep_rate"] = json!(report.overall_keep_rate());
    Ok(v)
}

fn calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<Value> {
    let max = a.max_refs.unwrap_or(ctx.config.mask.max_reference_masks);
    let (maps, refs) = load_calibration_set(&a.scores, &a.refs, Some(max))?;
    let result = calibrate_threshold(&a.category, &maps, &refs)?;
    update_calibration_file(&a.out, &result)?;
    Ok(json!(&result))
}

fn semantic_extractor(ctx: &Ctx, b: SemanticBackend) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match b {
        SemanticBackend::Gdino => Box::new(HttpExtractor::new(endpoint(
            &ctx.config.mask.semantic_endpoint,
            "mask.semantic_endpoint",
        )?)?),
        SemanticBackend::Mock => Box::new(MockExtractor::standard(ctx.stage_seed("semantic"))),
    })
}

fn structural_extractor(ctx: &Ctx, b: StructuralBackend) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match b {
        StructuralBackend::Segyolo => Box::new(HttpExtractor::new(endpoint(
            &ctx.config.mask.structural_endpoint,
            "mask.structural_endpoint",
        )?)?),
        StructuralBackend::Mock => Box::new(MockExtractor::standard(ctx.stage_seed("structural"))),
    })
}

fn mask(ctx: &Ctx, a: MaskArgs) -> Result<Value> {
    let table = match (&a.calibration, a.scores_only) {
        (Some(p), _) => Some(read_calibration(p)?),
        (None, true) => None,
        (None, false) => {
            return Err(Error::validation("--calibration is required unless --scores-only is given"))
        }
    };
    let semantic = semantic_extractor(ctx, a.semantic_backend)?;
    let structural = structural_extractor(ctx, a.structural_backend)?;
    ctx.config.mask.structural.validate()?;
    let branches = MaskBranches {
        semantic: semantic.as_ref(),
        semantic_spec: ctx.config.mask.semantic.clone(),
        structural: structural.as_ref(),
        structural_spec: ctx.config.mask.structural.clone(),
    };
    let summary = mask_manifest(&a.manifest, &branches, table.as_ref(), ctx.timestamps)?;
    Ok(json!(&summary))
}

fn eval_quality(ctx: &Ctx, a: QualityArgs) -> Result<Value> {
    let cfg = &ctx.config.eval;
    let (classifier, perceptual): (Box<dyn ImageClassifier>, Box<dyn PerceptualDistance>) = match a.backend {
        Backend::Http => (
            Box::new(HttpClassifier::new(endpoint(&cfg.classifier_endpoint, "eval.classifier_endpoint")?)?),
            Box::new(HttpPerceptual::new(endpoint(&cfg.perceptual_endpoint, "eval.perceptual_endpoint")?)?),
        ),
        Backend::Mock => (
            Box::new(MockClassifier::new(ctx.stage_seed("classifier"), MOCK_CLASSES)),
            Box::new(MockPerceptual),
        ),
    };
    let report = quality_report(
        &a.dataset.join("manifest.jsonl"),
        classifier.as_ref(),
        perceptual.as_ref(),
    )?;
    let v = json!(&report);
    if let Some(path) = &a.out {
        write_json(path, &v)?;
    }
    Ok(v)
}

fn eval_masks(a: MaskEvalArgs) -> Result<Value> {
    let v = json!(&mask_report(&a.scores, &a.gts)?);
    if let Some(path) = &a.out {
        write_json(path, &v)?;
    }
    Ok(v)
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn eval_downstream(ctx: &Ctx, a: DownstreamArgs) -> Result<Value> {
    let mut cfg = match &a.train_config {
        Some(p) => read_train_config(p)?,
        None => ctx.config.train.clone(),
    };
    if let Some(s) = ctx.seed_flag {
        cfg.seed = s;
    }
    let rule = a.image_score.unwrap_or(ctx.config.eval.image_score_rule);
    let set = assemble_training_set(&a.manifest, &a.normals, &cfg)?;
    log::info!(
        "training on {} synthetic and {} normal images",
        set.synthetic_count(),
        set.normal_count()
    );
    let (model, outcome) = train_segmenter(&set, &cfg)?;
    if let Some(p) = &a.model_out {
        model.save(p)?;
    }
    let test = load_test_set(&a.test)?;
    let report = evaluate_segmenter(&model, &test, rule)?;
    let v = json!(&report);
    if let Some(path) = &a.out {
        write_json(path, &v)?;
    }
    let mut summary = v.clone();
    summary["final_loss"] = json!(outcome.loss_curve.last());
    summary["seed"] = json!(cfg.seed);
    Ok(summary)
}
