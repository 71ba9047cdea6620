//! Command implementations behind the CLI.
//!
//! Every command is a pure function of its configuration: datasets, training
//! runs, evaluations and the ablation matrix are reproducible byte for byte
//! from (config, seeds) alone. The CLI binary is a thin argument parser over
//! these functions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{certify_gradients, GradCertification};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{Model, ModelDims, PipelineConfig, PointBackboneKind, Variant};
use crate::retrieval::{build_database, evaluate, RecallReport};
use crate::scene::persist::{database_files, load_database, save_database};
use crate::scene::{GeoCoordinate, Scene, SceneDatabase, SplitTag};
use crate::train::{train, TrainHyper};
use crate::vlad::GlobalDescriptor;
use crate::world::transform::{build_reference_cdf, ChannelCdfs, DomainTransform, CDF_BINS};
use crate::world::{generate_training_twin, generate_world, WorldSpec};

/// Pipeline section of the experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub variant: Variant,
    /// Point-feature extractor (one option at this scale).
    pub point_backbone: PointBackboneKind,
    /// Histogram-match images toward the day reference before the backbone.
    pub daynight: bool,
    pub gate_sigmoid: bool,
    pub intra_norm: bool,
    /// Override the per-branch gate (defaults to the variant's setting).
    pub lca: Option<bool>,
    pub dims: ModelDims,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            variant: Variant::Pic04,
            point_backbone: PointBackboneKind::default(),
            daynight: false,
            gate_sigmoid: true,
            intra_norm: false,
            lca: None,
            dims: ModelDims::default(),
        }
    }
}

impl PipelineSection {
    pub fn to_config(&self) -> PipelineConfig {
        let mut config = PipelineConfig::for_variant(self.variant, self.dims);
        config.point_backbone = self.point_backbone;
        config.daynight_enabled = self.daynight;
        config.gate_sigmoid = self.gate_sigmoid;
        config.intra_norm = self.intra_norm;
        if let Some(lca) = self.lca {
            config.lca_enabled = lca;
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    /// Seed for parameter init, mining and the step order.
    pub seed: u64,
    #[serde(flatten)]
    pub hyper: TrainHyper,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            seed: 0,
            hyper: TrainHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Success radius in meters (inclusive).
    pub radius_m: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { radius_m: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Seeds for seed-averaged experiments (ablation).
    pub seeds: Vec<u64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("picnet-out"),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Full experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub pipeline: PipelineSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn dataset_dir(&self) -> PathBuf {
        self.output.dir.join("dataset")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join("run")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.output.dir.join("ablate")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pipeline.dims.validate()?;
        let d = &self.pipeline.dims;
        if d.cloud_points != self.world.cloud_points
            || d.image_height != self.world.image_height
            || d.image_width != self.world.image_width
            || d.image_channels != self.world.image_channels
        {
            return Err(Error::InvalidArgument(format!(
                "pipeline dims ({} pts, {}x{}x{}) disagree with world scene shape ({} pts, {}x{}x{})",
                d.cloud_points,
                d.image_height,
                d.image_width,
                d.image_channels,
                self.world.cloud_points,
                self.world.image_height,
                self.world.image_width,
                self.world.image_channels,
            )));
        }
        if self.output.seeds.is_empty() {
            return Err(Error::InvalidArgument("output.seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalManifest {
    pub name: String,
    pub n_scenes: usize,
    pub sha256: String,
}

/// Content manifest of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldSpec,
    pub n_corrupted_queries: usize,
    pub night_query_ids: Vec<u64>,
    pub traversals: Vec<TraversalManifest>,
}

fn sha256_hex_of_files(dir: &Path, files: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in files {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate the synthetic dataset and persist it with a content manifest.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let world = generate_world(&config.world)?;
    let root = config.dataset_dir();
    let db_dir = root.join("database");
    let q_dir = root.join("queries");
    save_database(&world.database, &db_dir)?;
    save_database(&world.queries, &q_dir)?;

    let manifest = DatasetManifest {
        world: config.world,
        n_corrupted_queries: world.night_query_ids.len(),
        night_query_ids: world.night_query_ids.clone(),
        traversals: vec![
            TraversalManifest {
                name: "database".into(),
                n_scenes: world.database.len(),
                sha256: sha256_hex_of_files(&db_dir, &database_files(&world.database))?,
            },
            TraversalManifest {
                name: "queries".into(),
                n_scenes: world.queries.len(),
                sha256: sha256_hex_of_files(&q_dir, &database_files(&world.queries))?,
            },
        ],
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::malformed(root.join("manifest.json"), e.to_string()))?;
    write_string(&root.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// Everything a training or evaluation run needs, in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub database: SceneDatabase,
    pub queries: SceneDatabase,
    /// Database traversal plus the held-out training twin.
    pub train_db: SceneDatabase,
    pub night_query_ids: Vec<u64>,
    pub world: WorldSpec,
}

/// Load a persisted dataset, verify its hashes against the manifest and the
/// world spec against the config, and regenerate the training twin.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LoadedDataset> {
    let root = config.dataset_dir();
    let manifest_path = root.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)
            .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    if manifest.world != config.world {
        return Err(Error::InvalidArgument(
            "dataset manifest world spec disagrees with the configured world; regenerate".into(),
        ));
    }
    if manifest.traversals.len() != 2 {
        return Err(Error::malformed(
            &manifest_path,
            format!("expected 2 traversals, found {}", manifest.traversals.len()),
        ));
    }
    let database = load_database(&root.join("database"))?;
    let queries = load_database(&root.join("queries"))?;
    for (db, t) in [(&database, &manifest.traversals[0]), (&queries, &manifest.traversals[1])] {
        let dir = root.join(&t.name);
        let hash = sha256_hex_of_files(&dir, &database_files(db))?;
        if hash != t.sha256 {
            return Err(Error::malformed(
                dir,
                format!("content hash {hash} does not match manifest {}", t.sha256),
            ));
        }
    }
    dataset_from_parts(config.world, database, queries, manifest.night_query_ids)
}

/// Build the dataset in memory without touching disk.
pub fn generate_dataset_in_memory(world: &WorldSpec) -> Result<LoadedDataset> {
    let generated = generate_world(world)?;
    dataset_from_parts(
        *world,
        generated.database,
        generated.queries,
        generated.night_query_ids,
    )
}

fn dataset_from_parts(
    world: WorldSpec,
    database: SceneDatabase,
    queries: SceneDatabase,
    night_query_ids: Vec<u64>,
) -> Result<LoadedDataset> {
    let (twin, _twin_night) = generate_training_twin(&world)?;
    let train_db = database.merged(&twin, SplitTag::Train)?;
    Ok(LoadedDataset {
        database,
        queries,
        train_db,
        night_query_ids,
        world,
    })
}

/// Day reference distribution: the database traversal's images.
pub fn day_reference(dataset: &LoadedDataset) -> Result<ChannelCdfs> {
    build_reference_cdf(dataset.database.scenes().iter().map(|s| &s.image), CDF_BINS)
}

/// Train the configured variant on the dataset's training scenes.
pub fn train_on_dataset(
    dataset: &LoadedDataset,
    pipeline: &PipelineConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Model, Vec<(usize, f64)>)> {
    let transform = if pipeline.daynight_enabled {
        Some(DomainTransform::HistogramMatch(day_reference(dataset)?))
    } else {
        None
    };
    train(&dataset.train_db, pipeline, transform, hyper, seed)
}

/// Evaluation of one model over the query traversal, with night/day splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub daynight: bool,
    pub n_database: usize,
    pub overall: RecallReport,
    pub night: Option<RecallReport>,
    pub day: Option<RecallReport>,
}

/// Index the database traversal and evaluate a query scene list against it.
pub fn evaluate_model(
    dataset: &LoadedDataset,
    model: &Model,
    pipeline: &PipelineConfig,
    radius_m: f64,
    query_scenes: &[Scene],
) -> Result<EvalReport> {
    if query_scenes.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let db = build_database(dataset.database.scenes(), model, pipeline)?;
    let mut queries: Vec<(GlobalDescriptor, GeoCoordinate)> = Vec::with_capacity(query_scenes.len());
    let mut night_queries = Vec::new();
    let mut day_queries = Vec::new();
    for scene in query_scenes {
        let desc = crate::fusion::forward_pipeline(scene, model, pipeline)?;
        let entry = (desc, scene.coord);
        if dataset.night_query_ids.contains(&scene.id) {
            night_queries.push(entry.clone());
        } else {
            day_queries.push(entry.clone());
        }
        queries.push(entry);
    }
    let overall = evaluate(&queries, &db, radius_m)?;
    let night = if night_queries.is_empty() {
        None
    } else {
        Some(evaluate(&night_queries, &db, radius_m)?)
    };
    let day = if day_queries.is_empty() {
        None
    } else {
        Some(evaluate(&day_queries, &db, radius_m)?)
    };
    Ok(EvalReport {
        variant: pipeline.variant().label().to_string(),
        daynight: pipeline.daynight_enabled,
        n_database: db.len(),
        overall,
        night,
        day,
    })
}

/// Train one variant and evaluate it; the shared engine behind `cmd_ablate`
/// and the benchmark experiments.
pub fn run_variant(
    dataset: &LoadedDataset,
    pipeline: &PipelineConfig,
    hyper: &TrainHyper,
    seed: u64,
    radius_m: f64,
) -> Result<EvalReport> {
    let (model, _history) = train_on_dataset(dataset, pipeline, hyper, seed)?;
    evaluate_model(dataset, &model, pipeline, radius_m, dataset.queries.scenes())
}

/// Outcome of `cmd_train`.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

pub fn loss_history_csv(history: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in history {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let (step, loss) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("bad loss csv row: {line}")))?;
        rows.push((
            step.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad step: {step}")))?,
            loss.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad loss: {loss}")))?,
        ));
    }
    Ok(rows)
}

/// Train the configured variant and persist checkpoint + loss history.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutputs> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let pipeline = config.pipeline.to_config();
    let (model, history) =
        train_on_dataset(&dataset, &pipeline, &config.training.hyper, config.training.seed)?;

    let run_dir = config.run_dir();
    let checkpoint_path = run_dir.join("checkpoint.bin");
    checkpoint::save_params(&model.params, &checkpoint_path)?;
    if let Some(DomainTransform::HistogramMatch(cdfs)) = &model.transform {
        cdfs.save(&run_dir)?;
    }
    let loss_csv = run_dir.join("loss.csv");
    write_string(&loss_csv, &loss_history_csv(&history))?;
    Ok(TrainOutputs {
        checkpoint: checkpoint_path,
        loss_csv,
        final_loss: history.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
    })
}

/// Where evaluation queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// The query traversal (the normal protocol).
    Queries,
    /// The database traversal itself (self-retrieval sanity mode).
    Database,
}

/// Outcome of `cmd_eval`.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub report_json: PathBuf,
    pub rank_csv: PathBuf,
}

/// Evaluate a checkpoint over the dataset and write the report files.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
    source: QuerySource,
) -> Result<EvalOutputs> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let pipeline = config.pipeline.to_config();
    let run_dir = checkpoint_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.run_dir());
    let params = checkpoint::load_params(&run_dir.join("checkpoint.bin"), &pipeline)?;
    let transform = if pipeline.daynight_enabled {
        Some(DomainTransform::HistogramMatch(ChannelCdfs::load(&run_dir)?))
    } else {
        None
    };
    let model = Model { params, transform };
    let query_scenes = match source {
        QuerySource::Queries => dataset.queries.scenes(),
        QuerySource::Database => dataset.database.scenes(),
    };
    let report = evaluate_model(
        &dataset,
        &model,
        &pipeline,
        config.evaluation.radius_m,
        query_scenes,
    )?;

    let report_json = run_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::malformed(&report_json, e.to_string()))?;
    write_string(&report_json, &json)?;
    let rank_csv = run_dir.join("rank_recall.csv");
    write_string(&rank_csv, &report.overall.rank_csv())?;
    Ok(EvalOutputs {
        report,
        report_json,
        rank_csv,
    })
}

/// Run the gradient certification suite on tiny instances; writes a one-line
/// per-operation report.
pub fn cmd_gradcheck(config: &ExperimentConfig) -> Result<GradCertification> {
    let report = certify_gradients(&ModelDims::tiny(), 5, 1e-5, 1e-4)?;
    let path = config.output.dir.join("gradcheck.txt");
    write_string(&path, &report.table())?;
    Ok(report)
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub variant: String,
    pub daynight: bool,
    pub seed: u64,
    pub recall_at_1: Option<f64>,
    pub recall_at_1pct: Option<f64>,
    pub night_recall_at_1pct: Option<f64>,
    pub day_recall_at_1pct: Option<f64>,
    pub error: Option<String>,
}

/// Outcome of `cmd_ablate`.
#[derive(Debug, Clone)]
pub struct AblateOutputs {
    pub rows: Vec<AblateRow>,
    pub runs_csv: PathBuf,
    pub summary_csv: PathBuf,
}

/// The default matrix: both single-modality baselines plus every fused
/// variant with and without the day-night transform.
pub fn default_matrix() -> Vec<(Variant, bool)> {
    let mut combos = vec![(Variant::ImageOnly, false), (Variant::PointOnly, false)];
    for v in Variant::ALL_FUSED {
        combos.push((v, false));
        combos.push((v, true));
    }
    combos
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Train and evaluate the whole matrix over the configured seeds. Failures
/// are recorded per variant without aborting the rest.
pub fn cmd_ablate(config: &ExperimentConfig) -> Result<AblateOutputs> {
    cmd_ablate_matrix(config, &default_matrix())
}

pub fn cmd_ablate_matrix(
    config: &ExperimentConfig,
    combos: &[(Variant, bool)],
) -> Result<AblateOutputs> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let mut rows = Vec::new();
    for &(variant, daynight) in combos {
        let mut section = config.pipeline.clone();
        section.variant = variant;
        section.daynight = daynight;
        let pipeline = section.to_config();
        for &seed in &config.output.seeds {
            let outcome = run_variant(
                &dataset,
                &pipeline,
                &config.training.hyper,
                seed,
                config.evaluation.radius_m,
            );
            rows.push(match outcome {
                Ok(report) => AblateRow {
                    variant: variant.label().to_string(),
                    daynight,
                    seed,
                    recall_at_1: Some(report.overall.recall_at(1)),
                    recall_at_1pct: Some(report.overall.recall_at_1pct),
                    night_recall_at_1pct: report.night.as_ref().map(|r| r.recall_at_1pct),
                    day_recall_at_1pct: report.day.as_ref().map(|r| r.recall_at_1pct),
                    error: None,
                },
                Err(e) => AblateRow {
                    variant: variant.label().to_string(),
                    daynight,
                    seed,
                    recall_at_1: None,
                    recall_at_1pct: None,
                    night_recall_at_1pct: None,
                    day_recall_at_1pct: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }

    let mut runs = String::from(
        "variant,daynight,seed,recall_at_1,recall_at_1pct,night_recall_at_1pct,day_recall_at_1pct,error\n",
    );
    for r in &rows {
        runs.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.daynight,
            r.seed,
            fmt_opt(r.recall_at_1),
            fmt_opt(r.recall_at_1pct),
            fmt_opt(r.night_recall_at_1pct),
            fmt_opt(r.day_recall_at_1pct),
            r.error.clone().unwrap_or_default()
        ));
    }
    let ablate_dir = config.ablate_dir();
    let runs_csv = ablate_dir.join("runs.csv");
    write_string(&runs_csv, &runs)?;

    // Seed-averaged summary, one row per variant, transform off / on columns.
    let mut summary = String::from("variant,recall_at_1pct,recall_at_1pct_daynight\n");
    let mut variants: Vec<String> = Vec::new();
    for r in &rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    for variant in &variants {
        let mean_for = |daynight: bool| -> Option<f64> {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.variant == variant && r.daynight == daynight)
                .filter_map(|r| r.recall_at_1pct)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        summary.push_str(&format!(
            "{},{},{}\n",
            variant,
            fmt_opt(mean_for(false)),
            fmt_opt(mean_for(true))
        ));
    }
    let summary_csv = ablate_dir.join("summary.csv");
    write_string(&summary_csv, &summary)?;

    Ok(AblateOutputs {
        rows,
        runs_csv,
        summary_csv,
    })
}
