//! Config-driven LOCO pipeline. Every stage writes a manifest linking its
//! outputs to the config section it used and to its upstream fingerprints, so
//! stale artifacts are detected and valid ones can be reused.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::ReadNpyExt;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{build_backbone, train_closed_set, ArchDescriptor, BackboneCheckpoint, ClosedSetHyper};
use crate::data::io::npy_err;
use crate::data::{
    apply_loco, extract_patches, generate_synthetic, read_scene, split_counts, split_dataset, write_scene,
    ChannelStats, ClassTexture, DatasetSplit, LabelMask, LabeledPatch, LocoSpec, SyntheticSceneSpec,
};
use crate::evaluation::{evaluate_scenario, roc_curve, EvalReport, SuiteReport};
use crate::fsutil::{atomic_write, sha256_hex};
use crate::openset::{
    default_q_grid, fuse, load_score_map, min_reduce, pool_scores, save_error_volume, save_prediction,
    save_score_map, select_quantile, write_npy_file, Calibration, Sweeper,
};
use crate::reconstruction::{train_cae, CaeCheckpoint, CaeHyper, NonMatchMode};
use crate::report::{emit_summary, render_panel, render_roc, save_png, Palette, RangePolicy, RenderRef};
use crate::{CoreSegError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub architecture: ArchConfig,
    pub closed_set: ClosedSetConfig,
    pub cae: CaeConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub report: ReportConfig,
    pub scenarios: Vec<ScenarioConfig>,
}

/// Exactly one of `synthetic` or `scenes` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDataset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenes: Option<SceneDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub cell_size: usize,
    pub split: [f64; 3],
    pub classes: Vec<ClassTexture>,
}

/// Scenes already on disk in the `<name>.raster.npy` / `.mask.npy` / `.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDataset {
    pub dir: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub blocks: usize,
    pub base_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedSetConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaeConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    #[serde(default)]
    pub nonmatch: NonMatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_q_grid")]
    pub q_grid: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { q_grid: default_q_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Qualitative panels rendered per scenario.
    #[serde(default = "default_panels")]
    pub panels: usize,
    #[serde(default = "default_heatmap")]
    pub heatmap: RangePolicy,
    /// Also store the full K-deep error volume of every test patch.
    #[serde(default)]
    pub save_error_volumes: bool,
}

fn default_panels() -> usize {
    4
}

fn default_heatmap() -> RangePolicy {
    RangePolicy::MinMax
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            panels: default_panels(),
            heatmap: default_heatmap(),
            save_error_volumes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub held_out: Vec<String>,
}

fn config_err(at: &str, msg: impl std::fmt::Display) -> CoreSegError {
    CoreSegError::Config(format!("{at}: {msg}"))
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ExperimentConfig {
    /// Parses and validates; `origin` names the source in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(origin, e))?;
        cfg.validate().map_err(|e| match e {
            CoreSegError::Config(m) => CoreSegError::Config(format!("{origin}: {m}")),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form; any field change changes it.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn class_names(&self) -> Vec<String> {
        match (&self.dataset.synthetic, &self.dataset.scenes) {
            (Some(s), _) => s.classes.iter().map(|c| c.name.clone()).collect(),
            (None, Some(s)) => s.class_names.clone(),
            (None, None) => Vec::new(),
        }
    }

    pub fn scenario(&self, name: &str) -> Result<&ScenarioConfig> {
        self.scenarios.iter().find(|s| s.name == name).ok_or_else(|| {
            config_err(
                "--scenario",
                format!(
                    "unknown scenario `{name}` (have: {})",
                    self.scenarios.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
                ),
            )
        })
    }

    pub fn loco(&self, scenario: &ScenarioConfig) -> Result<LocoSpec> {
        LocoSpec::new(self.class_names(), &scenario.held_out)
    }

    pub fn validate(&self) -> Result<()> {
        if !safe_name(&self.name) {
            return Err(config_err("name", "must be non-empty ASCII letters, digits, `_` or `-`"));
        }
        let d = &self.dataset;
        let a = &self.architecture;
        if a.blocks < 2 {
            return Err(config_err("architecture.blocks", "must be at least 2"));
        }
        if a.blocks > 8 || a.base_width == 0 {
            return Err(config_err("architecture", "blocks must be <= 8 and base_width >= 1"));
        }
        let divisor = 1usize << (a.blocks - 1);
        if d.patch_size == 0 || !d.patch_size.is_multiple_of(divisor) {
            return Err(config_err(
                "dataset.patch_size",
                format!("{} must be a positive multiple of {divisor} for {} blocks", d.patch_size, a.blocks),
            ));
        }
        if d.stride == 0 || d.stride > d.patch_size {
            return Err(config_err("dataset.stride", format!("must be in 1..={}", d.patch_size)));
        }
        match (&d.synthetic, &d.scenes) {
            (Some(s), None) => {
                if s.num_scenes < 3 {
                    return Err(config_err("dataset.synthetic.num_scenes", "need at least 3 scenes"));
                }
                if s.height < d.patch_size || s.width < d.patch_size {
                    return Err(config_err("dataset.synthetic", "scenes smaller than patch_size"));
                }
                split_counts(s.num_scenes, s.split).map_err(|e| config_err("dataset.synthetic.split", e))?;
                self.scene_spec(s, 0)
                    .validate()
                    .map_err(|e| config_err("dataset.synthetic.classes", e))?;
            }
            (None, Some(s)) => {
                for (field, list) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
                    if list.is_empty() {
                        return Err(config_err(&format!("dataset.scenes.{field}"), "no scenes listed"));
                    }
                }
                if s.class_names.len() < 2 {
                    return Err(config_err("dataset.scenes.class_names", "need at least 2 classes"));
                }
            }
            _ => {
                return Err(config_err("dataset", "exactly one of [dataset.synthetic] or [dataset.scenes] is required"));
            }
        }
        let c = &self.closed_set;
        if !(c.lr > 0.0 && c.lr.is_finite()) || c.epochs == 0 || c.batch == 0 {
            return Err(config_err("closed_set", "lr must be positive, epochs and batch at least 1"));
        }
        let e = &self.cae;
        if !(e.lr > 0.0 && e.lr.is_finite()) || e.epochs == 0 {
            return Err(config_err("cae", "lr must be positive and epochs at least 1"));
        }
        if e.batch < 2 {
            return Err(config_err("cae.batch", "non-match pairing needs at least 2"));
        }
        if !e.alpha.is_finite() {
            return Err(config_err("cae.alpha", "must be finite"));
        }
        if let NonMatchMode::Hinge { margin } = e.nonmatch {
            if e.alpha < 0.0 {
                return Err(config_err("cae.alpha", "must be non-negative in hinge mode"));
            }
            if !(margin > 0.0 && margin.is_finite()) {
                return Err(config_err("cae.nonmatch.margin", "must be positive"));
            }
        }
        let g = &self.calibration.q_grid;
        if g.is_empty() || g.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(config_err("calibration.q_grid", "must be a non-empty list of values in [0, 1]"));
        }
        if let RangePolicy::Fixed { lo, hi } = self.report.heatmap {
            if !(hi > lo) {
                return Err(config_err("report.heatmap", "fixed range needs hi > lo"));
            }
        }
        if self.scenarios.is_empty() {
            return Err(config_err("scenarios", "at least one scenario is required"));
        }
        let classes = self.class_names();
        let mut seen = BTreeSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            let at = format!("scenarios[{i}]");
            if !safe_name(&s.name) {
                return Err(config_err(&format!("{at}.name"), "must be ASCII letters, digits, `_` or `-`"));
            }
            if !seen.insert(&s.name) {
                return Err(config_err(&format!("{at}.name"), format!("duplicate scenario `{}`", s.name)));
            }
            if s.held_out.is_empty() {
                return Err(config_err(&format!("{at}.held_out"), "must name at least one class"));
            }
            for h in &s.held_out {
                if !classes.contains(h) {
                    return Err(config_err(&format!("{at}.held_out"), format!("class `{h}` is not in the dataset")));
                }
            }
            if classes.len() - s.held_out.len() < 2 {
                return Err(config_err(&format!("{at}.held_out"), "at least 2 known classes must remain"));
            }
        }
        Ok(())
    }

    fn scene_spec(&self, s: &SyntheticDataset, index: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            height: s.height,
            width: s.width,
            cell_size: s.cell_size,
            classes: s.classes.clone(),
            layout: None,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(index),
        }
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Data,
    Backbone,
    Cae,
    Scores,
    Calibration,
    Report,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Data => "data",
            StageKind::Backbone => "backbone",
            StageKind::Cae => "cae",
            StageKind::Scores => "scores",
            StageKind::Calibration => "calibration",
            StageKind::Report => "report",
        }
    }
}

/// Manifest of one completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub kind: StageKind,
    /// Directory holding the stage outputs, relative to the output root.
    pub path: PathBuf,
    /// Hash of the whole experiment config that produced the artifact.
    pub config_hash: String,
    /// Hash of the config sections this stage reads plus the upstream fingerprints.
    pub stage_key: String,
    pub upstream: Vec<String>,
    /// Output files (relative to the output root when inside it) and their SHA-256.
    pub outputs: Vec<(PathBuf, String)>,
    pub fingerprint: String,
}

/// How a stage call treats existing artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Produce this stage and everything upstream of it.
    Run,
    /// Produce this stage; upstream artifacts must already exist and be valid.
    Stage,
    /// Only load and validate an existing artifact.
    Require,
}

impl Mode {
    fn upstream(self) -> Mode {
        match self {
            Mode::Run => Mode::Run,
            _ => Mode::Require,
        }
    }
}

/// Dataset index written by the data stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Relative to the output directory on disk when it lies inside it.
    pub scene_dir: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub stats: ChannelStats,
}

/// Patch order of the scores stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreIndex {
    validation: Vec<String>,
    test: Vec<String>,
    class_names: Vec<String>,
}

/// Runs stages for one config under one output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Reuse cached stages whose manifests are still valid.
    pub resume: bool,
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn missing(kind: StageKind, detail: impl std::fmt::Display) -> CoreSegError {
    CoreSegError::ArtifactChain(format!("{} artifact {detail}", kind.name()))
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>, resume: bool) -> Self {
        Pipeline {
            config,
            out: out.into(),
            resume,
        }
    }

    pub fn scenario_dir(&self, sc: &ScenarioConfig) -> PathBuf {
        self.out.join(&sc.name)
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn abs(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn verify(&self, m: &StageArtifact) -> Result<()> {
        for (p, h) in &m.outputs {
            let actual = hash_file(&self.abs(p)).map_err(|_| missing(m.kind, format!("output {} is missing", p.display())))?;
            if &actual != h {
                return Err(missing(m.kind, format!("output {} was modified", p.display())));
            }
        }
        Ok(())
    }

    fn stage(
        &self,
        kind: StageKind,
        dir: &Path,
        section: serde_json::Value,
        upstream: &[&StageArtifact],
        mode: Mode,
        run: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<StageArtifact> {
        let upstream: Vec<String> = upstream.iter().map(|u| u.fingerprint.clone()).collect();
        let key = sha256_hex(
            serde_json::to_string(&json!({ "stage": kind.name(), "section": section, "upstream": upstream }))?
                .as_bytes(),
        );
        let manifest_path = dir.join(format!("{}.manifest.json", kind.name()));
        let existing: Option<StageArtifact> = std::fs::read(&manifest_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        if mode == Mode::Require {
            let m = existing.ok_or_else(|| missing(kind, format!("not found at {}", manifest_path.display())))?;
            if m.stage_key != key {
                return Err(missing(kind, "is stale: its config or upstream artifacts changed"));
            }
            self.verify(&m)?;
            return Ok(m);
        }
        if self.resume {
            if let Some(m) = existing {
                if m.stage_key == key && self.verify(&m).is_ok() {
                    log::info!("{}: reusing cached artifact in {}", kind.name(), dir.display());
                    return Ok(m);
                }
            }
        }
        log::info!("{}: running", kind.name());
        let outputs = run().map_err(|e| e.in_stage(kind.name()))?;
        let outputs = outputs
            .iter()
            .map(|p| Ok((self.rel(p), hash_file(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let fingerprint = sha256_hex(serde_json::to_string(&(&key, &outputs))?.as_bytes());
        let m = StageArtifact {
            kind,
            path: self.rel(dir),
            config_hash: self.config.hash(),
            stage_key: key,
            upstream,
            outputs,
            fingerprint,
        };
        atomic_write(&manifest_path, serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    /// Generates (or indexes) the scenes and fits channel statistics on the training split.
    pub fn data(&self, mode: Mode) -> Result<StageArtifact> {
        let section = json!({ "dataset": self.config.dataset, "seed": self.config.seed });
        let dir = self.data_dir();
        self.stage(StageKind::Data, &dir, section, &[], mode, || {
            let classes = self.config.class_names();
            let mut outputs = Vec::new();
            let (scene_dir, split) = match (&self.config.dataset.synthetic, &self.config.dataset.scenes) {
                (Some(s), _) => {
                    let scene_dir = dir.join("scenes");
                    let mut names = Vec::new();
                    for i in 0..s.num_scenes {
                        let name = format!("scene_{i:03}");
                        let scene = generate_synthetic(&self.config.scene_spec(s, i as u64), &name)?;
                        write_scene(&scene_dir, &name, &scene, &classes)?;
                        for ext in ["raster.npy", "mask.npy", "json"] {
                            outputs.push(scene_dir.join(format!("{name}.{ext}")));
                        }
                        names.push(name);
                    }
                    (scene_dir, split_dataset(names, s.split, self.config.seed)?)
                }
                (None, Some(s)) => {
                    for name in s.train.iter().chain(&s.validation).chain(&s.test) {
                        for ext in ["raster.npy", "mask.npy", "json"] {
                            outputs.push(s.dir.join(format!("{name}.{ext}")));
                        }
                    }
                    let split = DatasetSplit {
                        train: s.train.clone(),
                        validation: s.validation.clone(),
                        test: s.test.clone(),
                    };
                    (std::path::absolute(&s.dir)?, split)
                }
                (None, None) => return Err(config_err("dataset", "no source")),
            };
            let train: Vec<LabeledPatch> = split
                .train
                .iter()
                .map(|n| Ok(read_scene(&scene_dir, n)?.0))
                .collect::<Result<_>>()?;
            let stats = ChannelStats::fit(train.iter().map(|s| &s.image))?;
            let index = DatasetIndex {
                scene_dir: self.rel(&scene_dir),
                class_names: classes,
                train: split.train,
                validation: split.validation,
                test: split.test,
                stats,
            };
            let index_path = dir.join("dataset.json");
            atomic_write(&index_path, serde_json::to_string_pretty(&index)?.as_bytes())?;
            outputs.push(index_path);
            Ok(outputs)
        })
    }

    pub fn dataset_index(&self) -> Result<DatasetIndex> {
        let mut index: DatasetIndex = serde_json::from_slice(&std::fs::read(self.data_dir().join("dataset.json"))?)?;
        index.scene_dir = self.abs(&index.scene_dir);
        Ok(index)
    }

    /// Normalized, tiled, LOCO-remapped patches of one split.
    fn load_split(&self, index: &DatasetIndex, names: &[String], loco: &LocoSpec) -> Result<Vec<LabeledPatch>> {
        let mut out = Vec::new();
        for name in names {
            let (scene, sidecar) = read_scene(&index.scene_dir, name)?;
            if sidecar.class_names != index.class_names {
                return Err(CoreSegError::invalid(format!(
                    "scene {name} lists classes {:?}, dataset has {:?}",
                    sidecar.class_names, index.class_names
                )));
            }
            let scene = LabeledPatch {
                image: index.stats.apply(&scene.image),
                mask: apply_loco(&scene.mask, loco)?,
            };
            out.extend(extract_patches(&scene, self.config.dataset.patch_size, self.config.dataset.stride)?);
        }
        Ok(out)
    }

    /// Patches of one split as a scenario sees them.
    pub fn split_patches(&self, sc: &ScenarioConfig, split: Split) -> Result<Vec<LabeledPatch>> {
        let (index, loco) = self.splits(sc)?;
        let names = match split {
            Split::Train => &index.train,
            Split::Validation => &index.validation,
            Split::Test => &index.test,
        };
        self.load_split(&index, names, &loco)
    }

    fn splits(&self, sc: &ScenarioConfig) -> Result<(DatasetIndex, LocoSpec)> {
        let index = self.dataset_index()?;
        let loco = self.config.loco(sc)?;
        Ok((index, loco))
    }

    fn arch(&self, index: &DatasetIndex, loco: &LocoSpec) -> ArchDescriptor {
        ArchDescriptor {
            blocks: self.config.architecture.blocks,
            base_width: self.config.architecture.base_width,
            num_classes: loco.num_known(),
            in_channels: index.stats.min.len(),
        }
    }

    /// Closed-set U-net training.
    pub fn closed(&self, sc: &ScenarioConfig, mode: Mode) -> Result<StageArtifact> {
        let data = self.data(mode.upstream())?;
        let dir = self.scenario_dir(sc);
        let section = json!({
            "architecture": self.config.architecture,
            "closed_set": self.config.closed_set,
            "held_out": sc.held_out,
            "patch": [self.config.dataset.patch_size, self.config.dataset.stride],
            "seed": self.config.seed,
        });
        self.stage(StageKind::Backbone, &dir, section, &[&data], mode, || {
            let (index, loco) = self.splits(sc)?;
            let train = self.load_split(&index, &index.train, &loco)?;
            let val = self.load_split(&index, &index.validation, &loco)?;
            let net = build_backbone(self.arch(&index, &loco), self.config.seed)?;
            let c = &self.config.closed_set;
            let hyper = ClosedSetHyper {
                lr: c.lr,
                epochs: c.epochs,
                batch: c.batch,
                seed: self.config.seed,
            };
            let run = train_closed_set(net, &train, &val, &hyper)?;
            let mut csv = String::from("epoch,train_loss,val_accuracy,wall_seconds\n");
            for e in &run.history {
                csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_accuracy, e.wall_seconds));
            }
            atomic_write(&dir.join("closed_log.csv"), csv.as_bytes())?;
            let ckpt = dir.join("backbone.ckpt");
            run.checkpoint.save(&ckpt)?;
            Ok(vec![ckpt])
        })
    }

    /// CAE training against the frozen backbone.
    pub fn cae(&self, sc: &ScenarioConfig, mode: Mode) -> Result<StageArtifact> {
        let backbone = self.closed(sc, mode.upstream())?;
        let dir = self.scenario_dir(sc);
        let section = json!({ "cae": self.config.cae, "seed": self.config.seed });
        self.stage(StageKind::Cae, &dir, section, &[&backbone], mode, || {
            let (index, loco) = self.splits(sc)?;
            let train = self.load_split(&index, &index.train, &loco)?;
            let val = self.load_split(&index, &index.validation, &loco)?;
            let bb = BackboneCheckpoint::load(&dir.join("backbone.ckpt"))?;
            let c = &self.config.cae;
            let hyper = CaeHyper {
                alpha: c.alpha,
                lr: c.lr,
                epochs: c.epochs,
                batch: c.batch,
                seed: self.config.seed,
                nonmatch: c.nonmatch,
            };
            let run = train_cae(&bb, &train, &val, &hyper)?;
            let mut csv = String::from("epoch,match_term,nonmatch_term,total,val_auroc,wall_seconds\n");
            for e in &run.history {
                let auroc = e.val_auroc.map_or_else(|| "undefined".to_string(), |a| a.to_string());
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.epoch, e.match_term, e.nonmatch_term, e.total, auroc, e.wall_seconds
                ));
            }
            atomic_write(&dir.join("cae_log.csv"), csv.as_bytes())?;
            let mut steps = String::from("step,match_term,nonmatch_term,alpha,total\n");
            for (i, s) in run.steps.iter().enumerate() {
                steps.push_str(&format!("{i},{},{},{},{}\n", s.match_term, s.nonmatch_term, s.alpha, s.total));
            }
            atomic_write(&dir.join("cae_steps.csv"), steps.as_bytes())?;
            let ckpt = dir.join("cae.ckpt");
            run.checkpoint.save(&ckpt)?;
            Ok(vec![ckpt])
        })
    }

    /// Trained backbone and CAE of a scenario, with the chain checked.
    pub fn load_models(&self, sc: &ScenarioConfig) -> Result<(BackboneCheckpoint, CaeCheckpoint)> {
        let dir = self.scenario_dir(sc);
        let bb = BackboneCheckpoint::load(&dir.join("backbone.ckpt"))?;
        let cae = CaeCheckpoint::load(&dir.join("cae.ckpt"), &bb)?;
        Ok((bb, cae))
    }

    /// Conditioning sweep over validation and test patches.
    pub fn infer(&self, sc: &ScenarioConfig, mode: Mode) -> Result<StageArtifact> {
        let cae = self.cae(sc, mode.upstream())?;
        let dir = self.scenario_dir(sc);
        let section = json!({ "save_error_volumes": self.config.report.save_error_volumes });
        self.stage(StageKind::Scores, &dir, section, &[&cae], mode, || {
            let (index, loco) = self.splits(sc)?;
            let (bb, cae) = self.load_models(sc)?;
            let mut sweeper = Sweeper::from_checkpoint(&bb, &cae)?;
            let names = loco.known_names();
            let scores_dir = dir.join("scores");
            let mut outputs = Vec::new();
            let mut score_index = ScoreIndex {
                validation: Vec::new(),
                test: Vec::new(),
                class_names: names.clone(),
            };
            for (split, scenes) in [("val", &index.validation), ("test", &index.test)] {
                for (i, p) in self.load_split(&index, scenes, &loco)?.iter().enumerate() {
                    let name = format!("{split}_{i:04}");
                    let volume = sweeper.sweep(&p.image, true)?;
                    let map = min_reduce(&volume)?;
                    save_score_map(&scores_dir, &name, &map, &names)?;
                    let closed = bb.predict_closed(&p.image)?;
                    let closed_path = scores_dir.join(format!("{name}.closed.npy"));
                    write_npy_file(&closed_path, &closed.labels.mapv(|v| v as i16))?;
                    for ext in ["min_error.npy", "argmin.npy", "score.json"] {
                        outputs.push(scores_dir.join(format!("{name}.{ext}")));
                    }
                    outputs.push(closed_path);
                    if split == "test" && self.config.report.save_error_volumes {
                        save_error_volume(&scores_dir, &name, &volume, &names)?;
                        outputs.push(scores_dir.join(format!("{name}.errors.npy")));
                    }
                    if split == "val" {
                        score_index.validation.push(name);
                    } else {
                        score_index.test.push(name);
                    }
                }
            }
            let index_path = scores_dir.join("index.json");
            atomic_write(&index_path, serde_json::to_string_pretty(&score_index)?.as_bytes())?;
            outputs.push(index_path);
            Ok(outputs)
        })
    }

    fn score_index(&self, sc: &ScenarioConfig) -> Result<ScoreIndex> {
        Ok(serde_json::from_slice(&std::fs::read(
            self.scenario_dir(sc).join("scores").join("index.json"),
        )?)?)
    }

    fn load_closed(&self, sc: &ScenarioConfig, name: &str, k: usize) -> Result<LabelMask> {
        let p = self.scenario_dir(sc).join("scores").join(format!("{name}.closed.npy"));
        let labels = Array2::<i16>::read_npy(std::fs::File::open(&p)?).map_err(|e| npy_err(&p, e))?;
        LabelMask::new(labels.mapv(i32::from), k)
    }

    /// Picks the error quantile on validation pixels.
    pub fn calibrate(&self, sc: &ScenarioConfig, mode: Mode) -> Result<StageArtifact> {
        let scores = self.infer(sc, mode.upstream())?;
        let dir = self.scenario_dir(sc);
        let section = json!({ "q_grid": self.config.calibration.q_grid });
        self.stage(StageKind::Calibration, &dir, section, &[&scores], mode, || {
            let (index, loco) = self.splits(sc)?;
            let val = self.load_split(&index, &index.validation, &loco)?;
            let si = self.score_index(sc)?;
            if si.validation.len() != val.len() {
                return Err(CoreSegError::ArtifactChain("validation score maps do not match the dataset".into()));
            }
            let maps = si
                .validation
                .iter()
                .map(|n| load_score_map(&dir.join("scores"), n))
                .collect::<Result<Vec<_>>>()?;
            let (scores, truth) = pool_scores(maps.iter().zip(val.iter().map(|p| &p.mask)));
            let cal = select_quantile(&scores, &truth, &self.config.calibration.q_grid)?;
            let path = dir.join("threshold.json");
            atomic_write(&path, serde_json::to_string_pretty(&cal)?.as_bytes())?;
            Ok(vec![path])
        })
    }

    /// Fuses test predictions, scores them and renders the report artifacts.
    pub fn evaluate(&self, sc: &ScenarioConfig, mode: Mode) -> Result<(StageArtifact, EvalReport)> {
        let cal = self.calibrate(sc, mode.upstream())?;
        let dir = self.scenario_dir(sc);
        let section = json!({ "report": self.config.report });
        let report_dir = dir.join("report");
        let artifact = self.stage(StageKind::Report, &report_dir, section, &[&cal], mode, || {
            let (index, loco) = self.splits(sc)?;
            let test = self.load_split(&index, &index.test, &loco)?;
            let si = self.score_index(sc)?;
            if si.test.len() != test.len() {
                return Err(CoreSegError::ArtifactChain("test score maps do not match the dataset".into()));
            }
            let cal: Calibration = serde_json::from_slice(&std::fs::read(dir.join("threshold.json"))?)?;
            let k = loco.num_known();
            let palette = Palette::isprs(&loco.known_names())?;
            let mut preds = Vec::with_capacity(test.len());
            let mut outputs = Vec::new();
            let pred_dir = report_dir.join("predictions");
            for (i, (name, patch)) in si.test.iter().zip(&test).enumerate() {
                let map = load_score_map(&dir.join("scores"), name)?;
                let closed = self.load_closed(sc, name, k)?;
                let pred = fuse(&closed, &map, &cal.chosen)?;
                save_prediction(&pred_dir, name, &pred, &loco.known_names())?;
                outputs.push(pred_dir.join(format!("{name}.pred.png")));
                if i < self.config.report.panels {
                    let panel = render_panel(&patch.image, &patch.mask, &pred, &palette, self.config.report.heatmap)?;
                    let path = report_dir.join(format!("panel_{name}.png"));
                    save_png(&panel, &path)?;
                    outputs.push(path);
                }
                preds.push(pred);
            }
            let truths: Vec<LabelMask> = test.iter().map(|p| p.mask.clone()).collect();
            let mut report = evaluate_scenario(&sc.name, &preds, &truths, &loco)?;
            let (scores, truth) = pool_scores(preds.iter().map(|p| &p.score_map).zip(&truths));
            report.oracle_threshold = select_quantile(&scores, &truth, &self.config.calibration.q_grid)
                .ok()
                .map(|c| c.chosen);
            if let Ok(curve) = roc_curve(&scores, &truth, None) {
                let csv = report_dir.join("roc.csv");
                atomic_write(&csv, curve.to_csv().as_bytes())?;
                let png = report_dir.join("roc.png");
                save_png(&render_roc(&curve, 256), &png)?;
                outputs.extend([csv, png]);
            }
            let path = report_dir.join("eval_report.json");
            atomic_write(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            outputs.push(path);
            Ok(outputs)
        })?;
        let report = serde_json::from_slice(&std::fs::read(report_dir.join("eval_report.json"))?)?;
        Ok((artifact, report))
    }

    /// All stages of one scenario, in order.
    pub fn run_scenario(&self, scenario: &str) -> Result<EvalReport> {
        let sc = self.config.scenario(scenario)?.clone();
        Ok(self.evaluate(&sc, Mode::Run)?.1)
    }

    /// Every scenario; failures are recorded and the remaining scenarios still run.
    pub fn run_suite(&self) -> Result<SuiteReport> {
        self.write_config()?;
        self.data(Mode::Run)?;
        let mut reports = Vec::new();
        let mut failures = Vec::new();
        for sc in &self.config.scenarios {
            match self.run_scenario(&sc.name) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    log::error!("scenario {} failed: {e}", sc.name);
                    failures.push((sc.name.clone(), e.to_string()));
                }
            }
        }
        let suite = SuiteReport::new(reports, failures);
        suite.write(&self.out)?;
        self.summary(&suite)?;
        Ok(suite)
    }

    /// Copies the effective config next to the artifacts.
    pub fn write_config(&self) -> Result<()> {
        atomic_write(&self.out.join("config.toml"), self.config.to_toml().as_bytes())?;
        Ok(())
    }

    /// Writes `summary.html`; returns renders that were missing.
    pub fn summary(&self, suite: &SuiteReport) -> Result<Vec<PathBuf>> {
        let mut renders = Vec::new();
        for r in &suite.scenarios {
            let report_dir = self.out.join(&r.scenario).join("report");
            renders.push(RenderRef {
                scenario: r.scenario.clone(),
                caption: "ROC curve".into(),
                path: report_dir.join("roc.png"),
            });
            let mut panels: Vec<PathBuf> = std::fs::read_dir(&report_dir)
                .map(|d| {
                    d.filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("panel_")))
                        .collect()
                })
                .unwrap_or_default();
            panels.sort();
            for p in panels {
                renders.push(RenderRef {
                    scenario: r.scenario.clone(),
                    caption: format!(
                        "{}: input, truth, closed set, open set, min error",
                        p.file_stem().unwrap_or_default().to_string_lossy()
                    ),
                    path: p,
                });
            }
        }
        emit_summary(suite, &renders, &self.out.join("summary.html"))
    }
}

/// Runs one scenario end to end under `out`.
pub fn run_scenario(config: &ExperimentConfig, scenario: &str, out: &Path, resume: bool) -> Result<EvalReport> {
    let p = Pipeline::new(config.clone(), out, resume);
    p.write_config()?;
    p.run_scenario(scenario)
}

/// Runs every configured scenario under `out`.
pub fn run_loco_suite(config: &ExperimentConfig, out: &Path, resume: bool) -> Result<SuiteReport> {
    Pipeline::new(config.clone(), out, resume).run_suite()
}

/// The shipped 4-class synthetic config.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

pub fn toy_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(TOY_CONFIG, "configs/toy.toml").expect("shipped toy config is valid")
}
