//! Run configuration: one JSON document drives every verb.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use worldkit_core::flow::{FlowTrainOptions, Stage2Weights, DEFAULT_HIDDEN};
use worldkit_core::metrics::EgoFootprint;
use worldkit_core::occupancy::{CompletionParams, DEFAULT_TAU};
use worldkit_core::optim::AdamConfig;
use worldkit_core::plan::{PlanTrainOptions, PlannerConfig};
use worldkit_core::synth::{PerceptionOptions, SceneKnobs};
use worldkit_core::{BevSpec, OccSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneKnobs,
    pub perception: PerceptionOptions,
    pub bev: BevSpec,
    pub occupancy: OccSpec,
    /// Render weights ω (depth, pseudo-depth, semantic) and λ_bev.
    pub loss: Stage2Weights,
    pub fit: FitConfig,
    pub gradcheck: GradcheckConfig,
    pub flow: FlowConfig,
    pub plan: PlanConfig,
    pub forecast: ForecastConfig,
    /// Artifacts go to `<output_dir>/<config hash>/`.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneKnobs::default(),
            perception: PerceptionOptions::default(),
            bev: BevSpec::default(),
            occupancy: OccSpec::default(),
            loss: Stage2Weights::default(),
            fit: FitConfig::default(),
            gradcheck: GradcheckConfig::default(),
            flow: FlowConfig::default(),
            plan: PlanConfig::default(),
            forecast: ForecastConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub gaussians: usize,
    pub iters: usize,
    pub adam: AdamConfig,
    pub validity_warmup: usize,
    pub frames: Vec<usize>,
    pub sparse_rate: f64,
    pub init_near: f64,
    pub init_far: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            gaussians: 64,
            iters: 500,
            adam: AdamConfig::default(),
            validity_warmup: 400,
            frames: vec![0],
            sparse_rate: 0.1,
            init_near: 1.0,
            init_far: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub scenes: usize,
    pub gaussians: usize,
    pub classes: usize,
    pub image: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { scenes: 1, gaussians: 32, classes: 4, image: 32, step: 1e-4, tolerance: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub hidden: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Frames `t` whose transition to `t+1` supervises the head.
    pub frames: Vec<usize>,
    pub sparse_rate: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let t = FlowTrainOptions::default();
        FlowConfig { hidden: DEFAULT_HIDDEN, steps: t.steps, adam: t.adam, frames: vec![0, 1], sparse_rate: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub model: PlannerConfig,
    pub train: PlanTrainOptions,
    pub scenes: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub footprint: EgoFootprint,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            model: PlannerConfig::default(),
            train: PlanTrainOptions::default(),
            scenes: 8,
            min_speed: 1.0,
            max_speed: 8.0,
            footprint: EgoFootprint::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Identity,
    /// The head written by `flow-pretrain`.
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub steps: usize,
    pub tau: f64,
    pub completion: CompletionParams,
    pub refiner: RefinerKind,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { steps: 3, tau: DEFAULT_TAU, completion: CompletionParams::default(), refiner: RefinerKind::Identity }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        self.bev.validate().map_err(|e| CliError::Validation(format!("bev: {e}")))?;
        self.occupancy.validate().map_err(|e| CliError::Validation(format!("occupancy: {e}")))?;
        self.plan.model.validate().map_err(|e| CliError::Validation(format!("plan.model: {e}")))?;
        self.plan.footprint.validate().map_err(|e| CliError::Validation(format!("plan.footprint: {e}")))?;
        let w = &self.loss;
        for (name, v) in [
            ("loss.recon.depth", w.recon.depth),
            ("loss.recon.pseudo_depth", w.recon.pseudo_depth),
            ("loss.recon.semantic", w.recon.semantic),
            ("loss.bev", w.bev),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite weight ≥ 0, got {v}"));
            }
        }
        if self.scene.frames < 2 {
            return bad("scene.frames must be at least 2".into());
        }
        if self.fit.gaussians == 0 || !(0.0 < self.fit.init_near && self.fit.init_near < self.fit.init_far) {
            return bad("fit needs gaussians > 0 and 0 < init_near < init_far".into());
        }
        if !(0.0..=1.0).contains(&self.fit.sparse_rate) || !(0.0..=1.0).contains(&self.flow.sparse_rate) {
            return bad("sparse_rate must lie in [0, 1]".into());
        }
        if let Some(&t) = self.fit.frames.iter().find(|&&t| t >= self.scene.frames) {
            return bad(format!("fit.frames contains {t} but the scene has {} frames", self.scene.frames));
        }
        if let Some(&t) = self.flow.frames.iter().find(|&&t| t + 1 >= self.scene.frames) {
            return bad(format!("flow.frames contains {t}, which has no next frame"));
        }
        if self.forecast.steps == 0 || self.forecast.steps >= self.scene.frames {
            return bad(format!("forecast.steps must lie in 1..{}", self.scene.frames));
        }
        if self.plan.scenes == 0 || self.gradcheck.scenes == 0 || self.flow.hidden == 0 {
            return bad("plan.scenes, gradcheck.scenes and flow.hidden must be positive".into());
        }
        if self.perception.logit_scale.is_nan() || self.forecast.tau.is_nan() {
            return bad("NaN in configuration".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything but `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.hash()[..16])
    }
}

/// Reads an optional JSON file (empty means all defaults), applies
/// `key.path=value` overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        None => Value::Object(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            if text.trim().is_empty() {
                Value::Object(Default::default())
            } else {
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
        }
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Validation(format!("override {spec:?} has an empty key")))
}
