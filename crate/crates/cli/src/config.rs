//! Run configuration: a single TOML file covering the world, both models,
//! and every training stage. Unknown keys are rejected, `SPINLAM_`
//! environment variables override any key, and every command echoes its
//! fully resolved config to the output directory.

use serde::{Deserialize, Serialize};
use spinlam_core::error::{CoreError, Result};
use spinlam_core::eval::{LatentMode, ProbeOptions};
use spinlam_core::flow::{FlowConfig, FlowTrainConfig};
use spinlam_core::lam::{LamConfig, LamTrainConfig};
use spinlam_core::world::WorldConfig;
use std::fs;
use std::path::Path;

pub const ENV_PREFIX: &str = "SPINLAM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Triplets generated by gen-data.
    pub triplets: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { triplets: 768 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe: ProbeOptions,
    pub transfer_cases: usize,
    pub transfer_style_a: u32,
    /// Style 3 never appears in generated datasets, so it is the
    /// held-out rendering domain.
    pub transfer_style_b: u32,
    /// Euler steps when sampling from the flow expert.
    pub sample_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            probe: ProbeOptions::default(),
            transfer_cases: 32,
            transfer_style_a: 0,
            transfer_style_b: 3,
            sample_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub dims: Vec<usize>,
    pub modes: Vec<LatentMode>,
    pub planner: Vec<bool>,
    pub train_triplets: usize,
    pub heldout_triplets: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            dims: vec![8, 16, 32],
            modes: LatentMode::ALL.to_vec(),
            planner: vec![true, false],
            train_triplets: 768,
            heldout_triplets: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. It is copied into every stage's train config during
    /// resolution, so one seed governs the whole run.
    pub seed: u64,
    /// Whether fine-tuning and open-loop sampling keep the latent
    /// planner head active.
    pub planner: bool,
    pub world: WorldConfig,
    pub lam: LamConfig,
    pub flow: FlowConfig,
    pub lam_train: LamTrainConfig,
    pub pretrain: FlowTrainConfig,
    pub finetune: FlowTrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            planner: true,
            world: WorldConfig::default(),
            lam: LamConfig::default(),
            flow: FlowConfig::default(),
            lam_train: LamTrainConfig::default(),
            pretrain: FlowTrainConfig::default(),
            // Stage III runs shorter than the other stages by default.
            finetune: FlowTrainConfig {
                steps: 3000,
                ..FlowTrainConfig::default()
            },
            data: DataSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.lam.validate()?;
        self.flow.validate()?;
        if (self.lam.frame_height, self.lam.frame_width) != (self.world.height, self.world.width) {
            return Err(CoreError::Config(format!(
                "latent model expects {}x{} frames but the world renders {}x{}",
                self.lam.frame_height, self.lam.frame_width, self.world.height, self.world.width
            )));
        }
        if (self.flow.frame_height, self.flow.frame_width) != (self.world.height, self.world.width)
        {
            return Err(CoreError::Config(format!(
                "flow expert expects {}x{} frames but the world renders {}x{}",
                self.flow.frame_height, self.flow.frame_width, self.world.height, self.world.width
            )));
        }
        if self.flow.latent_n != self.lam.latent_n {
            return Err(CoreError::Config(format!(
                "flow expert latent dim {} does not match the latent model's {}",
                self.flow.latent_n, self.lam.latent_n
            )));
        }
        Ok(())
    }
}

/// Loads, overrides, and validates the run configuration:
/// file (or defaults) -> SPINLAM_ env overrides -> --seed flag ->
/// seed propagation into every stage.
pub fn load_run_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig> {
    let mut tree: toml::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            text.parse()
                .map_err(|e| CoreError::Config(format!("{}: {}", p.display(), e)))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    apply_env_overrides(&mut tree, ENV_PREFIX)?;
    let mut cfg: RunConfig = tree
        .try_into()
        .map_err(|e| CoreError::Config(e.to_string()))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    cfg.lam_train.seed = cfg.seed;
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `PREFIX<SECTION>__<KEY>=value` environment variables onto the
/// raw TOML tree. Path segments are lowercased; values parse as TOML
/// scalars and fall back to plain strings.
fn apply_env_overrides(tree: &mut toml::Value, prefix: &str) -> Result<()> {
    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(prefix))
        .collect();
    // Deterministic application order.
    vars.sort();
    for (key, raw) in vars {
        let rest = &key[prefix.len()..];
        if rest.is_empty() {
            continue;
        }
        let path: Vec<String> = rest.split("__").map(|s| s.to_lowercase()).collect();
        let value = parse_env_value(&raw);
        insert_at_path(tree, &path, value).map_err(|msg| {
            CoreError::Config(format!("environment override {}: {}", key, msg))
        })?;
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {}", raw);
    match wrapped.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn insert_at_path(
    tree: &mut toml::Value,
    path: &[String],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let mut node = tree;
    for seg in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("{} is not a table", seg))?;
        node = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| "override path ends inside a scalar".to_string())?;
    table.insert(path.last().unwrap().clone(), value);
    Ok(())
}

/// Writes the fully resolved config next to the run's other outputs.
pub fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CoreError::Config(format!("config echo failed: {}", e)))?;
    fs::write(out_dir.join("config.toml"), text)?;
    Ok(())
}
