use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{merge_toml, TrainConfig};
use super::{TrainData, Trainer};
use crate::error::{Error, Result};

/// A set of config overrides, each trained once per seed.
///
/// ```toml
/// seeds = [0, 1, 2]
///
/// [[run]]
/// name = "sup_only"
/// [run.set.losses]
/// pseudo = false
/// ent = false
/// contr = false
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    #[serde(rename = "run")]
    pub runs: Vec<AblationRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    #[serde(default = "empty_table")]
    pub set: toml::Value,
}

fn empty_table() -> toml::Value {
    toml::Value::Table(toml::map::Map::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub seed: u64,
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: AblationGrid = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if grid.seeds.is_empty() || grid.runs.is_empty() {
            return Err(Error::Config(
                "ablation grid needs at least one seed and one run".into(),
            ));
        }
        Ok(grid)
    }

    /// The concrete configs of every (run, seed) pair; outputs go to
    /// `<output.dir>/<name>/seed<seed>`.
    pub fn expand(&self, base: &toml::Value, base_dir: &Path) -> Result<Vec<(String, u64, TrainConfig)>> {
        let mut out = Vec::new();
        for run in &self.runs {
            for &seed in &self.seeds {
                let mut value = base.clone();
                merge_toml(&mut value, &run.set);
                merge_toml(
                    &mut value,
                    &toml::Value::Table(toml::map::Map::from_iter([(
                        "seed".to_string(),
                        toml::Value::Integer(seed as i64),
                    )])),
                );
                let mut cfg = TrainConfig::from_toml_value(value)
                    .map_err(|e| Error::Config(format!("run `{}`: {e}", run.name)))?;
                cfg.rebase(base_dir);
                cfg.output.dir = cfg.output.dir.join(&run.name).join(format!("seed{seed}"));
                out.push((run.name.clone(), seed, cfg));
            }
        }
        Ok(out)
    }
}

/// Trains every grid cell in order, appending one JSON line per finished
/// run to `summary`.
pub fn run_ablation(
    base: &toml::Value,
    base_dir: &Path,
    grid: &AblationGrid,
    summary: &mut dyn Write,
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for (name, seed, cfg) in grid.expand(base, base_dir)? {
        log::info!("ablation run `{name}` seed {seed}");
        fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::load(&cfg.output.dir, e))?;
        let data = TrainData::load(&cfg)?;
        let mut trainer = Trainer::new(cfg, data)?;
        let s = trainer.run()?;
        let r = AblationResult {
            name,
            seed,
            final_miou: s.final_miou,
            best_miou: s.best_miou,
        };
        writeln!(
            summary,
            "{}",
            serde_json::to_string(&r).map_err(|e| Error::Config(e.to_string()))?
        )?;
        results.push(r);
    }
    Ok(results)
}
