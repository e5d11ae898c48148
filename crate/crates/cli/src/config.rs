//! Experiment config files.

use std::path::{Path, PathBuf};

use aoi_sched::plant::{generate_ensemble, Ensemble, PlantModel, PlantSpec};
use aoi_sim::SimConfig;
use serde::Deserialize;

use crate::io::{read_text, CliError, CliResult};

/// Random plants drawn from a generator spec.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generate {
    #[serde(flatten)]
    pub spec: PlantSpec,
    pub count: usize,
    pub seed: Option<u64>,
}

/// JSON experiment description. Exactly one plant source may be given:
/// `plants_file`, inline `plants`, or `generate`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plants_file: Option<PathBuf>,
    pub plants: Option<Vec<PlantModel>>,
    pub generate: Option<Generate>,
    #[serde(default)]
    pub policies: Vec<String>,
    pub sim: Option<SimConfig>,
    pub sweep: Option<String>,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.plants_file, &mut cfg.csv, &mut cfg.json].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let sources =
            cfg.plants_file.is_some() as usize + cfg.plants.is_some() as usize + cfg.generate.is_some() as usize;
        if sources > 1 {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                message: "plants_file, plants and generate are mutually exclusive".into(),
            });
        }
        Ok(cfg)
    }

    /// Plants from `override_file` if given, else from the config's source.
    pub fn resolve_plants(&self, override_file: Option<&Path>, seed: Option<u64>) -> CliResult<Vec<PlantModel>> {
        if let Some(path) = override_file.or(self.plants_file.as_deref()) {
            return load_plants(path);
        }
        if let Some(plants) = &self.plants {
            return Ok(plants.clone());
        }
        if let Some(g) = &self.generate {
            return Ok(generate_ensemble(&g.spec, g.count, seed.or(g.seed).unwrap_or(0))?);
        }
        Err(CliError::Usage("no plants given; pass --plants or a config with a plant source".into()))
    }
}

pub fn load_plants(path: &Path) -> CliResult<Vec<PlantModel>> {
    let text = read_text(path)?;
    let ensemble =
        Ensemble::from_json(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(ensemble.plants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn sources_are_exclusive_and_paths_relative() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.json");
        fs::write(&cfg_path, r#"{"plants_file":"p.json","generate":{"count":2}}"#).unwrap();
        assert!(ExperimentConfig::load(&cfg_path).is_err());

        fs::write(&cfg_path, r#"{"plants_file":"p.json","policies":["dp"]}"#).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.plants_file.unwrap(), dir.path().join("p.json"));
    }

    #[test]
    fn generated_source_honors_seed_override() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"generate":{"n":2,"m":1,"count":3,"seed":4}}"#).unwrap();
        let a = cfg.resolve_plants(None, None).unwrap();
        let b = cfg.resolve_plants(None, Some(4)).unwrap();
        let c = cfg.resolve_plants(None, Some(5)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a[0].n(), 2);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"plant":[]}"#).is_err());
    }
}
