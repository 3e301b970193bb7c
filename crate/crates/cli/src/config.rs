//! The merged view of a config file and command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uie_snn::data::data_root_from_env;
use uie_snn::network::NetworkConfig;
use uie_snn::profiler::EnergyTable;
use uie_snn::training::TrainSchedule;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainSchedule,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub energy: EnergyConfig,
    pub runtime: RuntimeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest file or directory with `raw/` and `ref/`.
    pub dataset: Option<PathBuf>,
    /// Separate validation set; when absent the dataset is split.
    pub validation: Option<PathBuf>,
    pub val_fraction: f64,
    /// Defaults to the training seed.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            validation: None,
            val_fraction: 0.2,
            split_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub mac_pj: f64,
    pub acc_pj: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let t = EnergyTable::default();
        EnergyConfig {
            mac_pj: t.mac_pj,
            acc_pj: t.acc_pj,
        }
    }
}

impl EnergyConfig {
    pub fn table(&self) -> EnergyTable {
        EnergyTable {
            mac_pj: self.mac_pj,
            acc_pj: self.acc_pj,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 lets the runtime choose.
    pub threads: usize,
}

/// Values given on the command line; each one replaces the file's.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub timesteps: Option<usize>,
    pub threshold: Option<f64>,
    pub resolution: Option<(usize, usize)>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub validation_start_epoch: Option<usize>,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("--config: cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("--config: {}: {e}", path.display())))
    }

    /// Applies flags, falls back to the environment for the dataset, then
    /// checks every field and reports all problems at once.
    pub fn resolve(mut self, o: Overrides) -> Result<Self, CliError> {
        set(&mut self.train.seed, o.seed);
        set(&mut self.runtime.threads, o.threads);
        set(&mut self.network.depth, o.depth);
        set(&mut self.network.base_channels, o.base_channels);
        set(&mut self.network.timesteps, o.timesteps);
        set(&mut self.network.lif.threshold, o.threshold);
        if let Some((h, w)) = o.resolution {
            self.network.height = h;
            self.network.width = w;
        }
        set(&mut self.train.epochs, o.epochs);
        set(&mut self.train.batch_size, o.batch_size);
        set(&mut self.train.learning_rate, o.learning_rate);
        set(&mut self.train.validation_start_epoch, o.validation_start_epoch);
        let from_flag = o.data.is_some();
        if o.data.is_some() {
            self.data.dataset = o.data;
        }
        if o.val_data.is_some() {
            self.data.validation = o.val_data;
        }
        if o.out.is_some() {
            self.output.dir = o.out;
        }
        if self.data.dataset.is_none() {
            self.data.dataset = data_root_from_env();
        }

        let mut problems = self.network.problems();
        problems.extend(self.network.lif.problems());
        problems.extend(self.train.problems());
        match &self.data.dataset {
            None => problems.push("no dataset given: pass --data <path>, set [data].dataset or UIE_SNN_DATA_ROOT".into()),
            Some(p) if !p.exists() => {
                let src = if from_flag { "--data" } else { "data.dataset" };
                problems.push(format!("{src}: {} does not exist", p.display()));
            }
            Some(_) => {}
        }
        if let Some(p) = &self.data.validation {
            if !p.exists() {
                problems.push(format!("--val-data: {} does not exist", p.display()));
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            problems.push(format!("data.val_fraction must lie in [0, 1), got {}", self.data.val_fraction));
        }
        if self.output.dir.is_none() {
            problems.push("no output directory given: pass --out <dir> or set [output].dir".into());
        }
        if let Err(e) = self.energy.table().validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(CliError::config(problems.join("\n  ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir() -> PathBuf {
        std::env::temp_dir()
    }

    #[test]
    fn flags_override_the_file() {
        let file: RunConfig = toml::from_str(
            "[network]\ndepth = 3\ntimesteps = 2\n[train]\nepochs = 7\nvalidation_start_epoch = 1\nseed = 1\n[output]\ndir = \"x\"",
        )
        .unwrap();
        let cfg = file
            .resolve(Overrides {
                seed: Some(9),
                timesteps: Some(4),
                resolution: Some((32, 48)),
                data: Some(tmp_dir()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(cfg.network.depth, 3);
        assert_eq!(cfg.network.timesteps, 4);
        assert_eq!((cfg.network.height, cfg.network.width), (32, 48));
        assert_eq!((cfg.train.epochs, cfg.train.seed), (7, 9));
    }

    #[test]
    fn all_problems_are_reported_together() {
        let err = RunConfig::default()
            .resolve(Overrides {
                depth: Some(2),
                timesteps: Some(0),
                threshold: Some(-1.0),
                epochs: Some(0),
                data: Some(PathBuf::from("/definitely/not/here")),
                out: Some(tmp_dir()),
                ..Default::default()
            })
            .unwrap_err();
        assert_eq!(err.code, 2);
        for needle in ["depth", "timesteps", "threshold", "epochs", "--data"] {
            assert!(err.message.contains(needle), "{needle} missing from {}", err.message);
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig {
            data: DataConfig {
                dataset: Some(PathBuf::from("d")),
                ..Default::default()
            },
            ..Default::default()
        };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[network]\ndepht = 3").is_err());
    }
}
