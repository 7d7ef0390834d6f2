//! Settings resolution: command-line flags over the JSON config file over
//! profile defaults.

use std::path::{Path, PathBuf};

use bashcomment_core::decoder::DecoderConfig;
use bashcomment_core::encoder::EncoderConfig;
use bashcomment_core::pipeline::Profile;
use bashcomment_core::trainer::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

pub const MODEL_DIR_ENV: &str = "BASHEXPLAINER_MODEL_DIR";
pub const DEFAULT_PORT: u16 = 8631;
pub const DEFAULT_MODEL_DIR: &str = "model";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub model_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub beam_size: Option<usize>,
    pub train: TrainOverrides,
    /// Replaces the profile's encoder configuration.
    pub encoder: Option<EncoderConfig>,
    /// Replaces the profile's decoder configuration.
    pub decoder: Option<DecoderConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Global flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct GlobalFlags {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub profile: Profile,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub beam_size: usize,
    pub port: u16,
    file_model_dir: Option<PathBuf>,
}

impl Settings {
    pub fn resolve(flags: &GlobalFlags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Ok(Self::merge(flags, file))
    }

    pub fn merge(flags: &GlobalFlags, file: FileConfig) -> Self {
        let profile = flags.profile.or(file.profile).unwrap_or_default();
        let seed = flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let encoder = file.encoder.unwrap_or_else(|| profile.encoder());
        let decoder = file.decoder.unwrap_or_else(|| profile.decoder());
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            seed,
            epochs: file.train.epochs.unwrap_or(defaults.epochs),
            learning_rate: file.train.learning_rate.unwrap_or(defaults.learning_rate),
            batch_size: file.train.batch_size.unwrap_or(defaults.batch_size),
            ..defaults
        };
        Self {
            profile,
            seed,
            beam_size: file.beam_size.unwrap_or(decoder.beam_size),
            encoder,
            decoder,
            train,
            port: file.port.unwrap_or(DEFAULT_PORT),
            file_model_dir: file.model_dir,
        }
    }

    /// Model directory: explicit flag, then the environment variable, then
    /// the config file, then `model`.
    pub fn model_dir(&self, flag: Option<&Path>) -> PathBuf {
        self.model_dir_with(flag, std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
    }

    fn model_dir_with(&self, flag: Option<&Path>, env: Option<PathBuf>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or(env.filter(|p| !p.as_os_str().is_empty()))
            .or_else(|| self.file_model_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_MODEL_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file: FileConfig = serde_json::from_str(
            r#"{"profile": "paper", "seed": 7, "beam_size": 3, "train": {"epochs": 2}, "model_dir": "m"}"#,
        )
        .unwrap();
        let s = Settings::merge(&GlobalFlags { seed: Some(9), ..Default::default() }, file.clone());
        assert_eq!(s.seed, 9);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.profile, Profile::Paper);
        assert_eq!(s.encoder, EncoderConfig::paper());
        assert_eq!(s.train.epochs, 2);
        assert_eq!(s.train.learning_rate, 2e-4);
        assert_eq!(s.beam_size, 3);

        let flags = GlobalFlags { profile: Some(Profile::Desk), ..Default::default() };
        let s = Settings::merge(&flags, file);
        assert_eq!((s.profile, s.seed, s.port), (Profile::Desk, 7, DEFAULT_PORT));
    }

    #[test]
    fn model_dir_precedence() {
        let file: FileConfig = serde_json::from_str(r#"{"model_dir": "from_file"}"#).unwrap();
        let s = Settings::merge(&GlobalFlags::default(), file);
        let env = Some(PathBuf::from("from_env"));
        assert_eq!(s.model_dir_with(Some(Path::new("flag")), env.clone()), PathBuf::from("flag"));
        assert_eq!(s.model_dir_with(None, env), PathBuf::from("from_env"));
        assert_eq!(s.model_dir_with(None, None), PathBuf::from("from_file"));
        let bare = Settings::merge(&GlobalFlags::default(), FileConfig::default());
        assert_eq!(bare.model_dir_with(None, None), PathBuf::from(DEFAULT_MODEL_DIR));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"epochs": 3}"#).is_err());
    }
}
