//! Flat `key = value` run configuration covering data generation, model,
//! loss and training settings. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::folds::DEFAULT_VIDEOS_PER_FOLD;
use crate::data::CohortSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}', expected f32 or f64"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub cohort: CohortSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Subjects per cross-validation fold.
    pub l_fold: usize,
    /// Held-out fold for single-fold training.
    pub fold: usize,
    /// Run at most this many folds; 0 runs all of them.
    pub max_folds: usize,
    /// Dataset directory or manifest path.
    pub data: String,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: CohortSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            l_fold: DEFAULT_VIDEOS_PER_FOLD,
            fold: 0,
            max_folds: 0,
            data: String::new(),
            precision: Precision::F32,
        }
    }
}

/// A configuration key with its command-line flag and description.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub key: &'static str,
    pub flag: &'static str,
    pub help: &'static str,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

macro_rules! run_keys {
    (
        shared { $( $skey:literal, $sflag:literal, $shelp:literal => [ $( $($sfield:ident).+ ),+ ] ; )* }
        single { $( $key:literal, $flag:literal, $help:literal => $($field:ident).+ ; )* }
    ) => {
        /// Every key, in file order.
        pub const KEYS: &[KeyInfo] = &[
            $( KeyInfo { key: $skey, flag: $sflag, help: $shelp }, )*
            $( KeyInfo { key: $key, flag: $flag, help: $help }, )*
        ];

        impl RunConfig {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $skey => Some(first!( $( self.$($sfield).+ ),+ ).to_string()), )*
                    $( $key => Some(self.$($field).+.to_string()), )*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $skey => { $( self.$($sfield).+ = parse(key, value)?; )+ } )*
                    $( $key => self.$($field).+ = parse(key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }
        }
    };
}

macro_rules! first {
    ($head:expr $(, $rest:expr)*) => {
        $head
    };
}

run_keys! {
    shared {
        "seed", "seed", "seed for data generation, initialisation, shuffling, augmentation and folds"
            => [train.seed, cohort.seed];
        "clip_len", "clip-len", "frames per clip" => [model.clip_len, cohort.clip_len];
        "hw", "hw", "frame height and width" => [model.height, model.width, cohort.hw];
        "channels", "channels", "colour channels per frame" => [model.channels, cohort.channels];
        "d", "d", "token embedding and model dimension" => [model.tubelet.d, model.encoder.d];
    }
    single {
        "n_mci", "mci", "synthetic MCI subjects" => cohort.n_mci;
        "n_nc", "nc", "synthetic NC subjects" => cohort.n_nc;
        "frames_min", "frames-min", "shortest synthetic video, in frames" => cohort.frames_min;
        "frames_max", "frames-max", "longest synthetic video, in frames" => cohort.frames_max;
        "rho", "rho", "fraction of each MCI subject's clips without the signature" => cohort.rho;
        "signature_strength", "signature-strength", "peak intensity of the MCI signature" => cohort.signature_strength;
        "signature_period", "signature-period", "signature oscillation period in frames" => cohort.signature_period;
        "noise", "noise", "standard deviation of per-pixel noise" => cohort.noise;
        "tubelet_t", "tubelet-t", "tubelet extent in frames" => model.tubelet.t;
        "tubelet_h", "tubelet-h", "tubelet extent in rows" => model.tubelet.h;
        "tubelet_w", "tubelet-w", "tubelet extent in columns" => model.tubelet.w;
        "heads", "heads", "attention heads" => model.encoder.heads;
        "n_sp", "n-sp", "spatial transformer layers" => model.encoder.n_sp;
        "n_tp", "n-tp", "temporal transformer layers" => model.encoder.n_tp;
        "mlp_hidden", "mlp-hidden", "hidden width of every transformer MLP" => model.encoder.mlp_hidden;
        "temporal_pos", "temporal-pos", "learnable temporal positional embedding" => model.encoder.temporal_pos;
        "ln_eps", "ln-eps", "layer norm epsilon" => model.encoder.ln_eps;
        "head", "head", "classifier head: mc or no-mc" => model.head;
        "init_std", "init-std", "std of the embedding, class token and position initialisation" => model.init_std;
        "loss", "loss", "objective: hp, focal or fd" => train.loss;
        "lambda", "lambda", "weight of the correlation term in the hp objective" => train.hp.lambda;
        "alpha", "alpha", "focal weight of the MCI class" => train.hp.focal.alpha;
        "gamma", "gamma", "focal focusing exponent" => train.hp.focal.gamma;
        "epsilon", "epsilon", "floor added to the per-class attention weight" => train.hp.epsilon;
        "k_feature_sets", "k-feature-sets", "embedding sets in the correlation term (1 or 2)" => train.hp.k_feature_sets;
        "batch_size", "batch-size", "clips per optimizer step" => train.batch_size;
        "epochs", "epochs", "passes over the training clips" => train.epochs;
        "max_steps", "max-steps", "stop after this many steps, 0 for no limit" => train.max_steps;
        "base_lr", "base-lr", "lower learning rate of the cycle" => train.base_lr;
        "max_lr", "max-lr", "upper learning rate of the first cycle" => train.max_lr;
        "cycle_len", "cycle-len", "steps per learning-rate cycle, 0 for two epochs" => train.cycle_len;
        "augment", "augment", "random flips, rotation and crop during training" => train.augment;
        "adam_beta1", "adam-beta1", "Adam first-moment decay" => train.adam.beta1;
        "adam_beta2", "adam-beta2", "Adam second-moment decay" => train.adam.beta2;
        "adam_eps", "adam-eps", "Adam denominator epsilon" => train.adam.eps;
        "l_fold", "l-fold", "subjects per cross-validation fold" => l_fold;
        "fold", "fold", "held-out fold for single-fold training" => fold;
        "max_folds", "max-folds", "run at most this many folds, 0 for all" => max_folds;
        "data", "data", "dataset directory or manifest path" => data;
        "precision", "precision", "floating-point precision for training: f32 or f64" => precision;
    }
}

impl RunConfig {
    pub fn key_info(key: &str) -> Option<&'static KeyInfo> {
        KEYS.iter().find(|k| k.key == key)
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key).unwrap_or_default()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.l_fold == 0 {
            return Err(Error::Config("l_fold must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::model::HeadKind;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("loss", "focal").unwrap();
        cfg.set("head", "no-mc").unwrap();
        cfg.set("base_lr", "3.5e-7").unwrap();
        cfg.set("data", "/tmp/x").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.loss, LossKind::Focal);
        assert_eq!(back.model.head, HeadKind::NoMc);
    }

    #[test]
    fn shared_keys_set_every_target() {
        let cfg = RunConfig::from_text("hw = 32\nseed = 9\nd = 32\nclip_len = 8").unwrap();
        assert_eq!((cfg.model.height, cfg.model.width, cfg.cohort.hw), (32, 32, 32));
        assert_eq!((cfg.train.seed, cfg.cohort.seed), (9, 9));
        assert_eq!((cfg.model.tubelet.d, cfg.model.encoder.d), (32, 32));
        assert_eq!((cfg.model.clip_len, cfg.cohort.clip_len), (8, 8));
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        assert!(RunConfig::from_text("colour = red").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
        assert!(RunConfig::from_text("epochs = many").is_err());
        assert!(RunConfig::from_text("# comment\n\nepochs = 3").is_ok());
    }

    #[test]
    fn keys_and_flags_unique() {
        let mut keys: Vec<_> = KEYS.iter().map(|k| k.key).collect();
        let mut flags: Vec<_> = KEYS.iter().map(|k| k.flag).collect();
        keys.sort();
        flags.sort();
        keys.dedup();
        flags.dedup();
        assert_eq!(keys.len(), KEYS.len());
        assert_eq!(flags.len(), KEYS.len());
    }
}
