//! Flat `key = value` run configuration. Every key has a default; a
//! config file and then `--key value` flags override it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dgcw_core::dgcw::DgcwConfig;
use dgcw_core::network::NetworkConfig;
use dgcw_core::training::{AugmentSpec, OhemConfig, SynthSpec, TrainConfig};
use dgcw_core::Real;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// The full key set. `epsilon` defaults to the build's precision-specific
/// value when left empty.
pub const KEYS: &[Key] = &[
    // run
    key("seed", "0", "seed for initialization, batch order and augmentation"),
    key("out", "out", "parent directory of run directories"),
    key("run_name", "", "run directory name (default <command>_<timestamp>)"),
    key("precision", dgcw_core::PRECISION, "must match the build: f64, or f32 with the `f32` feature"),
    key("data_dir", "", "dataset directory; empty generates the synthetic data in memory"),
    // synthetic data
    key("data_seed", "0", "seed of the synthetic dataset"),
    key("image_size", "64", "synthetic image side S"),
    key("class_count", "4", "number of classes K"),
    key("shapes_min", "2", "fewest shapes per image"),
    key("shapes_max", "4", "most shapes per image"),
    key("noise", "0.05", "standard deviation of additive pixel noise"),
    key("train_count", "256", "training images"),
    key("val_count", "64", "validation images"),
    // network
    key("backbone_widths", "16,32,64,64", "channel widths of the four backbone stages"),
    key("reduced_channels", "32", "channels after the reduction convolution"),
    key("head", "none", "none | ppm | aspp"),
    key("context", "none", "none | conv | gap | se | nlh | nld | dgcw"),
    key("norm_kind", "dbs", "dbs | softmax | tanh"),
    key("downsample_ratio", "4", "context-module downsampling ratio"),
    key("downsample", "avgpool", "avgpool | bilinear"),
    key("hidden", "0", "hidden width of g (0 = input channels)"),
    key("epsilon", "", "DBS denominator offset (empty = precision default)"),
    key("block", "16", "partner-pixel block size of the fused kernel"),
    key("zero_init_g2", "true", "start the last context layer at zero"),
    key("dgcw_impl", "fused", "naive | fused"),
    key("aux_weight", "0.4", "weight of the auxiliary loss"),
    key("aspp_rates", "2,4,6", "dilation rates of the ASPP 3x3 branches"),
    key("aspp_out_channels", "64", "ASPP branch and output width"),
    key("ppm_bins", "1,2,3,6", "pyramid pooling grid sizes"),
    key("ppm_branch_channels", "0", "pyramid branch width (0 = a quarter of the input)"),
    key("se_reduction", "4", "squeeze-excitation reduction factor"),
    key("batchnorm", "true", "use batch normalization"),
    // optimization
    key("iterations", "1500", "training iterations"),
    key("batch_size", "8", "images per batch"),
    key("base_lr", "0.01", "initial learning rate"),
    key("momentum", "0.9", "SGD momentum"),
    key("weight_decay", "0.0005", "weight decay (not applied to normalization parameters)"),
    key("crop", "64", "training crop size"),
    key("scale_min", "0.5", "smallest augmentation scale"),
    key("scale_max", "2.0", "largest augmentation scale"),
    key("flip_augment", "true", "random horizontal flips during training"),
    key("ohem", "false", "online hard example mining on the main loss"),
    key("ohem_theta", "0.7", "OHEM probability threshold"),
    key("ohem_min_kept", "1000", "OHEM minimum kept pixels per batch"),
    key("eval_every", "0", "iterations between validation rows (0 = once per epoch)"),
    // evaluation and reports
    key("checkpoint", "", "checkpoint directory for eval and variance"),
    key("compare_checkpoint", "", "second checkpoint for a side-by-side variance report"),
    key("compare_config", "", "config file of the second checkpoint's network (default: the same network)"),
    key("split", "val", "dataset split for eval and variance: train | val"),
    key("scales", "1", "inference scales, e.g. 0.75,1,1.25,1.5"),
    key("flip", "false", "add mirrored inference passes"),
    key("previews", "4", "predicted label maps written as PGM"),
    key("bins", "8", "variance histogram bins over the observed range"),
    key("edges", "", "explicit histogram edges (overrides bins)"),
    key("target", "all", "gradcheck suite: ops | dgcw | net | all"),
    key("bench_impls", "naive,fused", "implementations to benchmark"),
    key("bench_channels", "16", "channels of the benchmarked feature map"),
    key("bench_extents", "24,32,40,48,56,64", "feature map sides; P = (side / downsample_ratio)^2"),
    key("bench_repeats", "3", "timed repetitions per shape (minimum reported)"),
    key("bench_mem_cap_mb", "512", "refuse naive shapes whose pair tensors exceed this"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect(),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| CliError::Usage(format!("{key}: {p:?}: {e}"))))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| CliError::Usage(format!("{key} = {v:?}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        parse_list(key, self.get(key))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Every key, sorted, one `key = value` per line. `run_name` is
    /// written commented out so reusing the file names a fresh directory.
    pub fn resolved(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| match k.as_str() {
                "run_name" => format!("# {k} = {v}\n"),
                _ => format!("{k} = {v}\n"),
            })
            .collect()
    }

    pub fn check_precision(&self) -> Result<(), CliError> {
        let want = self.get("precision");
        if want != dgcw_core::PRECISION {
            return Err(CliError::Usage(format!(
                "precision {want} requested but this binary is the {} build{}",
                dgcw_core::PRECISION,
                if want == "f32" { " (rebuild with --features f32)" } else { "" }
            )));
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthSpec, CliError> {
        let spec = SynthSpec {
            image_size: self.parse("image_size")?,
            class_count: self.parse("class_count")?,
            shapes_min: self.parse("shapes_min")?,
            shapes_max: self.parse("shapes_max")?,
            noise: self.parse("noise")?,
            seed: self.parse("data_seed")?,
            train_count: self.parse("train_count")?,
            val_count: self.parse("val_count")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn network(&self) -> Result<NetworkConfig, CliError> {
        let mut dgcw = DgcwConfig {
            norm_kind: self.parse("norm_kind")?,
            downsample_ratio: self.parse("downsample_ratio")?,
            downsample: self.parse("downsample")?,
            hidden: self.parse("hidden")?,
            block: self.parse("block")?,
            zero_init_g2: self.parse("zero_init_g2")?,
            ..DgcwConfig::default()
        };
        if !self.get("epsilon").is_empty() {
            dgcw.epsilon = self.parse::<Real>("epsilon")?;
        }
        let cfg = NetworkConfig {
            class_count: self.parse("class_count")?,
            backbone_widths: self.list("backbone_widths")?,
            reduced_channels: self.parse("reduced_channels")?,
            head: self.parse("head")?,
            context: self.parse("context")?,
            dgcw,
            dgcw_impl: self.parse("dgcw_impl")?,
            aux_weight: self.parse("aux_weight")?,
            aspp_rates: self.list("aspp_rates")?,
            aspp_out_channels: self.parse("aspp_out_channels")?,
            ppm_bins: self.list("ppm_bins")?,
            ppm_branch_channels: self.parse("ppm_branch_channels")?,
            se_reduction: self.parse("se_reduction")?,
            batchnorm: self.parse("batchnorm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn training(&self) -> Result<TrainConfig, CliError> {
        let crop: usize = self.parse("crop")?;
        if crop == 0 || !crop.is_multiple_of(8) {
            return Err(CliError::Usage(format!("crop = {crop} must be a positive multiple of 8")));
        }
        let (scale_min, scale_max): (Real, Real) = (self.parse("scale_min")?, self.parse("scale_max")?);
        if !(scale_min > 0.0 && scale_min <= scale_max) {
            return Err(CliError::Usage("need 0 < scale_min <= scale_max".into()));
        }
        Ok(TrainConfig {
            iterations: self.parse("iterations")?,
            batch_size: self.parse("batch_size")?,
            base_lr: self.parse("base_lr")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            augment: AugmentSpec {
                crop,
                scale_min,
                scale_max,
                flip: self.parse("flip_augment")?,
            },
            ohem: if self.parse("ohem")? {
                Some(OhemConfig {
                    theta: self.parse("ohem_theta")?,
                    min_kept: self.parse("ohem_min_kept")?,
                })
            } else {
                None
            },
            eval_every: self.parse("eval_every")?,
            seed: self.parse("seed")?,
        })
    }
}
