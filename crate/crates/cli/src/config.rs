//! `key = value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use msunet::error::{Error, Result};
use msunet::ica::IcaConfig;
use msunet::sampler::ScaleSpec;
use msunet::statnet::{GraphConfig, MixPoint};
use msunet::trainer::{LossWeights, TrainConfig};

/// Every key with its default (empty for paths) and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "", "directory of caseNNN.msuv/.msum pairs read by train and bench"),
    ("input", "", "video volume read by extract, restore and infer"),
    ("archive", "", "canonical-form archive read by restore"),
    ("checkpoint", "", "network checkpoint read by infer"),
    ("truth", "", "mask volume scored by infer (optional)"),
    ("bench_methods", "", "comma-separated name=checkpoint pairs for bench"),
    ("phantom_dims", "64x64x8x30", "phantom X x Y x Z x T"),
    ("phantom_cases", "30", "number of phantom cases"),
    ("phantom_noise", "0.05", "phantom Gaussian noise sigma"),
    ("phantom_taper", "0.93", "per-slice radius factor towards the apex"),
    ("train_cases", "20", "cases in the training split"),
    ("val_cases", "5", "cases in the validation split; the rest are test"),
    ("scales", "4,8", "patch sizes of the statistical branches"),
    ("t", "5", "frames per snippet"),
    ("r", "0.1", "target compression ratio d / (n^2 t)"),
    ("ica_max_iter", "500", "FastICA iteration cap"),
    ("ica_tol", "1e-6", "FastICA convergence tolerance"),
    ("restore_scale", "0", "scale index rebuilt by restore"),
    ("restore_noise", "false", "draw residual noise when restoring"),
    ("network", "msunet", "msunet or unet"),
    ("base_channels", "8", "channels of the first level"),
    ("msunet_depth", "2", "levels of the largest-patch branch"),
    ("unet_depth", "3", "levels of the frame-wise baseline"),
    ("mix_point", "after_dt", "after_dt or after_ut"),
    ("share_center", "false", "one center block for all branches"),
    ("unet_frames", "5", "frames per pass of the frame-wise baseline"),
    ("epochs", "60", "training epochs"),
    ("batch", "4", "training units per optimizer step"),
    ("learning_rate", "0.05", "SGD learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("ce_weight", "1", "cross-entropy weight"),
    ("dice_weight", "1", "soft Dice weight"),
    ("checkpoint_every", "0", "also save every N epochs (0 = best only)"),
    ("bench_repeats", "5", "timed runs per method"),
    ("gradcheck_h", "1e-3", "finite-difference step"),
    ("gradcheck_probes", "6", "random weights probed per layer"),
    ("gradcheck_tol", "1e-4", "largest accepted relative error"),
    ("seed", "0", "seed for data, initialization, ICA and shuffling"),
    ("threads", "1", "worker threads"),
];

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key = value, # comments):\n");
    for (k, d, doc) in KEYS {
        let d = if d.is_empty() { "<path>" } else { d };
        s.push_str(&format!("  {k:<18} {d:<12} {doc}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, _, _) = KEYS.iter().find(|(k, _, _)| *k == key).ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[k])).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key `{key}` is not declared"))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::config(format!("`{key}` has invalid value `{v}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => Err(Error::config(format!("`{key}` is required for this command"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|p| !p.is_empty()).map(PathBuf::from)
    }

    pub fn phantom_dims(&self) -> Result<[usize; 4]> {
        let parts: Vec<usize> = self
            .raw("phantom_dims")
            .split('x')
            .map(|p| p.trim().parse().map_err(|_| Error::config("`phantom_dims` must look like 64x64x8x30")))
            .collect::<Result<_>>()?;
        parts.try_into().map_err(|_| Error::config("`phantom_dims` needs four sizes"))
    }

    pub fn scales(&self) -> Result<Vec<ScaleSpec>> {
        let t = self.usize("t")?;
        let r = self.f64("r")?;
        self.raw("scales")
            .split(',')
            .map(|p| {
                let n = p.trim().parse().map_err(|_| Error::config(format!("`scales` entry `{p}` is not a patch size")))?;
                ScaleSpec::from_ratio(n, t, r)
            })
            .collect()
    }

    pub fn ica(&self) -> Result<IcaConfig> {
        Ok(IcaConfig { seed: self.u64("seed")?, max_iter: self.usize("ica_max_iter")?, tol: self.f64("ica_tol")?, ..IcaConfig::default() })
    }

    pub fn graph(&self) -> Result<GraphConfig> {
        let base = self.usize("base_channels")?;
        let mut g = match self.raw("network") {
            "msunet" => {
                let mut g = GraphConfig::msunet(self.scales()?, base, self.usize("msunet_depth")?, 4, MixPoint::parse(self.raw("mix_point"))?);
                g.share_center = self.bool("share_center")?;
                g
            }
            "unet" => GraphConfig::unet(self.usize("unet_depth")?, base, 4),
            other => return Err(Error::config(format!("`network` must be msunet or unet, got `{other}`"))),
        };
        g.seed = self.u64("seed")?;
        Ok(g)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.usize("epochs")?,
            batch_snippets: self.usize("batch")?,
            learning_rate: self.f64("learning_rate")?,
            momentum: self.f64("momentum")?,
            seed: self.u64("seed")?,
            loss_weights: LossWeights { ce: self.f64("ce_weight")?, dice: self.f64("dice_weight")? },
            checkpoint_every: self.usize("checkpoint_every")?,
            frames_per_unit: self.usize("unet_frames")?,
        })
    }
}
