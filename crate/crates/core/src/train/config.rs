//! Training configuration as a flat `key = value` file with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use super::AdamConfig;
use crate::autodiff::NormMode;
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::tag::{ClassIterations, Corruption};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Bit flips for binary datasets, Gaussian noise otherwise.
    Auto,
    Gaussian,
    BitFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub groups: usize,
    pub iterations: usize,
    pub eval_iterations: usize,
    pub corruption: CorruptionKind,
    /// σ for Gaussian noise, β for bit flips.
    pub noise: f64,
    pub batch: usize,
    /// Unsupervised epochs.
    pub epochs: usize,
    /// Epochs of the semi-supervised phase.
    pub supervised_epochs: usize,
    pub adam: AdamConfig,
    pub layers: Vec<usize>,
    pub norm: NormMode,
    pub seed: u64,
    /// Labeled examples drawn when labels are requested by budget.
    pub label_budget: usize,
    pub class_weight: f64,
    pub classes: usize,
    pub class_iterations: ClassIterations,
    /// Use only the first `limit` training examples (0 = all).
    pub limit: usize,
    /// Share of the data held out for validation when no validation set is given.
    pub validation_fraction: f64,
    /// Cap on validation examples scored per epoch (0 = all).
    pub validation_limit: usize,
    /// Training examples used to re-estimate batch-norm statistics with
    /// frozen weights after every epoch (0 keeps the moving averages).
    pub norm_calibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            groups: 4,
            iterations: 3,
            eval_iterations: 5,
            corruption: CorruptionKind::Auto,
            noise: 0.2,
            batch: 100,
            epochs: 20,
            supervised_epochs: 10,
            adam: AdamConfig::default(),
            layers: vec![256, 128, 64],
            norm: NormMode::Batch,
            seed: 0,
            label_budget: 1000,
            class_weight: 1.0,
            classes: 10,
            class_iterations: ClassIterations::Last,
            limit: 0,
            validation_fraction: 0.1,
            validation_limit: 1000,
            norm_calibration: 1000,
        }
    }
}

pub const PRESETS: [&str; 4] = ["desk", "smoke", "paper-shapes", "paper-tmnist"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        match name {
            "desk" => {}
            "smoke" => {
                c.layers = vec![64, 32];
                c.epochs = 2;
                c.supervised_epochs = 1;
                c.limit = 400;
                c.validation_limit = 100;
                c.norm_calibration = 200;
            }
            "paper-shapes" => {
                c.layers = vec![3000, 2000, 1000, 500, 250];
                c.epochs = 100;
            }
            "paper-tmnist" => {
                c.layers = vec![3000, 2000, 1000, 500, 250];
                c.epochs = 150;
                c.supervised_epochs = 50;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {PRESETS:?}"
                )))
            }
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(p, _, _): &(&str, &str, usize)| *p == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            pairs.push((k, v, no + 1));
        }
        let mut c = match pairs.iter().find(|p| p.0 == "preset") {
            Some((_, v, _)) => Self::preset(v)?,
            None => TrainConfig::default(),
        };
        for (k, v, line) in pairs {
            c.set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; `preset` is accepted and ignored here.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "preset" => {}
            "groups" => self.groups = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "eval_iterations" => self.eval_iterations = num(key, value)?,
            "corruption" => {
                self.corruption = match value {
                    "auto" => CorruptionKind::Auto,
                    "gaussian" => CorruptionKind::Gaussian,
                    "bitflip" => CorruptionKind::BitFlip,
                    _ => return Err(format!("corruption must be auto, gaussian or bitflip, got {value:?}")),
                }
            }
            "noise" => self.noise = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "supervised_epochs" => self.supervised_epochs = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "layers" => {
                self.layers = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "norm" => {
                self.norm = match value {
                    "batch" => NormMode::Batch,
                    "layer" => NormMode::Layer,
                    _ => return Err(format!("norm must be batch or layer, got {value:?}")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "label_budget" => self.label_budget = num(key, value)?,
            "class_weight" => self.class_weight = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "class_iterations" => {
                self.class_iterations = match value {
                    "last" => ClassIterations::Last,
                    "all" => ClassIterations::All,
                    _ => return Err(format!("class_iterations must be last or all, got {value:?}")),
                }
            }
            "limit" => self.limit = num(key, value)?,
            "validation_fraction" => self.validation_fraction = num(key, value)?,
            "validation_limit" => self.validation_limit = num(key, value)?,
            "norm_calibration" => self.norm_calibration = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.groups == 0 || self.iterations == 0 || self.eval_iterations == 0 {
            return fail("groups, iterations and eval_iterations must be at least 1".into());
        }
        if self.batch == 0 || (self.norm == NormMode::Batch && self.batch < 2) {
            return fail(format!("batch {} too small for {:?} normalization", self.batch, self.norm));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return fail(format!("layers must be positive, got {:?}", self.layers));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return fail(format!("invalid ADAM settings {a:?}"));
        }
        if !(self.class_weight >= 0.0 && self.class_weight.is_finite()) {
            return fail(format!("class_weight must be non-negative, got {}", self.class_weight));
        }
        if self.classes == 0 {
            return fail("classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        let probe = match self.corruption {
            CorruptionKind::BitFlip => Corruption::BitFlip { beta: self.noise },
            _ => Corruption::Gaussian { sigma: self.noise },
        };
        probe.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The corruption used for `kind`.
    pub fn corruption_for(&self, kind: DatasetKind) -> Result<Corruption> {
        let c = match (self.corruption, kind.is_binary()) {
            (CorruptionKind::Auto, true) | (CorruptionKind::BitFlip, true) => Corruption::BitFlip { beta: self.noise },
            (CorruptionKind::Auto, false) | (CorruptionKind::Gaussian, _) => Corruption::Gaussian { sigma: self.noise },
            (CorruptionKind::BitFlip, false) => {
                return Err(Error::Config(format!("bit-flip corruption needs binary data, {kind} is continuous")))
            }
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// Canonical `key = value` text; [`TrainConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let corruption = match self.corruption {
            CorruptionKind::Auto => "auto",
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::BitFlip => "bitflip",
        };
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        let norm = match self.norm {
            NormMode::Batch => "batch",
            NormMode::Layer => "layer",
        };
        let ci = match self.class_iterations {
            ClassIterations::Last => "last",
            ClassIterations::All => "all",
        };
        let rows: [(&str, String); 23] = [
            ("groups", self.groups.to_string()),
            ("iterations", self.iterations.to_string()),
            ("eval_iterations", self.eval_iterations.to_string()),
            ("corruption", corruption.into()),
            ("noise", format!("{:?}", self.noise)),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("supervised_epochs", self.supervised_epochs.to_string()),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("layers", layers.join(",")),
            ("norm", norm.into()),
            ("seed", self.seed.to_string()),
            ("label_budget", self.label_budget.to_string()),
            ("class_weight", format!("{:?}", self.class_weight)),
            ("classes", self.classes.to_string()),
            ("class_iterations", ci.into()),
            ("limit", self.limit.to_string()),
            ("validation_fraction", format!("{:?}", self.validation_fraction)),
            ("validation_limit", self.validation_limit.to_string()),
            ("norm_calibration", self.norm_calibration.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.groups, c.iterations, c.batch), (4, 3, 100));
        assert_eq!(c.adam, AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        assert_eq!(c.layers, vec![256, 128, 64]);
        assert_eq!(c.class_weight, 1.0);
        assert_eq!(
            c.corruption_for(DatasetKind::Shapes).unwrap(),
            Corruption::BitFlip { beta: 0.2 }
        );
        assert_eq!(
            c.corruption_for(DatasetKind::TexturedMnist2).unwrap(),
            Corruption::Gaussian { sigma: 0.2 }
        );
    }

    #[test]
    fn parse_comments_presets_and_overrides() {
        let c = TrainConfig::parse(
            "# smoke run\nlayers = 32, 16  # small\n\npreset = smoke\nseed=9\nnorm = layer\n",
        )
        .unwrap();
        assert_eq!(c.layers, vec![32, 16]);
        assert_eq!(c.epochs, 2);
        assert_eq!(c.seed, 9);
        assert_eq!(c.norm, NormMode::Layer);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::preset("paper-tmnist").unwrap();
        c.adam.lr = 3e-4;
        c.class_iterations = ClassIterations::All;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "groups = 0",
            "batch = 1",
            "whatever = 3",
            "lr = fast",
            "noise = 0.7\ncorruption = bitflip",
            "groups = 2\ngroups = 3",
            "no equals sign",
            "preset = huge",
        ] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(TrainConfig::parse("batch = 1\nnorm = layer").is_ok());
        let c = TrainConfig::parse("corruption = bitflip").unwrap();
        assert!(c.corruption_for(DatasetKind::TexturedMnist1).is_err());
    }
}
