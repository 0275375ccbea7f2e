//! Checkpoints: parameters, optimizer moments, normalization statistics and
//! a configuration echo in one TAGD container.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Adam, Phase, TrainConfig};
use crate::autodiff::{NormMode, RunningStats, Tensor};
use crate::data::container::{format_meta, Container};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::ladder::{LadderConfig, NormStats, TaggerParams};
use crate::model::{ModelConfig, Tagger};
use crate::rng::seeded;
use crate::tag::Corruption;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Tagger,
    pub adam: Option<Adam>,
    /// Epochs completed across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub dataset: Option<DatasetKind>,
    pub train: Option<TrainConfig>,
}

fn norm_name(n: NormMode) -> &'static str {
    match n {
        NormMode::Batch => "batch",
        NormMode::Layer => "layer",
    }
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.model.params.visit(|name, t| c.push_tensor(&format!("param/{name}"), t));
        if let Some(adam) = &self.adam {
            for (i, name) in adam.names.iter().enumerate() {
                c.push_tensor(&format!("adam.m/{name}"), &adam.m[i]);
                c.push_tensor(&format!("adam.v/{name}"), &adam.v[i]);
            }
        }
        for (t, slot) in self.model.stats.slots.iter().enumerate() {
            for (i, s) in slot.iter().enumerate() {
                c.push_f64(&format!("norm/{t}/{i}/mean"), &[s.mean.len()], s.mean.clone());
                c.push_f64(&format!("norm/{t}/{i}/var"), &[s.var.len()], s.var.clone());
            }
        }
        let mc = &self.model.config;
        let (corruption, level) = match mc.corruption {
            Corruption::Gaussian { sigma } => ("gaussian", sigma),
            Corruption::BitFlip { beta } => ("bitflip", beta),
        };
        let layers: Vec<String> = mc.ladder.layers.iter().map(|l| l.to_string()).collect();
        let mut meta = vec![
            ("format", "tagger-checkpoint".to_string()),
            ("model.input_size", mc.input_size.to_string()),
            ("model.corruption", corruption.to_string()),
            ("model.noise", format!("{level:?}")),
            ("model.data_mean", format!("{:?}", mc.data_mean)),
            ("model.groups", mc.groups.to_string()),
            ("model.iterations", mc.iterations.to_string()),
            ("model.layers", layers.join(",")),
            ("model.norm", norm_name(mc.ladder.norm).to_string()),
            ("model.classes", mc.ladder.classes.to_string()),
            ("epoch", self.epoch.to_string()),
            ("phase", self.phase.name().to_string()),
            ("step", self.adam.as_ref().map_or(0, |a| a.step).to_string()),
        ];
        if let Some(d) = self.dataset {
            meta.push(("dataset", d.name().to_string()));
        }
        let mut text = format_meta(meta);
        if let Some(t) = &self.train {
            for line in t.to_text().lines() {
                text.push_str("train.");
                text.push_str(&line.replace(" = ", "="));
                text.push('\n');
            }
        }
        c.metadata = text;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.meta_map();
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {k:?}")))
        };
        if get("format")? != "tagger-checkpoint" {
            return Err(Error::Data("container is not a tagger checkpoint".into()));
        }
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Data(format!("bad checkpoint field {k}={v:?}")))
        }
        let level: f64 = num("model.noise", get("model.noise")?)?;
        let corruption = match get("model.corruption")? {
            "gaussian" => Corruption::Gaussian { sigma: level },
            "bitflip" => Corruption::BitFlip { beta: level },
            other => return Err(Error::Data(format!("unknown corruption {other:?}"))),
        };
        let layers = get("model.layers")?
            .split(',')
            .map(|s| num("model.layers", s))
            .collect::<Result<Vec<usize>>>()?;
        let norm = match get("model.norm")? {
            "batch" => NormMode::Batch,
            "layer" => NormMode::Layer,
            other => return Err(Error::Data(format!("unknown norm {other:?}"))),
        };
        let config = ModelConfig {
            input_size: num("model.input_size", get("model.input_size")?)?,
            corruption,
            ladder: LadderConfig {
                layers,
                norm,
                classes: num("model.classes", get("model.classes")?)?,
            },
            data_mean: num("model.data_mean", get("model.data_mean")?)?,
            groups: num("model.groups", get("model.groups")?)?,
            iterations: num("model.iterations", get("model.iterations")?)?,
        };
        // Build a structurally matching model, then overwrite every tensor.
        let mut model = Tagger::new(config.clone(), &mut seeded(0)).map_err(|e| Error::Data(e.to_string()))?;
        let mut missing = None;
        model.params.visit_mut(|name, t| match c.tensor(&format!("param/{name}")) {
            Ok(v) if v.dims() == t.dims() => *t = v,
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Data(format!("checkpoint parameter {name:?} missing or misshapen")));
        }
        let template = NormStats::fresh_slot(&model.config.ladder);
        let mut slots = Vec::new();
        while c.get(&format!("norm/{}/0/mean", slots.len())).is_some() {
            let t = slots.len();
            let slot = template
                .iter()
                .enumerate()
                .map(|(i, fresh)| {
                    let mean = c.tensor(&format!("norm/{t}/{i}/mean"))?.into_data();
                    let var = c.tensor(&format!("norm/{t}/{i}/var"))?.into_data();
                    if mean.len() != fresh.mean.len() || var.len() != fresh.var.len() {
                        return Err(Error::Data("normalization statistics do not match the layers".into()));
                    }
                    Ok(RunningStats { mean, var })
                })
                .collect::<Result<Vec<_>>>()?;
            slots.push(slot);
        }
        if slots.is_empty() {
            return Err(Error::Data("checkpoint has no normalization statistics".into()));
        }
        let stats = NormStats { slots };
        model.stats = stats;
        let adam = if c.get("adam.m/log_v").is_some() {
            let mut adam = Adam::new(&model.params);
            for (i, name) in adam.names.clone().iter().enumerate() {
                adam.m[i] = c.tensor(&format!("adam.m/{name}"))?;
                adam.v[i] = c.tensor(&format!("adam.v/{name}"))?;
            }
            adam.step = num("step", get("step")?)?;
            Some(adam)
        } else {
            None
        };
        let train_lines: String = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| format!("{k}={v}\n")))
            .collect();
        let train = if train_lines.is_empty() {
            None
        } else {
            Some(TrainConfig::parse(&train_lines)?)
        };
        Ok(Checkpoint {
            model,
            adam,
            epoch: num("epoch", get("epoch")?)?,
            phase: Phase::from_name(get("phase")?)?,
            dataset: meta.get("dataset").map(|d| d.parse()).transpose()?,
            train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        // Write beside the target and rename, so an interrupted save never
        // clobbers the previous checkpoint.
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        self.to_container()?.write(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Model-only checkpoint.
    pub fn from_model(model: Tagger) -> Self {
        Checkpoint {
            model,
            adam: None,
            epoch: 0,
            phase: Phase::Unsupervised,
            dataset: None,
            train: None,
        }
    }
}

/// Parameter values as a name-to-tensor map (for diagnostics and tests).
pub fn named_params(p: &TaggerParams) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    p.visit(|n, t| {
        out.insert(n, t.clone());
    });
    out
}
