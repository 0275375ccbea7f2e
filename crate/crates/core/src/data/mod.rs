//! Dataset generation, IDX ingestion and the TAGD container.

pub mod container;
pub mod idx;
pub mod shapes;
pub mod texture;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use container::Container;
pub use shapes::generate_shapes;
pub use texture::{generate_textured_mnist, mnist_splits, texture_bank, DigitSource, TextureBank};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Data mean used to initialize `z` for binary Shapes images.
pub const SHAPES_DATA_MEAN: f64 = 0.26;
/// Data mean used to initialize `z` for textured images.
pub const TEXTURED_DATA_MEAN: f64 = 0.5;
/// Marks the absent second class of a single-digit example on disk.
const NO_CLASS: u8 = u8::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Shapes,
    TexturedMnist1,
    TexturedMnist2,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Shapes => "shapes",
            DatasetKind::TexturedMnist1 => "tmnist1",
            DatasetKind::TexturedMnist2 => "tmnist2",
        }
    }

    pub fn is_binary(self) -> bool {
        self == DatasetKind::Shapes
    }

    pub fn data_mean(self) -> f64 {
        if self.is_binary() {
            SHAPES_DATA_MEAN
        } else {
            TEXTURED_DATA_MEAN
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(DatasetKind::Shapes),
            "tmnist1" => Ok(DatasetKind::TexturedMnist1),
            "tmnist2" => Ok(DatasetKind::TexturedMnist2),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?}; expected shapes, tmnist1 or tmnist2"
            ))),
        }
    }
}

/// Inputs plus everything needed to score them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// `[B, N]`.
    pub inputs: Tensor,
    /// Per-pixel instance labels, `B × N`; 0 is background.
    pub labels: Vec<u8>,
    /// Pixels excluded from segmentation scoring, `B × N`.
    pub ignore: Vec<bool>,
    /// Digit classes of each example (one or two entries).
    pub classes: Option<Vec<Vec<u8>>>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_size(&self) -> usize {
        self.inputs.dims()[1]
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.input_size();
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    pub fn example_labels(&self, i: usize) -> &[u8] {
        let n = self.input_size();
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn example_ignore(&self, i: usize) -> &[bool] {
        let n = self.input_size();
        &self.ignore[i * n..(i + 1) * n]
    }

    /// Inputs of the given examples, `[indices.len(), N]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.input_size();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Tensor::new(&[indices.len(), n], data).expect("consistent batch")
    }

    /// Target distributions over `classes` for the given examples: equal
    /// weight on each listed digit.
    pub fn class_targets(&self, indices: &[usize], classes: usize) -> Result<Tensor> {
        let sets = self
            .classes
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no class labels".into()))?;
        let mut t = Tensor::zeros(&[indices.len(), classes]);
        for (row, &i) in indices.iter().enumerate() {
            let set = &sets[i];
            if set.is_empty() {
                return Err(Error::Data(format!("example {i} has no class")));
            }
            for &c in set {
                if c as usize >= classes {
                    return Err(Error::Data(format!(
                        "class {c} of example {i} outside 0..{classes}"
                    )));
                }
                t.data_mut()[row * classes + c as usize] += 1.0 / set.len() as f64;
            }
        }
        Ok(t)
    }

    /// Examples `range` as a new bundle.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::contract(format!("range {range:?} outside 0..{}", self.len())));
        }
        let n = self.input_size();
        Ok(DatasetBundle {
            kind: self.kind,
            height: self.height,
            width: self.width,
            seed: self.seed,
            inputs: Tensor::new(
                &[range.len(), n],
                self.inputs.data()[range.start * n..range.end * n].to_vec(),
            )?,
            labels: self.labels[range.start * n..range.end * n].to_vec(),
            ignore: self.ignore[range.start * n..range.end * n].to_vec(),
            classes: self.classes.as_ref().map(|c| c[range].to_vec()),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let (b, n) = (self.len(), self.input_size());
        let mut c = Container::new();
        if self.kind.is_binary() {
            c.push_u8("inputs", &[b, n], self.inputs.data().iter().map(|&v| v as u8).collect());
        } else {
            c.push_tensor("inputs", &self.inputs);
        }
        c.push_u8("labels", &[b, n], self.labels.clone());
        c.push_u8("ignore", &[b, n], self.ignore.iter().map(|&v| u8::from(v)).collect());
        if let Some(classes) = &self.classes {
            let mut flat = Vec::with_capacity(2 * b);
            for set in classes {
                if set.is_empty() || set.len() > 2 {
                    return Err(Error::Data("class sets must hold one or two digits".into()));
                }
                flat.push(set[0]);
                flat.push(set.get(1).copied().unwrap_or(NO_CLASS));
            }
            c.push_u8("classes", &[b, 2], flat);
        }
        c.metadata = container::format_meta([
            ("mode", self.kind.name().to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.meta_map();
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Data(format!("dataset metadata lacks {k:?}")))
        };
        let kind: DatasetKind = field("mode")?.parse()?;
        let parse = |k: &str| -> Result<u64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Data(format!("bad {k:?} in dataset metadata")))
        };
        let (height, width, seed) = (parse("height")? as usize, parse("width")? as usize, parse("seed")?);
        let inputs = if kind.is_binary() {
            let (dims, v) = c.bytes("inputs")?;
            Tensor::new(dims, v.iter().map(|&b| b as f64).collect())?
        } else {
            c.tensor("inputs")?
        };
        if inputs.dims().len() != 2 || inputs.dims()[1] != height * width {
            return Err(Error::Data(format!(
                "inputs {:?} do not match {height}x{width} images",
                inputs.dims()
            )));
        }
        let (dims, labels) = c.bytes("labels")?;
        let (idims, ignore) = c.bytes("ignore")?;
        if dims != inputs.dims() || idims != inputs.dims() {
            return Err(Error::Data("labels/ignore do not match inputs".into()));
        }
        let classes = match c.get("classes") {
            None => None,
            Some(_) => {
                let (cdims, flat) = c.bytes("classes")?;
                if cdims != [inputs.dims()[0], 2] {
                    return Err(Error::Data("class table does not match inputs".into()));
                }
                Some(
                    flat.chunks(2)
                        .map(|p| p.iter().copied().filter(|&v| v != NO_CLASS).collect())
                        .collect(),
                )
            }
        };
        Ok(DatasetBundle {
            kind,
            height,
            width,
            seed,
            inputs,
            labels: labels.to_vec(),
            ignore: ignore.iter().map(|&v| v != 0).collect(),
            classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
