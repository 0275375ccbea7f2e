//! Sinusoidal texture bank and the textured MNIST compositions.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::path::Path;

use rand::Rng as _;

use super::{idx, DatasetBundle, DatasetKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

pub const FREQUENCIES: [f64; 5] = [0.08, 0.12, 0.16, 0.20, 0.24];
pub const ORIENTATIONS: [f64; 4] = [0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4];
pub const DIGIT_SIDE: usize = 28;
pub const DIGIT_THRESHOLD: f64 = 0.5;
/// Row/column offsets of the first and second digit in two-digit mode.
pub const TWO_DIGIT_SHIFTS: [(isize, isize); 2] = [(-2, -2), (2, 2)];

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    /// Cycles per pixel.
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
}

impl Texture {
    /// `0.5 + 0.5 sin(2πf(x cos θ + y sin θ) + φ)` at column `x`, row `y`.
    pub fn value(&self, x: f64, y: f64, phase: f64) -> f64 {
        let (s, c) = self.orientation.sin_cos();
        0.5 + 0.5 * (2.0 * PI * self.frequency * (x * c + y * s) + phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureBank {
    pub textures: Vec<Texture>,
}

/// 5 frequencies × 4 orientations, frequency-major.
pub fn texture_bank() -> TextureBank {
    let textures = FREQUENCIES
        .iter()
        .flat_map(|&frequency| {
            ORIENTATIONS.iter().map(move |&orientation| Texture {
                frequency,
                orientation,
            })
        })
        .collect();
    TextureBank { textures }
}

/// Digit images `[count, 28, 28]` in [0, 1] with their classes.
#[derive(Clone, Debug)]
pub struct DigitSource {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl DigitSource {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let d = images.dims();
        if d.len() != 3 || d[1] != DIGIT_SIDE || d[2] != DIGIT_SIDE {
            return Err(Error::Data(format!("digit images must be [count, 28, 28], got {d:?}")));
        }
        if d[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", d[0], labels.len())));
        }
        if d[0] == 0 {
            return Err(Error::Data("no digit images".into()));
        }
        Ok(DigitSource { images, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Self::new(idx::load_images(images)?, idx::load_labels(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `range` as a new source.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let px = DIGIT_SIDE * DIGIT_SIDE;
        let images = Tensor::new(
            &[range.len(), DIGIT_SIDE, DIGIT_SIDE],
            self.images.data()[range.start * px..range.end * px].to_vec(),
        )?;
        Self::new(images, self.labels[range].to_vec())
    }

    fn mask(&self, index: usize, shift: (isize, isize)) -> Vec<bool> {
        let px = DIGIT_SIDE * DIGIT_SIDE;
        let img = &self.images.data()[index * px..(index + 1) * px];
        let side = DIGIT_SIDE as isize;
        (0..px)
            .map(|j| {
                let (r, c) = ((j / DIGIT_SIDE) as isize - shift.0, (j % DIGIT_SIDE) as isize - shift.1);
                (0..side).contains(&r) && (0..side).contains(&c) && img[(r * side + c) as usize] > DIGIT_THRESHOLD
            })
            .collect()
    }
}

/// Train, validation and test digit pools from an MNIST directory. The
/// training file is split 5:1 into train/validation (50k/10k at full size).
pub fn mnist_splits(dir: impl AsRef<Path>) -> Result<[DigitSource; 3]> {
    let dir = dir.as_ref();
    let train = DigitSource::load(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = DigitSource::load(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    let cut = train.len() - train.len() / 6;
    if cut == 0 || cut == train.len() {
        return Err(Error::Data(format!(
            "training digits ({}) too few to split into train/validation",
            train.len()
        )));
    }
    Ok([train.slice(0..cut)?, train.slice(cut..train.len())?, test])
}

/// One composed example: pixels, instance labels, digit classes.
fn textured_example(
    digits: usize,
    source: &DigitSource,
    bank: &TextureBank,
    rng: &mut rng::Rng,
) -> (Vec<f64>, Vec<u8>, Vec<u8>) {
    let px = DIGIT_SIDE * DIGIT_SIDE;
    let nt = bank.textures.len();
    let draw_phase = |rng: &mut rng::Rng| rng.gen_range(0.0..2.0 * PI);
    let background = rng.gen_range(0..nt);
    let bg_phase = draw_phase(rng);
    let mut labels = vec![0u8; px];
    let mut texture = vec![(background, bg_phase); px];
    let mut classes = Vec::with_capacity(digits);
    for d in 0..digits {
        let index = rng.gen_range(0..source.len());
        // Any bank entry except the background's.
        let mut t = rng.gen_range(0..nt - 1);
        if t >= background {
            t += 1;
        }
        let phase = draw_phase(rng);
        let shift = if digits == 2 { TWO_DIGIT_SHIFTS[d] } else { (0, 0) };
        for (j, on) in source.mask(index, shift).into_iter().enumerate() {
            if on {
                labels[j] = d as u8 + 1;
                texture[j] = (t, phase);
            }
        }
        classes.push(source.labels[index]);
    }
    let pixels = (0..px)
        .map(|j| {
            let (t, phase) = texture[j];
            bank.textures[t].value((j % DIGIT_SIDE) as f64, (j / DIGIT_SIDE) as f64, phase)
        })
        .collect();
    (pixels, labels, classes)
}

/// `count` textured compositions of one or two digits drawn from `source`.
pub fn generate_textured_mnist(
    count: usize,
    digits: usize,
    source: &DigitSource,
    seed: u64,
) -> Result<DatasetBundle> {
    let kind = match digits {
        1 => DatasetKind::TexturedMnist1,
        2 => DatasetKind::TexturedMnist2,
        _ => return Err(Error::Data(format!("digits must be 1 or 2, got {digits}"))),
    };
    if count == 0 {
        return Err(Error::Data("need at least one example".into()));
    }
    let bank = texture_bank();
    let examples = par::map_indexed(count, |i| {
        textured_example(digits, source, &bank, &mut rng::derived(seed, i as u64))
    });
    let px = DIGIT_SIDE * DIGIT_SIDE;
    let mut inputs = Vec::with_capacity(count * px);
    let mut labels = Vec::with_capacity(count * px);
    let mut classes = Vec::with_capacity(count);
    for (p, l, c) in examples {
        inputs.extend(p);
        labels.extend(l);
        classes.push(c);
    }
    Ok(DatasetBundle {
        kind,
        height: DIGIT_SIDE,
        width: DIGIT_SIDE,
        seed,
        inputs: Tensor::new(&[count, px], inputs)?,
        labels,
        ignore: vec![false; count * px],
        classes: Some(classes),
    })
}
