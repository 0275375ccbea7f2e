//! The binary Shapes dataset: three 8×8 sprites (□, △, ▽) on a 20×20 canvas.

use rand::Rng as _;

use super::{DatasetBundle, DatasetKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

pub const SIDE: usize = 20;
pub const SPRITE: usize = 8;
pub const SPRITES_PER_IMAGE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sprite {
    Square,
    Up,
    Down,
}

impl Sprite {
    pub const ALL: [Sprite; 3] = [Sprite::Square, Sprite::Up, Sprite::Down];

    pub fn covers(self, row: usize, col: usize) -> bool {
        let tri = |r: usize| (col as f64 - 3.5).abs() <= (r as f64 + 1.0) / 2.0;
        match self {
            Sprite::Square => true,
            Sprite::Up => tri(row),
            Sprite::Down => tri(SPRITE - 1 - row),
        }
    }

    /// Row-major 8×8 mask, `#` for covered.
    pub fn bitmap(self) -> String {
        (0..SPRITE)
            .map(|r| {
                let mut line: String = (0..SPRITE)
                    .map(|c| if self.covers(r, c) { '#' } else { '.' })
                    .collect();
                line.push('\n');
                line
            })
            .collect()
    }
}

/// One Shapes image with its per-pixel instance labels and ignore flags.
pub fn shapes_example(rng: &mut rng::Rng) -> (Vec<u8>, Vec<u8>, Vec<bool>) {
    let n = SIDE * SIDE;
    let mut coverage = vec![0u8; n];
    let mut labels = vec![0u8; n];
    let placements = SIDE - SPRITE + 1;
    for s in 0..SPRITES_PER_IMAGE {
        let sprite = Sprite::ALL[rng.gen_range(0..3)];
        let top = rng.gen_range(0..placements);
        let left = rng.gen_range(0..placements);
        for r in 0..SPRITE {
            for c in 0..SPRITE {
                if sprite.covers(r, c) {
                    let j = (top + r) * SIDE + left + c;
                    coverage[j] += 1;
                    labels[j] = s as u8 + 1;
                }
            }
        }
    }
    let pixels = coverage.iter().map(|&c| u8::from(c > 0)).collect();
    let ignore = coverage.iter().map(|&c| c != 1).collect();
    (pixels, labels, ignore)
}

pub fn generate_shapes(count: usize, seed: u64) -> Result<DatasetBundle> {
    if count == 0 {
        return Err(Error::Data("need at least one example".into()));
    }
    let examples = par::map_indexed(count, |i| shapes_example(&mut rng::derived(seed, i as u64)));
    let n = SIDE * SIDE;
    let mut inputs = Vec::with_capacity(count * n);
    let mut labels = Vec::with_capacity(count * n);
    let mut ignore = Vec::with_capacity(count * n);
    for (p, l, ig) in examples {
        inputs.extend(p.iter().map(|&v| v as f64));
        labels.extend(l);
        ignore.extend(ig);
    }
    Ok(DatasetBundle {
        kind: DatasetKind::Shapes,
        height: SIDE,
        width: SIDE,
        seed,
        inputs: Tensor::new(&[count, n], inputs)?,
        labels,
        ignore,
        classes: None,
    })
}
