//! Shared fixtures: procedurally drawn digit glyphs written as standard
//! MNIST IDX files, so the real ingestion path runs without MNIST on disk.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng as _;
use tagger::data::idx;
use tagger::data::texture::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use tagger::rng;

/// Seven-segment layout: top, upper right, lower right, bottom, lower left,
/// upper left, middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// One 28x28 glyph of `digit` with jittered position, size and stroke.
pub fn glyph(digit: u8, r: &mut rng::Rng) -> Vec<u8> {
    let mut img = vec![0u8; 28 * 28];
    let (top, left) = (r.gen_range(3..7) as isize, r.gen_range(7..11) as isize);
    let (w, h) = (r.gen_range(8..12) as isize, r.gen_range(16..20) as isize);
    let t = r.gen_range(2..4) as isize;
    let mid = top + h / 2;
    let mut fill = |r0: isize, r1: isize, c0: isize, c1: isize| {
        for row in r0.max(0)..r1.min(28) {
            for col in c0.max(0)..c1.min(28) {
                img[(row * 28 + col) as usize] = 255;
            }
        }
    };
    let on = SEGMENTS[digit as usize];
    let right = left + w - t;
    let bottom = top + h - t;
    if on[0] {
        fill(top, top + t, left, left + w);
    }
    if on[1] {
        fill(top, mid + 1, right, right + t);
    }
    if on[2] {
        fill(mid, top + h, right, right + t);
    }
    if on[3] {
        fill(bottom, top + h, left, left + w);
    }
    if on[4] {
        fill(mid, top + h, left, left + t);
    }
    if on[5] {
        fill(top, mid + 1, left, left + t);
    }
    if on[6] {
        fill(mid - t / 2, mid - t / 2 + t, left, left + w);
    }
    img
}

fn write_pair(images: &Path, labels: &Path, count: usize, seed: u64) {
    let mut r = rng::seeded(seed);
    let mut pixels = Vec::with_capacity(count * 784);
    let mut classes = Vec::with_capacity(count);
    for i in 0..count {
        let d = (i % 10) as u8;
        pixels.extend(glyph(d, &mut r));
        classes.push(d);
    }
    idx::write_images(images, count, 28, 28, &pixels).unwrap();
    idx::write_labels(labels, &classes).unwrap();
}

/// Writes the four MNIST files into `dir` with the given digit counts.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, seed: u64) {
    write_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), train, seed);
    write_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), test, seed ^ 1);
}

pub fn tagger_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_tagger"))
}

/// Runs the CLI binary with `args`.
pub fn run_cli(args: &[&str]) -> Output {
    Command::new(tagger_bin())
        .args(args)
        .env_remove("TAGGER_THREADS")
        .output()
        .expect("spawn tagger")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("UTF-8 path")
}
