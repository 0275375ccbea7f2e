//! Panel rendering and a minimal PNG encoder (stored deflate blocks), with
//! binary PPM as a fallback.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::segmentation_from_masks;
use crate::model::{reconstruction, Trajectory};
use crate::tag::GroupState;

/// Group colors for segmentation panels, cycled for `K > 4`.
pub const PALETTE: [[u8; 3]; 4] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25]];
/// Pixels per input element.
pub const SCALE: usize = 4;
/// Gap between panels, in output pixels.
pub const GAP: usize = 2;
const GAP_COLOR: [u8; 3] = [96, 96, 96];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Image {
            width,
            height,
            rgb: color.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_png(&self) -> Vec<u8> {
        let stride = self.width * 3;
        let mut raw = Vec::with_capacity(self.height * (stride + 1));
        for row in self.rgb.chunks(stride.max(1)).take(self.height) {
            raw.push(0); // filter: none
            raw.extend_from_slice(row);
        }
        let mut ihdr = Vec::with_capacity(13);
        ihdr.extend_from_slice(&(self.width as u32).to_be_bytes());
        ihdr.extend_from_slice(&(self.height as u32).to_be_bytes());
        ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // 8-bit RGB, no interlace
        let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
        chunk(&mut out, b"IHDR", &ihdr);
        chunk(&mut out, b"IDAT", &zlib_stored(&raw));
        chunk(&mut out, b"IEND", &[]);
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn encode(&self, format: ImageFormat) -> Vec<u8> {
        match format {
            ImageFormat::Png => self.to_png(),
            ImageFormat::Ppm => self.to_ppm(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode(format)).map_err(|e| Error::io(path, e))
    }
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let mut h = crc32fast::Hasher::new();
    h.update(kind);
    h.update(data);
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    out.extend_from_slice(&h.finalize().to_be_bytes());
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for &x in chunk {
            a += x as u32;
            b += a;
        }
        a %= 65521;
        b %= 65521;
    }
    (b << 16) | a
}

/// A zlib stream of uncompressed deflate blocks.
fn zlib_stored(data: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let mut blocks = data.chunks(65535).peekable();
    if blocks.peek().is_none() {
        out.extend_from_slice(&[1, 0, 0, 0xff, 0xff]);
    }
    while let Some(block) = blocks.next() {
        out.push(u8::from(blocks.peek().is_none()));
        let len = block.len() as u16;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(!len).to_le_bytes());
        out.extend_from_slice(block);
    }
    out.extend_from_slice(&adler32(data).to_be_bytes());
    out
}

fn gray(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Panel grid for one example of one state, `2 × (K + 1)` panels:
/// masks `m_k` and the segmentation on top, reconstructions `z_k` and the
/// expected input `q(x)` below.
pub fn state_panels(state: &GroupState, example: usize, height: usize, width: usize) -> Result<Image> {
    let d = state.m.dims();
    let (b, k, n) = (d[0], d[1], d[2]);
    if example >= b {
        return Err(Error::contract(format!("example {example} outside batch of {b}")));
    }
    if height * width != n {
        return Err(Error::shape(format!("{height}x{width} images do not hold {n} elements")));
    }
    let cols = k + 1;
    let (pw, ph) = (width * SCALE, height * SCALE);
    let mut img = Image::filled(cols * pw + (cols - 1) * GAP, 2 * ph + GAP, GAP_COLOR);
    let seg = &segmentation_from_masks(&state.m)?[example];
    let recon = reconstruction(state);
    let mut draw = |col: usize, row: usize, color: &dyn Fn(usize) -> [u8; 3]| {
        let (x0, y0) = (col * (pw + GAP), row * (ph + GAP));
        for y in 0..ph {
            for x in 0..pw {
                let j = (y / SCALE) * width + x / SCALE;
                img.set(x0 + x, y0 + y, color(j));
            }
        }
    };
    let at = |t: &[f64], kk: usize, j: usize| t[(example * k + kk) * n + j];
    for kk in 0..k {
        draw(kk, 0, &|j| gray(at(state.m.data(), kk, j)));
        draw(kk, 1, &|j| gray(at(state.z.data(), kk, j)));
    }
    draw(k, 0, &|j| PALETTE[seg[j] % PALETTE.len()]);
    draw(k, 1, &|j| gray(recon.data()[example * n + j]));
    Ok(img)
}

/// One image per iteration (`states[1..]`) of `traj`.
pub fn render_trajectory(traj: &Trajectory, example: usize, height: usize, width: usize) -> Result<Vec<Image>> {
    traj.states[1..]
        .iter()
        .map(|s| state_panels(s, example, height, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn decode(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.color_type, png::ColorType::Rgb);
        buf.truncate(info.buffer_size());
        (info.width as usize, info.height as usize, buf)
    }

    #[test]
    fn png_decodes_with_an_independent_reader() {
        let mut img = Image::filled(5, 3, [1, 2, 3]);
        img.set(4, 2, [250, 0, 9]);
        let (w, h, rgb) = decode(&img.to_png());
        assert_eq!((w, h), (5, 3));
        assert_eq!(rgb, img.rgb);
    }

    #[test]
    fn large_png_spans_several_stored_blocks() {
        let img = Image {
            width: 300,
            height: 100,
            rgb: (0..300 * 100 * 3).map(|i| (i * 31 % 251) as u8).collect(),
        };
        let (_, _, rgb) = decode(&img.to_png());
        assert_eq!(rgb, img.rgb);
    }

    #[test]
    fn adler_reference() {
        // RFC 1950 example value for "Wikipedia".
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
        assert_eq!(adler32(b""), 1);
    }

    #[test]
    fn ppm_layout() {
        let img = Image::filled(2, 1, [7, 8, 9]);
        assert_eq!(img.to_ppm(), b"P6\n2 1\n255\n\x07\x08\x09\x07\x08\x09".to_vec());
    }

    #[test]
    fn panels_follow_the_contract() {
        let (k, h, w) = (3, 2, 3);
        let n = h * w;
        let mut m = Tensor::zeros(&[1, k, n]);
        for j in 0..n {
            m.data_mut()[(j % k) * n + j] = 1.0;
        }
        let state = GroupState {
            z: Tensor::full(&[1, k, n], 0.5),
            m,
            iteration: 1,
        };
        let img = state_panels(&state, 0, h, w).unwrap();
        let (pw, ph) = (w * SCALE, h * SCALE);
        assert_eq!(img.width, (k + 1) * pw + k * GAP);
        assert_eq!(img.height, 2 * ph + GAP);
        // Segmentation panel: element j is colored by group j % K.
        let x0 = k * (pw + GAP);
        for j in 0..n {
            let (x, y) = (x0 + (j % w) * SCALE, (j / w) * SCALE);
            assert_eq!(img.pixel(x, y), PALETTE[j % k]);
        }
        // Mask of group 0 is white exactly where group 0 owns the element.
        assert_eq!(img.pixel(0, 0), [255, 255, 255]);
        assert_eq!(img.pixel(SCALE, 0), [0, 0, 0]);
        // Reconstruction Σ m z = 0.5 everywhere.
        assert_eq!(img.pixel(x0, ph + GAP), [128, 128, 128]);
        assert!(state_panels(&state, 1, h, w).is_err());
        assert!(state_panels(&state, 0, 3, 3).is_err());
    }
}
