//! Image ingestion: binary PPM files and a seeded synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// An 8-bit RGB image, samples interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
    pub source: String,
}

impl ImageRecord {
    pub fn new(width: usize, height: usize, samples: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        if samples.len() != 3 * width * height {
            return Err(Error::dim(
                "image",
                format!("{width}x{height} needs {} samples, got {}", 3 * width * height, samples.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            samples,
            source: source.into(),
        })
    }

    /// Planar `[3, size_y, size_x]` floats in `[0, 1]` for the window at `(x, y)`.
    pub fn crop_planar(&self, x: usize, y: usize, size_x: usize, size_y: usize) -> Vec<f32> {
        assert!(x + size_x <= self.width && y + size_y <= self.height, "crop out of bounds");
        let mut out = vec![0.0f32; 3 * size_x * size_y];
        for r in 0..size_y {
            for c in 0..size_x {
                let src = 3 * ((y + r) * self.width + x + c);
                for ch in 0..3 {
                    out[(ch * size_y + r) * size_x + c] = self.samples[src + ch] as f32 / 255.0;
                }
            }
        }
        out
    }

    /// The largest top-left window whose sides are multiples of `multiple`,
    /// as a `[1, 3, H, W]` tensor. `None` if the image is too small.
    pub fn to_tensor(&self, multiple: usize) -> Option<Tensor> {
        let w = self.width / multiple * multiple;
        let h = self.height / multiple * multiple;
        if w == 0 || h == 0 {
            return None;
        }
        Some(Tensor::new(&[1, 3, h, w], self.crop_planar(0, 0, w, h)).expect("sizes match"))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parse a binary (P6) PPM. 16-bit files are reduced to 8 bits.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<ImageRecord> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return Err(cur.fail("missing P6 magic"));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.fail("expected one whitespace byte before the payload")),
    }
    let wide = maxval > 255;
    let expected = 3 * width * height * if wide { 2 } else { 1 };
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(cur.fail(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let samples = if wide {
        payload[..expected]
            .chunks_exact(2)
            .map(|p| scale(u16::from_be_bytes([p[0], p[1]]) as usize))
            .collect()
    } else if maxval == 255 {
        payload[..expected].to_vec()
    } else {
        payload[..expected].iter().map(|&v| scale(v as usize)).collect()
    };
    ImageRecord::new(width, height, samples, path.display().to_string())
}

/// Deterministic test images: a colour gradient plus a few Gaussian blobs
/// and light grain.
pub fn synthetic(seed: u64, count: usize, size: usize) -> Vec<ImageRecord> {
    let root = RngState::new(seed);
    (0..count)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let s = size as f32;
            let base: Vec<f32> = (0..3).map(|_| rng.uniform_in(0.2, 0.8)).collect();
            let slope: Vec<[f32; 2]> = (0..3)
                .map(|_| [rng.uniform_in(-0.4, 0.4), rng.uniform_in(-0.4, 0.4)])
                .collect();
            let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..3 + rng.below(5))
                .map(|_| {
                    let centre = [rng.uniform() * s, rng.uniform() * s];
                    let sigma = s * rng.uniform_in(0.05, 0.25);
                    let colour = [
                        rng.uniform_in(-0.5, 0.5),
                        rng.uniform_in(-0.5, 0.5),
                        rng.uniform_in(-0.5, 0.5),
                    ];
                    (centre, sigma, colour)
                })
                .collect();
            let mut samples = Vec::with_capacity(3 * size * size);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f32 / s - 0.5, y as f32 / s - 0.5);
                    for ch in 0..3 {
                        let mut val = base[ch] + slope[ch][0] * u + slope[ch][1] * v;
                        for (c, sigma, colour) in &blobs {
                            let d2 = (x as f32 - c[0]).powi(2) + (y as f32 - c[1]).powi(2);
                            val += colour[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                        val += 0.02 * rng.normal();
                        samples.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            ImageRecord::new(size, size, samples, format!("synthetic:{seed}:{i}"))
                .expect("sizes match")
        })
        .collect()
}

/// `synthetic:<seed>:<count>:<size>`, a directory of `.ppm` files (sorted by
/// path), or a single PPM file.
pub fn load_images(spec: &str) -> Result<Vec<ImageRecord>> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::Config(format!("expected synthetic:<seed>:<count>:<size>, got `{spec}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let seed = parts[0].parse().map_err(|_| bad())?;
        let count: usize = parts[1].parse().map_err(|_| bad())?;
        let size: usize = parts[2].parse().map_err(|_| bad())?;
        if count == 0 || size == 0 {
            return Err(bad());
        }
        return Ok(synthetic(seed, count, size));
    }
    let path = Path::new(spec);
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Config(format!("no .ppm files in {}", path.display())));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|p| parse_ppm(&fs::read(p).map_err(|e| Error::io(p, e))?, p))
        .collect()
}
