//! Image files (PNG, PGM, CSV matrix), paired datasets, and the synthetic
//! paired-data generator.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;
use crate::llf::{llf_naive, LlfConfig};
use crate::remap::OrigRemap;
use crate::train::NormLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(LlfError::InvalidParameter(format!(
                "bit depth must be 8 or 16, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Pgm,
    Csv,
}

fn format_of(path: &Path) -> Option<Format> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(Format::Png),
        "pgm" => Some(Format::Pgm),
        "csv" => Some(Format::Csv),
        _ => None,
    }
}

/// Clip to `[0, 1]` and quantize with round-half-up.
pub fn quantize(v: f64, max_value: u32) -> u32 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((c * max_value as f64 + 0.5).floor() as u32).min(max_value)
}

/// Load a grayscale image scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LlfError::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)
    } else if format_of(path) == Some(Format::Csv) {
        let img = parse_csv_matrix(path, &bytes)?;
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(x, y);
                if !(0.0..=1.0).contains(&v) {
                    return Err(LlfError::OutOfRange {
                        path: path.to_path_buf(),
                        x,
                        y,
                        value: v,
                    });
                }
            }
        }
        Ok(img)
    } else {
        Err(LlfError::decode(path, "unrecognized image format"))
    }
}

/// Save with clipping to `[0, 1]`. PNG and PGM are quantized to `depth`;
/// CSV stores the clipped values verbatim.
pub fn save_image(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    match format_of(path) {
        Some(Format::Png) => write_png(img, path, depth),
        Some(Format::Pgm) => write_pgm(img, path, depth),
        Some(Format::Csv) => write_csv_matrix(&img.map(|v| v.clamp(0.0, 1.0)), path),
        None => Err(LlfError::InvalidParameter(format!(
            "unknown image extension: {}",
            path.display()
        ))),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| LlfError::decode(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(LlfError::decode(
            path,
            format!("expected single-channel PNG, got {:?}", info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = info.bit_depth;
    let mut buf = vec![0; reader.output_buffer_size()];
    reader
        .next_frame(&mut buf)
        .map_err(|e| LlfError::decode(path, e.to_string()))?;
    let data: Vec<f64> = match depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| v as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(LlfError::decode(
                path,
                format!("unsupported PNG bit depth {other:?}"),
            ))
        }
    };
    Image::new(w, h, data)
}

fn write_png(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| LlfError::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    let max = depth.max_value();
    let data: Vec<u8> = match depth {
        BitDepth::Eight => {
            enc.set_depth(png::BitDepth::Eight);
            img.data().iter().map(|&v| quantize(v, max) as u8).collect()
        }
        BitDepth::Sixteen => {
            enc.set_depth(png::BitDepth::Sixteen);
            img.data()
                .iter()
                .flat_map(|&v| (quantize(v, max) as u16).to_be_bytes())
                .collect()
        }
    };
    let enc_err = |e: png::EncodingError| LlfError::decode(path, e.to_string());
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(&data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let binary = bytes.starts_with(b"P5");
    // header: magic, width, height, maxval, separated by whitespace/comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LlfError::decode(path, "malformed PGM header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(LlfError::decode(path, format!("invalid maxval {maxval}")));
    }
    let n = w * h;
    let scale = maxval as f64;
    let data: Vec<f64> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or(&[]);
        if maxval < 256 {
            if raster.len() < n {
                return Err(LlfError::decode(path, "truncated PGM raster"));
            }
            raster[..n].iter().map(|&v| v as f64 / scale).collect()
        } else {
            if raster.len() < 2 * n {
                return Err(LlfError::decode(path, "truncated PGM raster"));
            }
            raster[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| LlfError::decode(path, "non-ASCII P2 raster"))?;
        let vals: Vec<f64> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u32>().map(|v| v as f64 / scale))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| LlfError::decode(path, "bad P2 sample"))?;
        if vals.len() < n {
            return Err(LlfError::decode(path, "truncated PGM raster"));
        }
        vals
    };
    Image::new(w, h, data)
}

fn write_pgm(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let max = depth.max_value();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), max).into_bytes();
    match depth {
        BitDepth::Eight => out.extend(img.data().iter().map(|&v| quantize(v, max) as u8)),
        BitDepth::Sixteen => out.extend(
            img.data()
                .iter()
                .flat_map(|&v| (quantize(v, max) as u16).to_be_bytes()),
        ),
    }
    std::fs::write(path, out).map_err(|e| LlfError::io(path, e))
}

fn parse_csv_matrix(path: &Path, bytes: &[u8]) -> Result<Image> {
    let text =
        std::str::from_utf8(bytes).map_err(|_| LlfError::decode(path, "CSV is not UTF-8"))?;
    let mut width = None;
    let mut data = Vec::new();
    let mut height = 0;
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| LlfError::decode(path, format!("bad number on row {}", row + 1)))?;
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(LlfError::decode(path, format!("ragged row {}", row + 1)))
            }
            _ => {}
        }
        data.extend(vals);
        height += 1;
    }
    let w = width.ok_or_else(|| LlfError::decode(path, "empty CSV"))?;
    Image::new(w, height, data)
}

/// Read a CSV matrix without range checks (fixtures, intermediate images).
pub fn read_csv_matrix(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| LlfError::io(path, e))?;
    parse_csv_matrix(path, &bytes)
}

/// Write samples verbatim with round-trip precision.
pub fn write_csv_matrix(img: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LlfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in img.data().chunks_exact(img.width()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| LlfError::io(path, e))?;
    }
    w.flush().map_err(|e| LlfError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub input: Image,
    pub target: Image,
    pub input_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
    pub split: Split,
}

impl PairedDataset {
    pub fn from_images(pairs: Vec<(Image, Image)>, split: Split) -> Result<Self> {
        let pairs = pairs
            .into_iter()
            .map(|(input, target)| {
                input.check_same_shape(&target)?;
                Ok(ImagePair {
                    input,
                    target,
                    input_path: None,
                    target_path: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs, split })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs `input_<id>.<ext>` with `target_<id>.<ext>` in a directory.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| LlfError::io(dir, e))?;
        let mut inputs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("input_"))
                    && format_of(p).is_some()
            })
            .collect();
        inputs.sort();
        let mut pairs = Vec::with_capacity(inputs.len());
        for ip in inputs {
            let name = ip.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let tp = ip.with_file_name(name.replacen("input_", "target_", 1));
            if !tp.exists() {
                return Err(LlfError::decode(&ip, "no matching target image"));
            }
            let input = load_image(&ip)?;
            let target = load_image(&tp)?;
            input.check_same_shape(&target)?;
            pairs.push(ImagePair {
                input,
                target,
                input_path: Some(ip),
                target_path: Some(tp),
            });
        }
        if pairs.is_empty() {
            return Err(LlfError::EmptyDataset);
        }
        Ok(Self { pairs, split })
    }

    /// True when no file is shared with `other`.
    pub fn is_disjoint_from(&self, other: &PairedDataset) -> bool {
        let files = |d: &PairedDataset| -> Vec<PathBuf> {
            d.pairs
                .iter()
                .flat_map(|p| [p.input_path.clone(), p.target_path.clone()])
                .flatten()
                .map(|p| p.canonicalize().unwrap_or(p))
                .collect()
        };
        let mine = files(self);
        files(other).iter().all(|p| !mine.contains(p))
    }
}

/// Hidden ground truth of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthStyleParams {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl SynthStyleParams {
    pub fn remap(&self) -> Result<OrigRemap> {
        OrigRemap::new(self.sigma, self.alpha, self.beta)
    }

    pub fn norm(&self) -> NormLayer {
        NormLayer::new(self.gamma, self.omega)
    }
}

pub const MIN_SYNTH_SIZE: usize = 16;

/// Sum of random Gaussian blobs plus weak noise, rescaled to `[0.05, 0.95]`.
pub fn synth_phantom(seed: u64, width: usize, height: usize) -> Result<Image> {
    if width < MIN_SYNTH_SIZE || height < MIN_SYNTH_SIZE {
        return Err(LlfError::TooSmall {
            width,
            height,
            reason: format!("synthetic images need at least {MIN_SYNTH_SIZE} px per side"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_radius = width.min(height) as f64 / 4.0;
    let blobs: Vec<[f64; 4]> = (0..24)
        .map(|_| {
            let cx = rng.gen_range(0.0..width as f64);
            let cy = rng.gen_range(0.0..height as f64);
            let s = rng.gen_range(1.5f64.ln()..max_radius.ln()).exp();
            let amp = rng.gen_range(-1.0..1.0);
            [cx, cy, 1.0 / (2.0 * s * s), amp]
        })
        .collect();
    let mut img = Image::from_fn(width, height, |x, y| {
        blobs
            .iter()
            .map(|&[cx, cy, k, a]| {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                a * (-(dx * dx + dy * dy) * k).exp()
            })
            .sum()
    });
    let (lo, hi) = img.min_max();
    let noise = Normal::new(0.0, 0.01 * (hi - lo).max(1e-6)).expect("finite noise scale");
    for v in img.data_mut() {
        *v += noise.sample(&mut rng);
    }
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    for v in img.data_mut() {
        *v = 0.05 + 0.9 * (*v - lo) / span;
    }
    Ok(img)
}

/// Phantom input and its target under the hidden style: the naive filter
/// with the three-parameter remap, followed by the affine layer.
pub fn synth_pair(
    seed: u64,
    width: usize,
    height: usize,
    style: &SynthStyleParams,
) -> Result<(Image, Image)> {
    let input = synth_phantom(seed, width, height)?;
    let remap = style.remap()?;
    let filtered = if remap.is_identity() {
        input.clone()
    } else {
        llf_naive(&input, &remap, &LlfConfig::default())?
    };
    let target = style.norm().apply(&filtered);
    Ok((input, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_rounds_half_up_and_clips() {
        assert_eq!(quantize(0.5, 255), 128);
        assert_eq!(quantize(-0.2, 65535), 0);
        assert_eq!(quantize(1.0, 65535), 65535);
        assert_eq!(quantize(1.7, 255), 255);
    }

    #[test]
    fn p2_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, "P2\n# comment\n2 2\n255\n0 255\n128 64\n").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn png16_max_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.png");
        save_image(&Image::filled(1, 1, 1.0), &p, BitDepth::Sixteen).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn csv_verbatim_and_range_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "0.5,0.25\n0.0,1.0\n").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), &[0.5, 0.25, 0.0, 1.0]);

        std::fs::write(&p, "0.5,0.25\n1.5,1.0\n").unwrap();
        match load_image(&p) {
            Err(LlfError::OutOfRange { x, y, .. }) => assert_eq!((x, y), (0, 1)),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn rgb_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_image(&p), Err(LlfError::Decode { .. })));
    }

    #[test]
    fn pgm_save_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.pgm");
        save_image(&Image::filled(1, 1, 0.5), &p, BitDepth::Eight).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(*bytes.last().unwrap(), 128);

        save_image(
            &Image::new(2, 1, vec![-0.2, 1.0]).unwrap(),
            &p,
            BitDepth::Sixteen,
        )
        .unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0xff, 0xff]);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let img = Image::filled(2, 2, 0.5);
        let p = Path::new("/nonexistent-dir/x.png");
        assert!(matches!(
            save_image(&img, p, BitDepth::Eight),
            Err(LlfError::Io { .. })
        ));
    }

    #[test]
    fn synth_rejects_small_images() {
        assert!(synth_phantom(1, 15, 64).is_err());
        assert!(synth_phantom(1, 16, 16).is_ok());
    }

    #[test]
    fn phantom_is_reproducible_and_varied() {
        let a = synth_phantom(7, 48, 40).unwrap();
        let b = synth_phantom(7, 48, 40).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a.min_max();
        assert!((lo - 0.05).abs() < 1e-12 && (hi - 0.95).abs() < 1e-12);
        let mut levels: Vec<u32> = a.data().iter().map(|&v| quantize(v, 255)).collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() >= 10);
        assert_ne!(a, synth_phantom(8, 48, 40).unwrap());
    }

    #[test]
    fn identity_style_targets() {
        let id = SynthStyleParams {
            sigma: 0.3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            omega: 0.0,
        };
        let (i, t) = synth_pair(3, 32, 32, &id).unwrap();
        assert!(t.max_abs_diff(&i) <= 1e-12);

        let affine = SynthStyleParams {
            gamma: 2.0,
            omega: 0.1,
            ..id
        };
        let (i, t) = synth_pair(3, 32, 32, &affine).unwrap();
        for (a, b) in i.data().iter().zip(t.data()) {
            assert_eq!(*b, 2.0 * a + 0.1);
        }
    }
}
