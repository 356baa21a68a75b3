use std::io::{BufReader, Cursor};
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use super::{Dataset, Split};
use crate::autodiff::{sample_bilinear, SamplingGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// `1×3×H×W` tensor scaled by `1/255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }

    /// From a `1×C×H×W` tensor with `C ∈ {1, 3}`; values are clamped to `[0,1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || !(c == 1 || c == 3) {
            return Err(Error::shape(format!("expected one 1- or 3-channel image, got {b}x{c}")));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            for ch in 0..3 {
                let v = t.data()[(ch % c) * h * w + p];
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok(Self { width: w, height: h, pixels })
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("bad header number")) };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) is supported"));
    }
    let data = &bytes[pos + 1..];
    let n = width * height * 3;
    if data.len() < n {
        return Err(bad("truncated pixel data"));
    }
    Ok(RgbImage { width, height, pixels: data[..n].to_vec() })
}

fn parse_png(bytes: &[u8]) -> Result<RgbImage> {
    let fmt = |e: png::DecodingError| Error::Format(format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("PNG: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Format("PNG: unexpanded palette".into())),
    };
    Ok(RgbImage { width: w, height: h, pixels })
}

/// Decodes PNG or binary PPM by signature.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG") {
        parse_png(bytes)
    } else if bytes.starts_with(b"P6") {
        parse_ppm(bytes)
    } else {
        Err(Error::Format("unrecognized image format".into()))
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let fmt = |e: png::EncodingError| Error::Format(format!("PNG: {e}"));
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(fmt)?;
    w.write_image_data(&img.pixels).map_err(fmt)?;
    w.finish().map_err(fmt)?;
    Ok(())
}

/// Writes PNG or PPM according to the file extension.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(img, path),
        Some("png") => write_png(img, path),
        _ => Err(Error::config(format!("unsupported image extension: {}", path.display()))),
    }
}

/// Upscales (bilinear, aspect preserved) until both sides reach `side`, then
/// takes the central `side × side` window.
pub fn resize_and_center_crop(img: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let (_, _, h, w) = img.dims4()?;
    let scaled = if h < side || w < side {
        let s = (side as f64 / h as f64).max(side as f64 / w as f64);
        let (nh, nw) = (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize);
        let (nh, nw) = (nh.max(side), nw.max(side));
        sample_bilinear(img, &SamplingGrid::resize_window(0.0, 0.0, h, w, nh, nw))?
    } else {
        img.clone()
    };
    let (_, c, h, w) = scaled.dims4()?;
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    Ok(Tensor::from_fn(&[1, c, side, side], |i| {
        let (ch, r, col) = (i / (side * side), (i / side) % side, i % side);
        scaled.data()[ch * h * w + (top + r) * w + left + col]
    }))
}

/// Outcome of loading a `root/class/*.{png,ppm}` tree.
#[derive(Debug)]
pub struct TreeLoad {
    pub dataset: Dataset,
    /// Files that could not be decoded.
    pub skipped: usize,
}

pub fn load_image_tree(root: &Path, side: usize, split: Split) -> Result<TreeLoad> {
    let mut classes: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    classes.sort();
    let mut files = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mut entries: Vec<_> = std::fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (p, ci)));
    }
    let loaded: Vec<Option<(Tensor<f32>, usize)>> = files
        .par_iter()
        .map(|(p, ci)| match read_image(p).and_then(|img| resize_and_center_crop(&img.to_tensor(), side)) {
            Ok(t) => Some((t, *ci)),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                None
            }
        })
        .collect();
    let skipped = loaded.iter().filter(|l| l.is_none()).count();
    let (images, labels): (Vec<_>, Vec<_>) = loaded.into_iter().flatten().unzip();
    let images = if images.is_empty() { Tensor::zeros(&[0, 3, side, side]) } else { Tensor::stack(&images)? };
    Ok(TreeLoad { dataset: Dataset::new(images, labels, classes, split)?, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let pixels = (0..w * h).flat_map(|p| [(p % 256) as u8, (p / w % 256) as u8, 7]).collect();
        RgbImage { width: w, height: h, pixels }
    }

    #[test]
    fn ppm_and_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(5, 3);
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            write_image(&img, &p).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # c\n2 1\n# x\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_image(&bytes).unwrap().pixels, vec![1, 2, 3, 4, 5, 6]);
        assert!(decode_image(b"P3\n1 1\n255\n1 2 3").is_err());
    }

    #[test]
    fn large_image_center_crop() {
        let img = Tensor::from_fn(&[1, 1, 400, 400], |i| i as f32);
        let out = resize_and_center_crop(&img, 320).unwrap();
        assert_eq!(out[0], (40 * 400 + 40) as f32);
        assert_eq!(out[320 * 320 - 1], (359 * 400 + 359) as f32);
    }

    #[test]
    fn short_side_upscaled_keeping_aspect() {
        // 200 rows × 320 cols: scale 1.6 gives 320×512, then columns [96, 416)
        let img = Tensor::from_fn(&[1, 1, 200, 320], |i| (i % 320) as f32);
        let out = resize_and_center_crop(&img, 320).unwrap();
        assert_eq!(out.shape(), &[1, 1, 320, 320]);
        let expect = 96.0 * 319.0 / 511.0;
        assert!((out[0] - expect).abs() < 1e-3, "{}", out[0]);
    }

    #[test]
    fn exact_size_unchanged() {
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 97) as f32 / 97.0);
        assert_eq!(resize_and_center_crop(&img, 32).unwrap(), img);
    }

    #[test]
    fn tree_loader_orders_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        for (class, n) in [("cat", 2), ("ant", 1)] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..n {
                write_ppm(&ramp(8, 8), &dir.path().join(class).join(format!("{i}.ppm"))).unwrap();
            }
        }
        std::fs::write(dir.path().join("cat").join("zz.png"), b"not a png").unwrap();
        let load = load_image_tree(dir.path(), 8, Split::Train).unwrap();
        assert_eq!(load.skipped, 1);
        assert_eq!(load.dataset.classes, vec!["ant", "cat"]);
        assert_eq!(load.dataset.labels, vec![0, 1, 1]);
    }
}
