//! On-disk formats: 16-bit depth PNGs (value = round(depth·256), 0 = no
//! depth), 8-bit RGB PNGs and a line-oriented dataset manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Scene;
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::geometry::StereoRig;
use crate::tensor::{Shape, Tensor};

/// Largest depth (exclusive) representable in a depth PNG, in meters.
pub const MAX_PNG_DEPTH: f64 = 256.0;

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bit: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(bit);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(data)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    bit: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let bytes = read(path)?;
    let mut dec = png::Decoder::new(bytes.as_slice());
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        bit: info.bit_depth,
        data,
    })
}

/// Stored value of a depth in meters.
pub fn quantize_depth(d: f64) -> u16 {
    (d * 256.0).round() as u16
}

/// Writes a (1, 1, H, W) depth map; pixels with zero validity are stored as 0.
pub fn write_depth_png(path: &Path, depth: &Tensor, validity: &Tensor) -> Result<()> {
    let s = depth.shape();
    if s.n != 1 || s.c != 1 || validity.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "write_depth_png",
            left: s,
            right: validity.shape(),
        });
    }
    let mut data = Vec::with_capacity(depth.len() * 2);
    for (i, (&d, &v)) in depth.data().iter().zip(validity.data()).enumerate() {
        let q = if v != 0.0 {
            if !(0.0..MAX_PNG_DEPTH).contains(&d) {
                return Err(Error::invalid(format!(
                    "depth {d} at pixel {i} is outside [0, {MAX_PNG_DEPTH}) m"
                )));
            }
            let q = quantize_depth(d);
            if q == 0 {
                return Err(Error::invalid(format!(
                    "depth {d} at pixel {i} rounds to the invalid code 0"
                )));
            }
            q
        } else {
            0
        };
        data.extend_from_slice(&q.to_be_bytes());
    }
    encode_png(
        path,
        s.w,
        s.h,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

/// Reads a depth PNG into (depth in meters, validity).
pub fn read_depth_png(path: &Path) -> Result<(Tensor, Tensor)> {
    let img = decode_png(path)?;
    if img.color != png::ColorType::Grayscale || img.bit != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit grayscale, found {:?} {:?}",
                img.color, img.bit
            ),
        ));
    }
    let shape = Shape::new(1, 1, img.height, img.width);
    let raw: Vec<u16> = img
        .data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    if raw.len() != shape.numel() {
        return Err(Error::format(path, "truncated image data"));
    }
    let depth = Tensor::from_vec(shape, raw.iter().map(|&q| q as f64 / 256.0).collect())?;
    let validity = Tensor::from_vec(
        shape,
        raw.iter().map(|&q| if q > 0 { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok((depth, validity))
}

/// Writes a (1, 3, H, W) image in [0, 1] as 8-bit RGB.
pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!(
            "expected a (1, 3, H, W) image, got {s}"
        )));
    }
    let mut data = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode_png(
        path,
        s.w,
        s.h,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &data,
    )
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = decode_png(path)?;
    let channels = match (img.color, img.bit) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        (c, b) => {
            return Err(Error::format(
                path,
                format!("expected 8-bit RGB, found {c:?} {b:?}"),
            ))
        }
    };
    if img.data.len() != img.width * img.height * channels {
        return Err(Error::format(path, "truncated image data"));
    }
    Ok(Tensor::from_fn(
        Shape::new(1, 3, img.height, img.width),
        |_, c, y, x| img.data[(y * img.width + x) * channels + c] as f64 / 255.0,
    ))
}

/// One manifest line: `image depth [stereo] focal_px baseline_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub stereo: Option<PathBuf>,
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl ManifestEntry {
    /// Loads the frame. Stereo pairs follow the generator's convention
    /// (second camera to the left, warp sign +1).
    pub fn load(&self) -> Result<Scene> {
        let image = read_rgb_png(&self.image)?;
        let (depth, validity) = read_depth_png(&self.depth)?;
        if !image.shape().same_spatial(&depth.shape()) {
            return Err(Error::ShapeMismatch {
                op: "manifest frame",
                left: image.shape(),
                right: depth.shape(),
            });
        }
        let stereo_image = self.stereo.as_deref().map(read_rgb_png).transpose()?;
        if let Some(s) = &stereo_image {
            if s.shape() != image.shape() {
                return Err(Error::ShapeMismatch {
                    op: "manifest stereo pair",
                    left: image.shape(),
                    right: s.shape(),
                });
            }
        }
        let rig = StereoRig::new(self.focal_px, self.baseline_m)?;
        Ok(Scene {
            image,
            depth,
            depth_validity: Some(validity),
            stereo_image,
            rig: Some(rig),
            warp_sign: 1.0,
            visibility: None,
            seed: 0,
        })
    }
}

/// Parses a manifest; relative paths are resolved against its directory and
/// every referenced file must exist.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text =
        String::from_utf8(read(path)?).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", i + 1));
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let (files, nums) = match fields.len() {
            4 => (&fields[..2], &fields[2..]),
            5 => (&fields[..3], &fields[3..]),
            n => {
                return Err(bad(format!(
                    "expected 4 or 5 space-separated fields, found {n}"
                )))
            }
        };
        let mut paths = Vec::new();
        for f in files {
            let p = base.join(f);
            if !p.is_file() {
                return Err(bad(format!("missing file {}", p.display())));
            }
            paths.push(p);
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("cannot parse number {s:?}")))
        };
        out.push(ManifestEntry {
            image: paths[0].clone(),
            depth: paths[1].clone(),
            stereo: paths.get(2).cloned(),
            focal_px: num(nums[0])?,
            baseline_m: num(nums[1])?,
        });
    }
    Ok(out)
}

fn manifest_field(base: &Path, p: &Path) -> Result<String> {
    let rel = p.strip_prefix(base).unwrap_or(p);
    let s = rel.to_string_lossy().into_owned();
    if s.is_empty() || s.contains(' ') || s.contains('\n') {
        return Err(Error::invalid(format!(
            "path {s:?} cannot be stored in a manifest"
        )));
    }
    Ok(s)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        text.push_str(&manifest_field(base, &e.image)?);
        text.push(' ');
        text.push_str(&manifest_field(base, &e.depth)?);
        if let Some(s) = &e.stereo {
            text.push(' ');
            text.push_str(&manifest_field(base, s)?);
        }
        let _ = writeln!(text, " {:?} {:?}", e.focal_px, e.baseline_m);
    }
    write_atomic(path, text.as_bytes())
}

/// Writes every scene as PNGs plus `manifest.txt` in `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let rig = s
            .rig
            .ok_or_else(|| Error::invalid(format!("scene {i} has no camera rig to record")))?;
        if s.warp_sign != 1.0 {
            return Err(Error::invalid(format!(
                "scene {i} is mirrored; manifests store the +1 convention"
            )));
        }
        let image = dir.join(format!("{i:05}_image.png"));
        let depth = dir.join(format!("{i:05}_depth.png"));
        write_rgb_png(&image, &s.image)?;
        write_depth_png(&depth, &s.depth, &s.validity())?;
        let stereo = match &s.stereo_image {
            Some(st) => {
                let p = dir.join(format!("{i:05}_stereo.png"));
                write_rgb_png(&p, st)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image,
            depth,
            stereo,
            focal_px: rig.focal_px,
            baseline_m: rig.baseline_m,
        });
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
