//! Frame ingestion, uniform sampling, resizing, normalization and the FSEQ
//! sequence format.
//!
//! FSEQ layout (little-endian): magic `FSEQ1\0`, `u32` T, H, W, C, then
//! `T·H·W·C` `f32` values in `[0, 1]`, row-major `(t, h, w, c)`.

use std::path::{Path, PathBuf};

use image::ImageEncoder;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const FSEQ_MAGIC: &[u8] = b"FSEQ1\0";

/// Default number of sampled frames per clip.
pub const DEFAULT_FRAMES: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    pub k: usize,
    pub indices: Vec<usize>,
}

/// `t_i = floor(i·n/(k+1))` for `i = 1..=k`, clamped to `[0, n-1]`.
/// Repeats indices when `n < k`.
pub fn sample_indices(n: usize, k: usize) -> Result<SamplingPlan> {
    if n == 0 || k == 0 {
        return Err(Error::invalid(format!("sample_indices needs n >= 1 and k >= 1, got n={n} k={k}")));
    }
    let n128 = n as u128;
    let denom = k as u128 + 1;
    let indices = (1..=k as u128).map(|i| ((i * n128 / denom) as usize).min(n - 1)).collect();
    Ok(SamplingPlan { k, indices })
}

/// One 8-bit `H×W×C` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        let n = checked_numel(&[height, width, channels])
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::shape(format!("invalid frame shape {height}x{width}x{channels}")))?;
        if data.len() != n {
            return Err(Error::shape(format!("frame {height}x{width}x{channels} needs {n} bytes, got {}", data.len())));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        let n = checked_numel(&[height, width, channels]).unwrap_or(0);
        Self::new(height, width, channels, vec![value; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Raw intensities as floats in `[0, 255]`.
    pub fn intensities(&self) -> Tensor<f32> {
        Tensor::new(self.shape().to_vec(), self.data.iter().map(|&v| v as f32).collect())
            .expect("validated frame shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrameStack {
    frames: Vec<RawFrame>,
}

impl RawFrameStack {
    pub fn new(frames: Vec<RawFrame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("frame stack is empty"))?;
        let shape = first.shape();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape) {
            return Err(Error::shape(format!("frame {i} has shape {:?}, expected {shape:?}", f.shape())));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[RawFrame] {
        &self.frames
    }

    /// Frame count `N`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        self.frames[0].shape()
    }
}

/// Bilinear resize of an `(H, W, C)` image with pixel centres at
/// `(i + 0.5)·scale − 0.5`, clamped to the source grid.
pub fn resize_bilinear(frame: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    if frame.rank() != 3 {
        return Err(Error::shape(format!("resize expects (H, W, C), got {:?}", frame.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize target must be positive, got {out_h}x{out_w}")));
    }
    let (h, w, c) = (frame.dim(0), frame.dim(1), frame.dim(2));
    if (h, w) == (out_h, out_w) {
        return Ok(frame.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let src = frame.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = lerp(at(y0, x0), at(y0, x1), wx);
                let bottom = lerp(at(y1, x0), at(y1, x1), wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// `x / 255` for every intensity.
pub fn normalize(frame: &RawFrame) -> Tensor<f32> {
    normalize_intensities(&frame.intensities())
}

/// Maps float intensities in `[0, 255]` to `[0, 1]`.
pub fn normalize_intensities(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| (v / 255.0).clamp(0.0, 1.0))
}

/// `(T, H, W, C)` frames with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    data: Tensor<f32>,
}

impl FrameSequence {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(format!("frame sequence must be (T, H, W, C), got {:?}", data.shape())));
        }
        if let Some(i) = data.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange(format!(
                "frame sequence element {i} = {} outside [0, 1]",
                data.data()[i]
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.data.dim(1), self.data.dim(2), self.data.dim(3)]
    }
}

/// Samples `k` frames, resizes to `side_small`, then to `side_large`
/// (skipped when equal), then normalizes. Passing
/// `side_small == side_large` gives a single-stage resize.
pub fn preprocess(stack: &RawFrameStack, k: usize, side_small: usize, side_large: usize) -> Result<FrameSequence> {
    let plan = sample_indices(stack.len(), k)?;
    let c = stack.frame_shape()[2];
    let mut data = Vec::with_capacity(k * side_large * side_large * c);
    for &t in &plan.indices {
        let mut img = resize_bilinear(&stack.frames()[t].intensities(), side_small, side_small)?;
        if side_large != side_small {
            img = resize_bilinear(&img, side_large, side_large)?;
        }
        data.extend_from_slice(normalize_intensities(&img).data());
    }
    FrameSequence::new(Tensor::new(vec![k, side_large, side_large, c], data)?)
}

pub fn encode_fseq(seq: &FrameSequence) -> Result<Vec<u8>> {
    let shape = seq.data.shape();
    let mut out = Vec::with_capacity(FSEQ_MAGIC.len() + 16 + 4 * seq.data.len());
    out.extend_from_slice(FSEQ_MAGIC);
    for (d, name) in shape.iter().zip(["T", "H", "W", "C"]) {
        binio::put_u32(&mut out, binio::dim_u32(*d, name)?);
    }
    binio::put_f32s(&mut out, seq.data.data().iter().copied());
    Ok(out)
}

pub fn decode_fseq(bytes: &[u8]) -> Result<FrameSequence> {
    let mut r = Reader::new(bytes);
    r.magic(FSEQ_MAGIC)?;
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["T", "H", "W", "C"]) {
        *d = r.u32(name)? as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Malformed(format!("FSEQ dimensions must be positive, got {dims:?}")));
    }
    let count = checked_numel(&dims).ok_or_else(|| Error::OutOfRange(format!("FSEQ dimensions {dims:?} overflow")))?;
    let values = r.f32s(count, "FSEQ payload")?;
    r.finish("FSEQ")?;
    FrameSequence::new(Tensor::new(dims.to_vec(), values)?)
}

pub fn write_fseq(seq: &FrameSequence, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_fseq(seq)?)
}

pub fn read_fseq(path: &Path) -> Result<FrameSequence> {
    decode_fseq(&std::fs::read(path)?)
}

const FRAME_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "pbm", "pam"];

/// Image files in `dir`, sorted lexicographically by file name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_frame = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_frame {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Decodes one image file: grayscale images keep one channel, everything
/// else becomes RGB.
pub fn read_frame(path: &Path) -> Result<RawFrame> {
    let image_err = |e: image::ImageError| Error::Image { path: path.to_path_buf(), message: e.to_string() };
    let img = image::open(path).map_err(image_err)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() <= 2 {
        RawFrame::new(h, w, 1, img.into_luma8().into_raw())
    } else {
        RawFrame::new(h, w, 3, img.into_rgb8().into_raw())
    }
}

pub fn read_frame_dir(dir: &Path) -> Result<RawFrameStack> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no image frames in {}", dir.display())));
    }
    RawFrameStack::new(files.iter().map(|p| read_frame(p)).collect::<Result<_>>()?)
}

/// Writes a frame as PNG (1 or 3 channels).
pub fn write_frame_png(frame: &RawFrame, path: &Path) -> Result<()> {
    let color = match frame.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::invalid(format!("PNG frames need 1 or 3 channels, got {c}"))),
    };
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(&frame.data, frame.width as u32, frame.height as u32, color)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    binio::write_atomic(path, &bytes)
}
