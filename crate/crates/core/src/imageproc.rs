//! Image preprocessing.
//!
//! The fixed chain is decode → luma → bilinear resize → scale by 1/255 →
//! replicate to three channels (transfer profile) → optional global-mean
//! subtraction. Binary PGM/PPM are decoded natively; JPEG and PNG go through
//! the `image` crate.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::LesionRecord;
use crate::nn::Tensor;
use crate::{Error, Result};

/// Luma weights for R, G and B.
pub const LUMA_COEFFICIENTS: [f64; 3] = [0.298839, 0.586811, 0.114350];

/// Row-major `height × width × channels` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value {v}")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, 3, bytes.iter().map(|&b| f32::from(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width, self.channels], self.data).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            _ => Err(Error::Shape(format!("expected [h, w, c] tensor, got {:?}", t.shape()))),
        }
    }
}

/// 3-channel image to luma, kept in floating point.
pub fn to_luma(image: &ImageTensor) -> Result<ImageTensor> {
    if image.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "luma conversion needs 3 channels, got {}",
            image.channels
        )));
    }
    let [r, g, b] = LUMA_COEFFICIENTS;
    let data = image
        .data
        .chunks_exact(3)
        .map(|px| (r * f64::from(px[0]) + g * f64::from(px[1]) + b * f64::from(px[2])) as f32)
        .collect();
    ImageTensor::new(image.height, image.width, 1, data)
}

/// Bilinear resampling onto a `target × target` grid, aligned on pixel
/// centres with clamped edges. Aspect ratio is not preserved.
pub fn resize(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be >= 1".into()));
    }
    if image.height == target && image.width == target {
        return Ok(image.clone());
    }
    let c = image.channels;
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(target, image.height);
    let xs = taps(target, image.width);
    let mut data = Vec::with_capacity(target * target * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| f64::from(image.data[(y * image.width + x) * c + ch]);
                let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                let bottom = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                data.push((top + fy * (bottom - top)) as f32);
            }
        }
    }
    ImageTensor::new(target, target, c, data)
}

pub fn replicate_channels(image: &ImageTensor) -> Result<ImageTensor> {
    if image.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "channel replication needs 1 channel, got {}",
            image.channels
        )));
    }
    let data = image.data.iter().flat_map(|&v| [v, v, v]).collect();
    ImageTensor::new(image.height, image.width, 3, data)
}

/// Per-channel mean over a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMean {
    pub per_channel: Vec<f64>,
}

pub fn compute_global_mean<'a, I>(images: I) -> Result<GlobalMean>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut sums: Vec<f64> = Vec::new();
    let mut pixels = 0usize;
    for img in images {
        if sums.is_empty() {
            sums = vec![0.0; img.channels];
        } else if sums.len() != img.channels {
            return Err(Error::InvalidArgument(format!(
                "mixed channel counts: {} and {}",
                sums.len(),
                img.channels
            )));
        }
        for px in img.data.chunks_exact(img.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += f64::from(v);
            }
        }
        pixels += img.height * img.width;
    }
    if sums.is_empty() {
        return Err(Error::InvalidArgument("global mean of no images".into()));
    }
    let per_channel = sums.into_iter().map(|s| s / pixels as f64).collect::<Vec<_>>();
    if per_channel.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("global mean".into()));
    }
    Ok(GlobalMean { per_channel })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileName {
    Scratch,
    Transfer,
}

impl ProfileName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::Scratch => "scratch",
            ProfileName::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessProfile {
    pub name: ProfileName,
    pub target_size: usize,
    pub output_channels: usize,
    pub mean_subtract: bool,
    /// Skip luma conversion and keep colour (output then always has 3 channels).
    pub color_passthrough: bool,
}

impl PreprocessProfile {
    /// 128×128, one grey channel.
    pub fn scratch() -> Self {
        PreprocessProfile {
            name: ProfileName::Scratch,
            target_size: 128,
            output_channels: 1,
            mean_subtract: false,
            color_passthrough: false,
        }
    }

    /// 299×299, grey replicated to three channels.
    pub fn transfer() -> Self {
        PreprocessProfile {
            name: ProfileName::Transfer,
            target_size: 299,
            output_channels: 3,
            mean_subtract: false,
            color_passthrough: false,
        }
    }

    pub fn with_size(mut self, target_size: usize) -> Self {
        self.target_size = target_size;
        self
    }

    pub fn channels(&self) -> usize {
        if self.color_passthrough {
            3
        } else {
            self.output_channels
        }
    }
}

/// Runs the preprocessing chain on an already decoded image.
pub fn preprocess_image(
    image: &ImageTensor,
    profile: &PreprocessProfile,
    mean: Option<&GlobalMean>,
) -> Result<ImageTensor> {
    if profile.target_size == 0 {
        return Err(Error::InvalidArgument("profile target_size must be > 0".into()));
    }
    let base = match (image.channels, profile.color_passthrough) {
        (3, false) => to_luma(image)?,
        (3, true) | (1, false) => image.clone(),
        (1, true) => replicate_channels(image)?,
        (c, _) => {
            return Err(Error::InvalidArgument(format!("unsupported channel count {c}")));
        }
    };
    let mut out = resize(&base, profile.target_size)?;
    for v in &mut out.data {
        *v /= 255.0;
    }
    if profile.channels() == 3 && out.channels == 1 {
        out = replicate_channels(&out)?;
    }
    if profile.mean_subtract {
        let mean = mean.ok_or_else(|| Error::Missing("global mean for mean subtraction".into()))?;
        if mean.per_channel.len() != out.channels {
            return Err(Error::Shape(format!(
                "global mean has {} channels, image {}",
                mean.per_channel.len(),
                out.channels
            )));
        }
        let c = out.channels;
        for px in out.data.chunks_exact_mut(c) {
            for (v, m) in px.iter_mut().zip(&mean.per_channel) {
                *v = (f64::from(*v) - m) as f32;
            }
        }
    }
    Ok(out)
}

/// Decodes the record's image file and runs the preprocessing chain.
pub fn preprocess(
    record: &LesionRecord,
    profile: &PreprocessProfile,
    mean: Option<&GlobalMean>,
) -> Result<ImageTensor> {
    let image = decode_image(&record.image_path)?;
    preprocess_image(&image, profile, mean)
}

fn decode_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes PGM/PPM natively and anything else via the `image` crate.
/// Values are returned in `[0, 255]`.
pub fn decode_image(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| decode_error(path, e.to_string()))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_netpbm(&bytes).map_err(|m| decode_error(path, m));
    }
    let img = image::load_from_memory(&bytes).map_err(|e| decode_error(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_rgb8(h as usize, w as usize, rgb.as_raw())
}

fn decode_netpbm(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (only 255)"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
    ImageTensor::new(height, width, channels, raster.iter().map(|&b| f32::from(b)).collect())
        .map_err(|e| e.to_string())
}

/// Writes an 8-bit binary PPM (3 channels) or PGM (1 channel), rounding and
/// clamping values to `[0, 255]`.
pub fn write_netpbm(image: &ImageTensor, path: &Path) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel netpbm"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "{magic}\n{} {}\n255\n", image.width, image.height).map_err(io)?;
    let raster: Vec<u8> = image
        .data
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&raster).map_err(io)?;
    out.flush().map_err(io)
}
