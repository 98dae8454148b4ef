//! 8-bit grayscale rasters and gamma-based exposure distortion.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("image data length {len} does not match {width}x{height}")]
    SizeMismatch { width: usize, height: usize, len: usize },
    #[error("cannot read {path}: {message}")]
    UnreadableInput { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    UnwritableOutput { path: PathBuf, message: String },
}

/// Row-major 8-bit intensity raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if data.len() != width * height {
            return Err(ImagingError::SizeMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean_intensity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Converts any decoded image to 8-bit luma with ITU-R BT.601 weights.
    pub fn from_dynamic(img: &DynamicImage) -> Self {
        if let DynamicImage::ImageLuma8(g) = img {
            return Self {
                width: g.width() as usize,
                height: g.height() as usize,
                data: g.as_raw().clone(),
            };
        }
        let rgb = img.to_rgb8();
        let data = rgb
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
            })
            .collect();
        Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|e| ImagingError::UnreadableInput {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    /// Writes PNG or binary PGM depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<(), ImagingError> {
        let format = image_format(path).unwrap_or(ImageFormat::Png);
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            format,
        )
        .map_err(|e| ImagingError::UnwritableOutput {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn image_format(path: &Path) -> Option<ImageFormat> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some(ImageFormat::Png),
        "pgm" | "pnm" | "ppm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Exposure exponent; values below 1 brighten (overexpose), above 1 darken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaParam(f64);

impl GammaParam {
    pub fn new(gamma: f64) -> Result<Self, ImagingError> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(Self(gamma))
        } else {
            Err(ImagingError::InvalidGamma(gamma))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Intensity mapping `round(255 * (p / 255)^gamma)` for every 8-bit value.
    pub fn lookup_table(self) -> [u8; 256] {
        let mut lut = [0u8; 256];
        for (p, out) in lut.iter_mut().enumerate() {
            let v = 255.0 * (p as f64 / 255.0).powf(self.0);
            *out = v.round().clamp(0.0, 255.0) as u8;
        }
        lut
    }
}

/// Applies the gamma power transformation to every pixel.
pub fn gamma_transform(img: &GrayImage, g: GammaParam) -> GrayImage {
    let lut = g.lookup_table();
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&p| lut[p as usize]).collect(),
    }
}

/// Image files of a sequence directory (PNG or PGM), sorted by file name.
pub fn list_sequence_images(dir: &Path) -> Result<Vec<PathBuf>, ImagingError> {
    let unreadable = |e: std::io::Error| ImagingError::UnreadableInput {
        path: dir.to_path_buf(),
        message: e.to_string(),
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(unreadable)? {
        let path = entry.map_err(unreadable)?.path();
        if path.is_file() && image_format(&path).is_some() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Gamma-distorts every image of `input` into `output` under the same file names.
///
/// Returns the number of images written. Images whose pixels are left unchanged by the
/// transform (8-bit grayscale input with gamma = 1) are copied byte for byte.
pub fn distort_sequence(input: &Path, output: &Path, g: GammaParam) -> Result<usize, ImagingError> {
    let files = list_sequence_images(input)?;
    std::fs::create_dir_all(output).map_err(|e| ImagingError::UnwritableOutput {
        path: output.to_path_buf(),
        message: e.to_string(),
    })?;
    for src in &files {
        let name = src.file_name().expect("listed files have names");
        let dst = output.join(name);
        let bytes = std::fs::read(src).map_err(|e| ImagingError::UnreadableInput {
            path: src.clone(),
            message: e.to_string(),
        })?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| ImagingError::UnreadableInput {
            path: src.clone(),
            message: e.to_string(),
        })?;
        let gray = GrayImage::from_dynamic(&decoded);
        let out = gamma_transform(&gray, g);
        if matches!(decoded, DynamicImage::ImageLuma8(_)) && out == gray {
            std::fs::write(&dst, &bytes).map_err(|e| ImagingError::UnwritableOutput {
                path: dst.clone(),
                message: e.to_string(),
            })?;
        } else {
            out.save(&dst)?;
        }
    }
    Ok(files.len())
}
