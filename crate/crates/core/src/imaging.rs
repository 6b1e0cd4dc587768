//! Raster storage, PNG and float-container I/O, colorspace conversion,
//! resampling, and the application-specific confidence constructors.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// A planar float raster: `data[c * w * h + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidParameter(format!(
                "raster dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                what: "raster data",
                expected: width * height * channels,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("raster contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.npixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.npixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.npixels() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let n = self.npixels();
        self.data[c * n + y * self.width + x] = v;
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.channel(c).iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, 1, values.iter().map(|&v| v as f32).collect())
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }
}

// BT.601 full-range with +128 chroma offset. The paper only names the
// colorspace; this pins the matrix.
const YUV_FROM_RGB: [[f32; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

/// RGB in [0,255] to YUV with luma in [0,255] and chroma offset by +128.
pub fn rgb_to_yuv(rgb: &Raster) -> Result<Raster> {
    if rgb.channels() != 3 {
        return Err(Error::InvalidParameter(format!(
            "rgb_to_yuv expects 3 channels, got {}",
            rgb.channels()
        )));
    }
    let n = rgb.npixels();
    let (r, g, b) = (rgb.channel(0), rgb.channel(1), rgb.channel(2));
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        data[i] = YUV_FROM_RGB[0][0] * r[i] + YUV_FROM_RGB[0][1] * g[i] + YUV_FROM_RGB[0][2] * b[i];
        data[n + i] =
            YUV_FROM_RGB[1][0] * r[i] + YUV_FROM_RGB[1][1] * g[i] + YUV_FROM_RGB[1][2] * b[i] + 128.0;
        data[2 * n + i] =
            YUV_FROM_RGB[2][0] * r[i] + YUV_FROM_RGB[2][1] * g[i] + YUV_FROM_RGB[2][2] * b[i] + 128.0;
    }
    Raster::new(rgb.width(), rgb.height(), 3, data)
}

/// Inverse of [`rgb_to_yuv`]; round-trips within half a level.
pub fn yuv_to_rgb(yuv: &Raster) -> Result<Raster> {
    if yuv.channels() != 3 {
        return Err(Error::InvalidParameter(format!(
            "yuv_to_rgb expects 3 channels, got {}",
            yuv.channels()
        )));
    }
    let n = yuv.npixels();
    let (l, u, v) = (yuv.channel(0), yuv.channel(1), yuv.channel(2));
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let uu = u[i] - 128.0;
        let vv = v[i] - 128.0;
        data[i] = l[i] + 1.402 * vv;
        data[n + i] = l[i] - 0.344_136 * uu - 0.714_136 * vv;
        data[2 * n + i] = l[i] + 1.772 * uu;
    }
    Raster::new(yuv.width(), yuv.height(), 3, data)
}

fn catmull_rom(x: f64) -> f64 {
    // a = -0.5
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Separable Catmull-Rom bicubic resize; identity when sizes match.
pub fn bicubic_resize(src: &Raster, new_w: usize, new_h: usize) -> Result<Raster> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidParameter("resize target must be positive".into()));
    }
    if new_w == src.width() && new_h == src.height() {
        return Ok(src.clone());
    }
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    let scale_x = w as f64 / new_w as f64;
    let scale_y = h as f64 / new_h as f64;

    // horizontal pass to (new_w, h), then vertical to (new_w, new_h)
    let mut mid = vec![0.0f64; new_w * h * ch];
    for c in 0..ch {
        let plane = src.channel(c);
        for y in 0..h {
            for nx in 0..new_w {
                let sx = (nx as f64 + 0.5) * scale_x - 0.5;
                let base = sx.floor() as isize;
                let frac = sx - base as f64;
                let mut acc = 0.0;
                for k in -1..=2isize {
                    let wgt = catmull_rom(k as f64 - frac);
                    let xi = (base + k).clamp(0, w as isize - 1) as usize;
                    acc += wgt * plane[y * w + xi] as f64;
                }
                mid[c * new_w * h + y * new_w + nx] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; new_w * new_h * ch];
    for c in 0..ch {
        for ny in 0..new_h {
            let sy = (ny as f64 + 0.5) * scale_y - 0.5;
            let base = sy.floor() as isize;
            let frac = sy - base as f64;
            for nx in 0..new_w {
                let mut acc = 0.0;
                for k in -1..=2isize {
                    let wgt = catmull_rom(k as f64 - frac);
                    let yi = (base + k).clamp(0, h as isize - 1) as usize;
                    acc += wgt * mid[c * new_w * h + yi * new_w + nx];
                }
                out[c * new_w * new_h + ny * new_w + nx] = acc as f32;
            }
        }
    }
    Raster::new(new_w, new_h, ch, out)
}

/// Superresolution parameterization: λ = 4^(f − 1/2) and a per-sample
/// Gaussian confidence bump of σ = f/4.
#[derive(Debug, Clone, Copy)]
pub struct SuperresParams {
    pub factor: usize,
    pub lambda: f64,
    pub confidence_sigma: f64,
}

impl SuperresParams {
    pub fn new(factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidParameter(format!(
                "upsampling factor must be >= 2, got {factor}"
            )));
        }
        Ok(Self {
            factor,
            lambda: superres_lambda(factor),
            confidence_sigma: factor as f64 / 4.0,
        })
    }
}

/// λ = 4^(f − 1/2).
pub fn superres_lambda(factor: usize) -> f64 {
    4.0f64.powf(factor as f64 - 0.5)
}

/// Tiled Gaussian bumps (σ = f/4, peak 1) centered on the low-resolution
/// sample positions k·f of the upsampled lattice; separable per axis.
pub fn superres_confidence(factor: usize, out_w: usize, out_h: usize) -> Result<Raster> {
    if factor < 2 {
        return Err(Error::InvalidParameter(format!(
            "upsampling factor must be >= 2, got {factor}"
        )));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter("output size must be positive".into()));
    }
    let sigma = factor as f64 / 4.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let axis = |len: usize| -> Vec<f64> {
        let n_centers = (len + factor - 1) / factor;
        (0..len)
            .map(|x| {
                let k = ((x as f64 / factor as f64).round() as usize).min(n_centers - 1);
                let d = x as f64 - (k * factor) as f64;
                (-d * d * inv).exp()
            })
            .collect()
    };
    let gx = axis(out_w);
    let gy = axis(out_h);
    let mut data = vec![0.0f32; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            data[y * out_w + x] = (gx[x] * gy[y]) as f32;
        }
    }
    Raster::new(out_w, out_h, 1, data)
}

/// A per-pixel depth interval [lower, upper].
#[derive(Debug, Clone)]
pub struct DepthInterval {
    lower: Raster,
    upper: Raster,
}

impl DepthInterval {
    pub fn new(lower: Raster, upper: Raster) -> Result<Self> {
        if lower.channels() != 1 || upper.channels() != 1 || !lower.same_shape(&upper) {
            return Err(Error::InvalidParameter(
                "interval bounds must be single-channel rasters of the same size".into(),
            ));
        }
        for (i, (&l, &u)) in lower.channel(0).iter().zip(upper.channel(0)).enumerate() {
            if l > u {
                return Err(Error::InvalidParameter(format!(
                    "interval lower > upper at pixel {i}: {l} > {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &Raster {
        &self.lower
    }

    pub fn upper(&self) -> &Raster {
        &self.upper
    }
}

/// Interval reparameterization: target = (l+u)/2, confidence = exp(l−u).
pub fn interval_to_target_confidence(interval: &DepthInterval) -> (Raster, Raster) {
    let l = interval.lower.channel(0);
    let u = interval.upper.channel(0);
    let target: Vec<f32> = l.iter().zip(u.iter()).map(|(&a, &b)| (a + b) * 0.5).collect();
    let confidence: Vec<f32> = l
        .iter()
        .zip(u.iter())
        .map(|(&a, &b)| ((a as f64 - b as f64).exp()) as f32)
        .collect();
    let w = interval.lower.width();
    let h = interval.lower.height();
    (
        Raster::new(w, h, 1, target).expect("shape preserved"),
        Raster::new(w, h, 1, confidence).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

const BSF_MAGIC: &[u8; 4] = b"BSF1";

/// Writes the BSF1 float container: magic, LE u32 width/height/channels,
/// then planar little-endian f32 samples. Bit-exact round trips.
pub fn write_bsf(path: &Path, raster: &Raster) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + raster.data().len() * 4);
    bytes.extend_from_slice(BSF_MAGIC);
    bytes.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(raster.channels() as u32).to_le_bytes());
    for &v in raster.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_bsf(path: &Path) -> Result<Raster> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != BSF_MAGIC {
        return Err(Error::Io(format!("{}: not a BSF1 container", path.display())));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h, ch) = (rd(4), rd(8), rd(12));
    let expected = 16 + w * h * ch * 4;
    if bytes.len() != expected {
        return Err(Error::Io(format!(
            "{}: truncated BSF1 payload ({} of {} bytes)",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::new(w, h, ch, data)
}

/// Reads an 8- or 16-bit PNG as a 1- or 3-channel raster in native scale
/// (0..255 or 0..65535). Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::DynamicImage::*;
    let raster = match img {
        ImageLuma8(b) => Raster::new(w, h, 1, b.pixels().map(|p| p.0[0] as f32).collect())?,
        ImageLuma16(b) => Raster::new(w, h, 1, b.pixels().map(|p| p.0[0] as f32).collect())?,
        other => {
            let wide = matches!(other, ImageRgb16(_) | ImageRgba16(_) | ImageLumaA16(_));
            if wide {
                let rgb = other.to_rgb16();
                let mut data = vec![0.0f32; 3 * w * h];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = p.0[c] as f32;
                    }
                }
                Raster::new(w, h, 3, data)?
            } else {
                let rgb = other.to_rgb8();
                let mut data = vec![0.0f32; 3 * w * h];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = p.0[c] as f32;
                    }
                }
                Raster::new(w, h, 3, data)?
            }
        }
    };
    Ok(raster)
}

/// Writes a 1- or 3-channel raster as PNG: 8-bit when every value fits in
/// [0, 255], 16-bit otherwise. Values are rounded and clamped.
pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let n = raster.npixels();
    let wide = raster.data().iter().any(|&v| v > 255.0);
    match (raster.channels(), wide) {
        (1, false) => {
            let buf: Vec<u8> = raster.channel(0).iter().map(|&v| quant::<255>(v) as u8).collect();
            image::GrayImage::from_raw(w, h, buf)
                .ok_or_else(|| Error::Io("png buffer".into()))?
                .save(path)?;
        }
        (1, true) => {
            let buf: Vec<u16> = raster.channel(0).iter().map(|&v| quant::<65535>(v)).collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                .ok_or_else(|| Error::Io("png buffer".into()))?
                .save(path)?;
        }
        (3, false) => {
            let mut buf = vec![0u8; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    buf[3 * i + c] = quant::<255>(raster.channel(c)[i]) as u8;
                }
            }
            image::RgbImage::from_raw(w, h, buf)
                .ok_or_else(|| Error::Io("png buffer".into()))?
                .save(path)?;
        }
        (3, true) => {
            let mut buf = vec![0u16; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    buf[3 * i + c] = quant::<65535>(raster.channel(c)[i]);
                }
            }
            image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, buf)
                .ok_or_else(|| Error::Io("png buffer".into()))?
                .save(path)?;
        }
        (c, _) => {
            return Err(Error::InvalidParameter(format!(
                "png output supports 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(())
}

fn quant<const MAX: u16>(v: f32) -> u16 {
    (v.round().clamp(0.0, MAX as f32)) as u16
}

/// Dispatches on extension: `.png` or `.bsf`.
pub fn read_raster(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("bsf") => read_bsf(path),
        _ => Err(Error::Io(format!(
            "{}: unsupported extension (expected .png or .bsf)",
            path.display()
        ))),
    }
}

/// Dispatches on extension: `.png` or `.bsf`.
pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, raster),
        Some("bsf") => write_bsf(path, raster),
        _ => Err(Error::Io(format!(
            "{}: unsupported extension (expected .png or .bsf)",
            path.display()
        ))),
    }
}
