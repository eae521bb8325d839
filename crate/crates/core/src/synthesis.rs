//! Nowcast sequence generation, aspect restoration and strip export.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::{GenericImage, RgbImage};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{to_u8, ImageTensor, FILENAME_TIME_FORMAT};
use crate::descriptor::WeatherDescriptor;
use crate::error::{Error, Result};
use crate::models::{condition_vector, Generator, GeneratorInput, LatentSpec, IMAGE_CHANNELS};
use crate::nn::Mode;

pub const DEFAULT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastStep {
    pub lead_minutes: u32,
    pub descriptor: WeatherDescriptor,
}

#[derive(Debug, Clone)]
pub struct NowcastRequest {
    pub i0: ImageTensor,
    pub w0: WeatherDescriptor,
    pub forecast: Vec<ForecastStep>,
    pub sigma: f64,
    pub seed: u64,
    /// Draw one latent vector for the whole sequence instead of one per lead.
    pub share_z: bool,
}

impl NowcastRequest {
    pub fn new(i0: ImageTensor, w0: WeatherDescriptor, forecast: Vec<ForecastStep>, seed: u64) -> Self {
        Self {
            i0,
            w0,
            forecast,
            sigma: DEFAULT_SIGMA,
            seed,
            share_z: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.forecast.is_empty() {
            return Err(Error::InvalidArgument("forecast is empty".into()));
        }
        if self.forecast.windows(2).any(|w| w[0].lead_minutes >= w[1].lead_minutes) {
            return Err(Error::InvalidArgument("lead times must be strictly increasing".into()));
        }
        LatentSpec::new(1, self.sigma)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub t0: DateTime<Utc>,
    pub leads: Vec<u32>,
    pub sigma: f64,
    pub seed: u64,
    pub share_z: bool,
    pub checkpoint_id: String,
    pub normalizer_id: String,
    /// Mean absolute difference between the lead-0 frame and `I₀`, when
    /// lead 0 was requested.
    pub lead0_mad: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NowcastSequence {
    pub frames: Vec<(u32, ImageTensor)>,
    /// Latent vector used for each frame.
    pub latents: Vec<Array1<f64>>,
    pub provenance: Provenance,
}

/// Generates one frame per requested lead with `G(I₀, z | w₀, wₜ)`.
pub fn synthesize_sequence(
    request: &NowcastRequest,
    g: &Generator,
    normalizer_id: &str,
    checkpoint_id: &str,
) -> Result<NowcastSequence> {
    request.validate()?;
    request.w0.require_normalizer(normalizer_id)?;
    for f in &request.forecast {
        f.descriptor.require_normalizer(normalizer_id)?;
    }
    let n = request.forecast.len();
    let latent = LatentSpec::new(g.config.latent_dim, request.sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let z = if request.share_z {
        let one = latent.sample(1, &mut rng);
        Array2::from_shape_fn((n, g.config.latent_dim), |(_, j)| one[[0, j]])
    } else {
        latent.sample(n, &mut rng)
    };
    let img = request.i0.to_nchw();
    let (_, _, h, w) = img.dim();
    let image = Array4::from_shape_fn((n, IMAGE_CHANNELS, h, w), |(_, c, y, x)| img[[0, c, y, x]]);
    let mut condition = Array2::zeros((n, crate::models::CONDITION_CHANNELS));
    for (i, f) in request.forecast.iter().enumerate() {
        condition.row_mut(i).assign(&condition_vector(&request.w0, &f.descriptor));
    }
    let input = GeneratorInput {
        image,
        condition,
        z: z.clone(),
    };
    let (out, _) = g.forward(&input, Mode::Eval)?;
    let frames: Vec<(u32, ImageTensor)> = request
        .forecast
        .iter()
        .enumerate()
        .map(|(i, f)| (f.lead_minutes, ImageTensor::from_nchw(&out, i)))
        .collect();
    let lead0_mad = frames
        .iter()
        .find(|(lead, _)| *lead == 0)
        .map(|(_, f)| f.mean_abs_diff(&request.i0));
    Ok(NowcastSequence {
        latents: z.axis_iter(Axis(0)).map(|r| r.to_owned()).collect(),
        provenance: Provenance {
            t0: request.w0.valid_time,
            leads: frames.iter().map(|(l, _)| *l).collect(),
            sigma: request.sigma,
            seed: request.seed,
            share_z: request.share_z,
            checkpoint_id: checkpoint_id.to_string(),
            normalizer_id: normalizer_id.to_string(),
            lead0_mad,
        },
        frames,
    })
}

/// Display width for a given aspect ratio at the frame's height.
pub fn display_width(height: usize, ratio: f64) -> usize {
    ((height as f64 * ratio).round() as usize).max(1)
}

/// Horizontal-only linear resize to `round(H · ratio)` columns, mapped to
/// 8-bit RGB.
pub fn restore_aspect(frame: &ImageTensor, ratio: f64) -> Result<RgbImage> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidArgument(format!("aspect ratio must be positive, got {ratio}")));
    }
    let (h, w) = (frame.height(), frame.width());
    let out_w = display_width(h, ratio);
    if out_w == w {
        return Ok(frame.to_rgb8());
    }
    let data = frame.data();
    let scale = w as f64 / out_w as f64;
    let mut img = RgbImage::new(out_w as u32, h as u32);
    for x in 0..out_w {
        let src = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (w - 1) as f64);
        let x0 = src.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let a = src - x0 as f64;
        for y in 0..h {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = to_u8((1.0 - a) * data[[y, x0, c]] + a * data[[y, x1, c]]);
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub site_id: String,
    pub aspect_ratio: f64,
    pub frames: Vec<String>,
    pub strip: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct ExportedFiles {
    pub frames: Vec<PathBuf>,
    pub strip: PathBuf,
    pub sidecar: PathBuf,
}

/// Writes `<site>_<t0>_<lead>.png` per frame, a horizontal strip PNG and a
/// JSON sidecar into `dest`.
pub fn export_strip(sequence: &NowcastSequence, site_id: &str, ratio: f64, dest: &Path) -> Result<ExportedFiles> {
    if sequence.frames.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    std::fs::create_dir_all(dest)?;
    let stamp = sequence.provenance.t0.format(FILENAME_TIME_FORMAT).to_string();
    let images = sequence
        .frames
        .iter()
        .map(|(_, f)| restore_aspect(f, ratio))
        .collect::<Result<Vec<_>>>()?;
    let save = |img: &RgbImage, path: &Path| {
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    };
    let mut frame_paths = Vec::with_capacity(images.len());
    for ((lead, _), img) in sequence.frames.iter().zip(&images) {
        let p = dest.join(format!("{site_id}_{stamp}_{lead}.png"));
        save(img, &p)?;
        frame_paths.push(p);
    }
    let total_w: u32 = images.iter().map(|i| i.width()).sum();
    let h = images[0].height();
    let mut strip = RgbImage::new(total_w, h);
    let mut x = 0;
    for img in &images {
        strip
            .copy_from(img, x, 0)
            .map_err(|e| Error::Shape(e.to_string()))?;
        x += img.width();
    }
    let strip_path = dest.join(format!("{site_id}_{stamp}_strip.png"));
    save(&strip, &strip_path)?;
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let sidecar = Sidecar {
        site_id: site_id.to_string(),
        aspect_ratio: ratio,
        frames: frame_paths.iter().map(|p| name(p)).collect(),
        strip: name(&strip_path),
        provenance: sequence.provenance.clone(),
    };
    let sidecar_path = dest.join(format!("{site_id}_{stamp}.json"));
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(ExportedFiles {
        frames: frame_paths,
        strip: strip_path,
        sidecar: sidecar_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspect_examples() {
        let f = ImageTensor::filled(64, 128, 0.0);
        let same = restore_aspect(&f, 2.0).unwrap();
        assert_eq!(same.dimensions(), (128, 64));
        let four_thirds = restore_aspect(&f, 4.0 / 3.0).unwrap();
        assert_eq!(four_thirds.width(), 85);
        assert!(four_thirds.pixels().all(|p| p.0 == [128, 128, 128]));
        assert!(restore_aspect(&f, 0.0).is_err());
    }

    #[test]
    fn aspect_width_is_monotone() {
        let mut last = 0;
        for i in 1..400 {
            let w = display_width(64, i as f64 * 0.01);
            assert!(w >= last);
            last = w;
        }
    }
}
