//! Five-landmark similarity alignment and pixel normalization.

use std::path::Path;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, ImageRecord, Landmarks};
use crate::error::{Error, Result};

/// Canonical landmark positions for a 112x112 crop.
pub const TEMPLATE_112: Landmarks = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub crop_size: usize,
    /// Landmark template in `crop_size` pixel coordinates.
    pub template: Landmarks,
}

impl PreprocessConfig {
    /// Uses the 112x112 template rescaled to `crop_size`.
    pub fn with_crop_size(crop_size: usize) -> Self {
        let ratio = crop_size as f64 / 112.0;
        let mut template = TEMPLATE_112;
        for p in template.iter_mut() {
            p[0] *= ratio;
            p[1] *= ratio;
        }
        PreprocessConfig {
            crop_size,
            template,
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig::with_crop_size(112)
    }
}

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn from_parts(scale: f64, angle: f64, translation: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        SimilarityTransform {
            scale,
            rotation: [[c, -s], [s, c]],
            translation,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        SimilarityTransform {
            translation: [dx, dy],
            ..Self::identity()
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1]) + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
        let inv_scale = 1.0 / self.scale;
        let t = self.translation;
        SimilarityTransform {
            scale: inv_scale,
            rotation: rt,
            translation: [
                -inv_scale * (rt[0][0] * t[0] + rt[0][1] * t[1]),
                -inv_scale * (rt[1][0] * t[0] + rt[1][1] * t[1]),
            ],
        }
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &SimilarityTransform) -> SimilarityTransform {
        let a = &self.rotation;
        let b = &inner.rotation;
        let rotation = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        SimilarityTransform {
            scale: self.scale * inner.scale,
            rotation,
            translation: self.apply(inner.translation),
        }
    }

    /// Sum of squared distances between transformed `from` and `to`.
    pub fn residual(&self, from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
        from.iter()
            .zip(to)
            .map(|(p, q)| {
                let m = self.apply(*p);
                (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)
            })
            .sum()
    }
}

/// Least-squares similarity transform mapping `landmarks` onto `template`.
///
/// In complex notation the model is `t = a * l + b`; after centering both
/// point sets the optimal `a` is `Σ conj(l) t / Σ |l|²`, which is the global
/// minimizer over rotations with positive scale.
pub fn estimate_similarity_transform(
    landmarks: &[[f64; 2]],
    template: &[[f64; 2]],
) -> Result<SimilarityTransform> {
    if landmarks.len() != template.len() || landmarks.len() < 2 {
        return Err(Error::Dimension(format!(
            "need matching point sets of at least 2 points, got {} and {}",
            landmarks.len(),
            template.len()
        )));
    }
    let n = landmarks.len() as f64;
    let centroid = |pts: &[[f64; 2]]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    };
    let mu_l = centroid(landmarks);
    let mu_t = centroid(template);

    let (mut var, mut re, mut im, mut var_t) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in landmarks.iter().zip(template) {
        let (x, y) = (p[0] - mu_l[0], p[1] - mu_l[1]);
        let (u, v) = (q[0] - mu_t[0], q[1] - mu_t[1]);
        var += x * x + y * y;
        var_t += u * u + v * v;
        re += x * u + y * v;
        im += x * v - y * u;
    }
    if var <= f64::EPSILON * n || var_t <= f64::EPSILON * n {
        return Err(Error::Degenerate(
            "landmarks or template have (near) zero spread".into(),
        ));
    }
    let (a_re, a_im) = (re / var, im / var);
    let scale = a_re.hypot(a_im);
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("fitted scale is not positive".into()));
    }
    let (c, s) = (a_re / scale, a_im / scale);
    let rotation = [[c, -s], [s, c]];
    let translation = [
        mu_t[0] - (a_re * mu_l[0] - a_im * mu_l[1]),
        mu_t[1] - (a_im * mu_l[0] + a_re * mu_l[1]),
    ];
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Aligned crop, `size x size x 3`, values in `[0, 1]`, RGB order.
#[derive(Debug, Clone)]
pub struct AlignedImage {
    pub pixels: Array3<f32>,
    pub source_record: Option<ImageRecord>,
}

fn sample_bilinear(image: &ArrayView3<f32>, x: f64, y: f64, channel: usize) -> f32 {
    let (h, w, _) = image.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            image[[yi as usize, xi as usize, channel]]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `image` (H x W x 3) so that output pixel `q` takes the value at
/// `transform⁻¹(q)` in the source. Bilinear, zero outside the source.
pub fn warp_to_template(image: ArrayView3<f32>, transform: &SimilarityTransform, size: usize) -> Array3<f32> {
    let inverse = transform.inverse();
    let channels = image.dim().2;
    let mut out = Array3::<f32>::zeros((size, size, channels));
    for oy in 0..size {
        for ox in 0..size {
            let [sx, sy] = inverse.apply([ox as f64, oy as f64]);
            for c in 0..channels {
                out[[oy, ox, c]] = sample_bilinear(&image, sx, sy, c);
            }
        }
    }
    out
}

/// Center-crops the largest square and rescales it to `size`.
pub fn center_transform(width: usize, height: usize, size: usize) -> SimilarityTransform {
    let side = width.min(height) as f64;
    let scale = size as f64 / side;
    let half_out = (size as f64 - 1.0) / 2.0;
    SimilarityTransform {
        scale,
        rotation: [[1.0, 0.0], [0.0, 1.0]],
        translation: [
            half_out - scale * (width as f64 - 1.0) / 2.0,
            half_out - scale * (height as f64 - 1.0) / 2.0,
        ],
    }
}

/// Decodes a raster file into `H x W x 3` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer shape"))
}

/// Aligns one record: landmark records go through the similarity fit, the
/// rest are center-cropped and resized (already-aligned datasets).
pub fn align_image(image: ArrayView3<f32>, record: &ImageRecord, cfg: &PreprocessConfig) -> Result<AlignedImage> {
    let (h, w, _) = image.dim();
    let transform = match &record.landmarks {
        Some(points) => estimate_similarity_transform(points, &cfg.template)?,
        None => center_transform(w, h, cfg.crop_size),
    };
    let pixels = if record.landmarks.is_none() && h == cfg.crop_size && w == cfg.crop_size {
        image.to_owned()
    } else {
        warp_to_template(image, &transform, cfg.crop_size)
    };
    Ok(AlignedImage {
        pixels,
        source_record: Some(record.clone()),
    })
}

pub fn align_record(manifest: &DatasetManifest, record: &ImageRecord, cfg: &PreprocessConfig) -> Result<AlignedImage> {
    let image = load_image(&manifest.resolve(record))?;
    align_image(image.view(), record, cfg)
}

/// `(x - 0.5) / 0.5` per channel, returned channel-first (3 x H x W).
pub fn normalize_pixels(image: &AlignedImage) -> Array3<f32> {
    image
        .pixels
        .view()
        .permuted_axes([2, 0, 1])
        .mapv(|v| (v - 0.5) / 0.5)
        .as_standard_layout()
        .into_owned()
}

/// Aligns and normalizes every record of a manifest, in record order.
pub fn load_tensors(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Vec<Array3<f32>>> {
    use rayon::prelude::*;
    manifest
        .records
        .par_iter()
        .map(|r| align_record(manifest, r, cfg).map(|a| normalize_pixels(&a)))
        .collect()
}
