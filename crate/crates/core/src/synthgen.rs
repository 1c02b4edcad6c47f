//! Deterministic synthetic paired-modality dataset.
//!
//! An identity is a fixed random latent: a handful of oriented colour
//! gratings plus a colour bias. A VIS capture renders the latent with
//! per-sample jitter and pixel noise; an NIR capture of the same identity
//! mixes the rendered channels with R-dominant weights into one grey channel
//! (plus sensor noise) and replicates it three times. Images are emitted
//! already aligned, so records carry no landmarks.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_manifest, DatasetManifest, ImageRecord, Modality, Split};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_source_ids: usize,
    pub n_target_ids: usize,
    /// VIS images per source identity.
    pub source_samples_per_id: usize,
    /// Images per target identity in each modality.
    pub samples_per_id_per_modality: usize,
    /// Per identity (and modality): images assigned to the gallery split.
    pub gallery_per_id: usize,
    /// Per identity (and modality): images assigned to the probe split.
    pub probe_per_id: usize,
    pub image_size: usize,
    /// Amplitude of the identity gratings.
    pub identity_signal_strength: f64,
    /// Std of the colour bias that is part of the identity.
    pub color_bias_strength: f64,
    /// Share of each grating's colour along the grey axis (1 = achromatic).
    pub luminance: f64,
    /// Pixel noise std.
    pub noise_level: f64,
    /// Scale of per-sample latent perturbations (phase, orientation, colour).
    pub jitter: f64,
    pub components: usize,
    /// NIR intensity = w · (R, G, B) + noise.
    pub nir_weights: [f64; 3],
    pub nir_noise: f64,
    pub seed: u64,
    pub target_name: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_source_ids: 40,
            n_target_ids: 10,
            source_samples_per_id: 30,
            samples_per_id_per_modality: 16,
            gallery_per_id: 5,
            probe_per_id: 5,
            image_size: 32,
            identity_signal_strength: 0.3,
            color_bias_strength: 0.03,
            luminance: 0.8,
            noise_level: 0.04,
            jitter: 0.25,
            components: 4,
            nir_weights: [0.7, 0.2, 0.1],
            nir_noise: 0.03,
            seed: 0,
            target_name: "target".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_source_ids == 0 || self.n_target_ids == 0 {
            return bad("identity counts must be >= 1".into());
        }
        if self.samples_per_id_per_modality == 0 || self.source_samples_per_id == 0 || self.components == 0 {
            return bad("sample and component counts must be >= 1".into());
        }
        if self.gallery_per_id + self.probe_per_id > self.samples_per_id_per_modality
            || self.gallery_per_id + self.probe_per_id > self.source_samples_per_id
        {
            return bad("gallery_per_id + probe_per_id exceeds samples per identity".into());
        }
        if !(0.0..=1.0).contains(&self.luminance) {
            return bad(format!("luminance must lie in [0, 1], got {}", self.luminance));
        }
        if self.noise_level < 0.0 || self.nir_noise < 0.0 || self.jitter < 0.0 {
            return bad("noise levels and jitter must be >= 0".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.target_name.is_empty() || self.target_name == "source" {
            return bad("target_name must be non-empty and differ from `source`".into());
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone)]
struct Grating {
    freq: f64,
    orientation: f64,
    phase: f64,
    amplitude: f64,
    color: [f64; 3],
}

/// The latent that defines one identity.
#[derive(Debug, Clone)]
pub struct IdentityLatent {
    gratings: Vec<Grating>,
    bias: [f64; 3],
}

impl IdentityLatent {
    pub fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let gratings = (0..cfg.components)
            .map(|_| {
                let mut chroma = [gaussian(rng), gaussian(rng), gaussian(rng)];
                let norm = chroma.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
                chroma.iter_mut().for_each(|c| *c /= norm);
                let grey = 3f64.sqrt().recip();
                let color = chroma.map(|c| cfg.luminance * grey + (1.0 - cfg.luminance) * c);
                Grating {
                    freq: rng.random_range(0.05..0.25),
                    orientation: rng.random_range(0.0..PI),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: cfg.identity_signal_strength * rng.random_range(0.6..1.0),
                    color,
                }
            })
            .collect();
        let bias = [
            cfg.color_bias_strength * gaussian(rng),
            cfg.color_bias_strength * gaussian(rng),
            cfg.color_bias_strength * gaussian(rng),
        ];
        IdentityLatent { gratings, bias }
    }

    /// Noise-free VIS rendering of one capture, `H x W x 3`, unclamped.
    fn render(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let j = cfg.jitter;
        let captured: Vec<Grating> = self
            .gratings
            .iter()
            .map(|g| {
                let mut color = g.color;
                color.iter_mut().for_each(|c| *c += 0.3 * j * gaussian(rng));
                Grating {
                    freq: g.freq * (1.0 + 0.1 * j * gaussian(rng)),
                    orientation: g.orientation + 0.3 * j * gaussian(rng),
                    phase: g.phase + PI * j * gaussian(rng),
                    amplitude: g.amplitude * (1.0 + 0.3 * j * gaussian(rng)),
                    color,
                }
            })
            .collect();
        let size = cfg.image_size;
        Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
            let mut v = 0.5 + self.bias[ch];
            for g in &captured {
                let (s, c) = g.orientation.sin_cos();
                let t = 2.0 * PI * g.freq * (x as f64 * c + y as f64 * s) + g.phase;
                v += g.amplitude * g.color[ch] * t.sin();
            }
            v
        })
    }

    /// One capture in `modality`, values quantized to 8 bits.
    pub fn capture(&self, cfg: &SynthConfig, modality: Modality, rng: &mut ChaCha8Rng) -> Array3<u8> {
        let clean = self.render(cfg, rng);
        let size = cfg.image_size;
        let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match modality {
            Modality::Vis => {
                let mut out = Array3::<u8>::zeros((size, size, 3));
                for ((y, x, ch), v) in clean.indexed_iter() {
                    out[[y, x, ch]] = quantize(v + cfg.noise_level * gaussian(rng));
                }
                out
            }
            Modality::Nir => {
                let w = cfg.nir_weights;
                let mut out = Array3::<u8>::zeros((size, size, 3));
                for y in 0..size {
                    for x in 0..size {
                        let g = w[0] * clean[[y, x, 0]] + w[1] * clean[[y, x, 1]] + w[2] * clean[[y, x, 2]]
                            + cfg.nir_noise * gaussian(rng);
                        let q = quantize(g);
                        for ch in 0..3 {
                            out[[y, x, ch]] = q;
                        }
                    }
                }
                out
            }
        }
    }
}

const SOURCE_TAG: u64 = 0x5352_4344;
const LATENT_TAG: u64 = 1;
const CAPTURE_TAG: u64 = 2;

fn split_for(k: usize, cfg: &SynthConfig) -> Split {
    if k < cfg.gallery_per_id {
        Split::Gallery
    } else if k < cfg.gallery_per_id + cfg.probe_per_id {
        Split::Probe
    } else {
        Split::Train
    }
}

struct Planned {
    record: ImageRecord,
    pixels: Array3<u8>,
}

fn save_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels.iter().copied().collect()).expect("rgb buffer");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn render_domain(
    cfg: &SynthConfig,
    domain: &str,
    tag: u64,
    n_ids: usize,
    modalities: &[Modality],
    samples_per_id: usize,
) -> Vec<Vec<Planned>> {
    (0..n_ids)
        .into_par_iter()
        .map(|i| {
            let id = format!("{domain}_{i:04}");
            let mut latent_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, LATENT_TAG, i as u64]));
            let latent = IdentityLatent::sample(cfg, &mut latent_rng);
            let mut planned = Vec::new();
            for &modality in modalities {
                for k in 0..samples_per_id {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[tag, CAPTURE_TAG, i as u64, modality as u64, k as u64],
                    ));
                    let pixels = latent.capture(cfg, modality, &mut rng);
                    let file = format!("img/{id}_{}_{k:02}.png", modality.to_string().to_lowercase());
                    planned.push(Planned {
                        record: ImageRecord {
                            path: file,
                            identity: id.clone(),
                            modality,
                            split: split_for(k, cfg),
                            landmarks: None,
                        },
                        pixels,
                    });
                }
            }
            planned
        })
        .collect()
}

fn write_domain(dir: &Path, name: &str, per_identity: Vec<Vec<Planned>>) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("img")).map_err(|e| Error::io(dir, e))?;
    let planned: Vec<Planned> = per_identity.into_iter().flatten().collect();
    planned
        .par_iter()
        .map(|p| save_png(&dir.join(&p.record.path), &p.pixels))
        .collect::<Result<Vec<()>>>()?;
    let manifest = DatasetManifest::new(name, dir, planned.into_iter().map(|p| p.record).collect())?;
    write_manifest(&manifest, dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// VIS-only source dataset under `out_dir/source`.
pub fn generate_source(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let planned = render_domain(
        cfg,
        "src",
        SOURCE_TAG,
        cfg.n_source_ids,
        &[Modality::Vis],
        cfg.source_samples_per_id,
    );
    write_domain(&out_dir.join("source"), "source", planned)
}

/// Paired VIS+NIR target dataset under `out_dir/<target_name>`. Identities
/// depend on the seed and the target name.
pub fn generate_target(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let planned = render_domain(
        cfg,
        &cfg.target_name,
        name_tag(&cfg.target_name),
        cfg.n_target_ids,
        &[Modality::Vis, Modality::Nir],
        cfg.samples_per_id_per_modality,
    );
    write_domain(&out_dir.join(&cfg.target_name), &cfg.target_name, planned)
}

/// Writes both datasets and returns `(source, target)` manifests.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<(DatasetManifest, DatasetManifest)> {
    let out_dir = out_dir.as_ref();
    Ok((generate_source(cfg, out_dir)?, generate_target(cfg, out_dir)?))
}

pub fn manifest_path(out_dir: &Path, dataset: &str) -> PathBuf {
    out_dir.join(dataset).join(MANIFEST_NAME)
}
