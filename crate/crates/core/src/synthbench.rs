//! Synthetic audio-visual pairs with a planted correspondence.
//!
//! Each category `c` owns a visual texture (an oriented grating at one of two
//! spatial frequencies) and an audio signature (a constant tone band at a
//! category-specific frequency). A sample shows the category's textured disc
//! at a random position and size, optionally next to a disc of another
//! category, over faint noise. Its spectrogram holds the category band over a
//! random time span, optionally plus a noisy band at a random frequency.
//! The ground-truth mask is exactly the target disc.

use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 28;
pub const AUDIO_FREQ: usize = 64;
pub const AUDIO_TIME: usize = 64;

/// Width in frequency bins of every planted band.
const BAND_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: usize,
    pub n: usize,
    pub seed: u64,
    pub distractor_rate: f64,
    pub audio_noise_rate: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Distractors are smaller and fainter than the target, so the sounding
    /// object stays the most salient pattern of its image.
    pub distractor_min_radius: f64,
    pub distractor_max_radius: f64,
    pub distractor_contrast: f64,
    /// Background pixels are uniform in `[0, clutter]`. At 1 the background
    /// matches the mean brightness of a texture, so only structure sets the
    /// sounding object apart.
    pub clutter: f64,
    pub min_area: usize,
    pub max_area: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 8,
            n: 800,
            seed: 0,
            distractor_rate: 0.5,
            audio_noise_rate: 0.5,
            min_radius: 4.0,
            max_radius: 6.5,
            distractor_min_radius: 2.5,
            distractor_max_radius: 3.5,
            distractor_contrast: 0.5,
            clutter: 0.5,
            min_area: 40,
            max_area: 140,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.categories > AUDIO_FREQ / 8 {
            return Err(Error::Config(format!("at most {} categories fit the spectrogram", AUDIO_FREQ / 8)));
        }
        if self.n < self.categories {
            return Err(Error::Config(format!("n = {} < C = {}", self.n, self.categories)));
        }
        for (name, r) in [("distractor_rate", self.distractor_rate), ("audio_noise_rate", self.audio_noise_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        for (lo, hi) in [(self.min_radius, self.max_radius), (self.distractor_min_radius, self.distractor_max_radius)] {
            if !(lo > 0.0 && lo <= hi && 2.0 * hi < IMAGE_SIZE as f64) {
                return Err(Error::Config(format!("invalid radius range [{lo}, {hi}]")));
            }
        }
        for (name, v) in [("distractor_contrast", self.distractor_contrast), ("clutter", self.clutter)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.min_area > self.max_area {
            return Err(Error::Config("min_area > max_area".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub category: usize,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub f0: usize,
    pub width: usize,
    pub t0: usize,
    pub t1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub target: Placement,
    pub distractors: Vec<Placement>,
    pub target_band: Band,
    pub noise_bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: usize,
    /// `28×28×1`, row-major.
    pub image: Vec<f64>,
    /// `64×64` (frequency rows × time columns).
    pub audio: Vec<f64>,
    pub gt_mask: Vec<bool>,
    pub category: usize,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<SynthSample>,
}

/// Visual texture of a category at pixel `(y, x)`, in `[0, 1]`.
pub fn texture(category: usize, y: f64, x: f64) -> f64 {
    let angle = (category % 4) as f64 * std::f64::consts::FRAC_PI_4;
    let period = if (category / 4) % 2 == 0 { 3.0 } else { 6.0 };
    let u = x * angle.cos() + y * angle.sin();
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * u / period).sin()
}

/// First frequency bin of a category's tone band.
pub fn category_band(category: usize) -> usize {
    8 * category + 2
}

pub fn disc_footprint(p: &Placement) -> Vec<bool> {
    let mut m = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dy, dx) = (y as f64 + 0.5 - p.cy, x as f64 + 0.5 - p.cx);
            m[y * IMAGE_SIZE + x] = dy * dy + dx * dx <= p.radius * p.radius;
        }
    }
    m
}

/// Stream seed for sample `i` (splitmix64 of the base seed and index).
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn place<R: Rng>(category: usize, (min_radius, max_radius): (f64, f64), rng: &mut R) -> Placement {
    let radius = rng.random_range(min_radius..=max_radius);
    let lo = radius;
    let hi = IMAGE_SIZE as f64 - radius;
    Placement {
        category,
        cy: rng.random_range(lo..=hi),
        cx: rng.random_range(lo..=hi),
        radius,
    }
}

const MAX_ATTEMPTS: usize = 100;

fn generate_one(cfg: &SynthConfig, id: usize, category: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, id));
    let noise = Normal::new(0.0, 0.05).expect("valid std");

    let with_distractor = rng.random_bool(cfg.distractor_rate);
    let other = (category + rng.random_range(1..cfg.categories)) % cfg.categories;
    // target and distractor are drawn together so a large, central target
    // cannot leave the distractor without room
    let mut placed = None;
    for _ in 0..MAX_ATTEMPTS {
        let target = place(category, (cfg.min_radius, cfg.max_radius), &mut rng);
        let gt_mask = disc_footprint(&target);
        let area = gt_mask.iter().filter(|b| **b).count();
        if !(cfg.min_area..=cfg.max_area).contains(&area) {
            continue;
        }
        if !with_distractor {
            placed = Some((target, gt_mask, Vec::new()));
            break;
        }
        let p = place(other, (cfg.distractor_min_radius, cfg.distractor_max_radius), &mut rng);
        let dist = ((p.cy - target.cy).powi(2) + (p.cx - target.cx).powi(2)).sqrt();
        if dist > p.radius + target.radius + 1.0 {
            placed = Some((target, gt_mask, vec![p]));
            break;
        }
    }
    let (target, gt_mask, distractors) =
        placed.ok_or_else(|| Error::Generation(format!("sample {id}: no valid placement in {MAX_ATTEMPTS} attempts")))?;

    let mut image: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|_| cfg.clutter * rng.random::<f64>() + noise.sample(&mut rng))
        .collect();
    let planted = distractors
        .iter()
        .map(|p| (p, cfg.distractor_contrast))
        .chain(std::iter::once((&target, 1.0)));
    for (p, contrast) in planted {
        for (k, inside) in disc_footprint(p).into_iter().enumerate() {
            if inside {
                let (y, x) = ((k / IMAGE_SIZE) as f64, (k % IMAGE_SIZE) as f64);
                image[k] = contrast * texture(p.category, y, x) + noise.sample(&mut rng);
            }
        }
    }

    let mut audio: Vec<f64> = (0..AUDIO_FREQ * AUDIO_TIME).map(|_| noise.sample(&mut rng)).collect();
    let span = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(24..=48);
        let t0 = rng.random_range(0..=AUDIO_TIME - len);
        (t0, t0 + len)
    };
    let (t0, t1) = span(&mut rng);
    let target_band = Band {
        f0: category_band(category),
        width: BAND_WIDTH,
        t0,
        t1,
    };
    let mut noise_bands = Vec::new();
    if rng.random_bool(cfg.audio_noise_rate) {
        let (t0, t1) = span(&mut rng);
        noise_bands.push(Band {
            f0: rng.random_range(0..=AUDIO_FREQ - BAND_WIDTH),
            width: BAND_WIDTH,
            t0,
            t1,
        });
    }
    for b in &noise_bands {
        for f in b.f0..b.f0 + b.width {
            for t in b.t0..b.t1 {
                audio[f * AUDIO_TIME + t] += rng.random_range(0.2..1.0);
            }
        }
    }
    for f in target_band.f0..target_band.f0 + target_band.width {
        for t in target_band.t0..target_band.t1 {
            audio[f * AUDIO_TIME + t] += 1.0;
        }
    }

    Ok(SynthSample {
        id,
        image,
        audio,
        gt_mask,
        category,
        meta: SampleMeta {
            target,
            distractors,
            target_band,
            noise_bands,
        },
    })
}

/// Generates `cfg.n` samples; categories are balanced and shuffled.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.categories).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_one(cfg, i, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: *cfg, samples })
}

/// Ground-truth localization mask of a sample.
pub fn oracle_mask(sample: &SynthSample) -> &[bool] {
    &sample.gt_mask
}

const ARRAY_MAGIC: &[u8; 4] = b"SSLF";

/// Little-endian f32 array with a 16-byte header: magic, rank (u32), up to
/// four u16 dims (unused dims zero).
pub fn write_array(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 || dims.iter().any(|&d| d == 0 || d > u16::MAX as usize) {
        return Err(Error::Contract(format!("unsupported array dims {dims:?}")));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::dim("write_array", format!("{dims:?}"), data.len()));
    }
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for i in 0..4 {
        buf.extend_from_slice(&(dims.get(i).copied().unwrap_or(0) as u16).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != ARRAY_MAGIC {
        return Err(Error::format(path, "missing array header"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(path, format!("rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(Error::format(path, format!("expected {n} floats, found {} bytes", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((dims, data))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    category: usize,
    #[serde(rename = "mask-file")]
    mask_file: String,
    #[serde(rename = "image-file")]
    image_file: String,
    #[serde(rename = "audio-file")]
    audio_file: String,
    meta: SampleMeta,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.json";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hash over every stored value, bit-exact.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in &self.samples {
            s.id.hash(&mut h);
            s.category.hash(&mut h);
            for v in s.image.iter().chain(&s.audio) {
                v.to_bits().hash(&mut h);
            }
            s.gt_mask.hash(&mut h);
        }
        h.finish()
    }

    /// Writes the manifest, per-sample arrays and PGM masks into `dir`.
    ///
    /// Arrays are stored as f32, so a reloaded dataset equals the original
    /// rounded to single precision.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_vec_pretty(&self.config).map_err(std::io::Error::from)?,
        )?;
        let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
        for s in &self.samples {
            let row = ManifestRow {
                id: s.id,
                category: s.category,
                mask_file: format!("{:05}_mask.pgm", s.id),
                image_file: format!("{:05}_image.f32", s.id),
                audio_file: format!("{:05}_audio.f32", s.id),
                meta: s.meta.clone(),
            };
            write_array(&dir.join(&row.image_file), &[IMAGE_SIZE, IMAGE_SIZE, 1], &s.image)?;
            write_array(&dir.join(&row.audio_file), &[AUDIO_FREQ, AUDIO_TIME], &s.audio)?;
            crate::localization::write_pgm(&dir.join(&row.mask_file), &s.gt_mask, IMAGE_SIZE, IMAGE_SIZE)?;
            serde_json::to_writer(&mut manifest, &row).map_err(std::io::Error::from)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::Missing(manifest_path));
        }
        let cfg_path = dir.join(CONFIG_FILE);
        let config: SynthConfig = serde_json::from_slice(&fs::read(&cfg_path)?)
            .map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let mut samples = Vec::new();
        for (ln, line) in BufReader::new(fs::File::open(&manifest_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line)
                .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", ln + 1)))?;
            let (idims, image) = read_array(&dir.join(&row.image_file))?;
            let (adims, audio) = read_array(&dir.join(&row.audio_file))?;
            if idims != [IMAGE_SIZE, IMAGE_SIZE, 1] || adims != [AUDIO_FREQ, AUDIO_TIME] {
                return Err(Error::format(dir, format!("sample {} has dims {idims:?} / {adims:?}", row.id)));
            }
            let (gt_mask, h, w) = crate::localization::read_pgm(&dir.join(&row.mask_file))?;
            if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) {
                return Err(Error::format(dir, format!("mask of sample {} is {h}x{w}", row.id)));
            }
            samples.push(SynthSample {
                id: row.id,
                image,
                audio,
                gt_mask,
                category: row.category,
                meta: row.meta,
            });
        }
        Ok(Dataset { config, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n: 40,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_regime_has_only_target_content() {
        let cfg = SynthConfig {
            distractor_rate: 0.0,
            audio_noise_rate: 0.0,
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        for s in &ds.samples {
            assert!(s.meta.distractors.is_empty() && s.meta.noise_bands.is_empty());
            assert_eq!(oracle_mask(s), disc_footprint(&s.meta.target).as_slice());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), generate(&small(6)).unwrap().fingerprint());
    }

    #[test]
    fn distractors_stay_off_the_mask() {
        let cfg = SynthConfig {
            distractor_rate: 1.0,
            ..small(2)
        };
        for s in &generate(&cfg).unwrap().samples {
            assert_eq!(s.meta.distractors.len(), 1);
            let d = disc_footprint(&s.meta.distractors[0]);
            assert!(d.iter().zip(&s.gt_mask).all(|(a, b)| !(*a && *b)));
            assert_ne!(s.meta.distractors[0].category, s.category);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { categories: 1, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { n: 3, ..small(0) }).is_err());
        let impossible = SynthConfig {
            min_area: 500,
            max_area: 600,
            ..small(0)
        };
        assert!(matches!(generate(&impossible), Err(Error::Generation(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = generate(&SynthConfig { n: 10, ..small(3) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.gt_mask, b.gt_mask);
            assert_eq!(a.meta, b.meta);
            for (x, y) in a.image.iter().zip(&b.image) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let bytes = fs::read(dir.path().join("00000_image.f32")).unwrap();
        assert_eq!(&bytes[..4], b"SSLF");
        assert_eq!(bytes.len(), 16 + 4 * 784);
    }
}
