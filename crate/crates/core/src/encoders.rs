//! Patch encoders for images and spectrograms, and learnable mask tokens.
//!
//! Both encoders share one shape: split the raw input into non-overlapping
//! patches, project each patch, apply ReLU, project again to `c` channels.
//! The audio encoder works on frequency×time patches, adds a learned
//! embedding per frequency band, and max-pools over the frequency axis so it
//! emits one feature row per temporal patch.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Linear, ParamId, ParamStore, Shape, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => f.write_str("image"),
            Modality::Audio => f.write_str("audio"),
        }
    }
}

/// Spatial (`h·w × c`) or temporal (`t × c`) features on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid {
    pub data: Var,
    pub modality: Modality,
    /// `h` for images, `t` for audio.
    pub height: usize,
    /// `w` for images, 1 for audio.
    pub width: usize,
    pub channels: usize,
}

impl FeatureGrid {
    pub fn new(tape: &Tape, data: Var, modality: Modality, height: usize, width: usize) -> Result<Self> {
        let s = tape.shape(data);
        if s.rows != height * width {
            return Err(Error::dim("feature_grid", s, format!("{height}x{width} positions")));
        }
        if modality == Modality::Audio && width != 1 {
            return Err(Error::Contract("audio grids are one position wide".into()));
        }
        Ok(FeatureGrid {
            data,
            modality,
            height,
            width,
            channels: s.cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.height * self.width
    }

    fn with_data(&self, data: Var) -> Self {
        FeatureGrid { data, ..*self }
    }
}

/// Input geometry and widths shared by the two encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub image_size: usize,
    pub image_channels: usize,
    pub image_patch: usize,
    pub audio_freq: usize,
    pub audio_time: usize,
    pub freq_patch: usize,
    pub time_patch: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            image_size: 28,
            image_channels: 1,
            image_patch: 4,
            audio_freq: 64,
            audio_time: 64,
            freq_patch: 8,
            time_patch: 4,
            hidden: 32,
            channels: 32,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.image_patch, self.image_size, "image_size / image_patch"),
            (self.freq_patch, self.audio_freq, "audio_freq / freq_patch"),
            (self.time_patch, self.audio_time, "audio_time / time_patch"),
        ];
        for (patch, extent, what) in checks {
            if patch == 0 || extent % patch != 0 {
                return Err(Error::Config(format!("{what} is not a whole number ({extent} / {patch})")));
            }
        }
        if self.channels < 2 || self.hidden == 0 || self.image_channels == 0 {
            return Err(Error::Config("encoder widths must be positive (channels ≥ 2)".into()));
        }
        Ok(())
    }

    /// Feature-map side `h = w`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.image_patch
    }

    /// Temporal length `t` of audio features.
    pub fn audio_len(&self) -> usize {
        self.audio_time / self.time_patch
    }

    pub fn freq_bands(&self) -> usize {
        self.audio_freq / self.freq_patch
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageEncoder {
    pub proj1: Linear,
    pub proj2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AudioEncoder {
    pub proj1: Linear,
    pub band_embed: ParamId,
    pub proj2: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &EncoderDims, rng: &mut R) -> Result<Self> {
        let patch_len = dims.image_patch * dims.image_patch * dims.image_channels;
        Ok(ImageEncoder {
            proj1: Linear::new(store, "enc_image.proj1", patch_len, dims.hidden, rng)?,
            proj2: Linear::new(store, "enc_image.proj2", dims.hidden, dims.channels, rng)?,
        })
    }
}

impl AudioEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &EncoderDims, rng: &mut R) -> Result<Self> {
        let patch_len = dims.freq_patch * dims.time_patch;
        Ok(AudioEncoder {
            proj1: Linear::new(store, "enc_audio.proj1", patch_len, dims.hidden, rng)?,
            band_embed: store.normal_init(
                "enc_audio.band_embed",
                Shape::new(dims.freq_bands(), dims.hidden),
                0.5,
                rng,
            )?,
            proj2: Linear::new(store, "enc_audio.proj2", dims.hidden, dims.channels, rng)?,
        })
    }
}

/// Rows of `patch×patch×ch` pixels in row-major patch order. `raw` is `H×W×ch`.
pub fn patchify_image(raw: &[f64], size: usize, channels: usize, patch: usize) -> Result<Vec<f64>> {
    if raw.len() != size * size * channels {
        return Err(Error::dim("encode_image", format!("{} values", raw.len()), format!("{size}x{size}x{channels}")));
    }
    if patch == 0 || size % patch != 0 {
        return Err(Error::Config(format!("image size {size} not divisible by patch {patch}")));
    }
    let side = size / patch;
    let mut out = Vec::with_capacity(raw.len());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..patch {
                let y = py * patch + dy;
                for dx in 0..patch {
                    let x = px * patch + dx;
                    let base = (y * size + x) * channels;
                    out.extend_from_slice(&raw[base..base + channels]);
                }
            }
        }
    }
    Ok(out)
}

/// Rows of `fp×tp` spectrogram patches, band-major: row `b·t + j` holds
/// frequency band `b`, temporal patch `j`. `raw` is `F×T` row-major.
pub fn patchify_audio(raw: &[f64], freq: usize, time: usize, fp: usize, tp: usize) -> Result<Vec<f64>> {
    if raw.len() != freq * time {
        return Err(Error::dim("encode_audio", format!("{} values", raw.len()), format!("{freq}x{time}")));
    }
    if fp == 0 || tp == 0 || freq % fp != 0 || time % tp != 0 {
        return Err(Error::Config(format!(
            "spectrogram {freq}x{time} not divisible by patch {fp}x{tp}"
        )));
    }
    let (bands, steps) = (freq / fp, time / tp);
    let mut out = Vec::with_capacity(raw.len());
    for b in 0..bands {
        for j in 0..steps {
            for df in 0..fp {
                let row = &raw[(b * fp + df) * time..(b * fp + df + 1) * time];
                out.extend_from_slice(&row[j * tp..(j + 1) * tp]);
            }
        }
    }
    Ok(out)
}

/// Encodes an `H×W×ch` image into an `h·w × c` grid.
pub fn encode_image(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &ImageEncoder,
    dims: &EncoderDims,
    raw: &[f64],
) -> Result<FeatureGrid> {
    let rows = patchify_image(raw, dims.image_size, dims.image_channels, dims.image_patch)?;
    let side = dims.grid_side();
    let patch_len = dims.image_patch * dims.image_patch * dims.image_channels;
    let x = tape.constant(Shape::new(side * side, patch_len), rows)?;
    let l1 = enc.proj1.bind(tape, store);
    let l2 = enc.proj2.bind(tape, store);
    let h = l1.forward(tape, x)?;
    let h = tape.relu(h);
    let y = l2.forward(tape, h)?;
    FeatureGrid::new(tape, y, Modality::Image, side, side)
}

/// Pre-pool audio activations, `(bands·t) × c`, band-major.
pub fn audio_band_features(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &AudioEncoder,
    dims: &EncoderDims,
    raw: &[f64],
) -> Result<Var> {
    let rows = patchify_audio(raw, dims.audio_freq, dims.audio_time, dims.freq_patch, dims.time_patch)?;
    let (bands, steps) = (dims.freq_bands(), dims.audio_len());
    let x = tape.constant(Shape::new(bands * steps, dims.freq_patch * dims.time_patch), rows)?;
    let l1 = enc.proj1.bind(tape, store);
    let l2 = enc.proj2.bind(tape, store);
    let embed = tape.param(store, enc.band_embed);
    // one-hot band selector expands the per-band embedding to every patch row
    let mut select = vec![0.0; bands * steps * bands];
    for b in 0..bands {
        for j in 0..steps {
            select[(b * steps + j) * bands + b] = 1.0;
        }
    }
    let select = tape.constant(Shape::new(bands * steps, bands), select)?;
    let expanded = tape.matmul(select, embed)?;
    let h = l1.forward(tape, x)?;
    let h = tape.add(h, expanded)?;
    let h = tape.relu(h);
    l2.forward(tape, h)
}

/// Encodes an `F×T` spectrogram into a `t × c` grid (frequency max-pooled).
pub fn encode_audio(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &AudioEncoder,
    dims: &EncoderDims,
    raw: &[f64],
) -> Result<FeatureGrid> {
    let per_band = audio_band_features(tape, store, enc, dims, raw)?;
    let pooled = tape.max_pool_row_groups(per_band, dims.freq_bands())?;
    FeatureGrid::new(tape, pooled, Modality::Audio, dims.audio_len(), 1)
}

/// Learnable replacement rows for one modality.
#[derive(Debug, Clone, Copy)]
pub struct MaskToken {
    pub token: ParamId,
    pub ratio: f64,
}

impl MaskToken {
    pub fn new(store: &mut ParamStore, modality: Modality, channels: usize, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(MaskToken {
            token: store.zeros(format!("mask_token.{modality}"), Shape::new(1, channels))?,
            ratio,
        })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Number of rows replaced at `ratio`.
pub fn masked_count(ratio: f64, rows: usize) -> usize {
    (ratio * rows as f64).floor() as usize
}

/// Draws `count` distinct row indices by a partial Fisher–Yates shuffle, sorted.
pub fn sample_mask_rows<R: Rng>(rows: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows).collect();
    for i in 0..count.min(rows) {
        let j = rng.random_range(i..rows);
        idx.swap(i, j);
    }
    idx.truncate(count.min(rows));
    idx.sort_unstable();
    idx
}

/// Replaces `⌊ratio·rows⌋` uniformly chosen rows with the modality's token.
/// A zero count returns the input grid untouched.
pub fn apply_mask_tokens<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    grid: &FeatureGrid,
    mask: &MaskToken,
    rng: &mut R,
) -> Result<(FeatureGrid, Vec<usize>)> {
    check_ratio(mask.ratio)?;
    let count = masked_count(mask.ratio, grid.rows());
    if count == 0 {
        return Ok((*grid, Vec::new()));
    }
    let rows = sample_mask_rows(grid.rows(), count, rng);
    let token = tape.param(store, mask.token);
    let data = tape.replace_rows(grid.data, token, &rows)?;
    Ok((grid.with_data(data), rows))
}
