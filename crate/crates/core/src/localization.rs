//! Inference-time localization: cross-modal attention, image-query
//! refinement, bilinear upsampling and thresholding, plus PGM/CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::jsa::{attention_maps, target_attention, AttentionMaps};

/// Attention of the target queries of one modality over the keys of the
/// other: maps computed as in slot attention, plus the target column.
pub fn cross_modal_attention(tape: &mut Tape, query: Var, keys: Var, n_target: usize) -> Result<(AttentionMaps, Var)> {
    let maps = attention_maps(tape, keys, query)?;
    let ca = target_attention(tape, maps.a_hat, n_target)?;
    Ok((maps, ca))
}

/// `α·ca + (1 − α)·ia`, element-wise.
pub fn refine_iqr(ca: &[f64], ia: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if ca.len() != ia.len() {
        return Err(Error::dim("refine_iqr", ca.len(), ia.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(ca.to_vec());
    }
    if alpha == 0.0 {
        return Ok(ia.to_vec());
    }
    Ok(ca.iter().zip(ia).map(|(c, i)| alpha * c + (1.0 - alpha) * i).collect())
}

/// Bilinear resize of a row-major `h×w` map to `out_h×out_w` with half-pixel
/// centres (corners not aligned); samples outside the source clamp to the edge.
pub fn bilinear_upsample(heat: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if heat.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim("upsample", heat.len(), format!("{h}x{w}")));
    }
    if out_h < h || out_w < w {
        return Err(Error::Config(format!("cannot upsample {h}x{w} to {out_h}x{out_w}")));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            let top = heat[y0 * w + x0] * (1.0 - fx) + heat[y0 * w + x1] * fx;
            let bottom = heat[y1 * w + x0] * (1.0 - fx) + heat[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// How the binarization threshold θ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThetaPolicy {
    /// Mean plus one standard deviation of the upsampled map.
    Adaptive,
    Fixed(f64),
}

impl ThetaPolicy {
    pub fn resolve(&self, map: &[f64]) -> f64 {
        match *self {
            ThetaPolicy::Fixed(t) => t,
            ThetaPolicy::Adaptive => {
                let n = map.len() as f64;
                let mean = map.iter().sum::<f64>() / n;
                let var = map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                mean + var.sqrt()
            }
        }
    }
}

impl std::str::FromStr for ThetaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(ThetaPolicy::Adaptive);
        }
        s.parse::<f64>()
            .map(ThetaPolicy::Fixed)
            .map_err(|_| Error::Config(format!("theta must be 'adaptive' or a number, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub heat: Vec<f64>,
    pub heat_h: usize,
    pub heat_w: usize,
    pub upsampled: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub theta: f64,
    pub alpha: f64,
}

impl LocalizationMap {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Upsamples `heat` and keeps pixels strictly above θ.
pub fn upsample_and_threshold(
    heat: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    theta: ThetaPolicy,
) -> Result<LocalizationMap> {
    let upsampled = bilinear_upsample(heat, h, w, out_h, out_w)?;
    let t = theta.resolve(&upsampled);
    let (lo, hi) = upsampled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if t >= hi || t < lo {
        log::debug!("theta {t} outside map range [{lo}, {hi}]");
    }
    let mask = upsampled.iter().map(|&v| v > t).collect();
    Ok(LocalizationMap {
        heat: heat.to_vec(),
        heat_h: h,
        heat_w: w,
        upsampled,
        height: out_h,
        width: out_w,
        mask,
        theta: t,
        alpha: f64::NAN,
    })
}

/// Binary mask as 8-bit PGM (P5), 255 for foreground.
pub fn write_pgm(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::dim("write_pgm", mask.len(), format!("{height}x{width}")));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(mask.iter().map(|&m| if m { 255u8 } else { 0u8 }));
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary P5 mask written by [`write_pgm`]; nonzero pixels are foreground.
pub fn read_pgm(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported")));
    }
    let data = bytes.get(pos..pos + width * height).ok_or_else(|| Error::format(path, "short pixel data"))?;
    Ok((data.iter().map(|&b| b != 0).collect(), height, width))
}

/// Row-major CSV of a float map, one image row per line.
pub fn write_heat_csv(path: &Path, heat: &[f64], height: usize, width: usize) -> Result<()> {
    if heat.len() != height * width {
        return Err(Error::dim("write_heat_csv", heat.len(), format!("{height}x{width}")));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for row in heat.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::diffcore::Shape;

    use super::*;

    #[test]
    fn iqr_endpoints_and_blend() {
        let ca = [0.8, 0.2];
        let ia = [0.2, 0.8];
        assert_eq!(refine_iqr(&ca, &ia, 1.0).unwrap(), ca.to_vec());
        assert_eq!(refine_iqr(&ca, &ia, 0.0).unwrap(), ia.to_vec());
        let r = refine_iqr(&ca, &ia, 0.6).unwrap();
        assert!((r[0] - 0.56).abs() < 1e-15 && (r[1] - 0.44).abs() < 1e-15);
        assert!(refine_iqr(&ca, &[1.0], 0.5).is_err());
    }

    #[test]
    fn constant_heat_thresholds() {
        let heat = vec![0.25; 4];
        let m = upsample_and_threshold(&heat, 2, 2, 8, 8, ThetaPolicy::Fixed(0.2)).unwrap();
        assert!(m.mask.iter().all(|&b| b));
        let m = upsample_and_threshold(&heat, 2, 2, 8, 8, ThetaPolicy::Fixed(0.25)).unwrap();
        assert!(m.mask.iter().all(|&b| !b));
    }

    #[test]
    fn theta_parsing() {
        assert_eq!("adaptive".parse::<ThetaPolicy>().unwrap(), ThetaPolicy::Adaptive);
        assert_eq!("0.5".parse::<ThetaPolicy>().unwrap(), ThetaPolicy::Fixed(0.5));
        assert!("high".parse::<ThetaPolicy>().is_err());
    }

    #[test]
    fn identical_queries_give_uniform_ca() {
        let mut tape = Tape::new();
        let keys: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let k = tape.constant(Shape::new(4, 3), keys).unwrap();
        let q = tape.constant(Shape::new(2, 3), vec![0.3, -0.2, 0.9, 0.3, -0.2, 0.9]).unwrap();
        let (_, ca) = cross_modal_attention(&mut tape, q, k, 1).unwrap();
        for v in tape.value(ca) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        write_pgm(&p, &mask, 3, 4).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0 || b == 255));
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((back, h, w), (mask, 3, 4));
    }
}
