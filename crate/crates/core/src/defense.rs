//! Filter-based input defenses: JPEG quantization and bit-depth reduction.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frequency::{rgb_to_ycbcr, ycbcr_to_rgb, Dct2, BLOCK, BLOCK_AREA};
use crate::tensor::{ImageTensor, Real};

/// IJG base luminance table, row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG base chrominance table, row-major.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling: `5000/q` below 50, `200 − 2q` otherwise, entries
/// clamped to `[1, 255]`.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// Quantization round trip of a baseline JPEG codec without chroma
/// subsampling or entropy coding, on the 8-bit scale with the usual level
/// shift. Output is clamped to `[0, 1]`.
pub fn jpeg_compress<T: Real>(x: &ImageTensor<T>, quality: u8) -> Result<ImageTensor<T>> {
    let tables = [
        scaled_table(&LUMA_TABLE, quality)?,
        scaled_table(&CHROMA_TABLE, quality)?,
        scaled_table(&CHROMA_TABLE, quality)?,
    ];
    let (h, w) = (x.height(), x.width());
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::shape(format!("{h}x{w} is not a multiple of {BLOCK}")));
    }
    let mut ycc = rgb_to_ycbcr(x)?;
    let dct = Dct2::<T>::new(BLOCK, BLOCK);
    let full = T::lit(255.0);
    let shift = [T::lit(128.0), T::zero(), T::zero()];
    for b in 0..ycc.batch() {
        for (c, table) in tables.iter().enumerate() {
            let plane = ycc.plane_mut(b, c);
            for by in (0..h).step_by(BLOCK) {
                for bx in (0..w).step_by(BLOCK) {
                    let mut blk = [T::zero(); BLOCK_AREA];
                    for r in 0..BLOCK {
                        for k in 0..BLOCK {
                            blk[r * BLOCK + k] = plane[(by + r) * w + bx + k] * full - shift[c];
                        }
                    }
                    let mut coeffs = dct.forward(&blk);
                    for (v, &q) in coeffs.iter_mut().zip(table) {
                        let q = T::lit(q as f64);
                        // Float::round is half away from zero
                        *v = (*v / q).round() * q;
                    }
                    let spatial = dct.inverse(&coeffs);
                    for r in 0..BLOCK {
                        for k in 0..BLOCK {
                            plane[(by + r) * w + bx + k] = (spatial[r * BLOCK + k] + shift[c]) / full;
                        }
                    }
                }
            }
        }
    }
    Ok(ycbcr_to_rgb(&ycc)?.clamp01())
}

/// `round(x·(2^bits − 1)) / (2^bits − 1)`, rounding half away from zero.
pub fn bit_depth_reduce<T: Real>(x: &ImageTensor<T>, bits: u8) -> Result<ImageTensor<T>> {
    if !(1..=8).contains(&bits) {
        return Err(Error::config(format!("bit depth {bits} outside [1, 8]")));
    }
    let levels = T::lit(((1u32 << bits) - 1) as f64);
    Ok(x.map(|v| ((v * levels).round() / levels).max(T::zero()).min(T::one())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DefenseKind {
    #[default]
    None,
    Jpeg,
    BitDepth,
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "" | "none" => Ok(DefenseKind::None),
            "jpeg" => Ok(DefenseKind::Jpeg),
            "bitdepth" | "bit-depth" | "bit_depth" => Ok(DefenseKind::BitDepth),
            other => Err(Error::config(format!("unknown defense {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub quality: u8,
    pub bits: u8,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            quality: 75,
            bits: 3,
        }
    }
}

impl DefenseConfig {
    pub fn jpeg(quality: u8) -> Self {
        Self {
            kind: DefenseKind::Jpeg,
            quality,
            ..Self::default()
        }
    }

    pub fn bit_depth(bits: u8) -> Self {
        Self {
            kind: DefenseKind::BitDepth,
            bits,
            ..Self::default()
        }
    }

    pub fn apply<T: Real>(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        match self.kind {
            DefenseKind::None => Ok(x.clone()),
            DefenseKind::Jpeg => jpeg_compress(x, self.quality),
            DefenseKind::BitDepth => bit_depth_reduce(x, self.bits),
        }
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DefenseKind::None => f.write_str("none"),
            DefenseKind::Jpeg => write!(f, "jpeg{}", self.quality),
            DefenseKind::BitDepth => write!(f, "bitdepth{}", self.bits),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ColorSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quality_75_scaling() {
        let t = scaled_table(&LUMA_TABLE, 75).unwrap();
        assert_eq!(t[0], 8);
        assert_eq!(scaled_table(&CHROMA_TABLE, 75).unwrap()[0], 9);
        assert_eq!(scaled_table(&LUMA_TABLE, 100).unwrap(), [1; 64]);
        assert_eq!(scaled_table(&LUMA_TABLE, 1).unwrap()[0], 255);
        assert_eq!(scaled_table(&LUMA_TABLE, 50).unwrap(), LUMA_TABLE);
        assert!(jpeg_compress(&ImageTensor::<f32>::zeros([1, 3, 8, 8], ColorSpace::Rgb), 0).is_err());
        assert!(jpeg_compress(&ImageTensor::<f32>::zeros([1, 3, 8, 8], ColorSpace::Rgb), 101).is_err());
    }

    #[test]
    fn constant_gray_survives() {
        for level in [0.0f64, 0.13, 0.5, 0.77, 1.0] {
            let x = ImageTensor::filled([1, 3, 16, 16], level, ColorSpace::Rgb);
            let y = jpeg_compress(&x, 75).unwrap();
            assert!(y.zip_map(&x, |a, b| a - b).unwrap().max_abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn constant_color_error_is_bounded_by_dc_steps() {
        // luma DC step 8 and chroma DC step 9 on an 8×8 block move a pixel by
        // at most 0.5 and 0.5625 levels; the largest inverse color gain is 1.772
        let bound = (0.5 + 1.772 * 0.5625) / 255.0 + 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rgb: [f64; 3] = std::array::from_fn(|_| rng.gen());
            let mut x = ImageTensor::zeros([1, 3, 8, 8], ColorSpace::Rgb);
            for c in 0..3 {
                x.plane_mut(0, c).iter_mut().for_each(|v| *v = rgb[c]);
            }
            let y = jpeg_compress(&x, 75).unwrap();
            assert!(y.zip_map(&x, |a, b| a - b).unwrap().max_abs() <= bound);
        }
    }

    #[test]
    fn bit_depth_examples() {
        let x = ImageTensor::new([1, 3, 1, 1], vec![0.0f32, 1.0, 0.5], ColorSpace::Rgb).unwrap();
        let y = bit_depth_reduce(&x, 3).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
        assert!((y.data()[2] - 4.0 / 7.0).abs() < 1e-7);

        let grid: Vec<f32> = (0..=255).map(|k| k as f32 / 255.0).collect();
        let mut data = grid.clone();
        data.extend(&grid);
        data.extend(&grid);
        let g = ImageTensor::new([1, 3, 16, 16], data, ColorSpace::Rgb).unwrap();
        assert_eq!(bit_depth_reduce(&g, 8).unwrap(), g);
        assert!(bit_depth_reduce(&g, 0).is_err());
        assert!(bit_depth_reduce(&g, 9).is_err());
    }

    #[test]
    fn bit_depth_level_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ImageTensor::new([2, 3, 8, 8], (0..384).map(|_| rng.gen::<f64>()).collect(), ColorSpace::Rgb).unwrap();
        for bits in 1..=4u8 {
            let y = bit_depth_reduce(&x, bits).unwrap();
            for b in 0..2 {
                for c in 0..3 {
                    let mut vals: Vec<u64> = y.plane(b, c).iter().map(|v| v.to_bits()).collect();
                    vals.sort_unstable();
                    vals.dedup();
                    assert!(vals.len() <= 1 << bits);
                }
            }
            assert_eq!(bit_depth_reduce(&y, bits).unwrap(), y);
        }
    }

    #[test]
    fn defense_parsing() {
        assert_eq!("JPEG".parse::<DefenseKind>().unwrap(), DefenseKind::Jpeg);
        assert_eq!("none".parse::<DefenseKind>().unwrap(), DefenseKind::None);
        assert!("blur".parse::<DefenseKind>().is_err());
        assert_eq!(DefenseConfig::jpeg(75).to_string(), "jpeg75");
        assert_eq!(DefenseConfig::default().to_string(), "none");
    }
}
