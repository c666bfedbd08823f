//! Binary PPM (P6) export.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Real};

/// Encodes one RGB sample with values in `[0, 1]` as an 8-bit P6 image.
pub fn encode_ppm<T: Real>(x: &ImageTensor<T>, b: usize) -> Result<Vec<u8>> {
    if x.channels() != 3 || b >= x.batch() {
        return Err(Error::shape(format!("cannot export sample {b} of a {:?} tensor", x.shape())));
    }
    let (h, w) = (x.height(), x.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let planes = [x.plane(b, 0), x.plane(b, 1), x.plane(b, 2)];
    for i in 0..h * w {
        for p in &planes {
            out.push((p[i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Shifts and scales sample `b` so its minimum maps to 0 and its maximum
/// to 1. A constant sample maps to mid-gray.
pub fn normalize_sample<T: Real>(x: &ImageTensor<T>, b: usize) -> ImageTensor<T> {
    let s = x.sample(b);
    let lo = s.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
    let hi = s.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let data = s
        .iter()
        .map(|v| T::lit(if hi > lo { (v.as_f64() - lo) / (hi - lo) } else { 0.5 }))
        .collect();
    ImageTensor::new([1, x.channels(), x.height(), x.width()], data, x.color_space()).expect("shape preserved")
}

/// Writes the normalized perturbation of sample `b`.
pub fn write_perturbation_ppm<T: Real>(delta: &ImageTensor<T>, b: usize, path: &Path) -> Result<()> {
    let bytes = encode_ppm(&normalize_sample(delta, b), 0)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ColorSpace;

    #[test]
    fn header_and_pixels() {
        let x = ImageTensor::new([1, 3, 1, 2], vec![0.0f32, 1.0, 1.0, 0.5, 0.0, 0.0], ColorSpace::Rgb).unwrap();
        let bytes = encode_ppm(&x, 0).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 0, 255, 128, 0]);
    }

    #[test]
    fn normalization_spans_full_range() {
        let d = ImageTensor::new([1, 3, 1, 2], vec![-0.03f32, 0.01, 0.0, 0.03, 0.02, -0.01], ColorSpace::Rgb).unwrap();
        let n = normalize_sample(&d, 0);
        let bytes = encode_ppm(&n, 0).unwrap();
        let px = &bytes[11..];
        assert_eq!(*px.iter().min().unwrap(), 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
        let flat = normalize_sample(&ImageTensor::<f32>::zeros([1, 3, 2, 2], ColorSpace::Rgb), 0);
        assert!(flat.data().iter().all(|&v| v == 0.5));
    }
}
