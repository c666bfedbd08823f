//! Losslessly invertible frequency decomposition.
//!
//! RGB → YCbCr → DCT → 8×8 blocks → mask → merge → IDCT → RGB. Every stage is
//! linear, so for a fixed mask the whole map `K(·; Q)` is linear and its
//! adjoint is assembled from the transposed color matrices and the inverse
//! of the orthonormal DCT.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{ColorSpace, ImageTensor, Real};

/// Side length of a coefficient block.
pub const BLOCK: usize = 8;
/// Entries per coefficient block.
pub const BLOCK_AREA: usize = BLOCK * BLOCK;

/// Color channel index in YCbCr order.
pub const Y: usize = 0;
pub const CB: usize = 1;
pub const CR: usize = 2;

/// One 8×8 block in row-major order.
pub type Block<T> = [T; BLOCK_AREA];

/// Full-range BT.601 forward matrix with centered chroma.
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of (j, i)
            let (r0, r1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    inv
}

fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Exact inverse of [`RGB_TO_YCBCR`].
pub fn ycbcr_to_rgb_matrix() -> [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    *INV.get_or_init(|| invert3(&RGB_TO_YCBCR))
}

fn apply_color<T: Real>(img: &ImageTensor<T>, m: &[[f64; 3]; 3]) -> Result<ImageTensor<T>> {
    if img.channels() != 3 {
        return Err(Error::shape(format!(
            "color transform needs 3 channels, got {}",
            img.channels()
        )));
    }
    let m: Vec<T> = m.iter().flatten().map(|&v| T::lit(v)).collect();
    let mut out = ImageTensor::zeros(img.shape(), img.color_space());
    let p = img.plane_len();
    for b in 0..img.batch() {
        let src = img.sample(b);
        let dst = out.sample_mut(b);
        for i in 0..p {
            let (a0, a1, a2) = (src[i], src[p + i], src[2 * p + i]);
            for c in 0..3 {
                dst[c * p + i] = m[3 * c] * a0 + m[3 * c + 1] * a1 + m[3 * c + 2] * a2;
            }
        }
    }
    Ok(out)
}

pub fn rgb_to_ycbcr<T: Real>(img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if img.color_space() != ColorSpace::Rgb {
        return Err(Error::shape("rgb_to_ycbcr expects an RGB tensor"));
    }
    let mut out = apply_color(img, &RGB_TO_YCBCR)?;
    out.set_color_space(ColorSpace::YCbCr);
    Ok(out)
}

pub fn ycbcr_to_rgb<T: Real>(img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if img.color_space() != ColorSpace::YCbCr {
        return Err(Error::shape("ycbcr_to_rgb expects a YCbCr tensor"));
    }
    let mut out = apply_color(img, &ycbcr_to_rgb_matrix())?;
    out.set_color_space(ColorSpace::Rgb);
    Ok(out)
}

/// Orthonormal DCT-II basis, `basis[k * n + i] = s(k)·cos(π(2i+1)k / 2n)`.
fn dct_basis_f64(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| {
            let nf = n as f64;
            let mut basis = vec![0.0; n * n];
            for k in 0..n {
                let s = if k == 0 {
                    (1.0 / nf).sqrt()
                } else {
                    (2.0 / nf).sqrt()
                };
                for i in 0..n {
                    basis[k * n + i] = s
                        * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
                }
            }
            Arc::new(basis)
        })
        .clone()
}

/// Separable 2D DCT over planes of a fixed size.
#[derive(Debug, Clone)]
pub struct Dct2<T> {
    height: usize,
    width: usize,
    rows: Vec<T>,
    cols: Vec<T>,
}

impl<T: Real> Dct2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let conv = |n| dct_basis_f64(n).iter().map(|&v| T::lit(v)).collect();
        Self {
            height,
            width,
            rows: conv(height),
            cols: conv(width),
        }
    }

    /// `A_h · X · A_wᵀ`
    pub fn forward(&self, plane: &[T]) -> Vec<T> {
        self.transform(plane, false)
    }

    /// `A_hᵀ · C · A_w`
    pub fn inverse(&self, coeffs: &[T]) -> Vec<T> {
        self.transform(coeffs, true)
    }

    fn transform(&self, src: &[T], inverse: bool) -> Vec<T> {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(src.len(), h * w);
        // along rows of each line (width axis)
        let mut tmp = vec![T::zero(); h * w];
        for r in 0..h {
            let line = &src[r * w..(r + 1) * w];
            let out = &mut tmp[r * w..(r + 1) * w];
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (i, &v) in line.iter().enumerate() {
                    let b = if inverse {
                        self.cols[i * w + k]
                    } else {
                        self.cols[k * w + i]
                    };
                    acc += b * v;
                }
                *o = acc;
            }
        }
        // along columns (height axis)
        let mut out = vec![T::zero(); h * w];
        for k in 0..h {
            let dst = &mut out[k * w..(k + 1) * w];
            for i in 0..h {
                let b = if inverse {
                    self.rows[i * h + k]
                } else {
                    self.rows[k * h + i]
                };
                let row = &tmp[i * w..(i + 1) * w];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += b * v;
                }
            }
        }
        out
    }
}

/// Orthonormal type-II DCT of an `h × w` plane.
pub fn dct2<T: Real>(plane: &[T], height: usize, width: usize) -> Result<Vec<T>> {
    check_plane(plane, height, width)?;
    Ok(Dct2::new(height, width).forward(plane))
}

/// Inverse (type-III) of [`dct2`].
pub fn idct2<T: Real>(coeffs: &[T], height: usize, width: usize) -> Result<Vec<T>> {
    check_plane(coeffs, height, width)?;
    Ok(Dct2::new(height, width).inverse(coeffs))
}

fn check_plane<T>(plane: &[T], height: usize, width: usize) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::shape(format!(
            "plane of {} values is not {height}x{width}",
            plane.len()
        )));
    }
    Ok(())
}

fn check_blockable(height: usize, width: usize) -> Result<()> {
    if height % BLOCK != 0 || width % BLOCK != 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "{height}x{width} is not a positive multiple of {BLOCK}"
        )));
    }
    Ok(())
}

/// Splits a plane into row-major 8×8 tiles: tile `(i, j)` covers rows
/// `8i..8i+7` and columns `8j..8j+7` and lands at index `i·(w/8) + j`.
pub fn blockify<T: Copy + Default>(plane: &[T], height: usize, width: usize) -> Result<Vec<Block<T>>> {
    check_blockable(height, width)?;
    check_plane(plane, height, width)?;
    let (bh, bw) = (height / BLOCK, width / BLOCK);
    let mut blocks = vec![[T::default(); BLOCK_AREA]; bh * bw];
    for (idx, block) in blocks.iter_mut().enumerate() {
        let (ti, tj) = (idx / bw, idx % bw);
        for r in 0..BLOCK {
            let src = (ti * BLOCK + r) * width + tj * BLOCK;
            block[r * BLOCK..(r + 1) * BLOCK].copy_from_slice(&plane[src..src + BLOCK]);
        }
    }
    Ok(blocks)
}

/// Inverse of [`blockify`].
pub fn block_merge<T: Copy + Default>(blocks: &[Block<T>], height: usize, width: usize) -> Result<Vec<T>> {
    check_blockable(height, width)?;
    let (bh, bw) = (height / BLOCK, width / BLOCK);
    if blocks.len() != bh * bw {
        return Err(Error::shape(format!(
            "{} blocks cannot tile {height}x{width}",
            blocks.len()
        )));
    }
    let mut plane = vec![T::default(); height * width];
    for (idx, block) in blocks.iter().enumerate() {
        let (ti, tj) = (idx / bw, idx % bw);
        for r in 0..BLOCK {
            let dst = (ti * BLOCK + r) * width + tj * BLOCK;
            plane[dst..dst + BLOCK].copy_from_slice(&block[r * BLOCK..(r + 1) * BLOCK]);
        }
    }
    Ok(plane)
}

/// Order of the DCT and tiling stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransformMode {
    /// DCT over the whole plane, then tile the coefficient plane.
    #[default]
    GlobalDct,
    /// Tile first, then DCT each 8×8 tile (JPEG order).
    BlockDct,
}

/// Coefficient blocks laid out as `(B, C, H·W/64, 8, 8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffBlocks<T> {
    batch: usize,
    channels: usize,
    origin_dims: (usize, usize),
    data: Vec<Block<T>>,
}

impl<T: Real> CoeffBlocks<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn origin_dims(&self) -> (usize, usize) {
        self.origin_dims
    }

    pub fn blocks_per_channel(&self) -> usize {
        self.origin_dims.0 * self.origin_dims.1 / BLOCK_AREA
    }

    pub fn blocks(&self, b: usize, c: usize) -> &[Block<T>] {
        let n = self.blocks_per_channel();
        let start = (b * self.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn blocks_mut(&mut self, b: usize, c: usize) -> &mut [Block<T>] {
        let n = self.blocks_per_channel();
        let start = (b * self.channels + c) * n;
        &mut self.data[start..start + n]
    }

    /// Sum of squared coefficients of one channel of one sample.
    pub fn energy(&self, b: usize, c: usize) -> T {
        self.blocks(b, c)
            .iter()
            .flat_map(|blk| blk.iter())
            .map(|&v| v * v)
            .sum()
    }
}

/// Binary 8×8 quantization matrix for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMask(pub [bool; BLOCK_AREA]);

impl ChannelMask {
    pub fn ones() -> Self {
        Self([true; BLOCK_AREA])
    }

    pub fn zeros() -> Self {
        Self([false; BLOCK_AREA])
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[row * BLOCK + col]
    }

    pub fn set(&mut self, row: usize, col: usize, keep: bool) {
        self.0[row * BLOCK + col] = keep;
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    /// `true` when every kept position of `self` is also kept by `other`.
    pub fn is_subset_of(&self, other: &ChannelMask) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn weights<T: Real>(&self) -> Block<T> {
        let mut w = [T::zero(); BLOCK_AREA];
        for (o, &k) in w.iter_mut().zip(&self.0) {
            if k {
                *o = T::one();
            }
        }
        w
    }
}

/// Per-sample masks for the Y, Cb and Cr channels.
pub type SampleMasks = [ChannelMask; 3];

/// Per-sample real multipliers applied in place of a binary mask.
pub type SampleWeights<T> = [Block<T>; 3];

/// Quantization masks for a batch, one [`SampleMasks`] per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantMask {
    pub samples: Vec<SampleMasks>,
}

impl QuantMask {
    pub fn ones(batch: usize) -> Self {
        Self {
            samples: vec![[ChannelMask::ones(); 3]; batch],
        }
    }

    pub fn zeros(batch: usize) -> Self {
        Self {
            samples: vec![[ChannelMask::zeros(); 3]; batch],
        }
    }

    /// The same channel masks for every sample.
    pub fn broadcast(masks: SampleMasks, batch: usize) -> Self {
        Self {
            samples: vec![masks; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.samples.len()
    }

    pub fn weights<T: Real>(&self) -> Vec<SampleWeights<T>> {
        self.samples
            .iter()
            .map(|s| [s[0].weights(), s[1].weights(), s[2].weights()])
            .collect()
    }
}

fn transform_plane<T: Real>(dct: &Dct2<T>, block_dct: &Dct2<T>, plane: &[T], h: usize, w: usize, mode: TransformMode) -> Result<Vec<Block<T>>> {
    match mode {
        TransformMode::GlobalDct => blockify(&dct.forward(plane), h, w),
        TransformMode::BlockDct => {
            let mut blocks = blockify(plane, h, w)?;
            for blk in blocks.iter_mut() {
                let c = block_dct.forward(blk);
                blk.copy_from_slice(&c);
            }
            Ok(blocks)
        }
    }
}

fn inverse_plane<T: Real>(dct: &Dct2<T>, block_dct: &Dct2<T>, blocks: &[Block<T>], h: usize, w: usize, mode: TransformMode) -> Result<Vec<T>> {
    match mode {
        TransformMode::GlobalDct => Ok(dct.inverse(&block_merge(blocks, h, w)?)),
        TransformMode::BlockDct => {
            let spatial: Vec<Block<T>> = blocks
                .iter()
                .map(|blk| {
                    let mut out = [T::zero(); BLOCK_AREA];
                    out.copy_from_slice(&block_dct.inverse(blk));
                    out
                })
                .collect();
            block_merge(&spatial, h, w)
        }
    }
}

/// DCT and tile every channel of an already color-converted tensor.
pub fn to_blocks<T: Real>(img: &ImageTensor<T>, mode: TransformMode) -> Result<CoeffBlocks<T>> {
    let (h, w) = (img.height(), img.width());
    check_blockable(h, w)?;
    let dct = Dct2::new(h, w);
    let block_dct = Dct2::new(BLOCK, BLOCK);
    let mut data = Vec::with_capacity(img.batch() * img.channels() * h * w / BLOCK_AREA);
    for b in 0..img.batch() {
        for c in 0..img.channels() {
            data.extend(transform_plane(&dct, &block_dct, img.plane(b, c), h, w, mode)?);
        }
    }
    Ok(CoeffBlocks {
        batch: img.batch(),
        channels: img.channels(),
        origin_dims: (h, w),
        data,
    })
}

/// Inverse of [`to_blocks`]; the result carries `color_space`.
pub fn from_blocks<T: Real>(blocks: &CoeffBlocks<T>, mode: TransformMode, color_space: ColorSpace) -> Result<ImageTensor<T>> {
    let (h, w) = blocks.origin_dims;
    let dct = Dct2::new(h, w);
    let block_dct = Dct2::new(BLOCK, BLOCK);
    let mut out = ImageTensor::zeros([blocks.batch, blocks.channels, h, w], color_space);
    for b in 0..blocks.batch {
        for c in 0..blocks.channels {
            let plane = inverse_plane(&dct, &block_dct, blocks.blocks(b, c), h, w, mode)?;
            out.plane_mut(b, c).copy_from_slice(&plane);
        }
    }
    Ok(out)
}

/// Color conversion followed by [`to_blocks`]: yields `B_Y`, `B_Cb`, `B_Cr`.
pub fn decompose<T: Real>(x: &ImageTensor<T>, mode: TransformMode) -> Result<CoeffBlocks<T>> {
    to_blocks(&rgb_to_ycbcr(x)?, mode)
}

/// Inverse of [`decompose`].
pub fn reconstruct<T: Real>(blocks: &CoeffBlocks<T>, mode: TransformMode) -> Result<ImageTensor<T>> {
    ycbcr_to_rgb(&from_blocks(blocks, mode, ColorSpace::YCbCr)?)
}

/// `B' = B ⊙ Q`, broadcast over blocks of each sample and channel.
pub fn apply_mask<T: Real>(blocks: &CoeffBlocks<T>, q: &QuantMask) -> Result<CoeffBlocks<T>> {
    apply_weights(blocks, &q.weights())
}

/// [`apply_mask`] with real-valued multipliers.
pub fn apply_weights<T: Real>(blocks: &CoeffBlocks<T>, weights: &[SampleWeights<T>]) -> Result<CoeffBlocks<T>> {
    if weights.len() != blocks.batch {
        return Err(Error::shape(format!(
            "{} masks for a batch of {}",
            weights.len(),
            blocks.batch
        )));
    }
    if blocks.channels != 3 {
        return Err(Error::shape("masks apply to 3-channel coefficients"));
    }
    let mut out = blocks.clone();
    for (b, w) in weights.iter().enumerate() {
        for (c, wc) in w.iter().enumerate() {
            for blk in out.blocks_mut(b, c) {
                for (v, &m) in blk.iter_mut().zip(wc) {
                    *v *= m;
                }
            }
        }
    }
    Ok(out)
}

/// `K(x; Q)`: decompose, mask, reconstruct.
pub fn centralize<T: Real>(x: &ImageTensor<T>, q: &QuantMask, mode: TransformMode) -> Result<ImageTensor<T>> {
    centralize_weighted(x, &q.weights(), mode)
}

/// `K(x; W)` with real multipliers `W` in place of the binary mask.
pub fn centralize_weighted<T: Real>(x: &ImageTensor<T>, weights: &[SampleWeights<T>], mode: TransformMode) -> Result<ImageTensor<T>> {
    reconstruct(&apply_weights(&decompose(x, mode)?, weights)?, mode)
}

/// `Kᵀ g` for fixed `Q`.
///
/// `K = C⁻¹ D⁻¹ M D C` with `C` the color matrix and `D` orthonormal, so
/// `Kᵀ = Cᵀ D⁻¹ M D C⁻ᵀ`.
pub fn centralize_vjp<T: Real>(g: &ImageTensor<T>, q: &QuantMask, mode: TransformMode) -> Result<ImageTensor<T>> {
    let inv_t = transpose3(&ycbcr_to_rgb_matrix());
    let fwd_t = transpose3(&RGB_TO_YCBCR);
    let coeffs = to_blocks(&apply_color(g, &inv_t)?, mode)?;
    let masked = apply_mask(&coeffs, q)?;
    let back = from_blocks(&masked, mode, ColorSpace::Rgb)?;
    apply_color(&back, &fwd_t)
}

/// Gradient of `J(K(x; Q))` with respect to each mask entry, treating `Q` as
/// real multipliers. `upstream` is `∂J/∂K(x; Q)`.
///
/// `∂J/∂Q[c]_ij = Σ_blocks Bx[c]_ij · Bg[c]_ij` with `Bx` the coefficients of
/// `x` and `Bg` the coefficients of `C⁻ᵀ·upstream`.
pub fn mask_grad<T: Real>(x: &ImageTensor<T>, upstream: &ImageTensor<T>, mode: TransformMode) -> Result<Vec<SampleWeights<T>>> {
    x.check_same_shape(upstream)?;
    let bx = decompose(x, mode)?;
    let inv_t = transpose3(&ycbcr_to_rgb_matrix());
    let bg = to_blocks(&apply_color(upstream, &inv_t)?, mode)?;
    let mut grads = vec![[[T::zero(); BLOCK_AREA]; 3]; x.batch()];
    for (b, g) in grads.iter_mut().enumerate() {
        for (c, gc) in g.iter_mut().enumerate() {
            for (xb, ub) in bx.blocks(b, c).iter().zip(bg.blocks(b, c)) {
                for k in 0..BLOCK_AREA {
                    gc[k] += xb[k] * ub[k];
                }
            }
        }
    }
    Ok(grads)
}
