//! Pixel-level primitives used when pasting outliers: alpha blending,
//! Gaussian blurring of alpha masks and per-channel histogram matching.
//!
//! Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Per-pixel opacity in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image must be non-empty".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copy of the rectangle `[row0, row0+h) x [col0, col0+w)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || row0 + h > self.height || col0 + w > self.width {
            return Err(Error::OutOfBounds {
                row: row0,
                col: col0,
                height: h,
                width: w,
                bg_height: self.height,
                bg_width: self.width,
            });
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in row0..row0 + h {
            let start = (r * self.width + col0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

impl AlphaMask {
    pub fn new(width: usize, height: usize, alpha: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("mask must be non-empty".into()));
        }
        if alpha.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                alpha.len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidParameter(format!(
                "alpha value {a} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            alpha,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            alpha: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.alpha[row * self.width + col]
    }

    pub fn positive_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a > 0.0).count()
    }

    /// Multiply every value by `factor`, which must lie in [0, 1].
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            alpha: self.alpha.iter().map(|a| a * factor).collect(),
        }
    }

    /// Surround the mask with `pad` rows/columns of zeros on every side.
    pub fn padded(&self, pad: usize) -> Self {
        let w = self.width + 2 * pad;
        let h = self.height + 2 * pad;
        let mut alpha = vec![0.0; w * h];
        for r in 0..self.height {
            let dst = (r + pad) * w + pad;
            alpha[dst..dst + self.width]
                .copy_from_slice(&self.alpha[r * self.width..(r + 1) * self.width]);
        }
        Self {
            width: w,
            height: h,
            alpha,
        }
    }
}

/// Blend `patch` over `background` with top-left corner at `origin`.
///
/// Each covered channel becomes `round_half_up(a * patch + (1 - a) * background)`.
/// Pixels with `a == 0`, and everything outside the patch rectangle, are copied
/// unchanged.
pub fn alpha_blend(
    background: &ImageRgb,
    patch: &ImageRgb,
    mask: &AlphaMask,
    origin: PixelCoord,
) -> Result<ImageRgb> {
    if patch.width != mask.width || patch.height != mask.height {
        return Err(Error::DimensionMismatch(format!(
            "patch is {}x{} but mask is {}x{}",
            patch.width, patch.height, mask.width, mask.height
        )));
    }
    if origin.row + patch.height > background.height || origin.col + patch.width > background.width
    {
        return Err(Error::OutOfBounds {
            row: origin.row,
            col: origin.col,
            height: patch.height,
            width: patch.width,
            bg_height: background.height,
            bg_width: background.width,
        });
    }
    let mut out = background.clone();
    for r in 0..patch.height {
        for c in 0..patch.width {
            let a = mask.get(r, c);
            if a == 0.0 {
                continue;
            }
            let src = (r * patch.width + c) * 3;
            let dst = ((origin.row + r) * background.width + origin.col + c) * 3;
            for ch in 0..3 {
                out.data[dst + ch] =
                    blend_channel(patch.data[src + ch], background.data[dst + ch], a);
            }
        }
    }
    Ok(out)
}

#[inline]
fn blend_channel(fg: u8, bg: u8, a: f64) -> u8 {
    let v = a * fg as f64 + (1.0 - a) * bg as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Below this sigma the discrete kernel is effectively a delta.
pub const BLUR_IDENTITY_SIGMA: f64 = 0.3;

/// Normalized-at-center 1D Gaussian taps `exp(-d^2 / 2 sigma^2)` for
/// `d in -radius..=radius`, with `radius = ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = blur_radius(sigma) as i64;
    (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

pub fn blur_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Separable Gaussian blur with border renormalization.
///
/// Each output is the in-bounds weighted mean of its neighbourhood, evaluated
/// as `v + sum(w * (u - v)) / sum(w)` so that constant regions come out
/// bit-identical.
pub fn gaussian_blur_mask(mask: &AlphaMask, sigma: f64) -> Result<AlphaMask> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be positive and finite, got {sigma}"
        )));
    }
    if sigma <= BLUR_IDENTITY_SIGMA {
        return Ok(mask.clone());
    }
    let taps = gaussian_taps(sigma);
    let radius = taps.len() / 2;
    let (w, h) = (mask.width, mask.height);

    let mut horiz = vec![0.0; w * h];
    for r in 0..h {
        let row = &mask.alpha[r * w..(r + 1) * w];
        for c in 0..w {
            horiz[r * w + c] = blur_at(c, w, radius, &taps, |i| row[i]);
        }
    }
    let mut out = vec![0.0; w * h];
    for c in 0..w {
        for r in 0..h {
            out[r * w + c] = blur_at(r, h, radius, &taps, |i| horiz[i * w + c]);
        }
    }
    Ok(AlphaMask {
        width: w,
        height: h,
        alpha: out,
    })
}

#[inline]
fn blur_at(center: usize, len: usize, radius: usize, taps: &[f64], at: impl Fn(usize) -> f64) -> f64 {
    let v = at(center);
    let lo = center.saturating_sub(radius);
    let hi = (center + radius).min(len - 1);
    let mut acc = 0.0;
    let mut norm = 0.0;
    for i in lo..=hi {
        let wgt = taps[i + radius - center];
        acc += wgt * (at(i) - v);
        norm += wgt;
    }
    (v + acc / norm).clamp(0.0, 1.0)
}

/// Per-channel 256-bin histogram matching of `source` onto the distribution of
/// `reference`.
///
/// A source value `v` maps to the smallest reference value `r` with
/// `CDF_ref(r) >= CDF_src(v)`, where `CDF(v) = #(values <= v) / N`.
pub fn histogram_match(source: &ImageRgb, reference: &[[u8; 3]]) -> Result<ImageRgb> {
    if reference.is_empty() {
        return Err(Error::Empty("histogram reference pixels".into()));
    }
    let luts = histogram_match_luts(source, reference);
    let mut out = source.clone();
    for px in out.data.chunks_exact_mut(3) {
        for ch in 0..3 {
            px[ch] = luts[ch][px[ch] as usize];
        }
    }
    Ok(out)
}

/// The three lookup tables `histogram_match` applies, one per channel.
pub fn histogram_match_luts(source: &ImageRgb, reference: &[[u8; 3]]) -> [[u8; 256]; 3] {
    let mut luts = [[0u8; 256]; 3];
    let n_src = (source.width * source.height) as u64;
    let n_ref = reference.len() as u64;
    for (ch, lut) in luts.iter_mut().enumerate() {
        let mut src_hist = [0u64; 256];
        for px in source.data.chunks_exact(3) {
            src_hist[px[ch] as usize] += 1;
        }
        let mut ref_hist = [0u64; 256];
        for px in reference {
            ref_hist[px[ch] as usize] += 1;
        }
        let src_cdf = cumulative(&src_hist);
        let ref_cdf = cumulative(&ref_hist);
        // Both CDFs are non-decreasing, so a single forward sweep suffices.
        // Fractions are compared exactly: ref/n_ref >= src/n_src.
        let mut r = 0usize;
        for v in 0..256 {
            while r < 255 && ref_cdf[r] * n_src < src_cdf[v] * n_ref {
                r += 1;
            }
            lut[v] = r as u8;
        }
    }
    luts
}

fn cumulative(hist: &[u64; 256]) -> [u64; 256] {
    let mut out = [0u64; 256];
    let mut acc = 0;
    for (o, h) in out.iter_mut().zip(hist) {
        acc += h;
        *o = acc;
    }
    out
}

/// Nearest-neighbour resize, used for masks so that binary masks stay binary.
pub fn resize_mask_nearest(mask: &AlphaMask, width: usize, height: usize) -> AlphaMask {
    let mut alpha = Vec::with_capacity(width * height);
    for r in 0..height {
        let sr = nearest_index(r, height, mask.height);
        for c in 0..width {
            let sc = nearest_index(c, width, mask.width);
            alpha.push(mask.get(sr, sc));
        }
    }
    AlphaMask {
        width,
        height,
        alpha,
    }
}

#[inline]
fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(image: &ImageRgb, width: usize, height: usize) -> ImageRgb {
    let sx = image.width as f64 / width as f64;
    let sy = image.height as f64 / height as f64;
    let mut data = Vec::with_capacity(width * height * 3);
    for r in 0..height {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let ty = fy - y0 as f64;
        for c in 0..width {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let tx = fx - x0 as f64;
            let (p00, p01) = (image.pixel(y0, x0), image.pixel(y0, x1));
            let (p10, p11) = (image.pixel(y1, x0), image.pixel(y1, x1));
            for ch in 0..3 {
                let top = p00[ch] as f64 * (1.0 - tx) + p01[ch] as f64 * tx;
                let bot = p10[ch] as f64 * (1.0 - tx) + p11[ch] as f64 * tx;
                let v = top * (1.0 - ty) + bot * ty;
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb {
        width,
        height,
        data,
    }
}

/// Pad an image by replicating its border pixels.
pub fn pad_replicate(image: &ImageRgb, pad: usize) -> ImageRgb {
    let w = image.width + 2 * pad;
    let h = image.height + 2 * pad;
    let mut data = Vec::with_capacity(w * h * 3);
    for r in 0..h {
        let sr = r.saturating_sub(pad).min(image.height - 1);
        for c in 0..w {
            let sc = c.saturating_sub(pad).min(image.width - 1);
            data.extend_from_slice(&image.pixel(sr, sc));
        }
    }
    ImageRgb {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, v: u8) -> ImageRgb {
        ImageRgb::filled(w, h, [v, v, v])
    }

    #[test]
    fn blend_zero_alpha_is_identity() {
        let bg = ImageRgb::new(3, 2, (0..18).collect()).unwrap();
        let out = alpha_blend(&bg, &img(2, 2, 200), &AlphaMask::filled(2, 2, 0.0), PixelCoord::new(0, 1))
            .unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn blend_full_alpha_copies_patch() {
        let bg = img(4, 4, 9);
        let patch = ImageRgb::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let out = alpha_blend(&bg, &patch, &AlphaMask::filled(2, 1, 1.0), PixelCoord::new(3, 2)).unwrap();
        assert_eq!(out.pixel(3, 2), [1, 2, 3]);
        assert_eq!(out.pixel(3, 3), [4, 5, 6]);
        assert_eq!(out.pixel(2, 2), [9, 9, 9]);
    }

    #[test]
    fn blend_half() {
        let out = alpha_blend(&img(1, 1, 100), &img(1, 1, 200), &AlphaMask::filled(1, 1, 0.5), PixelCoord::new(0, 0))
            .unwrap();
        assert_eq!(out.pixel(0, 0), [150, 150, 150]);
        // 0.5 * 100 + 0.5 * 101 = 100.5 rounds up
        let out = alpha_blend(&img(1, 1, 101), &img(1, 1, 100), &AlphaMask::filled(1, 1, 0.5), PixelCoord::new(0, 0))
            .unwrap();
        assert_eq!(out.pixel(0, 0), [101, 101, 101]);
    }

    #[test]
    fn blend_errors() {
        let bg = img(4, 4, 0);
        assert!(matches!(
            alpha_blend(&bg, &img(2, 2, 0), &AlphaMask::filled(2, 3, 1.0), PixelCoord::new(0, 0)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            alpha_blend(&bg, &img(2, 2, 0), &AlphaMask::filled(2, 2, 1.0), PixelCoord::new(3, 0)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn blur_rejects_non_positive_sigma() {
        let m = AlphaMask::filled(3, 3, 0.5);
        assert!(gaussian_blur_mask(&m, 0.0).is_err());
        assert!(gaussian_blur_mask(&m, -1.0).is_err());
        assert!(gaussian_blur_mask(&m, f64::NAN).is_err());
    }

    #[test]
    fn blur_small_sigma_is_identity() {
        let mut m = AlphaMask::filled(5, 5, 0.0);
        m.alpha[12] = 1.0;
        assert_eq!(gaussian_blur_mask(&m, 0.3).unwrap(), m);
        assert_ne!(gaussian_blur_mask(&m, 0.31).unwrap(), m);
    }

    #[test]
    fn blur_constant_is_exact() {
        for v in [0.0, 0.1, 0.37, 1.0] {
            let m = AlphaMask::filled(7, 5, v);
            assert_eq!(gaussian_blur_mask(&m, 1.7).unwrap(), m);
        }
    }

    #[test]
    fn blur_impulse_matches_direct_kernel() {
        let sigma = 1.0;
        let mut m = AlphaMask::filled(15, 15, 0.0);
        m.alpha[7 * 15 + 7] = 1.0;
        let out = gaussian_blur_mask(&m, sigma).unwrap();
        // direct 2D kernel over the 7x7 window
        let mut total = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                total += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let expected = 1.0 / total;
        assert!((out.get(7, 7) - expected).abs() < 1e-14, "{} vs {expected}", out.get(7, 7));
        assert_eq!(out.get(7, 11), 0.0);
        assert!(out.get(7, 10) > 0.0);
    }

    #[test]
    fn histogram_identity_and_constant() {
        let src = ImageRgb::new(2, 2, vec![0, 10, 20, 50, 60, 70, 0, 10, 20, 255, 1, 2]).unwrap();
        let reference: Vec<_> = src.pixels().collect();
        assert_eq!(histogram_match(&src, &reference).unwrap(), src);

        let constant = img(3, 3, 42);
        let reference = [[5, 6, 7], [100, 3, 9], [50, 50, 50]];
        let out = histogram_match(&constant, &reference).unwrap();
        assert!(out.pixels().all(|p| p == [100, 50, 50]));
    }

    #[test]
    fn histogram_two_level() {
        let src = ImageRgb::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let reference = [[10, 10, 10], [20, 20, 20]];
        let out = histogram_match(&src, &reference).unwrap();
        assert_eq!(out.pixel(0, 0), [10, 10, 10]);
        assert_eq!(out.pixel(0, 1), [20, 20, 20]);
        assert!(histogram_match(&src, &[]).is_err());
    }

    #[test]
    fn nearest_resize_keeps_binary() {
        let m = AlphaMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_mask_nearest(&m, 4, 4);
        assert!(r.alpha.iter().all(|&a| a == 0.0 || a == 1.0));
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(3, 3), 1.0);
        assert_eq!(r.get(0, 3), 0.0);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = img(5, 3, 77);
        assert_eq!(resize_bilinear(&c, 9, 11), img(9, 11, 77));
        let x = ImageRgb::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 2), x);
    }

    fn arb_image() -> impl Strategy<Value = ImageRgb> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h * 3)
                .prop_map(move |d| ImageRgb::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn blend_leaves_zero_alpha_untouched(
            bg in proptest::collection::vec(any::<u8>(), 8 * 8 * 3),
            patch in arb_image(),
            raw_alpha in proptest::collection::vec(0.0f64..=1.0, 36),
            zero_bits in proptest::collection::vec(any::<bool>(), 36),
            row in 0usize..3, col in 0usize..3,
        ) {
            let bg = ImageRgb::new(8, 8, bg).unwrap();
            let n = patch.width * patch.height;
            let alpha: Vec<f64> = (0..n).map(|i| if zero_bits[i] { 0.0 } else { raw_alpha[i] }).collect();
            let mask = AlphaMask::new(patch.width, patch.height, alpha).unwrap();
            let out = alpha_blend(&bg, &patch, &mask, PixelCoord::new(row, col)).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    let inside = r >= row && r < row + patch.height && c >= col && c < col + patch.width;
                    if !inside || mask.get(r - row, c - col) == 0.0 {
                        prop_assert_eq!(out.pixel(r, c), bg.pixel(r, c));
                    }
                }
            }
        }

        #[test]
        fn blur_stays_in_unit_interval(
            vals in proptest::collection::vec(0.0f64..=1.0, 30),
            sigma in 0.31f64..4.0,
        ) {
            let m = AlphaMask::new(6, 5, vals).unwrap();
            let out = gaussian_blur_mask(&m, sigma).unwrap();
            prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
            prop_assert_eq!(&out, &gaussian_blur_mask(&m, sigma).unwrap());
        }

        #[test]
        fn histogram_lut_is_monotone(src in arb_image(), reference in proptest::collection::vec(any::<[u8; 3]>(), 1..40)) {
            let luts = histogram_match_luts(&src, &reference);
            for lut in &luts {
                for v in 1..256 {
                    prop_assert!(lut[v - 1] <= lut[v]);
                }
            }
        }
    }
}
