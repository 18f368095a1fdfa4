//! Canonical image and mask representations.
//!
//! Images are stored channel-first (C, H, W) with a declared value range.
//! Rotations are exact index permutations restricted to multiples of 90°,
//! so `inverse_rotate(rotate(x, n), n) == x` holds bit for bit.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::nn::Flt;

/// Declared value range of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RangeTag {
    /// Values in [0, 1]. Used by the extraction module and all metrics.
    Unit,
    /// Values in [-1, 1]. Used by the generators (tanh output).
    SignedUnit,
}

impl RangeTag {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::SignedUnit => (-1.0, 1.0),
        }
    }
}

/// H×W×C image with a declared value range, stored channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    data: Array3<F>,
    range: RangeTag,
}

/// The f32 image type used throughout training and I/O.
pub type ImageTensor = Image<f32>;

impl<F: Flt> Image<F> {
    /// Wraps raw (C, H, W) data, validating channels and the declared range.
    pub fn new(data: Array3<F>, range: RangeTag) -> Result<Self> {
        let (c, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidParam("image dimensions must be positive".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidParam(format!("channels must be 1 or 3, got {c}")));
        }
        let (lo, hi) = range.bounds();
        for &v in data.iter() {
            let v = v.to_f64();
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::InvalidParam(format!(
                    "value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Image { data, range })
    }

    /// Constant image of the given shape.
    pub fn constant(channels: usize, height: usize, width: usize, value: F, range: RangeTag) -> Result<Self> {
        Image::new(Array3::from_elem((channels, height, width), value), range)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    /// Single-channel view reduced by fixed luminance weights (Rec. 601).
    /// One-channel images pass through unchanged.
    pub fn to_gray(&self) -> Array2<F> {
        let (c, h, w) = self.data.dim();
        if c == 1 {
            return self.data.index_axis(ndarray::Axis(0), 0).to_owned();
        }
        let wr = F::from_f64(0.299);
        let wg = F::from_f64(0.587);
        let wb = F::from_f64(0.114);
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] =
                    wr * self.data[[0, y, x]] + wg * self.data[[1, y, x]] + wb * self.data[[2, y, x]];
            }
        }
        out
    }
}

/// Rotation by 90°·n, n ∈ {1, 2, 3}. n = 0 (identity) is deliberately excluded:
/// the identity branch of the rotation-consistency flow is the un-rotated branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RotationAngle {
    quarter_turns: u8,
}

impl RotationAngle {
    pub fn new(quarter_turns: u8) -> Result<Self> {
        if !(1..=3).contains(&quarter_turns) {
            return Err(Error::InvalidParam(format!(
                "quarter_turns must be 1, 2 or 3, got {quarter_turns}"
            )));
        }
        Ok(RotationAngle { quarter_turns })
    }

    pub fn quarter_turns(&self) -> u8 {
        self.quarter_turns
    }

    /// The angle that undoes this one.
    pub fn inverse(&self) -> RotationAngle {
        RotationAngle { quarter_turns: 4 - self.quarter_turns }
    }
}

/// Rotates (C, H, W) data counter-clockwise by 90°·n. Exact permutation.
pub fn rotate_array<F: Flt>(data: &Array3<F>, quarter_turns: u8) -> Array3<F> {
    let (c, h, w) = data.dim();
    match quarter_turns % 4 {
        0 => data.clone(),
        1 => {
            let mut out = Array3::zeros((c, w, h));
            for ch in 0..c {
                for i in 0..w {
                    for j in 0..h {
                        out[[ch, i, j]] = data[[ch, j, w - 1 - i]];
                    }
                }
            }
            out
        }
        2 => {
            let mut out = Array3::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[[ch, i, j]] = data[[ch, h - 1 - i, w - 1 - j]];
                    }
                }
            }
            out
        }
        3 => {
            let mut out = Array3::zeros((c, w, h));
            for ch in 0..c {
                for i in 0..w {
                    for j in 0..h {
                        out[[ch, i, j]] = data[[ch, h - 1 - j, i]];
                    }
                }
            }
            out
        }
        _ => unreachable!(),
    }
}

/// Counter-clockwise rotation by 90°·n. Output dims swap H↔W for odd n.
pub fn rotate<F: Flt>(img: &Image<F>, a: RotationAngle) -> Image<F> {
    Image { data: rotate_array(img.data(), a.quarter_turns), range: img.range }
}

/// Undoes `rotate` with the same angle, bit-exactly.
pub fn inverse_rotate<F: Flt>(img: &Image<F>, a: RotationAngle) -> Image<F> {
    Image { data: rotate_array(img.data(), a.inverse().quarter_turns), range: img.range }
}

/// Affine remap between the two declared ranges. Idempotent when the image
/// is already tagged with the target range.
pub fn to_range<F: Flt>(img: &Image<F>, target: RangeTag) -> Image<F> {
    if img.range == target {
        return img.clone();
    }
    let half = F::from_f64(0.5);
    let one = F::one();
    let two = F::from_f64(2.0);
    let data = match (img.range, target) {
        (RangeTag::Unit, RangeTag::SignedUnit) => img.data.mapv(|v| two * v - one),
        (RangeTag::SignedUnit, RangeTag::Unit) => img.data.mapv(|v| (v + one) * half),
        _ => unreachable!(),
    };
    Image { data, range: target }
}

/// H×W mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParam("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { data: Array2::zeros((height, width)) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<u8> {
        &mut self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / (self.height() * self.width()) as f64
    }
}

/// Quantizes a unit-range value to 8 bits with round-half-up.
pub fn quantize_u8(v: f32) -> u8 {
    let q = (v * 255.0 + 0.5).floor();
    q.clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit grayscale or RGB lossless raster file into unit range.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| Error::image(path, e.to_string()))?;
    let data = match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let mut data = Array3::zeros((1, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                data[[0, y as usize, x as usize]] = p.0[0] as f32 / 255.0;
            }
            data
        }
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let mut data = Array3::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
                }
            }
            data
        }
        other => {
            return Err(Error::image(
                path,
                format!("unsupported pixel format {:?}; expected 8-bit grayscale or RGB", other.color()),
            ))
        }
    };
    Image::new(data, RangeTag::Unit)
}

/// Saves to an 8-bit PNG, quantizing with round-half-up. Signed-unit images
/// are converted to unit range first.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let unit = to_range(img, RangeTag::Unit);
    let (c, h, w) = unit.data().dim();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match c {
        1 => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in out.enumerate_pixels_mut() {
                p.0[0] = quantize_u8(unit.data()[[0, y as usize, x as usize]]);
            }
            out.save(path).map_err(|e| Error::image(path, e.to_string()))
        }
        3 => {
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in out.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quantize_u8(unit.data()[[ch, y as usize, x as usize]]);
                }
            }
            out.save(path).map_err(|e| Error::image(path, e.to_string()))
        }
        _ => unreachable!(),
    }
}

/// Loads a mask image; nonzero pixels become 1.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = load_image(path)?;
    let gray = img.to_gray();
    BinaryMask::new(gray.mapv(|v| if v >= 0.5 { 1u8 } else { 0u8 }))
}

/// Saves a mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data = mask.data().mapv(|v| v as f32);
    let (h, w) = data.dim();
    let img = Image::new(data.into_shape_with_order((1, h, w)).unwrap(), RangeTag::Unit)?;
    save_image(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn img2x2() -> Image<f32> {
        // [[1,2],[3,4]] scaled into unit range.
        let data = array![[[0.1f32, 0.2], [0.3, 0.4]]];
        Image::new(data, RangeTag::Unit).unwrap()
    }

    #[test]
    fn rotate_full_turn_is_identity() {
        let x = img2x2();
        let r1 = rotate(&x, RotationAngle::new(1).unwrap());
        let back = rotate(&r1, RotationAngle::new(3).unwrap());
        assert_eq!(back, x);
    }

    #[test]
    fn rotate_constant_is_invariant() {
        let c = Image::constant(1, 4, 4, 0.25f32, RangeTag::Unit).unwrap();
        for n in 1..=3u8 {
            assert_eq!(rotate(&c, RotationAngle::new(n).unwrap()), c);
        }
    }

    #[test]
    fn rotate_half_turn_hand_case() {
        // rotate([[1,2],[3,4]], n=2) = [[4,3],[2,1]], checked by hand on the
        // 2x2 index permutation.
        let x = Image::new(array![[[1.0f32, 2.0], [3.0, 4.0]]], RangeTag::SignedUnit);
        // 2x2 values exceed signed-unit range; build the raw array instead.
        assert!(x.is_err());
        let raw = array![[[1.0f32, 2.0], [3.0, 4.0]]];
        let rot = rotate_array(&raw, 2);
        assert_eq!(rot, array![[[4.0, 3.0], [2.0, 1.0]]]);
    }

    #[test]
    fn rotate_quarter_turn_hand_case() {
        let raw = array![[[1.0f32, 2.0], [3.0, 4.0]]];
        let rot = rotate_array(&raw, 1);
        // counter-clockwise: [[2,4],[1,3]]
        assert_eq!(rot, array![[[2.0, 4.0], [1.0, 3.0]]]);
        let back = rotate_array(&rot, 3);
        assert_eq!(back, raw);
    }

    #[test]
    fn inverse_rotate_is_exact_inverse_on_random_images() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let data = Array3::from_shape_fn((1, h, w), |_| rng.gen_range(0.0f32..1.0));
            let img = Image::new(data, RangeTag::Unit).unwrap();
            for n in 1..=3u8 {
                let a = RotationAngle::new(n).unwrap();
                assert_eq!(inverse_rotate(&rotate(&img, a), a), img);
            }
        }
    }

    #[test]
    fn rotate_preserves_pixel_multiset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((3, 5, 7), |_| rng.gen_range(0.0f32..1.0));
        let img = Image::new(data, RangeTag::Unit).unwrap();
        for n in 1..=3u8 {
            let rot = rotate(&img, RotationAngle::new(n).unwrap());
            let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = rot.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn to_range_midpoint_and_endpoint() {
        let mid = Image::constant(1, 2, 2, 0.5f32, RangeTag::Unit).unwrap();
        let signed = to_range(&mid, RangeTag::SignedUnit);
        assert_eq!(signed.data()[[0, 0, 0]], 0.0);
        let one = Image::constant(1, 2, 2, 1.0f32, RangeTag::Unit).unwrap();
        assert_eq!(to_range(&one, RangeTag::SignedUnit).data()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn to_range_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((1, 6, 6), |_| rng.gen_range(0.0f32..1.0));
        let img = Image::new(data, RangeTag::Unit).unwrap();
        let round = to_range(&to_range(&img, RangeTag::SignedUnit), RangeTag::Unit);
        for (a, b) in img.data().iter().zip(round.data().iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn to_range_idempotent_on_same_tag() {
        let img = img2x2();
        assert_eq!(to_range(&img, RangeTag::Unit), img);
    }

    #[test]
    fn rotation_angle_validation() {
        assert!(RotationAngle::new(0).is_err());
        assert!(RotationAngle::new(4).is_err());
        for n in 1..=3 {
            assert_eq!(RotationAngle::new(n).unwrap().inverse().quarter_turns(), 4 - n);
        }
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(array![[0u8, 2]]).is_err());
        assert!(BinaryMask::new(array![[0u8, 1]]).is_ok());
    }

    #[test]
    fn save_load_round_trip_matches_quantization() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data = Array3::from_shape_fn((1, 9, 7), |_| rng.gen_range(0.0f32..1.0));
        let img = Image::new(data, RangeTag::Unit).unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        for (orig, got) in img.data().iter().zip(loaded.data().iter()) {
            let expect = quantize_u8(*orig) as f32 / 255.0;
            assert_eq!(*got, expect);
        }
    }

    #[test]
    fn load_rejects_missing_file() {
        let err = load_image(Path::new("/nonexistent/file.png"));
        assert!(err.is_err());
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(Array3::<f32>::zeros((2, 4, 4)), RangeTag::Unit).is_err());
        assert!(Image::new(Array3::from_elem((1, 4, 4), 1.5f32), RangeTag::Unit).is_err());
        assert!(Image::new(Array3::from_elem((1, 4, 4), -0.5f32), RangeTag::SignedUnit).is_ok());
    }
}
