//! Image tensors, labeled datasets, patch masks, and the synthetic dataset
//! generator used for desk-scale experiments.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Minimum image side length.
pub const MIN_SIDE: usize = 8;

/// Maximum patch area as a fraction of the image, expressed as a ratio of
/// integers (625 / 10000 = 6.25%) so the cap check stays exact.
const AREA_CAP_NUM: usize = 625;
const AREA_CAP_DEN: usize = 10_000;

/// An image as channel-major planes of `f64` intensities.
///
/// Layout is `(channels, height, width)`, row-major within each channel.
/// Values are in `[0,1]` after any clamping operation; intermediate products
/// of the denoiser may step slightly outside the box and are documented where
/// they do.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    /// Wrap a `(channels, height, width)` array, validating dimensions.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) {
            return Err(Error::Config(format!("channels must be 1 or 3, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Config(format!(
                "image sides must be >= {MIN_SIDE}, got {h}x{w}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_array(Array3::zeros((channels, height, width)))
    }

    /// Build from a function of `(channel, row, col)`.
    pub fn from_fn<F>(channels: usize, height: usize, width: usize, f: F) -> Result<Self>
    where
        F: FnMut((usize, usize, usize)) -> f64,
    {
        Self::from_array(Array3::from_shape_fn((channels, height, width), f))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// Clamp every element into `[0,1]` in place.
    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn all_in_unit_box(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Whole-image L2 distance to another image.
    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Whole-image L-infinity distance to another image.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean absolute value over the pixels covered by `mask`, across channels.
    pub fn mean_abs_in_mask(&self, mask: &PatchMask) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..self.channels() {
            for r in mask.top()..mask.top() + mask.patch_height() {
                for col in mask.left()..mask.left() + mask.patch_width() {
                    total += self.data[[c, r, col]].abs();
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

/// Dataset partition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images with class labels in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "images ({}) and labels ({}) differ in length",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Clone a contiguous index range into a new dataset with the given tag.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> LabeledDataset {
        LabeledDataset {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
            split,
        }
    }
}

/// A contiguous rectangular patch region inside an image.
///
/// The expansion to an `H x W` binary map is 1 exactly on the rectangle.
/// Unless explicitly disabled, construction enforces the 6.25% area cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    top: usize,
    left: usize,
    patch_height: usize,
    patch_width: usize,
    image_height: usize,
    image_width: usize,
}

impl PatchMask {
    /// Construct with the area cap enforced.
    pub fn new(
        top: usize,
        left: usize,
        patch_height: usize,
        patch_width: usize,
        image_height: usize,
        image_width: usize,
    ) -> Result<Self> {
        let mask = Self::new_uncapped(
            top,
            left,
            patch_height,
            patch_width,
            image_height,
            image_width,
        )?;
        let area = patch_height * patch_width;
        if area * AREA_CAP_DEN > AREA_CAP_NUM * image_height * image_width {
            return Err(Error::Config(format!(
                "patch area {area} exceeds 6.25% of {image_height}x{image_width}"
            )));
        }
        Ok(mask)
    }

    /// Construct with geometry checks only (area cap disabled).
    pub fn new_uncapped(
        top: usize,
        left: usize,
        patch_height: usize,
        patch_width: usize,
        image_height: usize,
        image_width: usize,
    ) -> Result<Self> {
        if patch_height == 0 || patch_width == 0 {
            return Err(Error::Config("patch sides must be positive".into()));
        }
        if top + patch_height > image_height || left + patch_width > image_width {
            return Err(Error::Config(format!(
                "patch {patch_height}x{patch_width} at ({top},{left}) exceeds image {image_height}x{image_width}"
            )));
        }
        Ok(Self {
            top,
            left,
            patch_height,
            patch_width,
            image_height,
            image_width,
        })
    }

    pub fn top(&self) -> usize {
        self.top
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn patch_height(&self) -> usize {
        self.patch_height
    }

    pub fn patch_width(&self) -> usize {
        self.patch_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn area(&self) -> usize {
        self.patch_height * self.patch_width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.patch_height
            && col >= self.left
            && col < self.left + self.patch_width
    }

    /// Expand to the binary `H x W` map.
    pub fn to_map(&self) -> Array2<f64> {
        let mut map = Array2::zeros((self.image_height, self.image_width));
        for r in self.top..self.top + self.patch_height {
            for c in self.left..self.left + self.patch_width {
                map[[r, c]] = 1.0;
            }
        }
        map
    }
}

/// Draw a patch mask with sides uniform in `[side_min, side_max]` and position
/// uniform over all placements fully inside the image.
///
/// With `enforce_area_cap`, `side_max^2` must respect the 6.25% cap so every
/// possible draw is legal.
pub fn random_patch_mask(
    rng: &mut RngState,
    side_min: usize,
    side_max: usize,
    image_height: usize,
    image_width: usize,
    enforce_area_cap: bool,
) -> Result<PatchMask> {
    if side_min == 0 || side_min > side_max {
        return Err(Error::Config(format!(
            "invalid side range [{side_min}, {side_max}]"
        )));
    }
    if side_max > image_height.min(image_width) {
        return Err(Error::Config(format!(
            "side_max {side_max} exceeds image side {}",
            image_height.min(image_width)
        )));
    }
    if enforce_area_cap
        && side_max * side_max * AREA_CAP_DEN > AREA_CAP_NUM * image_height * image_width
    {
        return Err(Error::Config(format!(
            "side_max {side_max} can exceed the 6.25% area cap on {image_height}x{image_width}"
        )));
    }
    let height = rng.uniform_i64(side_min as i64, side_max as i64) as usize;
    let width = rng.uniform_i64(side_min as i64, side_max as i64) as usize;
    let top = rng.uniform_usize(image_height - height + 1);
    let left = rng.uniform_usize(image_width - width + 1);
    if enforce_area_cap {
        PatchMask::new(top, left, height, width, image_height, image_width)
    } else {
        PatchMask::new_uncapped(top, left, height, width, image_height, image_width)
    }
}

/// Add independent discrete uniform noise in `[-amplitude, amplitude]` (on the
/// 0-255 integer scale) to every channel sample, then clamp to `[0,1]`.
pub fn add_pixel_noise(x: &ImageTensor, rng: &mut RngState, amplitude: u32) -> ImageTensor {
    if amplitude == 0 {
        return x.clone();
    }
    let a = amplitude as i64;
    let mut out = x.clone();
    out.data_mut().mapv_inplace(|v| {
        let offset = rng.uniform_i64(-a, a) as f64 / 255.0;
        (v + offset).clamp(0.0, 1.0)
    });
    out
}

/// Synthetic image parameters; every sample is a mixture of two oriented
/// gratings plus uniform noise so class margins span from easy to ambiguous.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub amplitude: f64,
    /// Upper bound of the distractor-grating mixing weight.
    pub max_mix: f64,
    /// Uniform pixel noise half-range.
    pub noise: f64,
    /// Grating spatial frequency in cycles per pixel.
    pub frequency: f64,
}

impl Default for SynthParams {
    /// A deliberately smooth regime: low-frequency gratings with little
    /// pixel noise, so clean images carry a small wavelet residual the way
    /// natural photographs do, while heavy grating mixing keeps the
    /// classification problem hard enough that patch attacks succeed at a
    /// measurable rate.
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            amplitude: 0.20,
            max_mix: 0.60,
            noise: 0.03,
            frequency: 1.0 / 12.0,
        }
    }
}

/// Generate a class-conditional oriented-grating dataset.
///
/// Labels are assigned round-robin so every class is populated whenever
/// `n >= classes`. Deterministic given the RNG seed.
pub fn synth_dataset(rng: &mut RngState, n: usize, classes: usize) -> LabeledDataset {
    synth_dataset_with(rng, n, classes, &SynthParams::default())
}

pub fn synth_dataset_with(
    rng: &mut RngState,
    n: usize,
    classes: usize,
    params: &SynthParams,
) -> LabeledDataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(n >= classes, "need at least one sample per class");
    let gains = [1.0, 0.85, 0.70];
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let theta = std::f64::consts::PI * label as f64 / classes as f64;
        let other = {
            let pick = rng.uniform_usize(classes - 1);
            if pick >= label {
                pick + 1
            } else {
                pick
            }
        };
        let theta2 = std::f64::consts::PI * other as f64 / classes as f64;
        let mix = rng.uniform(0.0, params.max_mix);
        let phase1 = rng.uniform(0.0, std::f64::consts::TAU);
        let phase2 = rng.uniform(0.0, std::f64::consts::TAU);
        let (s1, c1) = theta.sin_cos();
        let (s2, c2) = theta2.sin_cos();
        let img = ImageTensor::from_fn(3, params.height, params.width, |(ch, r, col)| {
            let pos1 = r as f64 * s1 + col as f64 * c1;
            let pos2 = r as f64 * s2 + col as f64 * c2;
            let g1 = (std::f64::consts::TAU * params.frequency * pos1 + phase1).sin();
            let g2 = (std::f64::consts::TAU * params.frequency * pos2 + phase2).sin();
            let signal = params.amplitude * gains[ch] * ((1.0 - mix) * g1 + mix * g2);
            let noise = rng.uniform(-params.noise, params.noise);
            (0.5 + signal + noise).clamp(0.0, 1.0)
        })
        .expect("synthetic image dimensions are valid");
        images.push(img);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, classes, Split::Train)
        .expect("synthetic dataset construction is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_expansion_sums_to_area() {
        let mask = PatchMask::new(3, 5, 4, 6, 32, 32).unwrap();
        let map = mask.to_map();
        assert_eq!(map.sum(), (4 * 6) as f64);
        assert_eq!(map[[3, 5]], 1.0);
        assert_eq!(map[[6, 10]], 1.0);
        assert_eq!(map[[7, 5]], 0.0);
        assert_eq!(map[[2, 5]], 0.0);
    }

    #[test]
    fn mask_rejects_out_of_bounds() {
        assert!(PatchMask::new_uncapped(30, 0, 4, 4, 32, 32).is_err());
        assert!(PatchMask::new_uncapped(0, 29, 4, 4, 32, 32).is_err());
    }

    #[test]
    fn area_cap_at_exact_boundary() {
        // 8x8 = 64 = 6.25% of 32*32: allowed at the cap.
        assert!(PatchMask::new(0, 0, 8, 8, 32, 32).is_ok());
        assert!(PatchMask::new(0, 0, 8, 9, 32, 32).is_err());
    }

    #[test]
    fn random_mask_full_image_needs_cap_disabled() {
        let mut rng = RngState::new(1);
        assert!(random_patch_mask(&mut rng, 32, 32, 32, 32, true).is_err());
        let mask = random_patch_mask(&mut rng, 32, 32, 32, 32, false).unwrap();
        assert_eq!(mask.area(), 32 * 32);
        assert_eq!((mask.top(), mask.left()), (0, 0));
    }

    #[test]
    fn random_mask_side_cap_config() {
        let mut rng = RngState::new(2);
        assert!(random_patch_mask(&mut rng, 4, 40, 32, 32, false).is_err());
    }

    #[test]
    fn random_mask_side_distribution_uniform() {
        // Chi-square against uniform over {4..8}, 3-sigma multinomial bounds.
        let mut rng = RngState::new(9);
        let draws = 100_000;
        let mut height_counts = [0usize; 5];
        let mut width_counts = [0usize; 5];
        for _ in 0..draws {
            let m = random_patch_mask(&mut rng, 4, 8, 32, 32, true).unwrap();
            height_counts[m.patch_height() - 4] += 1;
            width_counts[m.patch_width() - 4] += 1;
        }
        let expected = draws as f64 / 5.0;
        let sigma = (draws as f64 * (1.0 / 5.0) * (4.0 / 5.0)).sqrt();
        for count in height_counts.iter().chain(width_counts.iter()) {
            assert!(
                (*count as f64 - expected).abs() < 3.0 * sigma,
                "side count {count} outside 3-sigma of {expected}"
            );
        }
    }

    #[test]
    fn noise_amplitude_zero_is_identity() {
        let mut rng = RngState::new(5);
        let img = ImageTensor::from_fn(3, 8, 8, |(c, r, w)| {
            (c as f64 * 0.1 + r as f64 * 0.01 + w as f64 * 0.001).min(1.0)
        })
        .unwrap();
        let noisy = add_pixel_noise(&img, &mut rng, 0);
        assert_eq!(noisy, img);
    }

    #[test]
    fn noise_respects_bounds() {
        let mut rng = RngState::new(6);
        let img = ImageTensor::from_fn(3, 8, 8, |_| 0.5).unwrap();
        let noisy = add_pixel_noise(&img, &mut rng, 3);
        let lo = 0.5 - 3.0 / 255.0;
        let hi = 0.5 + 3.0 / 255.0;
        for &v in noisy.data().iter() {
            assert!((lo..=hi).contains(&v), "value {v} outside noise bound");
        }
    }

    #[test]
    fn noise_offsets_uniform_over_seven_levels() {
        // Empirical histogram over ~1e6 samples, 3-sigma multinomial bounds.
        let mut rng = RngState::new(7);
        let img = ImageTensor::from_fn(3, 32, 32, |_| 0.5).unwrap();
        let mut counts = [0usize; 7];
        let samples = 1000 * img.data().len();
        for _ in 0..1000 {
            let noisy = add_pixel_noise(&img, &mut rng, 3);
            for (&v, &orig) in noisy.data().iter().zip(img.data().iter()) {
                let offset = ((v - orig) * 255.0).round() as i64;
                counts[(offset + 3) as usize] += 1;
            }
        }
        let expected = samples as f64 / 7.0;
        let sigma = (samples as f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        for count in counts {
            assert!(
                (count as f64 - expected).abs() < 3.0 * sigma,
                "offset count {count} outside 3-sigma of {expected}"
            );
        }
    }

    #[test]
    fn synth_dataset_is_deterministic() {
        let a = synth_dataset(&mut RngState::new(7), 100, 4);
        let b = synth_dataset(&mut RngState::new(7), 100, 4);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn synth_dataset_balanced_assignment() {
        let data = synth_dataset(&mut RngState::new(3), 4, 4);
        let mut sorted = data.labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn synth_images_in_unit_box() {
        let data = synth_dataset(&mut RngState::new(4), 20, 4);
        for img in &data.images {
            assert!(img.all_in_unit_box());
        }
    }
}
