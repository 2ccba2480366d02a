//! Critically sampled 2D discrete wavelet transform with exact inversion.
//!
//! The analysis is orthonormal and separable. For one Haar level on a 2x2
//! block `[[x00, x01], [x10, x11]]` the convention is:
//!
//! - approx      = (x00 + x01 + x10 + x11) / 2
//! - horizontal  = (x00 - x01 + x10 - x11) / 2
//! - vertical    = (x00 + x01 - x10 - x11) / 2
//! - diagonal    = (x00 - x01 - x10 + x11) / 2
//!
//! i.e. the horizontal band is high-pass along image width and the vertical
//! band is high-pass along image height. Filtering wraps periodically, which
//! keeps the transform orthogonal (and hence exactly invertible) at every
//! dyadic size. Odd extents are padded by replicating the trailing edge, and
//! the inverse crops back, so reconstruction is exact for any input size.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wavelet filter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    /// 2-tap Haar filters; exact rational arithmetic up to the 1/sqrt(2) scale.
    Haar,
    /// 4-tap Daubechies-2 filters.
    Db2,
}

impl WaveletFamily {
    /// Orthonormal analysis filter pair (lowpass, highpass).
    pub fn filters(&self) -> (Vec<f64>, Vec<f64>) {
        let lowpass: Vec<f64> = match self {
            WaveletFamily::Haar => {
                let s = 1.0 / 2.0_f64.sqrt();
                vec![s, s]
            }
            WaveletFamily::Db2 => {
                let root3 = 3.0_f64.sqrt();
                let norm = 4.0 * 2.0_f64.sqrt();
                vec![
                    (1.0 + root3) / norm,
                    (3.0 + root3) / norm,
                    (3.0 - root3) / norm,
                    (1.0 - root3) / norm,
                ]
            }
        };
        // Quadrature mirror: g[j] = (-1)^j h[L-1-j].
        let highpass: Vec<f64> = lowpass
            .iter()
            .rev()
            .enumerate()
            .map(|(j, &h)| if j % 2 == 0 { h } else { -h })
            .collect();
        (lowpass, highpass)
    }
}

/// Detail subbands produced by one decomposition level, together with the
/// extent of the array that was decomposed (pre-padding) so the inverse can
/// crop back.
#[derive(Debug, Clone)]
pub struct DetailBands {
    pub horizontal: Array2<f64>,
    pub vertical: Array2<f64>,
    pub diagonal: Array2<f64>,
    source_rows: usize,
    source_cols: usize,
}

impl DetailBands {
    pub fn band_dim(&self) -> (usize, usize) {
        self.horizontal.dim()
    }

    pub fn bands(&self) -> [&Array2<f64>; 3] {
        [&self.horizontal, &self.vertical, &self.diagonal]
    }

    pub fn bands_mut(&mut self) -> [&mut Array2<f64>; 3] {
        [
            &mut self.horizontal,
            &mut self.vertical,
            &mut self.diagonal,
        ]
    }
}

/// Multi-level decomposition of one channel: the coarsest approximation plus
/// per-level detail bands ordered finest first.
#[derive(Debug, Clone)]
pub struct WaveletDecomposition {
    pub approx: Array2<f64>,
    pub details: Vec<DetailBands>,
    pub family: WaveletFamily,
}

impl WaveletDecomposition {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Total number of stored coefficients. Equals the input pixel count
    /// whenever the input dimensions divide by `2^levels`.
    pub fn coefficient_count(&self) -> usize {
        self.approx.len() + self.details.iter().map(|d| 3 * d.horizontal.len()).sum::<usize>()
    }
}

/// Deepest decomposition the raw transform supports for an `h x w` channel:
/// each level halves both extents (after padding), and the approximation must
/// keep at least one sample per axis.
pub fn max_levels(height: usize, width: usize) -> usize {
    let side = height.min(width);
    (usize::BITS - 1 - side.leading_zeros()) as usize
}

/// Forward multi-level transform of one channel.
pub fn dwt2(channel: &Array2<f64>, family: WaveletFamily, levels: usize) -> Result<WaveletDecomposition> {
    let (h, w) = channel.dim();
    if levels == 0 {
        return Err(Error::Config("levels must be >= 1".into()));
    }
    let deepest = max_levels(h, w);
    if levels > deepest {
        return Err(Error::Config(format!(
            "{levels} levels exceeds decomposable depth {deepest} for {h}x{w}"
        )));
    }
    let mut approx = channel.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, bands) = dwt2_step(&approx, family);
        approx = next;
        details.push(bands);
    }
    Ok(WaveletDecomposition {
        approx,
        details,
        family,
    })
}

/// Exact inverse of [`dwt2`] up to floating-point round-off.
pub fn idwt2(decomp: &WaveletDecomposition) -> Result<Array2<f64>> {
    let mut current = decomp.approx.clone();
    for bands in decomp.details.iter().rev() {
        if current.dim() != bands.band_dim() {
            return Err(Error::Shape(format!(
                "approximation {:?} does not match detail bands {:?}",
                current.dim(),
                bands.band_dim()
            )));
        }
        current = idwt2_step(&current, bands, decomp.family);
    }
    Ok(current)
}

fn dwt2_step(input: &Array2<f64>, family: WaveletFamily) -> (Array2<f64>, DetailBands) {
    let (source_rows, source_cols) = input.dim();
    let padded = pad_to_even(input);
    let (rows, cols) = padded.dim();
    let (lp, hp) = family.filters();

    // Transform along width: each row splits into low/high halves.
    let mut row_low = Array2::zeros((rows, cols / 2));
    let mut row_high = Array2::zeros((rows, cols / 2));
    let mut line = vec![0.0; cols];
    let mut low = vec![0.0; cols / 2];
    let mut high = vec![0.0; cols / 2];
    for r in 0..rows {
        for c in 0..cols {
            line[c] = padded[[r, c]];
        }
        analyze(&line, &mut low, &mut high, &lp, &hp);
        for k in 0..cols / 2 {
            row_low[[r, k]] = low[k];
            row_high[[r, k]] = high[k];
        }
    }

    // Transform along height.
    let half_rows = rows / 2;
    let half_cols = cols / 2;
    let mut approx = Array2::zeros((half_rows, half_cols));
    let mut vertical = Array2::zeros((half_rows, half_cols));
    let mut horizontal = Array2::zeros((half_rows, half_cols));
    let mut diagonal = Array2::zeros((half_rows, half_cols));
    let mut column = vec![0.0; rows];
    let mut col_low = vec![0.0; half_rows];
    let mut col_high = vec![0.0; half_rows];
    for c in 0..half_cols {
        for r in 0..rows {
            column[r] = row_low[[r, c]];
        }
        analyze(&column, &mut col_low, &mut col_high, &lp, &hp);
        for k in 0..half_rows {
            approx[[k, c]] = col_low[k];
            vertical[[k, c]] = col_high[k];
        }
        for r in 0..rows {
            column[r] = row_high[[r, c]];
        }
        analyze(&column, &mut col_low, &mut col_high, &lp, &hp);
        for k in 0..half_rows {
            horizontal[[k, c]] = col_low[k];
            diagonal[[k, c]] = col_high[k];
        }
    }

    (
        approx.clone(),
        DetailBands {
            horizontal,
            vertical,
            diagonal,
            source_rows,
            source_cols,
        },
    )
}

fn idwt2_step(approx: &Array2<f64>, bands: &DetailBands, family: WaveletFamily) -> Array2<f64> {
    let (half_rows, half_cols) = approx.dim();
    let rows = half_rows * 2;
    let cols = half_cols * 2;
    let (lp, hp) = family.filters();

    // Invert the height transform back to row-low / row-high planes.
    let mut row_low = Array2::zeros((rows, half_cols));
    let mut row_high = Array2::zeros((rows, half_cols));
    let mut col_low = vec![0.0; half_rows];
    let mut col_high = vec![0.0; half_rows];
    let mut column = vec![0.0; rows];
    for c in 0..half_cols {
        for k in 0..half_rows {
            col_low[k] = approx[[k, c]];
            col_high[k] = bands.vertical[[k, c]];
        }
        synthesize(&col_low, &col_high, &mut column, &lp, &hp);
        for r in 0..rows {
            row_low[[r, c]] = column[r];
        }
        for k in 0..half_rows {
            col_low[k] = bands.horizontal[[k, c]];
            col_high[k] = bands.diagonal[[k, c]];
        }
        synthesize(&col_low, &col_high, &mut column, &lp, &hp);
        for r in 0..rows {
            row_high[[r, c]] = column[r];
        }
    }

    // Invert the width transform.
    let mut out = Array2::zeros((rows, cols));
    let mut low = vec![0.0; half_cols];
    let mut high = vec![0.0; half_cols];
    let mut line = vec![0.0; cols];
    for r in 0..rows {
        for k in 0..half_cols {
            low[k] = row_low[[r, k]];
            high[k] = row_high[[r, k]];
        }
        synthesize(&low, &high, &mut line, &lp, &hp);
        for c in 0..cols {
            out[[r, c]] = line[c];
        }
    }

    // Crop any padding introduced at analysis time.
    if (rows, cols) != (bands.source_rows, bands.source_cols) {
        let mut cropped = Array2::zeros((bands.source_rows, bands.source_cols));
        for r in 0..bands.source_rows {
            for c in 0..bands.source_cols {
                cropped[[r, c]] = out[[r, c]];
            }
        }
        cropped
    } else {
        out
    }
}

/// One periodized analysis step: `low[k] = sum_j h[j] x[(2k+j) mod n]`.
fn analyze(x: &[f64], low: &mut [f64], high: &mut [f64], lp: &[f64], hp: &[f64]) {
    let n = x.len();
    for k in 0..n / 2 {
        let mut a = 0.0;
        let mut d = 0.0;
        for j in 0..lp.len() {
            let idx = (2 * k + j) % n;
            a += lp[j] * x[idx];
            d += hp[j] * x[idx];
        }
        low[k] = a;
        high[k] = d;
    }
}

/// Adjoint of [`analyze`]; equals the inverse because the analysis is
/// orthonormal.
fn synthesize(low: &[f64], high: &[f64], out: &mut [f64], lp: &[f64], hp: &[f64]) {
    let n = out.len();
    out.fill(0.0);
    for k in 0..low.len() {
        for j in 0..lp.len() {
            let idx = (2 * k + j) % n;
            out[idx] += low[k] * lp[j] + high[k] * hp[j];
        }
    }
}

/// Replicate the trailing row/column so both extents are even.
fn pad_to_even(input: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = input.dim();
    let new_rows = rows + rows % 2;
    let new_cols = cols + cols % 2;
    if (new_rows, new_cols) == (rows, cols) {
        return input.clone();
    }
    Array2::from_shape_fn((new_rows, new_cols), |(r, c)| {
        input[[r.min(rows - 1), c.min(cols - 1)]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random_image(rng: &mut RngState, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.next_f64())
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn haar_matches_stated_block_convention() {
        let block = ndarray::array![[1.0, 3.0], [5.0, 7.0]];
        let decomp = dwt2(&block, WaveletFamily::Haar, 1).unwrap();
        // Hand evaluation of the documented 2x2 convention.
        assert!((decomp.approx[[0, 0]] - 8.0).abs() < 1e-12);
        assert!((decomp.details[0].horizontal[[0, 0]] - (-2.0)).abs() < 1e-12);
        assert!((decomp.details[0].vertical[[0, 0]] - (-4.0)).abs() < 1e-12);
        assert!(decomp.details[0].diagonal[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn constant_image_kills_all_details() {
        let img = Array2::from_elem((16, 16), 0.37);
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let decomp = dwt2(&img, family, 3).unwrap();
            for level in &decomp.details {
                for band in level.bands() {
                    assert!(band.iter().all(|&v| v.abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn perfect_reconstruction_on_random_images() {
        let mut rng = RngState::new(12);
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            for _ in 0..20 {
                let img = random_image(&mut rng, 32, 32);
                let decomp = dwt2(&img, family, 2).unwrap();
                let rec = idwt2(&decomp).unwrap();
                assert!(max_abs_diff(&img, &rec) <= 1e-10);
            }
        }
    }

    #[test]
    fn perfect_reconstruction_with_odd_sizes() {
        let mut rng = RngState::new(13);
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            for (h, w) in [(10, 10), (9, 14), (11, 8)] {
                let img = random_image(&mut rng, h, w);
                let decomp = dwt2(&img, family, 2).unwrap();
                let rec = idwt2(&decomp).unwrap();
                assert_eq!(rec.dim(), (h, w));
                assert!(max_abs_diff(&img, &rec) <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_decomposition_inverts_to_zero() {
        let img = Array2::zeros((16, 16));
        let decomp = dwt2(&img, WaveletFamily::Haar, 2).unwrap();
        let rec = idwt2(&decomp).unwrap();
        assert!(rec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_round_trips_exactly() {
        let img = Array2::from_elem((16, 16), 0.5);
        let decomp = dwt2(&img, WaveletFamily::Db2, 2).unwrap();
        let rec = idwt2(&decomp).unwrap();
        assert!(max_abs_diff(&img, &rec) <= 1e-12);
    }

    #[test]
    fn transform_is_linear() {
        let mut rng = RngState::new(14);
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let x = random_image(&mut rng, 16, 16);
            let y = random_image(&mut rng, 16, 16);
            let (a, b) = (0.7, -1.3);
            let combo = dwt2(&(a * &x + b * &y), family, 2).unwrap();
            let dx = dwt2(&x, family, 2).unwrap();
            let dy = dwt2(&y, family, 2).unwrap();
            let expect_approx = a * &dx.approx + b * &dy.approx;
            assert!(max_abs_diff(&combo.approx, &expect_approx) <= 1e-10);
            for lvl in 0..2 {
                for (cb, (xb, yb)) in combo.details[lvl].bands().into_iter().zip(
                    dx.details[lvl]
                        .bands()
                        .into_iter()
                        .zip(dy.details[lvl].bands()),
                ) {
                    let expected = a * xb + b * yb;
                    assert!(max_abs_diff(cb, &expected) <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn depth_limit_is_enforced() {
        let img = Array2::zeros((32, 32));
        assert!(dwt2(&img, WaveletFamily::Haar, 5).is_ok());
        assert!(matches!(
            dwt2(&img, WaveletFamily::Haar, 6),
            Err(Error::Config(_))
        ));
        assert!(dwt2(&img, WaveletFamily::Haar, 0).is_err());
    }

    #[test]
    fn critical_sampling_on_dyadic_input() {
        let img = Array2::zeros((32, 32));
        let decomp = dwt2(&img, WaveletFamily::Db2, 3).unwrap();
        assert_eq!(decomp.coefficient_count(), 32 * 32);
    }

    #[test]
    fn mismatched_bands_are_a_structure_error() {
        let img = Array2::zeros((16, 16));
        let mut decomp = dwt2(&img, WaveletFamily::Haar, 1).unwrap();
        decomp.approx = Array2::zeros((4, 4));
        assert!(matches!(idwt2(&decomp), Err(Error::Shape(_))));
    }
}
