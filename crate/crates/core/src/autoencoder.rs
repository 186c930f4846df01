//! Frame ↔ latent codec with a factor-8 spatial reduction.
//!
//! Every non-overlapping 8×8×3 patch is flattened (channel-major, then row,
//! then column) and rotated by a seeded orthonormal 192×192 matrix. The
//! transform is linear, norm preserving, local to one latent site, and
//! invertible up to float rounding.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scheduler::Latent;

pub const PATCH: usize = 8;
pub const LATENT_CHANNELS: usize = PATCH * PATCH * 3;

/// An RGB frame `(3, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub pixels: Array3<f64>,
}

impl ImageFrame {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidArgument(format!("frames need 3 channels, got {c}")));
        }
        check_divisible(h, w)?;
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(PATCH) || !w.is_multiple_of(PATCH) {
        return Err(Error::InvalidArgument(format!("frame {h}x{w} is not a positive multiple of {PATCH}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    OrthonormalPatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub mode: CodecMode,
    pub seed: u64,
    /// Rows are the latent channels; `mixing · patch = latent site`.
    pub mixing: Array2<f64>,
}

impl CodecParams {
    pub fn orthonormal(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = LATENT_CHANNELS;
        let raw = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
        Self { mode: CodecMode::OrthonormalPatch, seed, mixing: orthonormalize_rows(raw) }
    }

    /// Largest entry of `|MᵀM − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.mixing.t().dot(&self.mixing);
        gram.indexed_iter().map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max)
    }
}

/// Modified Gram–Schmidt over rows, run twice for a clean basis.
fn orthonormalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    m
}

/// Patch matrix `(192, h·w)`; column `i·w + j` holds the flattened patch at site (i, j).
fn patches(pixels: &Array3<f64>) -> Array2<f64> {
    let (_, hh, ww) = pixels.dim();
    let (h, w) = (hh / PATCH, ww / PATCH);
    let mut out = Array2::zeros((LATENT_CHANNELS, h * w));
    for i in 0..h {
        for j in 0..w {
            let mut col = out.column_mut(i * w + j);
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        col[k] = pixels[[c, i * PATCH + dy, j * PATCH + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn unpatch(cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let mut pixels = Array3::zeros((3, h * PATCH, w * PATCH));
    for i in 0..h {
        for j in 0..w {
            let col = cols.column(i * w + j);
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        pixels[[c, i * PATCH + dy, j * PATCH + dx]] = col[k];
                        k += 1;
                    }
                }
            }
        }
    }
    pixels
}

pub fn encode(frame: &ImageFrame, params: &CodecParams) -> Result<Latent> {
    let (_, hh, ww) = frame.pixels.dim();
    check_divisible(hh, ww)?;
    let (h, w) = (hh / PATCH, ww / PATCH);
    let mixed = params.mixing.dot(&patches(&frame.pixels));
    let data = mixed.into_shape_with_order((LATENT_CHANNELS, h, w)).expect("contiguous");
    Ok(Latent { data, timestep: 0 })
}

/// Inverse transform without clamping; the exact inverse of [`encode`].
pub fn decode_raw(latent: &Latent, params: &CodecParams) -> Result<Array3<f64>> {
    let [c, h, w] = latent.shape();
    if c != params.mixing.nrows() {
        return Err(Error::shape(&[params.mixing.nrows(), h, w], &[c, h, w]));
    }
    let flat = latent.data.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).expect("contiguous");
    Ok(unpatch(&params.mixing.t().dot(&flat), h, w))
}

pub fn decode(latent: &Latent, params: &CodecParams) -> Result<ImageFrame> {
    let pixels = decode_raw(latent, params)?.mapv(|v| v.clamp(0.0, 1.0));
    Ok(ImageFrame { pixels })
}

/// Sum of squares over the channel axis for each site, `(h, w)`.
pub fn site_energy(latent: &Latent) -> Array2<f64> {
    latent.data.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(seed: u64, h: usize, w: usize) -> ImageFrame {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFrame::new(Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>())).unwrap()
    }

    fn norm(a: &Array3<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn mixing_matrix_is_orthonormal() {
        let p = CodecParams::orthonormal(0);
        assert!(p.orthonormality_error() < 1e-6, "{}", p.orthonormality_error());
        assert_eq!(p.mixing.dim(), (192, 192));
    }

    #[test]
    fn latent_is_eight_times_smaller() {
        let p = CodecParams::orthonormal(1);
        let z = encode(&random_frame(3, 64, 64), &p).unwrap();
        assert_eq!(z.shape(), [192, 8, 8]);
        assert_eq!(z.timestep, 0);
        let z = encode(&random_frame(3, 16, 40), &p).unwrap();
        assert_eq!(z.shape(), [192, 2, 5]);
    }

    #[test]
    fn zero_frame_zero_latent() {
        let p = CodecParams::orthonormal(1);
        let z = encode(&ImageFrame::new(Array3::zeros((3, 16, 16))).unwrap(), &p).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let back = decode(&Latent::zeros(192, 2, 2), &p).unwrap();
        assert!(back.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_and_norm_preservation() {
        let p = CodecParams::orthonormal(7);
        let x = random_frame(11, 64, 64);
        let z = encode(&x, &p).unwrap();
        let back = decode_raw(&z, &p).unwrap();
        let err = (&back - &x.pixels).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-5, "{err}");
        assert!((z.l2_norm() - norm(&x.pixels)).abs() < 1e-5);
    }

    #[test]
    fn perturbation_is_isometric() {
        let p = CodecParams::orthonormal(2);
        let z = encode(&random_frame(5, 16, 16), &p).unwrap();
        let mut zp = z.clone();
        let delta = Array3::from_shape_fn(z.data.dim(), |(c, i, j)| ((c * 7 + i * 3 + j) as f64).sin() * 0.01);
        zp.data += &delta;
        let diff = decode_raw(&zp, &p).unwrap() - decode_raw(&z, &p).unwrap();
        assert!((norm(&diff) - norm(&delta)).abs() < 1e-9);
    }

    #[test]
    fn patch_change_touches_one_site() {
        let p = CodecParams::orthonormal(4);
        let x = random_frame(6, 32, 32);
        let mut y = x.clone();
        for dy in 0..8 {
            for dx in 0..8 {
                y.pixels[[1, 16 + dy, 8 + dx]] = 0.5;
            }
        }
        let (zx, zy) = (encode(&x, &p).unwrap(), encode(&y, &p).unwrap());
        let diff = site_energy(&Latent { data: &zx.data - &zy.data, timestep: 0 });
        for ((i, j), &v) in diff.indexed_iter() {
            if (i, j) == (2, 1) {
                assert!(v > 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn decode_clamps() {
        let p = CodecParams::orthonormal(0);
        let mut z = Latent::zeros(192, 1, 1);
        z.data[[0, 0, 0]] = 100.0;
        let f = decode(&z, &p).unwrap();
        assert!(f.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shape_errors() {
        let p = CodecParams::orthonormal(0);
        assert!(ImageFrame::new(Array3::zeros((3, 12, 16))).is_err());
        assert!(ImageFrame::new(Array3::zeros((1, 16, 16))).is_err());
        assert!(ImageFrame::new(Array3::from_elem((3, 8, 8), 1.5)).is_err());
        assert!(decode(&Latent::zeros(4, 1, 1), &p).is_err());
        let bad = ImageFrame { pixels: Array3::zeros((3, 10, 16)) };
        assert!(encode(&bad, &p).is_err());
    }

    #[test]
    fn seeded_codec_is_reproducible() {
        assert_eq!(CodecParams::orthonormal(9).mixing, CodecParams::orthonormal(9).mixing);
        assert_ne!(CodecParams::orthonormal(9).mixing, CodecParams::orthonormal(10).mixing);
    }
}
