//! Global frequency-domain features: dominant frequency, wavelet level rule,
//! periodized multilevel DWT, truncated DFT and the fusion projection.

use std::cell::RefCell;
use std::f64::consts::SQRT_2;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ExcapError, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized forward DFT.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(&mut buf));
    buf
}

/// Inverse DFT with the `1/T` factor; returns the real part.
pub fn inverse_dft(spectrum: &[Complex64]) -> Vec<f64> {
    let mut buf = spectrum.to_vec();
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()).process(&mut buf));
    let t = buf.len() as f64;
    buf.iter().map(|c| c.re / t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominantFrequency {
    pub hz: f64,
    /// True when the positive-frequency spectrum carried no power and
    /// `f_s/4` was substituted.
    pub fallback: bool,
}

/// Peak of the periodogram over bins `1..=T/2`, lowest bin on ties.
pub fn dominant_frequency(x: &[f64], fs: f64) -> Result<DominantFrequency> {
    let t = x.len();
    if t < 4 {
        return Err(ExcapError::invalid("signal", format!("dominant frequency needs T ≥ 4, got {t}")));
    }
    if !(fs > 0.0) {
        return Err(ExcapError::invalid("sampling rate", format!("must be positive, got {fs}")));
    }
    let spec = dft(x);
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let mut best = (0usize, 0.0f64);
    for (k, c) in spec.iter().enumerate().take(t / 2 + 1).skip(1) {
        let p = c.norm_sqr();
        if p > best.1 {
            best = (k, p);
        }
    }
    // power below rounding noise of the DC component counts as none
    if best.0 == 0 || best.1 <= 1e-20 * (energy * t as f64).max(f64::MIN_POSITIVE) {
        return Ok(DominantFrequency {
            hz: fs / 4.0,
            fallback: true,
        });
    }
    Ok(DominantFrequency {
        hz: best.0 as f64 * fs / t as f64,
        fallback: false,
    })
}

/// `J = max(1, min(floor(log2(f_s / (2 f_d))), J_max))`.
pub fn select_level(fs: f64, fd: f64, j_max: usize) -> usize {
    let raw = (fs / (2.0 * fd)).log2().floor();
    if raw < 1.0 {
        1
    } else {
        (raw as usize).min(j_max).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaveletFamily {
    #[default]
    Haar,
    Db2,
}

impl WaveletFamily {
    fn lowpass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![1.0 / SQRT_2, 1.0 / SQRT_2],
            WaveletFamily::Db2 => {
                let s3 = 3f64.sqrt();
                let d = 4.0 * SQRT_2;
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
        }
    }

    fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let l = h.len();
        (0..l).map(|k| if k % 2 == 0 { h[l - 1 - k] } else { -h[l - 1 - k] }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletCoeffs {
    pub family: WaveletFamily,
    /// Trend `a_J`.
    pub approx: Vec<f64>,
    /// `details[j]` holds `d_{j+1}`, finest first.
    pub details: Vec<Vec<f64>>,
    /// Input length at each level before odd-length extension.
    pub lengths: Vec<usize>,
}

impl WaveletCoeffs {
    pub fn level(&self) -> usize {
        self.details.len()
    }
}

fn dwt_step(x: &[f64], h: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ext = x.to_vec();
    if ext.len() % 2 == 1 {
        ext.push(*x.last().expect("non-empty"));
    }
    let m = ext.len();
    let half = m / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for k in 0..half {
        for (i, (hi, gi)) in h.iter().zip(g).enumerate() {
            let v = ext[(2 * k + i) % m];
            a[k] += hi * v;
            d[k] += gi * v;
        }
    }
    (a, d)
}

fn idwt_step(a: &[f64], d: &[f64], h: &[f64], g: &[f64], len: usize) -> Vec<f64> {
    let m = 2 * a.len();
    let mut x = vec![0.0; m];
    for k in 0..a.len() {
        for (i, (hi, gi)) in h.iter().zip(g).enumerate() {
            x[(2 * k + i) % m] += hi * a[k] + gi * d[k];
        }
    }
    x.truncate(len);
    x
}

/// Periodized multilevel DWT.
pub fn wavelet_decompose(x: &[f64], j: usize, family: WaveletFamily) -> Result<WaveletCoeffs> {
    if j == 0 || x.len() < 1 << j {
        return Err(ExcapError::invalid(
            "wavelet level",
            format!("T = {} is shorter than 2^J = 2^{j}; reduce the level", x.len()),
        ));
    }
    let (h, g) = (family.lowpass(), family.highpass());
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(j);
    let mut lengths = Vec::with_capacity(j);
    for _ in 0..j {
        lengths.push(approx.len());
        let (a, d) = dwt_step(&approx, &h, &g);
        details.push(d);
        approx = a;
    }
    Ok(WaveletCoeffs {
        family,
        approx,
        details,
        lengths,
    })
}

pub fn wavelet_reconstruct(c: &WaveletCoeffs) -> Vec<f64> {
    let (h, g) = (c.family.lowpass(), c.family.highpass());
    let mut x = c.approx.clone();
    for lvl in (0..c.level()).rev() {
        x = idwt_step(&x, &c.details[lvl], &h, &g, c.lengths[lvl]);
    }
    x
}

/// The first `t'` DFT coefficients, DC first.
pub fn fourier_truncate(x: &[f64], t_prime: usize) -> Result<Vec<Complex64>> {
    if t_prime == 0 || t_prime > x.len() {
        return Err(ExcapError::invalid(
            "t_prime",
            format!("must lie in 1..={}, got {t_prime}", x.len()),
        ));
    }
    let mut s = dft(x);
    s.truncate(t_prime);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub j_max: usize,
    pub t_prime: usize,
    pub wavelet: WaveletFamily,
    /// Fixed number of bins the trend `a_J` is average-pooled to.
    pub trend_bins: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            j_max: 4,
            t_prime: 8,
            wavelet: WaveletFamily::Haar,
            trend_bins: 8,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.j_max == 0 || self.trend_bins == 0 || self.t_prime == 0 {
            return Err(ExcapError::config("J_max, t_prime and trend_bins must be positive"));
        }
        if self.t_prime > t {
            return Err(ExcapError::config(format!("t_prime {} exceeds T = {t}", self.t_prime)));
        }
        Ok(())
    }

    /// Width of the per-variable feature vector.
    pub fn feature_dim(&self) -> usize {
        self.trend_bins + 2 * self.t_prime
    }
}

fn adaptive_avg_pool(x: &[f64], bins: usize) -> Vec<f64> {
    let m = x.len();
    (0..bins)
        .map(|i| {
            let lo = i * m / bins;
            let hi = ((i + 1) * m).div_ceil(bins).max(lo + 1);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Per-variable level selection, frozen once per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralPlan {
    pub dominant: Vec<DominantFrequency>,
    pub levels: Vec<usize>,
}

pub fn plan(x: &Tensor, fs: f64, cfg: &SpectralConfig) -> Result<SpectralPlan> {
    let t = x.cols();
    let cap = (usize::BITS - 1 - t.leading_zeros()) as usize;
    let mut dominant = Vec::new();
    let mut levels = Vec::new();
    for r in 0..x.rows() {
        let fd = dominant_frequency(x.row(r), fs)?;
        levels.push(select_level(fs, fd.hz, cfg.j_max).min(cap));
        dominant.push(fd);
    }
    Ok(SpectralPlan { dominant, levels })
}

/// `[pool(a_J)·2^{-J/2} ; Re/Im interleaved of the first t' coefficients / √T]`.
/// Linear in `x` for a fixed level.
pub fn row_features(x: &[f64], level: usize, cfg: &SpectralConfig) -> Result<Vec<f64>> {
    let c = wavelet_decompose(x, level, cfg.wavelet)?;
    let gain = 2f64.powf(-(level as f64) / 2.0);
    let mut f: Vec<f64> = adaptive_avg_pool(&c.approx, cfg.trend_bins)
        .into_iter()
        .map(|v| v * gain)
        .collect();
    let norm = 1.0 / (x.len() as f64).sqrt();
    for z in fourier_truncate(x, cfg.t_prime)? {
        f.push(z.re * norm);
        f.push(z.im * norm);
    }
    Ok(f)
}

/// `N×F` global features of a normalized input under a fixed plan.
pub fn global_features(x: &Tensor, plan: &SpectralPlan, cfg: &SpectralConfig) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.rows(), cfg.feature_dim());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&row_features(x.row(r), plan.levels[r], cfg)?);
    }
    Ok(out)
}

/// `T×F` matrix `G` with `row_features(x) = x·G` for the given level.
pub fn feature_operator(t: usize, level: usize, cfg: &SpectralConfig) -> Result<Tensor> {
    let mut g = Tensor::zeros(t, cfg.feature_dim());
    let mut e = vec![0.0; t];
    for i in 0..t {
        e[i] = 1.0;
        g.row_mut(i).copy_from_slice(&row_features(&e, level, cfg)?);
        e[i] = 0.0;
    }
    Ok(g)
}

/// Adds `global·W_f` to every segment embedding (each `N×d_z`).
pub fn fuse_global(global: &Tensor, w_f: &Tensor, embeddings: &[Tensor]) -> Result<Vec<Tensor>> {
    if global.cols() != w_f.rows() {
        return Err(ExcapError::dim(format!(
            "global features have {} columns, projection expects {}",
            global.cols(),
            w_f.rows()
        )));
    }
    let proj = global.matmul(w_f);
    embeddings
        .iter()
        .map(|z| {
            if z.shape() != proj.shape() {
                return Err(ExcapError::dim(format!(
                    "segment embedding {:?} vs projected globals {:?}",
                    z.shape(),
                    proj.shape()
                )));
            }
            let mut out = z.clone();
            out.add_assign(&proj);
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let t = x.len();
        (0..t)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(n, &v)| Complex64::from_polar(v, -2.0 * PI * (k * n) as f64 / t as f64))
                    .sum()
            })
            .collect()
    }

    fn sine(freq: f64, fs: f64, t: usize, amp: f64) -> Vec<f64> {
        (0..t).map(|n| amp * (2.0 * PI * freq * n as f64 / fs).sin()).collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [4, 7, 16, 30] {
            let x: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (a, b) in dft(&x).iter().zip(naive_dft(&x)) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn dominant_frequency_examples() {
        let f = dominant_frequency(&sine(8.0, 128.0, 128, 1.0), 128.0).unwrap();
        assert!(!f.fallback && (f.hz - 8.0).abs() <= 1.0);
        let f = dominant_frequency(&[2.5; 32], 64.0).unwrap();
        assert!(f.fallback && f.hz == 16.0);
        let mix: Vec<f64> = sine(3.0, 128.0, 128, 1.0)
            .iter()
            .zip(sine(10.0, 128.0, 128, 3.0))
            .map(|(a, b)| a + b)
            .collect();
        assert!((dominant_frequency(&mix, 128.0).unwrap().hz - 10.0).abs() <= 1.0);
        assert!(dominant_frequency(&[1.0, 2.0, 3.0], 1.0).is_err());
    }

    #[test]
    fn select_level_examples() {
        assert_eq!(select_level(128.0, 8.0, 5), 3);
        assert_eq!(select_level(100.0, 40.0, 5), 1);
        assert_eq!(select_level(1024.0, 1.0, 4), 4);
    }

    #[test]
    fn select_level_is_monotone() {
        let grid = [0.5, 1.0, 2.0, 3.0, 7.0, 16.0, 40.0, 100.0];
        for &fs in &[16.0, 100.0, 128.0, 1000.0] {
            let js: Vec<usize> = grid.iter().map(|&fd| select_level(fs, fd, 6)).collect();
            assert!(js.windows(2).all(|w| w[0] >= w[1]));
        }
        for &fd in &grid {
            let js: Vec<usize> = [16.0, 100.0, 128.0, 1000.0].iter().map(|&fs| select_level(fs, fd, 6)).collect();
            assert!(js.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn haar_examples() {
        let c = wavelet_decompose(&[1.0; 4], 1, WaveletFamily::Haar).unwrap();
        assert!(c.approx.iter().all(|v| (v - SQRT_2).abs() < 1e-15));
        assert_eq!(c.details[0], vec![0.0, 0.0]);
        let c = wavelet_decompose(&[3.0; 16], 3, WaveletFamily::Haar).unwrap();
        assert!(c.details.iter().flatten().all(|&d| d == 0.0));
        assert!(wavelet_decompose(&[1.0; 7], 3, WaveletFamily::Haar).is_err());
    }

    #[test]
    fn perfect_reconstruction_both_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            for _ in 0..50 {
                let t = rng.random_range(8..80);
                let j = rng.random_range(1..=3);
                let x: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = wavelet_reconstruct(&wavelet_decompose(&x, j, family).unwrap());
                let rms = (x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t as f64).sqrt();
                assert!(rms < 1e-8, "{family:?} T={t} J={j} rms={rms}");
            }
        }
    }

    #[test]
    fn fourier_examples() {
        let x: Vec<f64> = (0..12).map(|v| (v as f64 * 0.7).cos()).collect();
        let full = fourier_truncate(&x, 12).unwrap();
        let y = inverse_dft(&full);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
        let c = fourier_truncate(&[2.0; 10], 1).unwrap();
        assert!((c[0].re - 20.0).abs() < 1e-12 && c[0].im.abs() < 1e-12);
        let s: Vec<f64> = (0..64).map(|n| (2.0 * PI * 5.0 * n as f64 / 64.0).sin()).collect();
        assert!(fourier_truncate(&s, 4).unwrap().iter().all(|z| z.norm() < 1e-9));
        assert!(fourier_truncate(&x, 13).is_err());
    }

    #[test]
    fn operator_reproduces_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SpectralConfig::default();
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = feature_operator(40, 2, &cfg).unwrap();
        let direct = row_features(&x, 2, &cfg).unwrap();
        let via = Tensor::row_vector(x).matmul(&g);
        assert!(direct.iter().zip(via.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_vec(2, 8, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let w = Tensor::from_vec(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect());
        assert_eq!(fuse_global(&Tensor::zeros(2, 5), &w, &z).unwrap(), z);

        let glob = Tensor::from_vec(2, 5, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        let once = fuse_global(&glob, &w, &z).unwrap();
        let mut w2 = w.clone();
        w2.scale_assign(2.0);
        let twice = fuse_global(&glob, &w2, &z).unwrap();
        for k in 0..3 {
            assert_eq!(once[k].shape(), (2, 8));
            for i in 0..16 {
                let c1 = once[k].data()[i] - z[k].data()[i];
                let c2 = twice[k].data()[i] - z[k].data()[i];
                assert!((c2 - 2.0 * c1).abs() < 1e-12);
            }
        }
        assert!(fuse_global(&Tensor::zeros(2, 4), &w, &z).is_err());
    }
}
