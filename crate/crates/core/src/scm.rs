//! Synthetic lag-1 structural causal models with known adjacency, plus mask
//! perturbation and random masks.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CausalMask, MaskSource, TimeSeries};
use crate::error::{ExcapError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Linear,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScmTask {
    /// Binary label = motif present.
    #[default]
    Classification,
    /// Targets are the next step `x[:, T]`.
    Forecasting,
}

/// Which sequences carry the motif.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    /// Class 1 only.
    #[default]
    Presence,
    /// Class 1 gets `+amplitude`, class 0 `-amplitude`; both classes keep
    /// the same marginal variance.
    Signed,
    /// Class 0 gets the bump with alternating signs: same energy in the same
    /// window, so only the motif's shape separates the classes.
    EnergyMatched,
}

/// Waveform planted inside the motif window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotifShape {
    /// One positive half-sine bump.
    #[default]
    HalfSine,
    /// One full sine period; sums to zero so the row mean is unchanged.
    FullSine,
}

/// A waveform planted in `[start, end)` of the listed variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub start: usize,
    pub end: usize,
    pub amplitude: f64,
    pub variables: Vec<usize>,
    #[serde(default)]
    pub class_rule: ClassRule,
    #[serde(default)]
    pub shape: MotifShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub n: usize,
    pub t: usize,
    /// `adjacency[i][j]`: `x_j[t-1]` drives `x_i[t]`.
    pub adjacency: Vec<Vec<bool>>,
    pub noise_std: f64,
    #[serde(default)]
    pub link: Link,
    #[serde(default)]
    pub motif: Option<Motif>,
    #[serde(default)]
    pub task: ScmTask,
    #[serde(default = "default_rate")]
    pub sampling_rate_hz: f64,
    /// Steps simulated and discarded before recording.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_rate() -> f64 {
    1.0
}

fn default_burn_in() -> usize {
    50
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 2 {
            return Err(ExcapError::config("SCM needs N ≥ 1 and T ≥ 2"));
        }
        if self.adjacency.len() != self.n || self.adjacency.iter().any(|r| r.len() != self.n) {
            return Err(ExcapError::config(format!("adjacency must be {0}×{0}", self.n)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(ExcapError::config("noise_std must be a finite value ≥ 0"));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(ExcapError::config("sampling rate must be positive"));
        }
        if let Some(m) = &self.motif {
            if m.start >= m.end || m.end > self.t || m.variables.iter().any(|&v| v >= self.n) {
                return Err(ExcapError::config("motif window or variables out of range"));
            }
        }
        if self.task == ScmTask::Forecasting && self.adjacency.iter().any(|r| !r.iter().any(|&b| b)) {
            return Err(ExcapError::config(
                "forecasting needs at least one parent per variable in the adjacency",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScmDataset {
    pub series: Vec<TimeSeries>,
    pub mask: CausalMask,
    /// Lag-1 weight matrix actually used.
    pub weights: Tensor,
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Weights uniform in `[0.3, 0.7]` on the support, rescaled to spectral
/// radius 0.9.
pub fn scm_weights(adjacency: &[Vec<bool>], rng: &mut impl Rng) -> Tensor {
    let n = adjacency.len();
    let mut w = Tensor::zeros(n, n);
    for (i, row) in adjacency.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a {
                w.set(i, j, rng.random_range(0.3..=0.7));
            }
        }
    }
    let rho = spectral_radius(&w);
    if rho > 1e-12 {
        w.scale_assign(0.9 / rho);
    }
    w
}

pub fn generate_scm(spec: &ScmSpec, count: usize, seed: u64) -> Result<ScmDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = scm_weights(&spec.adjacency, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let n = spec.n;
    let steps = spec.t + usize::from(spec.task == ScmTask::Forecasting);
    let mut series = Vec::with_capacity(count);
    for s in 0..count {
        let label = rng.random_bool(0.5);
        let mut state = vec![0.0; n];
        let mut values = Tensor::zeros(n, steps);
        for step in 0..spec.burn_in + steps {
            let mut next = vec![0.0; n];
            for (i, nx) in next.iter_mut().enumerate() {
                let drive: f64 = (0..n).map(|j| w.get(i, j) * state[j]).sum();
                let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *nx = match spec.link {
                    Link::Linear => drive,
                    Link::Tanh => drive.tanh(),
                } + eps;
                if !nx.is_finite() || nx.abs() > 1e6 {
                    return Err(ExcapError::Divergence(format!(
                        "SCM state exploded in sequence {s}; use smaller weights or noise"
                    )));
                }
            }
            state = next;
            if step >= spec.burn_in {
                for i in 0..n {
                    values.set(i, step - spec.burn_in, state[i]);
                }
            }
        }
        if let Some(m) = &spec.motif {
            let len = (m.end - m.start) as f64;
            for &v in &m.variables {
                for t in m.start..m.end {
                    let sign = match (m.class_rule, label) {
                        (_, true) => 1.0,
                        (ClassRule::Presence, false) => 0.0,
                        (ClassRule::Signed, false) => -1.0,
                        (ClassRule::EnergyMatched, false) => [1.0, -1.0][(t - m.start) % 2],
                    };
                    let cycles = match m.shape {
                        MotifShape::HalfSine => 1.0,
                        MotifShape::FullSine => 2.0,
                    };
                    let phase = cycles * std::f64::consts::PI * ((t - m.start) as f64 + 0.5) / len;
                    values.set(v, t, values.get(v, t) + sign * m.amplitude * phase.sin());
                }
            }
        }
        let id = format!("scm{s:05}");
        let ts = match spec.task {
            ScmTask::Classification => {
                TimeSeries::new(id, values, spec.sampling_rate_hz)?.with_label(usize::from(label))
            }
            ScmTask::Forecasting => {
                let target: Vec<f64> = (0..n).map(|i| values.get(i, spec.t)).collect();
                let mut window = Tensor::zeros(n, spec.t);
                for i in 0..n {
                    window.row_mut(i).copy_from_slice(&values.row(i)[..spec.t]);
                }
                TimeSeries::new(id, window, spec.sampling_rate_hz)?.with_targets(target)
            }
        };
        series.push(ts);
    }
    let mask = match spec.task {
        ScmTask::Classification => CausalMask::all_ones(2, n, MaskSource::GroundTruthScm),
        ScmTask::Forecasting => CausalMask::from_rows(&spec.adjacency, MaskSource::GroundTruthScm)?,
    };
    Ok(ScmDataset {
        series,
        mask,
        weights: w,
    })
}

/// Random adjacency with edge probability `density`; self-loops always on.
pub fn random_adjacency(n: usize, density: f64, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (0..n).map(|j| i == j || rng.random_bool(density.clamp(0.0, 1.0))).collect())
        .collect()
}

/// Toggles exactly `flips` distinct entries without emptying any row.
pub fn perturb_mask(mask: &CausalMask, flips: usize, seed: u64) -> Result<CausalMask> {
    let (d, n) = (mask.d(), mask.n());
    if flips > d * n {
        return Err(ExcapError::invalid("flips", format!("{flips} exceeds the {} mask entries", d * n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..d).flat_map(|j| (0..n).map(move |i| (j, i))).collect();
    cells.shuffle(&mut rng);
    let mut rows: Vec<Vec<bool>> = (0..d).map(|j| mask.row(j).to_vec()).collect();
    let mut used = vec![false; cells.len()];
    let mut done = 0;
    // later 0→1 toggles can unlock earlier 1→0 toggles, hence repeated passes
    let mut progress = true;
    while done < flips && progress {
        progress = false;
        for (k, &(j, i)) in cells.iter().enumerate() {
            if done == flips {
                break;
            }
            if used[k] {
                continue;
            }
            let ones = rows[j].iter().filter(|&&b| b).count();
            if rows[j][i] && ones == 1 {
                continue;
            }
            rows[j][i] = !rows[j][i];
            used[k] = true;
            done += 1;
            progress = true;
        }
    }
    if done < flips {
        return Err(ExcapError::invalid(
            "flips",
            format!("cannot toggle {flips} entries without emptying a row"),
        ));
    }
    CausalMask::from_rows(&rows, MaskSource::Perturbed)
}

/// Bernoulli(`density`) entries conditioned on every row being nonempty.
///
/// Equivalent to redrawing empty rows, but samples the row's count of ones
/// from the conditioned binomial directly so tiny densities stay cheap.
pub fn random_mask(d: usize, n: usize, density: f64, seed: u64) -> Result<CausalMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(ExcapError::config(format!("mask density must lie in (0,1], got {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // relative weights C(n,k)·(p/(1-p))^k for k = 1..=n
    let weights: Vec<f64> = if density >= 1.0 {
        (1..=n).map(|k| if k == n { 1.0 } else { 0.0 }).collect()
    } else {
        let odds = density / (1.0 - density);
        let mut c = 1.0;
        (1..=n)
            .map(|k| {
                c = c * (n - k + 1) as f64 / k as f64;
                c * odds.powi(k as i32)
            })
            .collect()
    };
    let total: f64 = weights.iter().sum();
    let rows: Vec<Vec<bool>> = (0..d)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut k = n;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    k = i + 1;
                    break;
                }
                u -= w;
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut row = vec![false; n];
            for &i in &idx[..k] {
                row[i] = true;
            }
            row
        })
        .collect();
    CausalMask::from_rows(&rows, MaskSource::Random)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, t: usize, adjacency: Vec<Vec<bool>>, noise: f64) -> ScmSpec {
        ScmSpec {
            n,
            t,
            adjacency,
            noise_std: noise,
            link: Link::Linear,
            motif: None,
            task: ScmTask::Classification,
            sampling_rate_hz: 1.0,
            burn_in: 20,
        }
    }

    fn identity(n: usize) -> Vec<Vec<bool>> {
        (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
    }

    #[test]
    fn zero_noise_is_fixed_point() {
        let ds = generate_scm(&spec(3, 16, identity(3), 0.0), 2, 0).unwrap();
        assert!(ds.series.iter().all(|s| s.values().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn weights_have_target_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adj = random_adjacency(5, 0.4, 2);
        let w = scm_weights(&adj, &mut rng);
        assert!((spectral_radius(&w) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn unlinked_variables_are_uncorrelated() {
        let ds = generate_scm(&spec(2, 200, identity(2), 1.0), 100, 3).unwrap();
        let mut total = 0.0;
        for s in &ds.series {
            let x = s.values();
            let a = &x.row(0)[..199];
            let b = &x.row(1)[1..];
            let (ma, mb) = (a.iter().sum::<f64>() / 199.0, b.iter().sum::<f64>() / 199.0);
            let cov: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
            let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
            total += cov / (va * vb).sqrt();
        }
        assert!((total / 100.0).abs() < 0.05);
    }

    #[test]
    fn ols_recovers_support() {
        let adj = vec![
            vec![true, false, true],
            vec![true, true, false],
            vec![false, false, true],
        ];
        let mut sp = spec(3, 400, adj.clone(), 0.1);
        sp.task = ScmTask::Forecasting;
        let ds = generate_scm(&sp, 5, 4).unwrap();
        let mut rows_x = Vec::new();
        let mut rows_y = Vec::new();
        for s in &ds.series {
            let x = s.values();
            for t in 1..x.cols() {
                rows_x.extend((0..3).map(|j| x.get(j, t - 1)));
                rows_y.extend((0..3).map(|i| x.get(i, t)));
            }
        }
        let m = rows_x.len() / 3;
        let xm = DMatrix::from_row_slice(m, 3, &rows_x);
        let ym = DMatrix::from_row_slice(m, 3, &rows_y);
        let coef = (xm.transpose() * &xm).try_inverse().unwrap() * xm.transpose() * ym;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(coef[(j, i)].abs() > 0.05, adj[i][j], "coef {i}<-{j} = {}", coef[(j, i)]);
            }
        }
        assert_eq!(ds.mask.parents(0), vec![0, 2]);
    }

    #[test]
    fn motif_separates_classes() {
        let mut sp = spec(2, 40, identity(2), 0.3);
        sp.motif = Some(Motif {
            start: 10,
            end: 20,
            amplitude: 3.0,
            variables: vec![0],
            class_rule: ClassRule::Presence,
            shape: MotifShape::HalfSine,
        });
        let ds = generate_scm(&sp, 60, 5).unwrap();
        let mean_abs = |c: usize| {
            let xs: Vec<f64> = ds
                .series
                .iter()
                .filter(|s| s.label == Some(c))
                .flat_map(|s| s.values().row(0)[10..20].to_vec())
                .collect();
            xs.iter().map(|v| v.abs()).sum::<f64>() / xs.len() as f64
        };
        assert!(mean_abs(1) > mean_abs(0) + 1.0);
    }

    #[test]
    fn signed_motif_flips_with_the_label() {
        let mut sp = spec(1, 30, identity(1), 0.1);
        sp.motif = Some(Motif {
            start: 10,
            end: 20,
            amplitude: 3.0,
            variables: vec![0],
            class_rule: ClassRule::Signed,
            shape: MotifShape::HalfSine,
        });
        let ds = generate_scm(&sp, 40, 2).unwrap();
        for s in &ds.series {
            let m = s.values().row(0)[12..18].iter().sum::<f64>() / 6.0;
            assert_eq!(m > 0.0, s.label == Some(1), "{m}");
        }
    }

    #[test]
    fn energy_matched_motif_keeps_window_energy() {
        let mut sp = spec(1, 30, identity(1), 0.0);
        sp.burn_in = 0;
        sp.motif = Some(Motif {
            start: 10,
            end: 20,
            amplitude: 2.0,
            variables: vec![0],
            class_rule: ClassRule::EnergyMatched,
            shape: MotifShape::HalfSine,
        });
        let ds = generate_scm(&sp, 20, 3).unwrap();
        let energy = |c: usize| {
            let s = ds.series.iter().find(|s| s.label == Some(c)).unwrap();
            let w = &s.values().row(0)[10..20];
            (w.iter().map(|v| v * v).sum::<f64>(), w.iter().sum::<f64>())
        };
        let ((e0, s0), (e1, s1)) = (energy(0), energy(1));
        assert!((e0 - e1).abs() < 1e-9);
        assert!(s1 > 10.0 && s0.abs() < 2.0, "{s0} {s1}");
    }

    #[test]
    fn full_sine_motif_sums_to_zero() {
        let mut sp = spec(1, 30, identity(1), 0.0);
        sp.burn_in = 0;
        sp.motif = Some(Motif {
            start: 8,
            end: 20,
            amplitude: 3.0,
            variables: vec![0],
            class_rule: ClassRule::Presence,
            shape: MotifShape::FullSine,
        });
        let ds = generate_scm(&sp, 20, 4).unwrap();
        let s = ds.series.iter().find(|s| s.label == Some(1)).unwrap();
        let w = &s.values().row(0)[8..20];
        assert!(w.iter().sum::<f64>().abs() < 1e-9);
        assert!(w[2] > 2.0 && w[8] < -2.0, "{w:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(3, 20, identity(3), 0.5);
        let a = generate_scm(&sp, 3, 9).unwrap();
        let b = generate_scm(&sp, 3, 9).unwrap();
        for (x, y) in a.series.iter().zip(&b.series) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn explosive_dynamics_error() {
        let mut sp = spec(1, 10, vec![vec![true]], 1e7);
        sp.burn_in = 0;
        assert!(matches!(generate_scm(&sp, 50, 1), Err(ExcapError::Divergence(_))));
    }

    #[test]
    fn perturb_examples() {
        let m = CausalMask::all_ones(2, 3, MaskSource::GroundTruthScm);
        assert_eq!(perturb_mask(&m, 0, 1).unwrap().frobenius_sq(&m), 0);
        assert_eq!(perturb_mask(&m, 1, 1).unwrap().frobenius_sq(&m), 1);
        let p = perturb_mask(&m, 3, 2).unwrap();
        assert_eq!(p.frobenius_sq(&m), 3);
        for j in 0..2 {
            assert!(p.row(j).iter().any(|&b| b));
        }
        assert!(perturb_mask(&m, 5, 0).is_err());
        let id = CausalMask::identity(3, MaskSource::GroundTruthScm);
        for flips in 0..=9 {
            assert_eq!(perturb_mask(&id, flips, flips as u64).unwrap().frobenius_sq(&id), flips);
        }
    }

    #[test]
    fn random_mask_examples() {
        assert_eq!(random_mask(3, 4, 1.0, 0).unwrap(), CausalMask::all_ones(3, 4, MaskSource::Random));
        let sparse = random_mask(6, 5, 1e-9, 1).unwrap();
        assert!((0..6).all(|j| sparse.row(j).iter().any(|&b| b)));
        assert_eq!(random_mask(4, 4, 0.5, 7).unwrap(), random_mask(4, 4, 0.5, 7).unwrap());
        assert!(random_mask(2, 2, 0.0, 0).is_err());
        // empirical density matches Bernoulli(p) conditioned on a nonempty row
        let m = random_mask(4000, 3, 0.5, 3).unwrap();
        let ones: usize = (0..4000).map(|j| m.row(j).iter().filter(|&&b| b).count()).sum();
        let expected = 3.0 * 0.5 / (1.0 - 0.125);
        assert!((ones as f64 / 4000.0 - expected).abs() < 0.05);
    }
}
