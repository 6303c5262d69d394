//! Synthetic LC/GC-MS data: exponentially modified Gaussian elution profiles,
//! sparse max-normalized mass spectra and their bilinear assembly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Below this `tau / sigma` ratio the EMG is evaluated as a pure Gaussian.
pub const GAUSSIAN_LIMIT_RATIO: f64 = 1e-4;

/// Exponentially modified Gaussian peak parameters, in scan-index units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmgParams {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    #[serde(default)]
    pub tau: f64,
}

impl EmgParams {
    pub fn gaussian(amplitude: f64, center: f64, sigma: f64) -> Self {
        Self { amplitude, center, sigma, tau: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.amplitude, self.center, self.sigma, self.tau]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter(format!("EMG parameters must be finite: {self:?}")));
        }
        if self.amplitude <= 0.0 {
            return Err(Error::InvalidParameter(format!("EMG amplitude must be > 0, got {}", self.amplitude)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("EMG sigma must be > 0, got {}", self.sigma)));
        }
        if self.tau < 0.0 {
            return Err(Error::InvalidParameter(format!("EMG tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    fn eval(&self, t: f64) -> f64 {
        let u = (t - self.center) / self.sigma;
        if self.tau <= GAUSSIAN_LIMIT_RATIO * self.sigma {
            return self.amplitude * (-0.5 * u * u).exp();
        }
        let r = self.sigma / self.tau;
        let z = (r - u) / std::f64::consts::SQRT_2;
        let pre = self.amplitude * r * (std::f64::consts::PI / 2.0).sqrt();
        let v = if z < 0.0 {
            // exponent r^2/2 - u r is negative here, no overflow
            pre * (r * (0.5 * r - u)).exp() * libm::erfc(z)
        } else {
            pre * (-0.5 * u * u).exp() * erfcx(z)
        };
        v.max(0.0)
    }
}

/// Scaled complementary error function `exp(z^2) erfc(z)` for `z >= 0`.
fn erfcx(z: f64) -> f64 {
    if z < 26.0 {
        (z * z).exp() * libm::erfc(z)
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / (2.0 * z2) + 3.0 / (4.0 * z2 * z2) - 15.0 / (8.0 * z2 * z2 * z2);
        series / (z * std::f64::consts::PI.sqrt())
    }
}

/// Evaluates an EMG elution profile at the given scan positions.
///
/// With `tau = 0` this is a Gaussian whose apex height equals `amplitude`;
/// a positive `tau` adds an exponential tail and pushes the apex past `center`.
pub fn emg_peak<T: Real>(t: &[T], params: &EmgParams) -> Result<DVector<T>> {
    params.validate()?;
    Ok(DVector::from_iterator(t.len(), t.iter().map(|&ti| T::lit(params.eval(ti.to_f64_lossy())))))
}

/// A sparse mass spectrum: channel count plus `(channel, relative intensity)` peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub n_channels: usize,
    pub peaks: Vec<(usize, f64)>,
}

impl SpectrumSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::InvalidParameter("spectrum needs at least one channel".into()));
        }
        if self.peaks.is_empty() {
            return Err(Error::InvalidParameter("spectrum peak list is empty".into()));
        }
        let mut seen = vec![false; self.n_channels];
        for &(ch, intensity) in &self.peaks {
            if ch >= self.n_channels {
                return Err(Error::DimensionMismatch(format!(
                    "peak channel {ch} outside 0..{}",
                    self.n_channels
                )));
            }
            if seen[ch] {
                return Err(Error::InvalidParameter(format!("duplicate peak channel {ch}")));
            }
            seen[ch] = true;
            if !(intensity > 0.0 && intensity <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "peak intensity at channel {ch} must lie in (0, 1], got {intensity}"
                )));
            }
        }
        Ok(())
    }
}

/// Builds a spectrum vector that is zero off the listed channels and has maximum exactly 1.
pub fn make_spectrum<T: Real>(spec: &SpectrumSpec) -> Result<DVector<T>> {
    spec.validate()?;
    let max = spec.peaks.iter().map(|p| p.1).fold(0.0_f64, f64::max);
    let mut v = DVector::zeros(spec.n_channels);
    for &(ch, intensity) in &spec.peaks {
        v[ch] = if intensity == max { T::one() } else { T::lit(intensity / max) };
    }
    Ok(v)
}

/// Simulated data matrix `D` (scans x channels) with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub d: DMatrix<T>,
    /// Concentration profiles, scans x components.
    pub c_true: DMatrix<T>,
    /// Spectra, components x channels, each row max-normalized to 1.
    pub s_true: DMatrix<T>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub scenario: String,
}

impl<T: Real> Dataset<T> {
    pub fn n_scans(&self) -> usize {
        self.d.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.d.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.c_true.ncols()
    }
}

/// Assembles `D = C S + noise` from per-component elution and spectrum vectors.
///
/// Noise is i.i.d. Gaussian drawn from a ChaCha8 stream seeded with `seed`,
/// so identical inputs always produce a bit-identical matrix.
pub fn assemble_dataset<T: Real>(
    elutions: &[DVector<T>],
    spectra: &[DVector<T>],
    noise_sigma: f64,
    seed: u64,
    scenario: &str,
) -> Result<Dataset<T>> {
    let p = elutions.len();
    if p == 0 {
        return Err(Error::InvalidParameter("at least one component is required".into()));
    }
    if spectra.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{p} elution profiles but {} spectra",
            spectra.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let n = elutions[0].len();
    let m = spectra[0].len();
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter("elutions and spectra must be non-empty".into()));
    }
    for (k, e) in elutions.iter().enumerate() {
        if e.len() != n {
            return Err(Error::DimensionMismatch(format!("elution {k} has length {}, expected {n}", e.len())));
        }
    }
    for (k, s) in spectra.iter().enumerate() {
        if s.len() != m {
            return Err(Error::DimensionMismatch(format!("spectrum {k} has length {}, expected {m}", s.len())));
        }
    }

    let c_true = DMatrix::from_fn(n, p, |i, k| elutions[k][i]);
    let s_true = DMatrix::from_fn(p, m, |k, j| spectra[k][j]);
    if c_true.iter().chain(s_true.iter()).any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::InvalidParameter("profiles must be finite and non-negative".into()));
    }
    let mut d = &c_true * &s_true;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
        // column-major traversal fixes the draw order
        for v in d.iter_mut() {
            *v += T::lit(normal.sample(&mut rng));
        }
    }
    Ok(Dataset { d, c_true, s_true, noise_sigma, seed, scenario: scenario.to_string() })
}

/// Elution profile of one component: an EMG peak on top of a constant baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElutionSpec {
    #[serde(flatten)]
    pub peak: EmgParams,
    #[serde(default)]
    pub baseline: f64,
}

impl ElutionSpec {
    pub fn profile<T: Real>(&self, n_scans: usize) -> Result<DVector<T>> {
        if !(self.baseline >= 0.0 && self.baseline.is_finite()) {
            return Err(Error::InvalidParameter(format!("baseline must be finite and >= 0, got {}", self.baseline)));
        }
        let t: Vec<T> = (0..n_scans).map(|i| T::lit(i as f64)).collect();
        let mut v = emg_peak(&t, &self.peak)?;
        let b = T::lit(self.baseline);
        v.iter_mut().for_each(|x| *x += b);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub elution: ElutionSpec,
    pub spectrum: Vec<(usize, f64)>,
}

/// Declarative dataset description, the structure of scenario JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub tag: String,
    pub n_scans: usize,
    pub n_channels: usize,
    pub components: Vec<ComponentSpec>,
}

impl ScenarioConfig {
    /// Checks dimensions and parameters; error messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.n_scans < 2 {
            return Err(Error::InvalidParameter(format!("n_scans must be >= 2, got {}", self.n_scans)));
        }
        if self.n_channels < 2 {
            return Err(Error::InvalidParameter(format!("n_channels must be >= 2, got {}", self.n_channels)));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidParameter("components: at least one component is required".into()));
        }
        if self.components.len() > self.n_scans.min(self.n_channels) {
            return Err(Error::DimensionMismatch(format!(
                "components: {} components exceed min(n_scans, n_channels) = {}",
                self.components.len(),
                self.n_scans.min(self.n_channels)
            )));
        }
        for (k, comp) in self.components.iter().enumerate() {
            comp.elution
                .peak
                .validate()
                .map_err(|e| Error::InvalidParameter(format!("components[{k}].elution: {e}")))?;
            let spec = SpectrumSpec { n_channels: self.n_channels, peaks: comp.spectrum.clone() };
            spec.validate().map_err(|e| match e {
                Error::DimensionMismatch(msg) => {
                    Error::DimensionMismatch(format!("components[{k}].spectrum: {msg} (n_channels = {})", self.n_channels))
                }
                other => Error::InvalidParameter(format!("components[{k}].spectrum: {other}")),
            })?;
        }
        Ok(())
    }

    pub fn build<T: Real>(&self, noise_sigma: f64, seed: u64) -> Result<Dataset<T>> {
        self.validate()?;
        let elutions = self
            .components
            .iter()
            .map(|c| c.elution.profile(self.n_scans))
            .collect::<Result<Vec<DVector<T>>>>()?;
        let spectra = self
            .components
            .iter()
            .map(|c| make_spectrum(&SpectrumSpec { n_channels: self.n_channels, peaks: c.spectrum.clone() }))
            .collect::<Result<Vec<DVector<T>>>>()?;
        assemble_dataset(&elutions, &spectra, noise_sigma, seed, &self.tag)
    }
}

/// The four canned experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Continuum background plus one embedded analyte, disjoint spectra.
    TwoCompPlain,
    /// Same elution layout with shared mass channels.
    TwoCompOverlap,
    /// Two analytes on a continuum background, disjoint spectra.
    ThreeCompPlain,
    /// Gaussian elutions on the same layout, with shared mass channels.
    ThreeCompOverlap,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::TwoCompPlain, Scenario::TwoCompOverlap, Scenario::ThreeCompPlain, Scenario::ThreeCompOverlap];

    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::TwoCompPlain => "two_comp_plain",
            Scenario::TwoCompOverlap => "two_comp_overlap",
            Scenario::ThreeCompPlain => "three_comp_plain",
            Scenario::ThreeCompOverlap => "three_comp_overlap",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn n_components(&self) -> usize {
        match self {
            Scenario::TwoCompPlain | Scenario::TwoCompOverlap => 2,
            Scenario::ThreeCompPlain | Scenario::ThreeCompOverlap => 3,
        }
    }

    /// True when the scenario's spectra share at least one mass channel.
    pub fn has_channel_overlap(&self) -> bool {
        matches!(self, Scenario::TwoCompOverlap | Scenario::ThreeCompOverlap)
    }

    pub fn config(&self) -> ScenarioConfig {
        let comp = |peak: EmgParams, baseline: f64, spectrum: &[(usize, f64)]| ComponentSpec {
            elution: ElutionSpec { peak, baseline },
            spectrum: spectrum.to_vec(),
        };
        let emg = |amplitude, center, sigma, tau| EmgParams { amplitude, center, sigma, tau };
        match self {
            Scenario::TwoCompPlain => ScenarioConfig {
                tag: self.tag().into(),
                n_scans: 50,
                n_channels: 30,
                components: vec![
                    comp(
                        emg(0.30, 8.0, 30.0, 20.0),
                        0.15,
                        &[(1, 0.6), (5, 1.0), (9, 0.45), (13, 0.8), (17, 0.3), (22, 0.55)],
                    ),
                    comp(
                        emg(1.0, 24.0, 11.0, 3.0),
                        0.0,
                        &[(3, 0.35), (7, 0.9), (11, 1.0), (15, 0.5), (19, 0.7), (25, 0.25), (28, 0.6)],
                    ),
                ],
            },
            Scenario::TwoCompOverlap => ScenarioConfig {
                tag: self.tag().into(),
                n_scans: 50,
                n_channels: 30,
                components: vec![
                    comp(
                        emg(0.30, 8.0, 30.0, 20.0),
                        0.15,
                        &[(2, 1.0), (6, 0.8), (10, 0.7), (14, 0.9), (18, 0.6)],
                    ),
                    comp(
                        emg(1.0, 24.0, 11.0, 3.0),
                        0.0,
                        &[(2, 0.15), (4, 1.0), (8, 0.9), (12, 0.7), (16, 0.8), (20, 0.6), (24, 0.5)],
                    ),
                ],
            },
            Scenario::ThreeCompPlain => ScenarioConfig {
                tag: self.tag().into(),
                n_scans: 40,
                n_channels: 40,
                components: vec![
                    comp(
                        emg(1.0, 14.0, 12.0, 2.0),
                        0.0,
                        &[(1, 0.5), (4, 1.0), (8, 0.35), (12, 0.8), (17, 0.6), (21, 0.25), (26, 0.7), (33, 0.4)],
                    ),
                    comp(
                        emg(0.9, 26.0, 12.0, 3.0),
                        0.0,
                        &[(2, 0.7), (6, 0.4), (10, 1.0), (15, 0.55), (19, 0.9), (24, 0.3), (29, 0.65), (36, 0.45)],
                    ),
                    comp(
                        emg(0.3, 8.0, 30.0, 20.0),
                        0.2,
                        &[(0, 0.4), (7, 0.8), (13, 1.0), (23, 0.5), (31, 0.6), (38, 0.35)],
                    ),
                ],
            },
            // The base peaks of components 0 and 2 each leak into component 1 at
            // low weight; every component keeps private channels.
            Scenario::ThreeCompOverlap => ScenarioConfig {
                tag: self.tag().into(),
                n_scans: 40,
                n_channels: 40,
                components: vec![
                    comp(
                        EmgParams::gaussian(1.0, 14.0, 12.0),
                        0.0,
                        &[(3, 1.0), (7, 0.7), (12, 0.85), (17, 0.6), (22, 0.75), (28, 0.5)],
                    ),
                    comp(
                        EmgParams::gaussian(0.9, 26.0, 12.0),
                        0.0,
                        &[(3, 0.2), (5, 0.6), (9, 1.0), (14, 0.45), (20, 0.2), (25, 0.35), (31, 0.9), (37, 0.3)],
                    ),
                    comp(
                        EmgParams::gaussian(0.3, 8.0, 30.0),
                        0.2,
                        &[(11, 0.8), (16, 0.55), (20, 1.0), (27, 0.4), (33, 0.65), (39, 0.5)],
                    ),
                ],
            },
        }
    }

    pub fn dataset<T: Real>(&self, noise_sigma: f64, seed: u64) -> Result<Dataset<T>> {
        self.config().build(noise_sigma, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, step: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * step).collect()
    }

    fn argmax(v: &DVector<f64>) -> usize {
        v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
    }

    #[test]
    fn gaussian_limit_hits_amplitude_at_center() {
        let t = grid(101, 1.0);
        let v = emg_peak(&t, &EmgParams::gaussian(1.0, 50.0, 5.0)).unwrap();
        assert!((v[50] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_moves_apex_right() {
        let t = grid(1000, 0.1);
        let g = emg_peak(&t, &EmgParams { amplitude: 1.0, center: 50.0, sigma: 5.0, tau: 0.0 }).unwrap();
        let e = emg_peak(&t, &EmgParams { amplitude: 1.0, center: 50.0, sigma: 5.0, tau: 2.0 }).unwrap();
        assert!(argmax(&e) >= argmax(&g));
        assert!(t[argmax(&e)] >= 50.0);
    }

    #[test]
    fn emg_matches_convolution_quadrature() {
        // Gaussian convolved with a unit-area exponential, by trapezoid rule.
        let p = EmgParams { amplitude: 2.0, center: 40.0, sigma: 4.0, tau: 6.0 };
        let t = [30.0, 40.0, 47.5, 60.0, 90.0];
        let v = emg_peak(&t, &p).unwrap();
        for (k, &ti) in t.iter().enumerate() {
            let h = 1e-3;
            let steps = (200.0 / h) as usize;
            let mut acc = 0.0;
            for s in 0..=steps {
                let x = s as f64 * h;
                let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
                let g = (-0.5 * ((ti - x - p.center) / p.sigma).powi(2)).exp();
                acc += w * g * (-x / p.tau).exp() / p.tau;
            }
            let expected = p.amplitude * acc * h;
            assert!((v[k] - expected).abs() < 1e-6 * expected.max(1e-3), "t={ti}: {} vs {expected}", v[k]);
        }
    }

    #[test]
    fn emg_is_stable_for_tiny_tails_and_far_tails() {
        let t = grid(400, 0.5);
        for tau in [1e-3, 0.01, 0.5, 50.0] {
            let v = emg_peak(&t, &EmgParams { amplitude: 1.0, center: 20.0, sigma: 0.8, tau }).unwrap();
            assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0), "tau = {tau}");
        }
    }

    #[test]
    fn emg_rejects_bad_parameters() {
        let t = [0.0, 1.0];
        for p in [
            EmgParams { amplitude: f64::NAN, center: 0.0, sigma: 1.0, tau: 0.0 },
            EmgParams { amplitude: 1.0, center: f64::INFINITY, sigma: 1.0, tau: 0.0 },
            EmgParams { amplitude: 1.0, center: 0.0, sigma: 0.0, tau: 0.0 },
            EmgParams { amplitude: 1.0, center: 0.0, sigma: 1.0, tau: -1.0 },
            EmgParams { amplitude: 0.0, center: 0.0, sigma: 1.0, tau: 0.0 },
        ] {
            assert!(matches!(emg_peak::<f64>(&t, &p), Err(Error::InvalidParameter(_))));
        }
    }

    #[test]
    fn spectrum_normalization() {
        let v: DVector<f64> = make_spectrum(&SpectrumSpec { n_channels: 10, peaks: vec![(3, 0.5)] }).unwrap();
        assert_eq!(v[3], 1.0);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);

        let v: DVector<f64> =
            make_spectrum(&SpectrumSpec { n_channels: 10, peaks: vec![(1, 0.2), (7, 0.8)] }).unwrap();
        assert_eq!(v[7], 1.0);
        assert!((v[1] - 0.25).abs() < 1e-15);
        assert_eq!(v.iter().filter(|x| x.abs() > 1e-9).count(), 2);
    }

    #[test]
    fn spectrum_errors() {
        let dup = SpectrumSpec { n_channels: 10, peaks: vec![(1, 0.2), (1, 0.8)] };
        assert!(make_spectrum::<f64>(&dup).is_err());
        let empty = SpectrumSpec { n_channels: 10, peaks: vec![] };
        assert!(make_spectrum::<f64>(&empty).is_err());
        let outside = SpectrumSpec { n_channels: 4, peaks: vec![(4, 1.0)] };
        assert!(matches!(make_spectrum::<f64>(&outside), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn noiseless_assembly_is_exact_and_seeded_noise_is_repeatable() {
        let ds: Dataset<f64> = Scenario::TwoCompPlain.dataset(0.0, 1).unwrap();
        let diff = &ds.d - &ds.c_true * &ds.s_true;
        assert_eq!(diff.amax(), 0.0);

        let a: Dataset<f64> = Scenario::TwoCompPlain.dataset(0.01, 42).unwrap();
        let b: Dataset<f64> = Scenario::TwoCompPlain.dataset(0.01, 42).unwrap();
        assert!(a.d.iter().zip(b.d.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c: Dataset<f64> = Scenario::TwoCompPlain.dataset(0.01, 43).unwrap();
        assert_ne!(a.d, c.d);
    }

    #[test]
    fn assembly_rejects_mismatched_dimensions() {
        let e = vec![DVector::from_element(5, 1.0), DVector::from_element(4, 1.0)];
        let s = vec![DVector::from_element(3, 1.0), DVector::from_element(3, 1.0)];
        assert!(matches!(assemble_dataset(&e, &s, 0.0, 0, "x"), Err(Error::DimensionMismatch(_))));
        let e = vec![DVector::from_element(5, 1.0)];
        assert!(matches!(assemble_dataset(&e, &s, 0.0, 0, "x"), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn canned_scenarios_have_expected_overlap() {
        for sc in Scenario::ALL {
            let ds: Dataset<f64> = sc.dataset(0.0, 0).unwrap();
            assert_eq!(ds.n_components(), sc.n_components());
            assert!(ds.c_true.iter().chain(ds.s_true.iter()).all(|&v| v >= 0.0));
            let shared = (0..ds.n_channels())
                .filter(|&j| (0..ds.n_components()).filter(|&k| ds.s_true[(k, j)] > 0.0).count() > 1)
                .count();
            assert_eq!(shared > 0, sc.has_channel_overlap(), "{}", sc.tag());
            for k in 0..ds.n_components() {
                assert_eq!(ds.s_true.row(k).max(), 1.0);
            }
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = Scenario::TwoCompPlain.config();
        cfg.components[1].spectrum.push((30, 0.5));
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("components[1].spectrum"), "{msg}");
    }
}
