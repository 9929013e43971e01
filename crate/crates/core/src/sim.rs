//! Synthetic surface strain for a hollow tube with an elliptical defect.
//!
//! The healthy response is a sum of `n_modes` fixed smooth spatial shapes
//! (lengthwise cosines times angular harmonics, coupled across the six
//! strain channels by a fixed mixing table) driven by independent
//! filtered-white-noise modal coordinates. Every channel of a crack-free
//! field is therefore exactly rank `n_modes` over time.
//!
//! A defect adds a rotated anisotropic Gaussian strain concentration whose
//! time amplitude is the healthy normal strain across the crack at its
//! centre. Defects superpose linearly on the healthy field, and a defect in
//! a region the excitation does not strain produces no signal.
//!
//! Strain values are in arbitrary units; channels are ordered
//! `ε11, ε22, ε33, ε12, ε23, ε13` with 1 lengthwise, 2 hoop, 3 radial.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, wrap_angle, SurfacePoint};
use crate::rng::{derive_seed, streams};

pub const N_STRAIN: usize = 6;
pub const STRAIN_CHANNELS: [&str; N_STRAIN] = ["e11", "e22", "e33", "e12", "e23", "e13"];

/// Fixed seed for the structure's spatial mode shapes. The shapes are a
/// property of the tube, not of an experiment.
const STRUCTURE_SEED: u64 = 0x7B35_EED0;
/// Relative weight of each channel in the mode shapes.
const CHANNEL_SCALE: [f64; N_STRAIN] = [1.0, 1.0, 0.3, 0.5, 0.1, 0.1];
const POISSON: f64 = 0.3;

fn default_semi_major() -> (f64, f64) {
    (0.3, 0.6)
}

fn default_aspect() -> (f64, f64) {
    (0.4, 1.0)
}

/// Tube geometry, sampling grid and surrogate-physics settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    /// Meters.
    pub length: f64,
    /// Meters.
    pub diameter: f64,
    pub n_length: usize,
    pub n_angle: usize,
    pub n_timesteps: usize,
    /// Seconds between samples.
    pub dt: f64,
    pub n_modes: usize,
    /// Standard deviation scale of the modal coordinates.
    pub excitation: f64,
    /// Modal damping ratio of the excitation filter.
    pub damping: f64,
    /// Natural frequency of the first mode, Hz; mode `m` adds `m * frequency_step`.
    pub base_frequency: f64,
    pub frequency_step: f64,
    /// Range of defect semi-major axes, meters.
    pub semi_major: (f64, f64),
    /// Range of semi-minor / semi-major ratios.
    pub aspect: (f64, f64),
    /// Strain concentration factor applied to dataset defects.
    pub defect_gain: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            length: 10.0,
            diameter: 1.0,
            n_length: 150,
            n_angle: 150,
            n_timesteps: 401,
            dt: 1.25e-3,
            n_modes: 12,
            excitation: 1.0,
            damping: 0.05,
            base_frequency: 4.0,
            frequency_step: 2.5,
            semi_major: default_semi_major(),
            aspect: default_aspect(),
            defect_gain: 1.0,
        }
    }
}

impl TubeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("tube: {msg}")));
        if !(self.length > 0.0) {
            return bad("length must be > 0");
        }
        if !(self.diameter > 0.0) {
            return bad("diameter must be > 0");
        }
        if self.n_length < 2 || self.n_angle < 2 {
            return bad("grid dimensions must be >= 2");
        }
        if self.n_timesteps < 2 {
            return bad("n_timesteps must be >= 2");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if self.n_modes == 0 {
            return bad("n_modes must be >= 1");
        }
        if !(self.excitation >= 0.0) || !self.excitation.is_finite() {
            return bad("excitation must be finite and >= 0");
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return bad("damping must lie in (0, 1)");
        }
        let nyquist = 0.5 / self.dt;
        let top = self.base_frequency + self.frequency_step * (self.n_modes - 1) as f64;
        if !(self.base_frequency > 0.0) || self.frequency_step < 0.0 || top >= nyquist {
            return bad("modal frequencies must be positive and below Nyquist");
        }
        let (lo, hi) = self.semi_major;
        if !(lo > 0.0 && hi >= lo) {
            return bad("semi_major range must satisfy 0 < lo <= hi");
        }
        let (lo, hi) = self.aspect;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return bad("aspect range must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn grid_points(&self) -> usize {
        self.n_length * self.n_angle
    }

    /// Lateral surface area, m².
    pub fn surface_area(&self) -> f64 {
        TAU * self.radius() * self.length
    }

    pub fn grid_position(&self, li: usize, ai: usize) -> SurfacePoint {
        SurfacePoint::new(
            self.length * li as f64 / (self.n_length - 1) as f64,
            TAU * ai as f64 / self.n_angle as f64,
        )
    }

    /// Index of the grid cell nearest to `p`, as `(li, ai)`.
    pub fn nearest_cell(&self, p: SurfacePoint) -> (usize, usize) {
        let li = (p.l / self.length * (self.n_length - 1) as f64)
            .round()
            .clamp(0.0, (self.n_length - 1) as f64) as usize;
        let ai = (normalize_angle(p.phi) / TAU * self.n_angle as f64).round() as usize % self.n_angle;
        (li, ai)
    }

    /// Largest grid spacing, meters.
    pub fn cell_size(&self) -> f64 {
        let dl = self.length / (self.n_length - 1) as f64;
        let da = TAU * self.radius() / self.n_angle as f64;
        dl.max(da)
    }
}

/// Geometry of an elliptical defect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrackLabel {
    /// Lengthwise position, meters in `[0, length]`.
    pub p_l: f64,
    /// Angular position, radians in `[0, 2π)`.
    pub p_phi: f64,
    /// In-plane rotation of the major axis, radians in `[0, π)`.
    pub p_psi: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
}

impl CrackLabel {
    pub fn center(&self) -> SurfacePoint {
        SurfacePoint::new(self.p_l, self.p_phi)
    }

    /// Target triple in the network's output order `(p_phi, p_L, p_psi)`.
    pub fn target(&self) -> [f64; 3] {
        [self.p_phi, self.p_l, self.p_psi]
    }

    fn validate(&self, config: &TubeConfig) -> Result<()> {
        let finite = [self.p_l, self.p_phi, self.p_psi, self.semi_major, self.semi_minor]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("crack parameters must be finite".into()));
        }
        if self.p_l < 0.0 || self.p_l > config.length {
            return Err(Error::InvalidArgument(format!(
                "crack at p_L = {} lies outside the tube [0, {}]",
                self.p_l, config.length
            )));
        }
        if !(self.semi_minor > 0.0 && self.semi_major >= self.semi_minor) {
            return Err(Error::InvalidArgument(
                "crack axes must satisfy semi_major >= semi_minor > 0".into(),
            ));
        }
        Ok(())
    }

    /// Uniform position and orientation; axes from the configured ranges.
    pub fn sample(config: &TubeConfig, rng: &mut impl Rng) -> Self {
        let p_l = rng.random::<f64>() * config.length;
        let p_phi = rng.random::<f64>() * TAU;
        let p_psi = rng.random::<f64>() * PI;
        let (lo, hi) = config.semi_major;
        let semi_major = lo + (hi - lo) * rng.random::<f64>();
        let (alo, ahi) = config.aspect;
        let semi_minor = semi_major * (alo + (ahi - alo) * rng.random::<f64>());
        Self {
            p_l,
            p_phi,
            p_psi,
            semi_major,
            semi_minor,
        }
    }

    /// Unit normal to the crack's major axis in (lengthwise, hoop) axes.
    fn normal(&self) -> (f64, f64) {
        (-self.p_psi.sin(), self.p_psi.cos())
    }

    /// Channel pattern of the strain concentration.
    fn concentration_pattern(&self) -> [f64; N_STRAIN] {
        let (n1, n2) = self.normal();
        [n1 * n1, n2 * n2, -POISSON, n1 * n2, 0.0, 0.0]
    }

    /// Weights of the functional reading the normal strain across the crack.
    fn opening_weights(&self) -> [f64; N_STRAIN] {
        let (n1, n2) = self.normal();
        [n1 * n1, n2 * n2, 0.0, 2.0 * n1 * n2, 0.0, 0.0]
    }

    /// Spatial envelope of the concentration at `p`, in `(0, 1]`.
    pub fn envelope(&self, p: SurfacePoint, radius: f64) -> f64 {
        let dx = p.l - self.p_l;
        let dy = radius * wrap_angle(p.phi - self.p_phi);
        let (s, c) = self.p_psi.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (-0.5 * ((u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2))).exp()
    }
}

/// The fixed spatial mode shapes of the structure.
#[derive(Debug)]
pub struct ModalShapes {
    lengthwise_order: Vec<usize>,
    angular_order: Vec<usize>,
    /// `[mode][channel]` cosine and sine weights of the angular harmonic.
    cos_weight: Vec<[f64; N_STRAIN]>,
    sin_weight: Vec<[f64; N_STRAIN]>,
    length: f64,
}

impl ModalShapes {
    pub fn new(config: &TubeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(STRUCTURE_SEED);
        let n = config.n_modes;
        let mut lengthwise_order = Vec::with_capacity(n);
        let mut angular_order = Vec::with_capacity(n);
        let mut cos_weight = Vec::with_capacity(n);
        let mut sin_weight = Vec::with_capacity(n);
        for m in 0..n {
            lengthwise_order.push(m % 4);
            angular_order.push(m / 4);
            let mut cw = [0.0; N_STRAIN];
            let mut sw = [0.0; N_STRAIN];
            for c in 0..N_STRAIN {
                cw[c] = CHANNEL_SCALE[c] * rng.sample::<f64, _>(StandardNormal);
                sw[c] = CHANNEL_SCALE[c] * rng.sample::<f64, _>(StandardNormal);
            }
            cos_weight.push(cw);
            sin_weight.push(sw);
        }
        Self {
            lengthwise_order,
            angular_order,
            cos_weight,
            sin_weight,
            length: config.length,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.lengthwise_order.len()
    }

    /// All channel values of mode `m` at `p`.
    pub fn mode_value(&self, m: usize, p: SurfacePoint) -> [f64; N_STRAIN] {
        let lw = (PI * self.lengthwise_order[m] as f64 * p.l / self.length).cos();
        let k = self.angular_order[m] as f64;
        let (s, c) = (k * p.phi).sin_cos();
        let mut out = [0.0; N_STRAIN];
        for ch in 0..N_STRAIN {
            // k = 0 has no sine component
            let sin_part = if self.angular_order[m] == 0 { 0.0 } else { self.sin_weight[m][ch] * s };
            out[ch] = lw * (self.cos_weight[m][ch] * c + sin_part);
        }
        out
    }

    /// `[n_modes × 6]` mode values at `p`, row-major.
    pub fn point_table(&self, p: SurfacePoint) -> Vec<f64> {
        (0..self.n_modes()).flat_map(|m| self.mode_value(m, p)).collect()
    }
}

/// Second-order filtered white noise for one mode, started in its
/// stationary distribution.
fn modal_coordinates(config: &TubeConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n_modes = config.n_modes;
    let t_len = config.n_timesteps;
    let mut coeffs = vec![0.0; t_len * n_modes];
    for m in 0..n_modes {
        let omega = TAU * (config.base_frequency + config.frequency_step * m as f64);
        let zeta = config.damping;
        let r = (-zeta * omega * config.dt).exp();
        let omega_d = omega * (1.0 - zeta * zeta).sqrt();
        let phi1 = 2.0 * r * (omega_d * config.dt).cos();
        let phi2 = -r * r;
        // stationary variance of the AR(2) process per unit innovation variance
        let gamma0 = (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2).powi(2) - phi1 * phi1));
        let target_sd = config.excitation / (1.0 + 0.25 * m as f64);
        let innovation_sd = target_sd / gamma0.sqrt();
        let rho1 = phi1 / (1.0 - phi2);

        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let mut prev2 = target_sd * z0;
        let mut prev1 = rho1 * prev2 + target_sd * (1.0 - rho1 * rho1).max(0.0).sqrt() * z1;
        coeffs[m] = prev2;
        if t_len > 1 {
            coeffs[n_modes + m] = prev1;
        }
        for t in 2..t_len {
            let w: f64 = rng.sample(StandardNormal);
            let x = phi1 * prev1 + phi2 * prev2 + innovation_sd * w;
            coeffs[t * n_modes + m] = x;
            prev2 = prev1;
            prev1 = x;
        }
    }
    coeffs
}

/// A defect applied to an experiment, with its precomputed time amplitude.
#[derive(Clone, Debug)]
struct Defect {
    crack: CrackLabel,
    gain: f64,
    pattern: [f64; N_STRAIN],
    /// Healthy normal strain across the crack at its centre, per time step.
    amplitude: Vec<f64>,
}

impl Defect {
    fn new(crack: CrackLabel, gain: f64, shapes: &ModalShapes, coefficients: &[f64]) -> Self {
        let n_modes = shapes.n_modes();
        let table = shapes.point_table(crack.center());
        let weights = crack.opening_weights();
        let mode_opening: Vec<f64> = (0..n_modes)
            .map(|m| (0..N_STRAIN).map(|c| weights[c] * table[m * N_STRAIN + c]).sum())
            .collect();
        let amplitude = coefficients
            .chunks(n_modes)
            .map(|a| a.iter().zip(&mode_opening).map(|(x, w)| x * w).sum())
            .collect();
        Self {
            crack,
            gain,
            pattern: crack.concentration_pattern(),
            amplitude,
        }
    }

    fn add_at(&self, t: usize, envelope: f64, out: &mut [f64; N_STRAIN]) {
        let scale = self.gain * self.amplitude[t] * envelope;
        for c in 0..N_STRAIN {
            out[c] += scale * self.pattern[c];
        }
    }
}

/// Builds healthy and damaged experiments for one tube configuration.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: TubeConfig,
    shapes: Arc<ModalShapes>,
}

impl Simulator {
    pub fn new(config: TubeConfig) -> Result<Self> {
        config.validate()?;
        let shapes = Arc::new(ModalShapes::new(&config));
        Ok(Self { config, shapes })
    }

    pub fn config(&self) -> &TubeConfig {
        &self.config
    }

    pub fn shapes(&self) -> &ModalShapes {
        &self.shapes
    }

    /// Crack-free experiment whose excitation is drawn from `seed`.
    pub fn baseline(&self, seed: u64) -> Experiment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coefficients = modal_coordinates(&self.config, &mut rng);
        Experiment {
            config: self.config.clone(),
            shapes: Arc::clone(&self.shapes),
            seed,
            coefficients,
            defects: Vec::new(),
        }
    }

    /// Experiment `index` of the dataset derived from `master_seed`: an
    /// independent excitation with one randomly placed defect.
    pub fn experiment(&self, master_seed: u64, index: usize) -> Result<Experiment> {
        let seed = derive_seed(master_seed, &[streams::DATASET, index as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crack = CrackLabel::sample(&self.config, &mut rng);
        let excitation_seed = rng.next_u64();
        let mut exp = self.baseline(excitation_seed);
        exp.seed = seed;
        exp.add_defect(crack, self.config.defect_gain)?;
        Ok(exp)
    }

    /// Crack-free experiment with given `[n_timesteps × n_modes]` modal coordinates.
    pub fn from_coefficients(&self, seed: u64, coefficients: Vec<f64>) -> Result<Experiment> {
        let expected = self.config.n_timesteps * self.config.n_modes;
        if coefficients.len() != expected {
            return Err(Error::Format(format!(
                "{} modal coordinates, expected {expected}",
                coefficients.len()
            )));
        }
        Ok(Experiment {
            config: self.config.clone(),
            shapes: Arc::clone(&self.shapes),
            seed,
            coefficients,
            defects: Vec::new(),
        })
    }

    /// Crack-free experiment `index` of the healthy reference set.
    pub fn healthy(&self, master_seed: u64, index: usize) -> Experiment {
        self.baseline(derive_seed(master_seed, &[streams::BASELINE, index as u64]))
    }
}

/// A lazily evaluated strain field: modal coordinates plus defects.
///
/// Values are computed on demand, so sparse sensor readings never
/// materialize the full grid.
#[derive(Clone, Debug)]
pub struct Experiment {
    config: TubeConfig,
    shapes: Arc<ModalShapes>,
    seed: u64,
    coefficients: Vec<f64>,
    defects: Vec<Defect>,
}

impl Experiment {
    pub fn config(&self) -> &TubeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_timesteps(&self) -> usize {
        self.config.n_timesteps
    }

    /// Label of the most recently added defect.
    pub fn crack(&self) -> Option<CrackLabel> {
        self.defects.last().map(|d| d.crack)
    }

    /// `[n_timesteps × n_modes]` modal coordinates.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `(crack, gain)` of every defect in the order added.
    pub fn defects(&self) -> Vec<(CrackLabel, f64)> {
        self.defects.iter().map(|d| (d.crack, d.gain)).collect()
    }

    /// Superposes a defect.
    pub fn add_defect(&mut self, crack: CrackLabel, gain: f64) -> Result<()> {
        crack.validate(&self.config)?;
        if !gain.is_finite() {
            return Err(Error::InvalidArgument("defect gain must be finite".into()));
        }
        self.defects
            .push(Defect::new(crack, gain, &self.shapes, &self.coefficients));
        Ok(())
    }

    pub fn with_defect(mut self, crack: CrackLabel, gain: f64) -> Result<Self> {
        self.add_defect(crack, gain)?;
        Ok(self)
    }

    /// Healthy normal strain across the latest defect, per time step.
    pub fn defect_amplitude(&self) -> Option<&[f64]> {
        self.defects.last().map(|d| d.amplitude.as_slice())
    }

    /// Evaluation context for one surface point.
    pub fn probe(&self, p: SurfacePoint) -> Probe<'_> {
        let radius = self.config.radius();
        Probe {
            exp: self,
            table: self.shapes.point_table(p),
            envelopes: self.defects.iter().map(|d| d.crack.envelope(p, radius)).collect(),
        }
    }

    /// Probe at the centre of grid cell `(li, ai)`.
    pub fn probe_cell(&self, li: usize, ai: usize) -> Probe<'_> {
        self.probe(self.config.grid_position(li, ai))
    }

    /// All six channels over the full grid at time `t`, as
    /// `[grid_point × channel]` with grid points ordered `(li, ai)`.
    pub fn snapshot(&self, t: usize) -> Vec<f64> {
        let probes = self.grid_probes();
        probes.iter().flat_map(|p| p.strain(t)).collect()
    }

    pub(crate) fn grid_probes(&self) -> Vec<Probe<'_>> {
        let c = &self.config;
        (0..c.n_length)
            .flat_map(|li| (0..c.n_angle).map(move |ai| (li, ai)))
            .map(|(li, ai)| self.probe_cell(li, ai))
            .collect()
    }

    /// Materializes the full `[t, L, φ, channel]` array.
    pub fn materialize(&self) -> DenseStrainField {
        let probes = self.grid_probes();
        let t_len = self.config.n_timesteps;
        let mut strain = Vec::with_capacity(t_len * probes.len() * N_STRAIN);
        for t in 0..t_len {
            for p in &probes {
                strain.extend_from_slice(&p.strain(t));
            }
        }
        DenseStrainField {
            config: self.config.clone(),
            strain,
            crack: self.crack(),
            seed: self.seed,
            coefficients: self.coefficients.clone(),
        }
    }
}

/// Cached mode and defect-envelope values at one surface point.
pub struct Probe<'a> {
    exp: &'a Experiment,
    table: Vec<f64>,
    envelopes: Vec<f64>,
}

impl Probe<'_> {
    pub fn baseline(&self, t: usize) -> [f64; N_STRAIN] {
        let n_modes = self.exp.shapes.n_modes();
        let a = &self.exp.coefficients[t * n_modes..(t + 1) * n_modes];
        let mut out = [0.0; N_STRAIN];
        for (m, &am) in a.iter().enumerate() {
            let row = &self.table[m * N_STRAIN..(m + 1) * N_STRAIN];
            for c in 0..N_STRAIN {
                out[c] += am * row[c];
            }
        }
        out
    }

    pub fn strain(&self, t: usize) -> [f64; N_STRAIN] {
        let mut out = self.baseline(t);
        for (d, &env) in self.exp.defects.iter().zip(&self.envelopes) {
            d.add_at(t, env, &mut out);
        }
        out
    }
}

/// The full strain tensor time series on the surface grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStrainField {
    pub config: TubeConfig,
    /// `[n_timesteps × n_length × n_angle × 6]`, row-major.
    pub strain: Vec<f64>,
    pub crack: Option<CrackLabel>,
    /// Seed of the excitation draw.
    pub seed: u64,
    /// Modal coordinates of the healthy response, `[n_timesteps × n_modes]`.
    pub coefficients: Vec<f64>,
}

impl DenseStrainField {
    pub fn index(&self, t: usize, li: usize, ai: usize, channel: usize) -> usize {
        let c = &self.config;
        ((t * c.n_length + li) * c.n_angle + ai) * N_STRAIN + channel
    }

    pub fn at(&self, t: usize, li: usize, ai: usize) -> [f64; N_STRAIN] {
        let i = self.index(t, li, ai, 0);
        self.strain[i..i + N_STRAIN].try_into().expect("six channels")
    }

    /// One channel over the full grid at time `t`.
    pub fn channel_snapshot(&self, t: usize, channel: usize) -> Vec<f64> {
        let g = self.config.grid_points();
        (0..g)
            .map(|p| self.strain[(t * g + p) * N_STRAIN + channel])
            .collect()
    }
}

/// Healthy dense field with an excitation drawn from `rng`.
pub fn simulate_baseline(config: &TubeConfig, rng: &mut impl Rng) -> Result<DenseStrainField> {
    let sim = Simulator::new(config.clone())?;
    Ok(sim.baseline(rng.next_u64()).materialize())
}

/// Superposes a defect on a dense field.
pub fn add_defect(field: &DenseStrainField, crack: &CrackLabel, gain: f64) -> Result<DenseStrainField> {
    let config = &field.config;
    config.validate()?;
    crack.validate(config)?;
    let shapes = ModalShapes::new(config);
    let defect = Defect::new(*crack, gain, &shapes, &field.coefficients);
    let radius = config.radius();
    let envelopes: Vec<f64> = (0..config.n_length)
        .flat_map(|li| (0..config.n_angle).map(move |ai| (li, ai)))
        .map(|(li, ai)| crack.envelope(config.grid_position(li, ai), radius))
        .collect();
    let mut out = field.clone();
    let g = config.grid_points();
    for t in 0..config.n_timesteps {
        for (p, &env) in envelopes.iter().enumerate() {
            let base = (t * g + p) * N_STRAIN;
            let mut v: [f64; N_STRAIN] = out.strain[base..base + N_STRAIN].try_into().expect("six");
            defect.add_at(t, env, &mut v);
            out.strain[base..base + N_STRAIN].copy_from_slice(&v);
        }
    }
    out.crack = Some(*crack);
    Ok(out)
}

/// `n_experiments` independent damaged experiments, each with its own
/// stream derived from `(master_seed, index)`. Fields stay lazy; call
/// [`Experiment::materialize`] for the dense array.
pub fn generate_dataset(
    config: &TubeConfig,
    n_experiments: usize,
    master_seed: u64,
) -> Result<Vec<(Experiment, CrackLabel)>> {
    if n_experiments == 0 {
        return Err(Error::InvalidArgument("n_experiments must be >= 1".into()));
    }
    let sim = Simulator::new(config.clone())?;
    (0..n_experiments)
        .map(|i| {
            let exp = sim.experiment(master_seed, i)?;
            let label = exp.crack().expect("dataset experiments carry a defect");
            Ok((exp, label))
        })
        .collect()
}
