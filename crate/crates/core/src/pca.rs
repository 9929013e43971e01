//! Healthy-structure PCA bases and sparse-sensor contrasting.
//!
//! A basis is fit separately for each strain component and for the two
//! strain invariants. Contrasting a set of sensor readings fits the basis
//! restricted to the sensor rows by least squares and keeps the residual
//! `r = Ψ̄ĉ − ε̄`: whatever the healthy basis cannot explain, which under
//! linear superposition is the defect's contribution.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Experiment, N_STRAIN};
use crate::tensor::gemm;

/// Strain components followed by the two invariants.
pub const N_CHANNELS: usize = N_STRAIN + 2;
pub const CHANNELS: [&str; N_CHANNELS] = ["e11", "e22", "e33", "e12", "e23", "e13", "I1", "I2"];
pub const I1: usize = 6;
pub const I2: usize = 7;

/// Largest acceptable ratio of extreme `|R_ii|` in a sensor-basis QR.
const MAX_CONDITION: f64 = 1e10;

/// First two strain invariants of `(ε11, ε22, ε33, ε12, ε23, ε13)`.
pub fn invariants(e: &[f64; N_STRAIN]) -> (f64, f64) {
    let [e11, e22, e33, e12, e23, e13] = *e;
    let i1 = e11 + e22 + e33;
    let i2 = e12 * e12 + e23 * e23 + e13 * e13 - e11 * e22 - e22 * e33 - e33 * e11;
    (i1, i2)
}

/// The six strain components plus both invariants.
pub fn with_invariants(e: &[f64; N_STRAIN]) -> [f64; N_CHANNELS] {
    let (i1, i2) = invariants(e);
    let mut out = [0.0; N_CHANNELS];
    out[..N_STRAIN].copy_from_slice(e);
    out[I1] = i1;
    out[I2] = i2;
    out
}

/// PCA of one channel over the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBasis {
    /// Healthy mean per grid point.
    pub mean: Vec<f64>,
    /// `[grid_points × n_components]`, row-major, orthonormal columns.
    components: Vec<f64>,
    n_components: usize,
    pub singular_values: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl ChannelBasis {
    pub fn new(
        mean: Vec<f64>,
        components: Vec<f64>,
        n_components: usize,
        singular_values: Vec<f64>,
        explained_variance_ratio: Vec<f64>,
    ) -> Result<Self> {
        if n_components == 0 || components.len() != mean.len() * n_components {
            return Err(Error::Format(format!(
                "basis of {} values does not match {} grid points x {} components",
                components.len(),
                mean.len(),
                n_components
            )));
        }
        Ok(Self {
            mean,
            components,
            n_components,
            singular_values,
            explained_variance_ratio,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn grid_points(&self) -> usize {
        self.mean.len()
    }

    /// Row-major `[grid_points × n_components]` component matrix.
    pub fn components(&self) -> &[f64] {
        &self.components
    }

    /// Component values at grid point `p`.
    pub fn row(&self, p: usize) -> &[f64] {
        &self.components[p * self.n_components..(p + 1) * self.n_components]
    }

    pub fn total_explained_variance(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    /// Residual of the dense projection, `(ΨΨᵀ − I)(x − mean)`, for each of
    /// `n` row-major snapshots. Same sign convention as the sparse residual.
    pub fn dense_residuals(&self, snapshots: &[f64], n: usize) -> Vec<f64> {
        let g = self.grid_points();
        let k = self.n_components;
        assert_eq!(snapshots.len(), n * g, "snapshot matrix shape");
        let mut centered = snapshots.to_vec();
        for row in centered.chunks_mut(g) {
            row.iter_mut().zip(&self.mean).for_each(|(x, m)| *x -= m);
        }
        let mut coeffs = vec![0.0; n * k];
        gemm(n, g, k, &centered, false, &self.components, false, 0.0, &mut coeffs);
        let mut out = centered;
        out.iter_mut().for_each(|x| *x = -*x);
        gemm(n, k, g, &coeffs, false, &self.components, true, 1.0, &mut out);
        out
    }
}

/// PCA of `n_snapshots` row-major snapshots of `grid_points` values each.
///
/// Principal directions come from the eigendecomposition of the snapshot
/// Gram matrix, then are re-orthonormalized over the grid.
pub fn fit_pca(snapshots: &[f64], n_snapshots: usize, n_components: usize) -> Result<ChannelBasis> {
    if n_snapshots == 0 || !snapshots.len().is_multiple_of(n_snapshots) {
        return Err(Error::InvalidArgument(format!(
            "{} values do not split into {n_snapshots} snapshots",
            snapshots.len()
        )));
    }
    let g = snapshots.len() / n_snapshots;
    let n = n_snapshots;
    if n_components == 0 || n_components > n.min(g) {
        return Err(Error::InvalidArgument(format!(
            "n_components = {n_components} must lie in 1..={} (min of snapshots and grid points)",
            n.min(g)
        )));
    }

    let mut mean = vec![0.0; g];
    for row in snapshots.chunks(g) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let raw_energy: f64 = snapshots.iter().map(|x| x * x).sum();
    let mut centered = snapshots.to_vec();
    for row in centered.chunks_mut(g) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }

    let mut gram = vec![0.0; n * n];
    gemm(n, g, n, &centered, false, &centered, true, 0.0, &mut gram);
    let total: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    if total <= 1e-24 * raw_energy || total == 0.0 {
        return Err(Error::ZeroVariance);
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let order = &order[..n_components];
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let singular_values: Vec<f64> = eigenvalues.iter().map(|l| l.sqrt()).collect();

    let mut vk = vec![0.0; n * n_components];
    for (j, &i) in order.iter().enumerate() {
        for r in 0..n {
            vk[r * n_components + j] = eig.eigenvectors[(r, i)];
        }
    }
    let mut projected = vec![0.0; g * n_components];
    gemm(g, n, n_components, &centered, true, &vk, false, 0.0, &mut projected);

    // column-major for orthonormalization
    let s_max = singular_values[0];
    let mut columns: Vec<Vec<f64>> = (0..n_components)
        .map(|j| {
            let s = singular_values[j];
            if s > 1e-10 * s_max {
                (0..g).map(|p| projected[p * n_components + j] / s).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    orthonormalize(&mut columns, g);

    let mut components = vec![0.0; g * n_components];
    for (j, col) in columns.iter().enumerate() {
        for (p, v) in col.iter().enumerate() {
            components[p * n_components + j] = *v;
        }
    }
    let explained_variance_ratio = eigenvalues.iter().map(|l| l / total).collect();
    ChannelBasis::new(mean, components, n_components, singular_values, explained_variance_ratio)
}

/// Modified Gram-Schmidt with one reorthogonalization pass. Empty columns
/// (directions with no variance) are filled with fixed pseudo-random
/// vectors before orthogonalization.
fn orthonormalize(columns: &mut [Vec<f64>], len: usize) {
    let mut filler = ChaCha8Rng::seed_from_u64(0x0b5e_55ed);
    for j in 0..columns.len() {
        if columns[j].is_empty() {
            columns[j] = (0..len).map(|_| filler.random::<f64>() - 0.5).collect();
        }
        let (done, rest) = columns.split_at_mut(j);
        let col = &mut rest[0];
        for _ in 0..2 {
            for prev in done.iter() {
                let dot: f64 = prev.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                col.iter_mut().zip(prev).for_each(|(c, p)| *c -= dot * p);
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Settings for fitting the healthy bases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    /// Components retained for every channel except I2.
    pub n_components: usize,
    /// Components for I2, which is quadratic in the strain and so needs a
    /// larger basis to span the healthy field. Defaults to `n_components`.
    pub i2_components: Option<usize>,
    /// Healthy experiments providing snapshots.
    pub n_healthy: usize,
    /// Snapshots drawn (without replacement) from the healthy time steps.
    pub n_snapshots: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            n_components: 50,
            i2_components: None,
            n_healthy: 2,
            n_snapshots: 200,
        }
    }
}

impl PcaConfig {
    pub fn components_for(&self, channel: usize) -> usize {
        match (channel, self.i2_components) {
            (I2, Some(k)) => k,
            _ => self.n_components,
        }
    }
}

/// Per-channel PCA bases over one surface grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub n_length: usize,
    pub n_angle: usize,
    pub channels: Vec<ChannelBasis>,
}

impl PcaBasis {
    pub fn channel(&self, c: usize) -> &ChannelBasis {
        &self.channels[c]
    }

    pub fn grid_points(&self) -> usize {
        self.n_length * self.n_angle
    }

    /// Fits all eight channel bases from snapshot rows produced by
    /// `snapshot(i)`, which returns `[grid_point × 6]` strain for snapshot `i`.
    pub fn fit_with(
        n_length: usize,
        n_angle: usize,
        n_snapshots: usize,
        config: &PcaConfig,
        mut snapshot: impl FnMut(usize) -> Vec<f64>,
    ) -> Result<Self> {
        let g = n_length * n_angle;
        let mut per_channel: Vec<Vec<f64>> = (0..N_CHANNELS).map(|_| Vec::with_capacity(n_snapshots * g)).collect();
        for i in 0..n_snapshots {
            let snap = snapshot(i);
            if snap.len() != g * N_STRAIN {
                return Err(Error::InvalidArgument(format!(
                    "snapshot has {} values, expected {}",
                    snap.len(),
                    g * N_STRAIN
                )));
            }
            for point in snap.chunks(N_STRAIN) {
                let values = with_invariants(point.try_into().expect("six channels"));
                for (c, v) in values.iter().enumerate() {
                    per_channel[c].push(*v);
                }
            }
        }
        let channels = per_channel
            .iter()
            .enumerate()
            .map(|(c, data)| fit_pca(data, n_snapshots, config.components_for(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_length,
            n_angle,
            channels,
        })
    }

    /// Per grid point, the Euclidean norm over the six strain channels of the
    /// dense projection residual, for `n` snapshots laid out as
    /// [`Experiment::snapshot`] returns them. Output is `[n × grid_points]`.
    pub fn dense_residual_magnitude(&self, snapshots: &[f64], n: usize) -> Result<Vec<f64>> {
        let g = self.grid_points();
        if snapshots.len() != n * g * N_STRAIN {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form {n} snapshots of {g} points",
                snapshots.len()
            )));
        }
        let mut sq = vec![0.0; n * g];
        for c in 0..N_STRAIN {
            let channel: Vec<f64> = snapshots.iter().skip(c).step_by(N_STRAIN).copied().collect();
            let r = self.channels[c].dense_residuals(&channel, n);
            sq.iter_mut().zip(&r).for_each(|(s, v)| *s += v * v);
        }
        sq.iter_mut().for_each(|s| *s = s.sqrt());
        Ok(sq)
    }

    /// Fits from crack-free experiments, sampling snapshot time steps with `rng`.
    pub fn fit_healthy(healthy: &[Experiment], config: &PcaConfig, rng: &mut impl Rng) -> Result<Self> {
        let first = healthy
            .first()
            .ok_or_else(|| Error::InvalidArgument("no healthy experiments for PCA".into()))?;
        let tube = first.config().clone();
        let slots = snapshot_slots(healthy.len(), tube.n_timesteps, config.n_snapshots, rng)?;
        Self::fit_with(tube.n_length, tube.n_angle, slots.len(), config, |i| {
            let (e, t) = slots[i];
            healthy[e].snapshot(t)
        })
    }
}

/// Chooses `n` distinct `(experiment, time)` pairs, sorted.
pub fn snapshot_slots(
    n_experiments: usize,
    n_timesteps: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let available = n_experiments * n_timesteps;
    if n == 0 || n > available {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} snapshots from {available} healthy time steps"
        )));
    }
    let mut picks = rand::seq::index::sample(rng, available, n).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|i| (i / n_timesteps, i % n_timesteps))
        .collect())
}

/// Least-squares fit of a basis restricted to sensor rows.
#[derive(Clone, Debug)]
pub struct SparseProjection {
    pub sensor_indices: Vec<usize>,
    /// `[n_sensors × n_components]`, row-major.
    pub reduced_basis: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// `Ψ̄ĉ − ε̄` at the sensors, with `ε̄` the mean-centred readings.
    pub residual: Vec<f64>,
}

/// A factorized sensor basis, reusable across time steps.
#[derive(Clone, Debug)]
pub struct SparseProjector {
    sensors: Vec<usize>,
    mean: Vec<f64>,
    reduced: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    condition: f64,
}

impl SparseProjector {
    pub fn new(basis: &ChannelBasis, sensors: &[usize]) -> Result<Self> {
        let k = basis.n_components();
        let s = sensors.len();
        if s < k {
            return Err(Error::InvalidArgument(format!(
                "{s} sensors cannot determine {k} PCA coefficients"
            )));
        }
        if let Some(&bad) = sensors.iter().find(|&&i| i >= basis.grid_points()) {
            return Err(Error::InvalidArgument(format!(
                "sensor grid index {bad} outside {} grid points",
                basis.grid_points()
            )));
        }
        let reduced = DMatrix::from_fn(s, k, |i, j| basis.row(sensors[i])[j]);
        let mean = sensors.iter().map(|&i| basis.mean[i]).collect();
        let qr = reduced.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RankDeficient { condition });
        }
        Ok(Self {
            sensors: sensors.to_vec(),
            mean,
            reduced,
            q,
            r,
            condition,
        })
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    /// Residuals for many readings at once. `readings` is
    /// `[n_sensors × n_cases]` row-major; so is the result.
    pub fn residuals(&self, readings: &[f64], n_cases: usize) -> Result<Vec<f64>> {
        let s = self.sensors.len();
        if readings.len() != s * n_cases {
            return Err(Error::InvalidArgument(format!(
                "{} readings for {s} sensors x {n_cases} cases",
                readings.len()
            )));
        }
        let (coeffs, centered) = self.solve(readings, n_cases);
        let fitted = &self.reduced * coeffs;
        let mut out = vec![0.0; s * n_cases];
        for i in 0..s {
            for j in 0..n_cases {
                out[i * n_cases + j] = fitted[(i, j)] - centered[(i, j)];
            }
        }
        Ok(out)
    }

    fn solve(&self, readings: &[f64], n_cases: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = self.sensors.len();
        let centered = DMatrix::from_fn(s, n_cases, |i, j| readings[i * n_cases + j] - self.mean[i]);
        let qt_e = self.q.tr_mul(&centered);
        let coeffs = self
            .r
            .solve_upper_triangular(&qt_e)
            .expect("R verified nonsingular at construction");
        (coeffs, centered)
    }

    /// Full projection record for one set of readings.
    pub fn project(&self, readings: &[f64]) -> Result<SparseProjection> {
        let residual = self.residuals(readings, 1)?;
        let (coeffs, _) = self.solve(readings, 1);
        Ok(SparseProjection {
            sensor_indices: self.sensors.clone(),
            reduced_basis: (0..self.reduced.nrows())
                .flat_map(|i| (0..self.reduced.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| self.reduced[(i, j)])
                .collect(),
            coefficients: coeffs.iter().copied().collect(),
            residual,
        })
    }
}

/// Projects one channel's readings at one time step onto the sensor basis.
pub fn sparse_project(basis: &ChannelBasis, sensors: &[usize], readings: &[f64]) -> Result<SparseProjection> {
    SparseProjector::new(basis, sensors)?.project(readings)
}

/// Raw strain at a set of sensors over time, `[time × sensor × 6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorReadings {
    pub n_timesteps: usize,
    pub n_sensors: usize,
    pub data: Vec<f64>,
}

impl SensorReadings {
    pub fn new(n_timesteps: usize, n_sensors: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_timesteps * n_sensors * N_STRAIN {
            return Err(Error::InvalidArgument(format!(
                "{} readings for {n_timesteps} steps x {n_sensors} sensors x {N_STRAIN} channels",
                data.len()
            )));
        }
        Ok(Self {
            n_timesteps,
            n_sensors,
            data,
        })
    }

    pub fn at(&self, t: usize, s: usize) -> &[f64; N_STRAIN] {
        let i = (t * self.n_sensors + s) * N_STRAIN;
        self.data[i..i + N_STRAIN].try_into().expect("six channels")
    }

    /// Readings from a lazily evaluated experiment at grid cells `(li, ai)`.
    pub fn from_experiment(exp: &Experiment, cells: &[(usize, usize)]) -> Self {
        let probes: Vec<_> = cells.iter().map(|&(li, ai)| exp.probe_cell(li, ai)).collect();
        let t_len = exp.n_timesteps();
        let mut data = Vec::with_capacity(t_len * cells.len() * N_STRAIN);
        for t in 0..t_len {
            for p in &probes {
                data.extend_from_slice(&p.strain(t));
            }
        }
        Self {
            n_timesteps: t_len,
            n_sensors: cells.len(),
            data,
        }
    }

    /// Readings from a dense field at grid cells `(li, ai)`.
    pub fn from_dense(field: &crate::sim::DenseStrainField, cells: &[(usize, usize)]) -> Self {
        let t_len = field.config.n_timesteps;
        let mut data = Vec::with_capacity(t_len * cells.len() * N_STRAIN);
        for t in 0..t_len {
            for &(li, ai) in cells {
                data.extend_from_slice(&field.at(t, li, ai));
            }
        }
        Self {
            n_timesteps: t_len,
            n_sensors: cells.len(),
            data,
        }
    }
}

/// Contrasted residual series, `[sensor × time × channel]` over the eight
/// channels in [`CHANNELS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastedSeries {
    pub n_sensors: usize,
    pub n_timesteps: usize,
    pub data: Vec<f64>,
}

impl ContrastedSeries {
    pub fn at(&self, s: usize, t: usize, c: usize) -> f64 {
        self.data[(s * self.n_timesteps + t) * N_CHANNELS + c]
    }

    /// Root-mean-square over time of channel `c` at sensor `s`.
    pub fn rms(&self, s: usize, c: usize) -> f64 {
        let sum: f64 = (0..self.n_timesteps).map(|t| self.at(s, t, c).powi(2)).sum();
        (sum / self.n_timesteps as f64).sqrt()
    }
}

/// Contrasts every channel of every time step against the healthy bases.
///
/// `sensors` are flat grid indices (`li * n_angle + ai`). The invariants are
/// computed from the raw strain and then projected on their own bases.
pub fn contrast_experiment(
    basis: &PcaBasis,
    readings: &SensorReadings,
    sensors: &[usize],
) -> Result<ContrastedSeries> {
    if readings.n_sensors != sensors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sensor indices for readings of {} sensors",
            sensors.len(),
            readings.n_sensors
        )));
    }
    let (s_len, t_len) = (sensors.len(), readings.n_timesteps);
    let mut out = vec![0.0; s_len * t_len * N_CHANNELS];
    let mut columns = vec![vec![0.0; s_len * t_len]; N_CHANNELS];
    for t in 0..t_len {
        for s in 0..s_len {
            let values = with_invariants(readings.at(t, s));
            for (c, v) in values.iter().enumerate() {
                columns[c][s * t_len + t] = *v;
            }
        }
    }
    for (c, channel_readings) in columns.iter().enumerate() {
        let projector = SparseProjector::new(basis.channel(c), sensors)?;
        let residual = projector.residuals(channel_readings, t_len)?;
        for s in 0..s_len {
            for t in 0..t_len {
                out[(s * t_len + t) * N_CHANNELS + c] = residual[s * t_len + t];
            }
        }
    }
    Ok(ContrastedSeries {
        n_sensors: s_len,
        n_timesteps: t_len,
        data: out,
    })
}
