//! Multi-cell network scenarios: hexagonal layout, user drops, path loss,
//! log-normal shadowing and Rayleigh fading.
//!
//! Channels are divided by the noise amplitude when generated, so every
//! solver works with unit noise power.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{power_iterate, ComplexMatrix, ComplexVector, C64};

/// Users are never placed closer than this to their base station.
pub const MIN_USER_DISTANCE_KM: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub cells: usize,
    pub users_per_cell: usize,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub inter_bs_distance_km: f64,
    pub max_tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub shadowing_std_db: f64,
    /// One weight per user in `(cell, user)` order; empty means all ones.
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cells: 7,
            users_per_cell: 6,
            tx_antennas: 8,
            rx_antennas: 2,
            inter_bs_distance_km: 0.8,
            max_tx_power_dbm: 20.0,
            noise_power_dbm: -90.0,
            shadowing_std_db: 8.0,
            weights: Vec::new(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn new(
        cells: usize,
        users_per_cell: usize,
        tx_antennas: usize,
        rx_antennas: usize,
    ) -> Self {
        Self {
            cells,
            users_per_cell,
            tx_antennas,
            rx_antennas,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn users(&self) -> usize {
        self.cells * self.users_per_cell
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidConfig(m.to_string()));
        if self.cells == 0
            || self.users_per_cell == 0
            || self.tx_antennas == 0
            || self.rx_antennas == 0
        {
            return bad("cells, users, and antenna counts must be at least 1");
        }
        if !(self.inter_bs_distance_km > 0.0 && self.inter_bs_distance_km.is_finite()) {
            return bad("inter-BS distance must be positive");
        }
        if !self.max_tx_power_dbm.is_finite() || !self.noise_power_dbm.is_finite() {
            return bad("power levels must be finite");
        }
        if !(self.shadowing_std_db >= 0.0 && self.shadowing_std_db.is_finite()) {
            return bad("shadowing std must be non-negative");
        }
        if !self.weights.is_empty() && self.weights.len() != self.users() {
            return bad("weights must have one entry per user");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("weights must be non-negative");
        }
        Ok(())
    }

    /// Per-cell power budget in watts.
    pub fn power_budget(&self) -> f64 {
        10f64.powf((self.max_tx_power_dbm - 30.0) / 10.0)
    }

    /// Noise amplitude `σ_N` in √W.
    pub fn noise_amplitude(&self) -> f64 {
        10f64.powf((self.noise_power_dbm - 30.0) / 20.0)
    }

    /// Circumradius of the hexagon users are dropped in: `(D/2)/√3`.
    pub fn cell_radius_km(&self) -> f64 {
        self.inter_bs_distance_km / 2.0 / 3f64.sqrt()
    }

    pub fn weight(&self, cell: usize, user: usize) -> f64 {
        if self.weights.is_empty() {
            1.0
        } else {
            self.weights[cell * self.users_per_cell + user]
        }
    }
}

/// Path loss in dB at distance `r_km` with shadowing `shadow_db`.
pub fn path_loss_db(r_km: f64, shadow_db: f64) -> f64 {
    128.1 + 37.6 * r_km.log10() + shadow_db
}

/// One log-normal shadowing draw in dB.
pub fn shadowing_db(rng: &mut ChaCha8Rng, std_db: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std_db * z
}

/// One circularly-symmetric complex Gaussian draw with unit variance.
pub fn rayleigh_entry(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

/// Base-station sites on a hexagonal lattice, filled ring by ring from the
/// origin.
pub fn hex_sites(count: usize, spacing: f64) -> Vec<[f64; 2]> {
    // axial directions walking around a ring
    const DIRS: [(i64, i64); 6] = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)];
    let to_xy = |q: i64, r: i64| {
        let (q, r) = (q as f64, r as f64);
        [spacing * (q + r / 2.0), spacing * r * 3f64.sqrt() / 2.0]
    };
    let mut out = vec![[0.0, 0.0]];
    let mut ring = 1;
    while out.len() < count {
        // start at the ring's corner in direction 4, then walk the six sides
        let (mut q, mut r) = (DIRS[4].0 * ring, DIRS[4].1 * ring);
        for dir in DIRS {
            for _ in 0..ring {
                out.push(to_xy(q, r));
                q += dir.0;
                r += dir.1;
            }
        }
        ring += 1;
    }
    out.truncate(count);
    out
}

/// Whether `(x, y)` lies in the flat-top hexagon of circumradius `radius`
/// centred at the origin.
pub fn in_hexagon(x: f64, y: f64, radius: f64) -> bool {
    let s3 = 3f64.sqrt();
    y.abs() <= s3 / 2.0 * radius && s3 * x.abs() + y.abs() <= s3 * radius
}

fn drop_user(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    loop {
        let x = (2.0 * rng.random::<f64>() - 1.0) * radius;
        let y = (2.0 * rng.random::<f64>() - 1.0) * radius;
        if in_hexagon(x, y, radius) && x.hypot(y) >= MIN_USER_DISTANCE_KM {
            return [x, y];
        }
    }
}

/// One generated scenario. Channels are noise-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    pub config: NetworkConfig,
    /// `H_{ℓq,i}` stored at `(ℓ·Q + q)·L + i`, each `Nr×Nt`.
    pub channels: Vec<ComplexMatrix>,
    pub bs_positions: Vec<[f64; 2]>,
    /// `(ℓ·Q + q)` order.
    pub user_positions: Vec<[f64; 2]>,
}

impl NetworkInstance {
    pub fn cells(&self) -> usize {
        self.config.cells
    }

    pub fn users_per_cell(&self) -> usize {
        self.config.users_per_cell
    }

    pub fn tx(&self) -> usize {
        self.config.tx_antennas
    }

    pub fn rx(&self) -> usize {
        self.config.rx_antennas
    }

    /// Channel from base station `bs` to user `(cell, user)`.
    pub fn channel(&self, cell: usize, user: usize, bs: usize) -> &ComplexMatrix {
        &self.channels[(cell * self.config.users_per_cell + user) * self.config.cells + bs]
    }

    pub fn weight(&self, cell: usize, user: usize) -> f64 {
        self.config.weight(cell, user)
    }

    pub fn power_budget(&self, _cell: usize) -> f64 {
        self.config.power_budget()
    }

    /// Noise power after normalization.
    pub fn noise_power(&self) -> f64 {
        1.0
    }
}

/// Draws one instance from `config.seed`.
pub fn generate_instance(config: &NetworkConfig) -> Result<NetworkInstance, ChannelError> {
    config.validate()?;
    let (l, q, nt, nr) = (
        config.cells,
        config.users_per_cell,
        config.tx_antennas,
        config.rx_antennas,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bs_positions = hex_sites(l, config.inter_bs_distance_km);
    let radius = config.cell_radius_km();
    let mut user_positions = Vec::with_capacity(l * q);
    for bs in &bs_positions {
        for _ in 0..q {
            let [dx, dy] = drop_user(&mut rng, radius);
            user_positions.push([bs[0] + dx, bs[1] + dy]);
        }
    }
    let noise_amp = config.noise_amplitude();
    let mut channels = Vec::with_capacity(l * q * l);
    for user in &user_positions {
        for bs in &bs_positions {
            let r = (user[0] - bs[0]).hypot(user[1] - bs[1]);
            let pl = path_loss_db(r, shadowing_db(&mut rng, config.shadowing_std_db));
            let amp = 10f64.powf(-pl / 20.0) / noise_amp;
            channels.push(ComplexMatrix::from_fn(nr, nt, |_, _| {
                rayleigh_entry(&mut rng) * amp
            }));
        }
    }
    Ok(NetworkInstance {
        config: config.clone(),
        channels,
        bs_positions,
        user_positions,
    })
}

/// Seed of the `index`-th instance of a dataset with base seed `seed`.
pub fn instance_seed(seed: u64, index: u64) -> u64 {
    crate::autodiff::mix(seed ^ crate::autodiff::mix(index.wrapping_add(0x5eed)))
}

/// One complex transmit vector per `(cell, user)`, stored at `ℓ·Q + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub cells: usize,
    pub users_per_cell: usize,
    pub v: Vec<ComplexVector>,
}

impl BeamformerSet {
    pub fn zeros(cells: usize, users_per_cell: usize, tx: usize) -> Self {
        Self {
            cells,
            users_per_cell,
            v: vec![ComplexVector::zeros(tx); cells * users_per_cell],
        }
    }

    pub fn get(&self, cell: usize, user: usize) -> &ComplexVector {
        &self.v[cell * self.users_per_cell + user]
    }

    pub fn get_mut(&mut self, cell: usize, user: usize) -> &mut ComplexVector {
        &mut self.v[cell * self.users_per_cell + user]
    }

    pub fn cell(&self, cell: usize) -> &[ComplexVector] {
        &self.v[cell * self.users_per_cell..(cell + 1) * self.users_per_cell]
    }

    pub fn set_cell(&mut self, cell: usize, vs: Vec<ComplexVector>) {
        assert_eq!(vs.len(), self.users_per_cell);
        for (q, v) in vs.into_iter().enumerate() {
            *self.get_mut(cell, q) = v;
        }
    }

    pub fn cell_power(&self, cell: usize) -> f64 {
        self.cell(cell).iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Unit dominant right-singular vector of `h`.
pub fn dominant_right_singular(h: &ComplexMatrix) -> ComplexVector {
    if h.rows() == 1 {
        let u = h.adjoint_mul_vec(&[C64::new(1.0, 0.0)]);
        let n = u.norm();
        return if n > 0.0 { u.scaled(1.0 / n) } else { u };
    }
    // Work on the small Gram matrix H Hᴴ and map back through Hᴴ.
    let gram = h.matmul(&h.adjoint());
    let (eig, _) = power_iterate(&gram, 1e-15, 20_000).expect("square gram matrix");
    let u = h.adjoint_mul_vec(&eig.vector);
    let n = u.norm();
    if n > 0.0 {
        u.scaled(1.0 / n)
    } else {
        ComplexVector(vec![
            C64::new(1.0 / (h.cols() as f64).sqrt(), 0.0);
            h.cols()
        ])
    }
}

/// Maximum-ratio initializer: `v_{ℓq} = √(P/Q)·u_{ℓq}` with `u_{ℓq}` the
/// dominant right-singular vector of the direct channel.
pub fn mrt_initializer(inst: &NetworkInstance) -> BeamformerSet {
    let (l, q) = (inst.cells(), inst.users_per_cell());
    let mut out = BeamformerSet::zeros(l, q, inst.tx());
    for cell in 0..l {
        let amp = (inst.power_budget(cell) / q as f64).sqrt();
        for user in 0..q {
            *out.get_mut(cell, user) =
                dominant_right_singular(inst.channel(cell, user, cell)).scaled(amp);
        }
    }
    out
}
