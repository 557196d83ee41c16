//! Channel dataset container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GNFP" | version u32 | L Q Nt Nr: u32 x4
//! inter_bs_distance_km max_tx_power_dbm noise_power_dbm shadowing_std_db: f64 x4
//! seed u64 | weight count u32 | weights f64 x count
//! sample count u64
//! per sample:
//!   instance seed u64
//!   BS positions       L x (x, y) f64
//!   user positions     L*Q x (x, y) f64, (cell, user) order
//!   channels           L*Q*L matrices in (cell, user, bs) order, each Nr x Nt
//!                      row-major with interleaved re/im f64
//! ```
//!
//! A JSON manifest (`<file>.json`) mirrors the header.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    generate_instance, instance_seed, ChannelError, NetworkConfig, NetworkInstance,
};
use crate::io::{checked_count, sidecar_path, write_atomic, FormatError, Reader, Writer};
use crate::numerics::ComplexMatrix;

pub const DATASET_MAGIC: &[u8; 4] = b"GNFP";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: NetworkConfig,
    pub instances: Vec<NetworkInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    pub samples: u64,
    pub record_bytes: u64,
}

impl Dataset {
    /// Generates `samples` instances; instance `k` uses
    /// `instance_seed(config.seed, k)`.
    pub fn generate(config: &NetworkConfig, samples: usize) -> Result<Self, ChannelError> {
        config.validate()?;
        let instances = (0..samples)
            .into_par_iter()
            .map(|k| {
                generate_instance(
                    &config
                        .clone()
                        .with_seed(instance_seed(config.seed, k as u64)),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn record_bytes(config: &NetworkConfig) -> u64 {
        let (l, q, nt, nr) = (
            config.cells as u64,
            config.users_per_cell as u64,
            config.tx_antennas as u64,
            config.rx_antennas as u64,
        );
        8 + 16 * l + 16 * l * q + 16 * l * q * l * nr * nt
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: "GNFP".into(),
            version: DATASET_VERSION,
            config: self.config.clone(),
            samples: self.len() as u64,
            record_bytes: Self::record_bytes(&self.config),
        }
    }

    pub fn write_to(&self, out: &mut dyn Write) -> std::io::Result<()> {
        let mut w = Writer::new(out);
        let c = &self.config;
        w.bytes(DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        for n in [c.cells, c.users_per_cell, c.tx_antennas, c.rx_antennas] {
            w.u32(n as u32)?;
        }
        w.f64s(&[
            c.inter_bs_distance_km,
            c.max_tx_power_dbm,
            c.noise_power_dbm,
            c.shadowing_std_db,
        ])?;
        w.u64(c.seed)?;
        w.u32(c.weights.len() as u32)?;
        w.f64s(&c.weights)?;
        w.u64(self.len() as u64)?;
        for inst in &self.instances {
            w.u64(inst.config.seed)?;
            for p in inst.bs_positions.iter().chain(&inst.user_positions) {
                w.f64s(p)?;
            }
            for h in &inst.channels {
                w.complex(h.as_slice())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self, FormatError> {
        let mut r = Reader::new(input);
        if &r.bytes::<4>()? != DATASET_MAGIC {
            return Err(FormatError::corrupt("bad dataset magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = checked_count(r.u32()? as u64, 4096, "dimension")?;
        }
        let f = r.f64s(4)?;
        let seed = r.u64()?;
        let nw = checked_count(r.u32()? as u64, 1 << 20, "weight count")?;
        let weights = r.f64s(nw)?;
        let config = NetworkConfig {
            cells: dims[0],
            users_per_cell: dims[1],
            tx_antennas: dims[2],
            rx_antennas: dims[3],
            inter_bs_distance_km: f[0],
            max_tx_power_dbm: f[1],
            noise_power_dbm: f[2],
            shadowing_std_db: f[3],
            weights,
            seed,
        };
        config
            .validate()
            .map_err(|e| FormatError::corrupt(e.to_string()))?;
        let samples = checked_count(r.u64()?, 1 << 32, "sample count")?;
        let (l, q, nt, nr) = (dims[0], dims[1], dims[2], dims[3]);
        let mut instances = Vec::with_capacity(samples.min(1 << 16));
        for _ in 0..samples {
            let inst_seed = r.u64()?;
            let mut read_points = |n: usize| -> Result<Vec<[f64; 2]>, FormatError> {
                (0..n).map(|_| Ok([r.f64()?, r.f64()?])).collect()
            };
            let bs_positions = read_points(l)?;
            let user_positions = read_points(l * q)?;
            let mut channels = Vec::with_capacity(l * q * l);
            for _ in 0..l * q * l {
                let data = r.complex(nr * nt)?;
                channels.push(ComplexMatrix::from_row_major(nr, nt, data).expect("sized read"));
            }
            instances.push(NetworkInstance {
                config: config.clone().with_seed(inst_seed),
                channels,
                bs_positions,
                user_positions,
            });
        }
        r.expect_end()?;
        Ok(Self { config, instances })
    }

    /// Writes the binary file atomically plus its JSON manifest.
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, |w| self.write_to(w))?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        write_atomic(&sidecar_path(path), |w| w.write_all(&manifest))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Fractions for the train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn is_valid(&self) -> bool {
        let parts = [self.train, self.val, self.test];
        parts.iter().all(|p| *p >= 0.0) && (parts.iter().sum::<f64>() - 1.0).abs() < 1e-9
    }
}

/// Disjoint, exhaustive index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled partition of `0..n`.
pub fn split_indices(n: usize, seed: u64, ratios: SplitRatios) -> Split {
    assert!(
        ratios.is_valid(),
        "split ratios must be non-negative and sum to 1"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1_7000));
    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let cfg = NetworkConfig::new(2, 2, 3, 2).with_seed(4);
        let ds = Dataset::generate(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(
            buf.len() as u64,
            4 + 4 + 16 + 32 + 8 + 4 + 8 + 3 * Dataset::record_bytes(&cfg)
        );
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::generate(&NetworkConfig::default(), 0).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 16 + 32 + 8 + 4 + 8);
        assert!(Dataset::read_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let ds = Dataset::generate(&NetworkConfig::new(1, 1, 2, 1), 1).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::read_from(bad.as_slice()),
            Err(FormatError::Corrupt(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            Dataset::read_from(bad.as_slice()),
            Err(FormatError::VersionMismatch { found: 9, .. })
        ));
        assert!(Dataset::read_from(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let s = split_indices(3000, 1, SplitRatios::default());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2100, 450, 450));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..3000).collect::<Vec<_>>());
        assert_eq!(s, split_indices(3000, 1, SplitRatios::default()));
    }
}
