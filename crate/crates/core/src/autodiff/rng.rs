/// Key identifying one dropout site in one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub layer: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, epoch: u64, batch: u64, layer: u64) -> Self {
        Self {
            seed,
            epoch,
            batch,
            layer,
        }
    }

    pub fn with_layer(self, layer: u64) -> Self {
        Self { layer, ..self }
    }

    /// Counter-based uniform stream in `[0, 1)`: element `k` is a hash of
    /// the key and `k`, so identical keys give identical streams.
    pub fn stream(self) -> impl FnMut() -> f64 {
        let base = mix(mix(mix(mix(self.seed) ^ self.epoch) ^ self.batch) ^ self.layer);
        let mut counter = 0u64;
        move || {
            counter += 1;
            let z = mix(base.wrapping_add(counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
        }
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
