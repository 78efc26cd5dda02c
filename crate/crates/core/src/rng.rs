//! Counter-based random streams.
//!
//! Every random draw in a simulation is addressed by the tuple
//! `(master_seed, replication, iteration, client, purpose)`. The tuple is
//! hashed into a 64-bit key and the stream emits `mix(key + i * GOLDEN)` for
//! `i = 1, 2, ...` (the SplitMix64 sequence started at `key`). No generator
//! state outlives a single tuple, so results do not depend on execution order
//! or thread count.
//!
//! Gaussian variates use the Box–Muller transform, which consumes exactly two
//! uniforms per pair of normals.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which client a stream belongs to. `Shared` streams are identical for every
/// client that asks for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClientTag {
    Shared,
    Client(usize),
}

impl ClientTag {
    fn code(self) -> u64 {
        match self {
            ClientTag::Shared => u64::MAX,
            ClientTag::Client(c) => c as u64,
        }
    }
}

/// What the stream is used for. Distinct purposes never share draws, so e.g.
/// device selection does not perturb the injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Noise,
    Minibatch,
    Devices,
    Probe,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Noise => 0x4e4f_4953,
            Purpose::Minibatch => 0x4d42_4154,
            Purpose::Devices => 0x4445_5653,
            Purpose::Probe => 0x5052_4f42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CounterStream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

/// Derive the stream addressed by the five coordinates. Pure: identical inputs
/// always give an identical stream.
pub fn derive_stream(
    master_seed: u64,
    replication: u64,
    iteration: u64,
    client: ClientTag,
    purpose: Purpose,
) -> CounterStream {
    let mut key = mix64(master_seed.wrapping_add(GOLDEN));
    for part in [replication, iteration, client.code(), purpose.code()] {
        key = mix64(key ^ part.wrapping_mul(GOLDEN).wrapping_add(0x632b_e59b_d9b4_e019));
    }
    CounterStream::from_key(key)
}

impl CounterStream {
    pub fn from_key(key: u64) -> Self {
        Self {
            key,
            counter: 0,
            spare: None,
        }
    }

    #[inline]
    fn next_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_raw() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normals(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.normal()).collect()
    }
}

impl RngCore for CounterStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
