//! Counter-based random streams.
//!
//! A stream is keyed by the master seed and the kind of unit it serves; the
//! unit index and sweep index select a ChaCha stream within that key. Two
//! streams with the same `(seed, id)` produce identical sequences no matter
//! which thread creates them or in what order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Cell,
    Bulk,
    Simulation,
    Initialization,
    Baseline,
    Test,
}

impl UnitKind {
    fn tag(self) -> u64 {
        match self {
            UnitKind::Cell => 1,
            UnitKind::Bulk => 2,
            UnitKind::Simulation => 3,
            UnitKind::Initialization => 4,
            UnitKind::Baseline => 5,
            UnitKind::Test => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub kind: UnitKind,
    pub index: u32,
    pub sweep: u32,
}

impl StreamId {
    pub fn new(kind: UnitKind, index: usize, sweep: usize) -> Self {
        Self {
            kind,
            index: index as u32,
            sweep: sweep as u32,
        }
    }
}

#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label. Used to give every EM
/// iteration (and every benchmark replicate) its own master seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut s = seed ^ label.wrapping_mul(0xD134_2543_DE82_EF95);
    splitmix64(&mut s);
    splitmix64(&mut s)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, id: StreamId) -> Self {
        let mut state = master_seed ^ id.kind.tag().wrapping_mul(0xA076_1D64_78BD_642F);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream((u64::from(id.index) << 32) | u64::from(id.sweep));
        Self { rng }
    }

    pub fn for_unit(master_seed: u64, kind: UnitKind, index: usize, sweep: usize) -> Self {
        Self::new(master_seed, StreamId::new(kind, index, sweep))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
