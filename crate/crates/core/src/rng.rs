//! Named random streams split from one master seed.
//!
//! Every consumer of randomness asks for its own stream keyed by a purpose tag
//! and a short list of counters (client id, round, ...). Streams never share
//! state, so the order in which workers draw from them cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Partition = 3,
    Behavior = 4,
    Sampling = 5,
    Noise = 6,
    Client = 7,
    Private = 8,
    Fabrication = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent generator for `(master, purpose, keys...)`.
pub fn stream(master: u64, purpose: Purpose, keys: &[u64]) -> SimRng {
    let mut h = splitmix64(master ^ splitmix64(purpose as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(purpose as u64);
    rng
}

/// Master seed plus convenience constructors for each stream the simulator uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub master: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds { master }
    }

    pub fn init(&self) -> SimRng {
        stream(self.master, Purpose::Init, &[])
    }

    pub fn data(&self) -> SimRng {
        stream(self.master, Purpose::Data, &[])
    }

    pub fn partition(&self) -> SimRng {
        stream(self.master, Purpose::Partition, &[])
    }

    pub fn behavior(&self) -> SimRng {
        stream(self.master, Purpose::Behavior, &[])
    }

    pub fn sampling(&self, round: u64) -> SimRng {
        stream(self.master, Purpose::Sampling, &[round])
    }

    pub fn noise(&self, round: u64) -> SimRng {
        stream(self.master, Purpose::Noise, &[round])
    }

    pub fn client(&self, client: usize, round: u64) -> SimRng {
        stream(self.master, Purpose::Client, &[client as u64, round])
    }

    pub fn private(&self, client: usize) -> SimRng {
        stream(self.master, Purpose::Private, &[client as u64])
    }

    pub fn fabrication(&self, client: usize, round: u64) -> SimRng {
        stream(self.master, Purpose::Fabrication, &[client as u64, round])
    }
}
