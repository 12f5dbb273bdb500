//! Named, independently seeded random streams.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every source of randomness in a run draws from exactly one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Data,
    Dropout,
    Init,
    Masks,
    Noise,
    Replay,
}

impl Stream {
    pub const ALL: [Stream; 6] = [Stream::Data, Stream::Dropout, Stream::Init, Stream::Masks, Stream::Noise, Stream::Replay];

    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Dropout => 2,
            Stream::Init => 3,
            Stream::Masks => 4,
            Stream::Noise => 5,
            Stream::Replay => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Dropout => "dropout",
            Stream::Init => "init",
            Stream::Masks => "masks",
            Stream::Noise => "noise",
            Stream::Replay => "replay",
        }
    }
}

/// Serialized position of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<Stream, ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let streams = Stream::ALL
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s.id());
                (s, rng)
            })
            .collect();
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, s: Stream) -> &mut ChaCha8Rng {
        self.streams.get_mut(&s).expect("all streams are created up front")
    }

    pub fn state(&self) -> BTreeMap<String, StreamState> {
        self.streams
            .iter()
            .map(|(s, rng)| {
                (
                    s.name().to_string(),
                    StreamState { seed: self.seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() },
                )
            })
            .collect()
    }

    pub fn from_state(state: &BTreeMap<String, StreamState>) -> Result<Self> {
        let mut seed = None;
        let mut streams = BTreeMap::new();
        for s in Stream::ALL {
            let st = state
                .get(s.name())
                .ok_or_else(|| Error::Contract(format!("rng state lacks stream '{}'", s.name())))?;
            let pos: u128 = st
                .word_pos
                .parse()
                .map_err(|_| Error::Contract(format!("bad word position for stream '{}'", s.name())))?;
            let mut rng = ChaCha8Rng::seed_from_u64(st.seed);
            rng.set_stream(st.stream);
            rng.set_word_pos(pos);
            seed = Some(st.seed);
            streams.insert(s, rng);
        }
        Ok(Self { seed: seed.unwrap_or_default(), streams })
    }
}

/// A generator derived from `(seed, tag, index)`, independent of any stream
/// position. Used where per-item randomness must not depend on visit order.
pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x5EED_0F_C0FFEE);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
