//! What a run does: the operation mix, sizes, client and shard counts, and
//! the keys each client touches.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mix {
    Read,
    Write,
    /// `invoke_ado` against the passthru plugin, echo checked.
    Ado,
}

impl FromStr for Mix {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "read" => Ok(Mix::Read),
            "write" => Ok(Mix::Write),
            "ado" | "ado-invoke" => Ok(Mix::Ado),
            _ => Err(format!("unknown mix {s:?} (read, write, ado)")),
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mix::Read => "read",
            Mix::Write => "write",
            Mix::Ado => "ado",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// A fresh random key per operation.
    Random,
    SameKey,
    /// Uniform choice from `n` keys fixed by the seed.
    KeySet(u64),
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Target::Random),
            "same" | "same-key" => Ok(Target::SameKey),
            _ => match s.strip_prefix("set:").or_else(|| s.strip_prefix("key-set:")) {
                Some(n) => match n.parse::<u64>() {
                    Ok(n) if n > 0 => Ok(Target::KeySet(n)),
                    _ => Err(format!("bad key-set size {n:?}")),
                },
                None => Err(format!("unknown target {s:?} (random, same, set:N)")),
            },
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Random => f.write_str("random"),
            Target::SameKey => f.write_str("same"),
            Target::KeySet(n) => write!(f, "set:{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub mix: Mix,
    pub key_len: usize,
    pub value_len: usize,
    pub clients: u32,
    pub shards: u32,
    /// Operations per client. A run stops at whichever of this and
    /// `duration` comes first; with neither it does nothing.
    pub ops: Option<u64>,
    #[serde(with = "opt_secs")]
    pub duration: Option<Duration>,
    pub target: Target,
    pub seed: u64,
    /// Bytes per client pool.
    pub pool_size: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            mix: Mix::Write,
            key_len: 8,
            value_len: 16,
            clients: 5,
            shards: 1,
            ops: Some(100_000),
            duration: None,
            target: Target::Random,
            seed: 0,
            pool_size: 64 << 20,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.key_len == 0 {
            return Err("key length must be at least 1".into());
        }
        if self.clients == 0 || self.shards == 0 {
            return Err("need at least one client and one shard".into());
        }
        if self.mix == Mix::Read && self.target == Target::Random {
            return Err("a read mix needs keys that exist: use same or set:N".into());
        }
        if self.target == Target::KeySet(0) {
            return Err("empty key set".into());
        }
        Ok(())
    }

    /// Shard client `c` talks to.
    pub fn shard_of(&self, client: u32) -> u32 {
        client % self.shards
    }
}

mod opt_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map(Duration::from_secs_f64))
    }
}

/// The key sequence of one client, fixed by (seed, client).
pub struct KeyStream {
    rng: StdRng,
    len: usize,
    target: Target,
    set: Vec<Vec<u8>>,
}

fn random_key(rng: &mut StdRng, len: usize) -> Vec<u8> {
    (0..len).map(|_| rng.random()).collect()
}

impl KeyStream {
    pub fn new(spec: &WorkloadSpec, client: u32) -> Self {
        let mut rng = StdRng::seed_from_u64(spec.seed ^ (u64::from(client) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let set = match spec.target {
            Target::Random => Vec::new(),
            Target::SameKey => vec![random_key(&mut rng, spec.key_len)],
            Target::KeySet(n) => (0..n).map(|_| random_key(&mut rng, spec.key_len)).collect(),
        };
        Self { rng, len: spec.key_len, target: spec.target, set }
    }

    /// Keys a read mix must find populated.
    pub fn key_set(&self) -> &[Vec<u8>] {
        &self.set
    }

    pub fn next_key(&mut self) -> Vec<u8> {
        match self.target {
            Target::Random => random_key(&mut self.rng, self.len),
            _ => self.set[self.rng.random_range(0..self.set.len())].clone(),
        }
    }
}

/// Payload client `c` writes: deterministic filler of the requested size.
pub fn value_for(spec: &WorkloadSpec, client: u32) -> Vec<u8> {
    (0..spec.value_len).map(|i| (i as u32 ^ client) as u8).collect()
}
