//! Versioned binary checkpoint container.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "ESGDCKPT"
//! version      u32      CHECKPOINT_VERSION
//! config       bytes    UTF-8 TOML of the resolved ExperimentConfig
//! generation   u64      last completed generation
//! next_id      u64      next unused individual id
//! evaluations  u64      cumulative fitness evaluations
//! reference    u8 flag, then an individual when the flag is 1
//! mu, lambda, m, pop_generation   u64 x4
//! count        u64, then `count` individuals
//! records      bytes    UTF-8 JSONL metrics, one record per line
//! wall_times   f64 vector, one entry per record
//! checksum     u64      FNV-1a over every preceding byte
//! ```
//!
//! `bytes` is a u64 length followed by the raw bytes; an `f64 vector` is a
//! u64 length followed by that many f64 values. An individual is:
//!
//! ```text
//! id u64, origin u8, rng_seed u64,
//! family u8, learning_rate f64, momentum f64, beta1 f64, beta2 f64,
//! fitness_valid u8, fitness f64,
//! params f64 vector,
//! adam_step u64, velocity f64 vector, first_moment f64 vector, second_moment f64 vector
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{EsgdError, Result};
use crate::population::{Fitness, Individual, OptimizerFamily, OptimizerSpec, OptimizerState, Origin, Population};

use super::record::{read_jsonl, write_jsonl, GenerationRecord};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ESGDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete engine state after a generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub generation: u64,
    pub next_id: u64,
    pub cumulative_evaluations: u64,
    pub reference: Option<Individual>,
    pub population: Population,
    pub records: Vec<GenerationRecord>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn individual(&mut self, ind: &Individual) {
        self.u64(ind.id);
        self.u8(ind.origin.code());
        self.u64(ind.rng_seed);
        self.u8(ind.spec.family.code());
        self.f64(ind.spec.learning_rate);
        self.f64(ind.spec.momentum);
        self.f64(ind.spec.beta1);
        self.f64(ind.spec.beta2);
        match ind.cached_fitness() {
            Some(f) => {
                self.u8(1);
                self.f64(f.0);
            }
            None => {
                self.u8(0);
                self.f64(0.0);
            }
        }
        self.floats(ind.params());
        self.u64(ind.opt_state.step);
        self.floats(&ind.opt_state.velocity);
        self.floats(&ind.opt_state.first_moment);
        self.floats(&ind.opt_state.second_moment);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| EsgdError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| EsgdError::Checkpoint("length overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| EsgdError::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn individual(&mut self) -> Result<Individual> {
        let id = self.u64()?;
        let origin = Origin::from_code(self.u8()?).ok_or_else(|| EsgdError::Checkpoint("bad origin code".into()))?;
        let rng_seed = self.u64()?;
        let family =
            OptimizerFamily::from_code(self.u8()?).ok_or_else(|| EsgdError::Checkpoint("bad optimizer code".into()))?;
        let spec = OptimizerSpec {
            family,
            learning_rate: self.f64()?,
            momentum: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
        };
        let valid = self.u8()? == 1;
        let fitness = self.f64()?;
        let params = self.floats()?.into();
        let opt_state = OptimizerState {
            step: self.u64()?,
            velocity: self.floats()?,
            first_moment: self.floats()?,
            second_moment: self.floats()?,
        };
        Ok(Individual::from_parts(
            id,
            params,
            spec,
            opt_state,
            valid.then_some(Fitness(fitness)),
            origin,
            rng_seed,
        ))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(self.config.to_toml_string()?.as_bytes());
        w.u64(self.generation);
        w.u64(self.next_id);
        w.u64(self.cumulative_evaluations);
        match &self.reference {
            Some(r) => {
                w.u8(1);
                w.individual(r);
            }
            None => w.u8(0),
        }
        let p = &self.population;
        w.u64(p.mu as u64);
        w.u64(p.lambda as u64);
        w.u64(p.m as u64);
        w.u64(p.generation);
        w.u64(p.members.len() as u64);
        for ind in &p.members {
            w.individual(ind);
        }
        let mut jsonl = Vec::new();
        write_jsonl(&mut jsonl, &self.records).expect("writing to memory");
        w.bytes(&jsonl);
        let times: Vec<f64> = self.records.iter().map(|r| r.wall_time_s).collect();
        w.floats(&times);
        let sum = fnv1a(&w.0);
        w.u64(sum);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() + 12 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(EsgdError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (payload, tail) = buf.split_at(buf.len() - 8);
        if fnv1a(payload) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(EsgdError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(EsgdError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let text = std::str::from_utf8(r.bytes()?).map_err(|e| EsgdError::Checkpoint(e.to_string()))?;
        let config = ExperimentConfig::from_toml_str(text, &[])?;
        let generation = r.u64()?;
        let next_id = r.u64()?;
        let cumulative_evaluations = r.u64()?;
        let reference = match r.u8()? {
            0 => None,
            1 => Some(r.individual()?),
            b => return Err(EsgdError::Checkpoint(format!("bad reference flag {b}"))),
        };
        let mu = r.usize()?;
        let lambda = r.usize()?;
        let m = r.usize()?;
        let pop_generation = r.u64()?;
        let count = r.usize()?;
        let members = (0..count).map(|_| r.individual()).collect::<Result<Vec<_>>>()?;
        let mut population = Population::new(members, mu, lambda, m)?;
        population.generation = pop_generation;
        let mut records = read_jsonl(r.bytes()?)?;
        let times = r.floats()?;
        if times.len() != records.len() {
            return Err(EsgdError::Checkpoint("wall time count does not match records".into()));
        }
        for (rec, t) in records.iter_mut().zip(times) {
            rec.wall_time_s = t;
        }
        if r.pos != payload.len() {
            return Err(EsgdError::Checkpoint("trailing bytes after records".into()));
        }
        Ok(Checkpoint {
            config,
            generation,
            next_id,
            cumulative_evaluations,
            reference,
            population,
            records,
        })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EsgdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| EsgdError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| EsgdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| EsgdError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| EsgdError::io(path, e))
}
