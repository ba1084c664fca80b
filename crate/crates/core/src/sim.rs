//! Discrete-event simulation of greedy thread-block dispatch.
//!
//! A grid of `g` blocks is queued in index order. Each of the
//! `n_sm * blocks_per_sm` slots pulls the next queued block as soon as it
//! goes idle. Block durations are `max(floor, Normal(mean, sigma))` with
//! `floor = mean / 100`, and the simulated latency is the makespan.
//!
//! With `sigma == 0` and no dispatch gap the makespan is exactly
//! `mean * ceil(g / capacity)`: the step law is the zero-variance limit.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{map_workload, HardwareSpec, KernelWorkload};
use crate::registry::{check_version, ConfigRegistry};
use crate::seed::mix;

/// Lower bound on a sampled block duration, as a fraction of its mean.
pub const FLOOR_FRACTION: f64 = 0.01;

/// Per-block latency law of one (macro, micro) config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockLatency {
    pub base_us: f64,
    pub per_iter_us: f64,
    /// Serial scheduling cost paid at the queue head for every block.
    #[serde(default)]
    pub dispatch_gap_us: f64,
    #[serde(default)]
    pub sigma_us: f64,
}

impl BlockLatency {
    /// Loop-independent block duration `mu`.
    pub fn constant(mu: f64, sigma: f64) -> Self {
        BlockLatency {
            base_us: mu,
            per_iter_us: 0.0,
            dispatch_gap_us: 0.0,
            sigma_us: sigma,
        }
    }

    pub fn mean_us(&self, l: u64) -> f64 {
        self.base_us + self.per_iter_us * l as f64
    }

    pub fn floor_us(&self, l: u64) -> f64 {
        self.mean_us(l) * FLOOR_FRACTION
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.base_us,
            self.per_iter_us,
            self.dispatch_gap_us,
            self.sigma_us,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || self.base_us <= 0.0
            || self.per_iter_us < 0.0
            || self.dispatch_gap_us < 0.0
            || self.sigma_us < 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "invalid block latency {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundEntry {
    pub macro_id: u32,
    pub micro_id: u32,
    pub base_us: f64,
    pub per_iter_us: f64,
    #[serde(default)]
    pub dispatch_gap_us: f64,
}

pub const GROUND_VERSION: u32 = 1;

/// Synthetic ground truth: an affine-in-`l` block latency per config pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticGround {
    entries: BTreeMap<(u32, u32), GroundEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundDoc {
    version: u32,
    entries: Vec<GroundEntry>,
}

impl SyntheticGround {
    pub fn new(entries: impl IntoIterator<Item = GroundEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if !(e.base_us > 0.0 && e.per_iter_us > 0.0 && e.dispatch_gap_us >= 0.0)
                || !(e.base_us.is_finite()
                    && e.per_iter_us.is_finite()
                    && e.dispatch_gap_us.is_finite())
            {
                return Err(Error::InvalidConfig(format!(
                    "ground ({}, {}): base and per_iter must be positive, gap non-negative",
                    e.macro_id, e.micro_id
                )));
            }
            if map.insert((e.macro_id, e.micro_id), e).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate ground entry ({}, {})",
                    e.macro_id, e.micro_id
                )));
            }
        }
        Ok(SyntheticGround { entries: map })
    }

    pub fn entry(&self, macro_id: u32, micro_id: u32) -> Option<&GroundEntry> {
        self.entries.get(&(macro_id, micro_id))
    }

    pub fn block_latency(
        &self,
        macro_id: u32,
        micro_id: u32,
        sigma_us: f64,
    ) -> Option<BlockLatency> {
        self.entry(macro_id, micro_id).map(|e| BlockLatency {
            base_us: e.base_us,
            per_iter_us: e.per_iter_us,
            dispatch_gap_us: e.dispatch_gap_us,
            sigma_us,
        })
    }

    /// Errors unless every feasible pair of the registry has an entry.
    pub fn check_covers(&self, registry: &ConfigRegistry) -> Result<()> {
        match registry
            .feasible_pairs()
            .find(|&(a, b)| self.entry(a, b).is_none())
        {
            Some((a, b)) => Err(Error::InvalidConfig(format!(
                "ground truth has no entry for feasible pair ({a}, {b})"
            ))),
            None => Ok(()),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &GroundEntry> {
        self.entries.values()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GroundDoc {
            version: GROUND_VERSION,
            entries: self.entries.values().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_version("ground truth", &value, "version", GROUND_VERSION)?;
        let doc: GroundDoc = serde_json::from_value(value)?;
        Self::new(doc.entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// One block's execution interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockRun {
    pub block: u64,
    pub slot: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub makespan: f64,
    pub runs: Vec<BlockRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMachine {
    pub hw: HardwareSpec,
    pub seed: u64,
}

impl SimMachine {
    pub fn new(hw: HardwareSpec, seed: u64) -> Self {
        SimMachine { hw, seed }
    }

    /// Same hardware, derived seed.
    pub fn reseed(&self, parts: &[u64]) -> Self {
        SimMachine {
            hw: self.hw.clone(),
            seed: mix(self.seed, parts),
        }
    }

    /// Makespan (µs) of `g` blocks of `l` loop iterations each.
    pub fn simulate(&self, g: u64, l: u64, blm: &BlockLatency) -> f64 {
        self.run(g, l, blm, |_| {})
    }

    pub fn simulate_trace(&self, g: u64, l: u64, blm: &BlockLatency) -> SimTrace {
        let mut runs = Vec::with_capacity(g as usize);
        let makespan = self.run(g, l, blm, |r| runs.push(r));
        SimTrace { makespan, runs }
    }

    fn run(&self, g: u64, l: u64, blm: &BlockLatency, mut on_block: impl FnMut(BlockRun)) -> f64 {
        assert!(g >= 1 && l >= 1, "simulate requires g >= 1 and l >= 1");
        let slots = self.hw.wave_capacity();
        let mean = blm.mean_us(l);
        let floor = blm.floor_us(l);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal =
            (blm.sigma_us > 0.0).then(|| Normal::new(mean, blm.sigma_us).expect("finite sigma"));

        // Ready slots keyed by (free time, ordering key). Idle slots use
        // their slot index; slots freed by block b use `slots + b`, so ties
        // resolve by block index.
        let mut ready: BinaryHeap<Reverse<(Time, u64, u32)>> = (0..slots.min(g))
            .map(|s| Reverse((Time(0.0), s, s as u32)))
            .collect();
        let mut head_free = 0.0_f64;
        let mut makespan = 0.0_f64;
        for block in 0..g {
            let Reverse((Time(free), _, slot)) = ready.pop().expect("at least one slot");
            let start = free.max(head_free) + blm.dispatch_gap_us;
            head_free = start;
            let duration = match &normal {
                Some(n) => n.sample(&mut rng).max(floor),
                None => mean,
            };
            let end = start + duration;
            makespan = makespan.max(end);
            on_block(BlockRun {
                block,
                slot,
                start,
                end,
            });
            ready.push(Reverse((Time(end), slots + block, slot)));
        }
        makespan
    }

    /// Mean makespan over `reps` runs, run `r` seeded by `mix(seed, [g, l, r])`.
    pub fn mean_latency(&self, g: u64, l: u64, blm: &BlockLatency, reps: u32) -> f64 {
        let reps = reps.max(1);
        let total: f64 = (0..reps)
            .map(|r| self.reseed(&[g, l, u64::from(r)]).simulate(g, l, blm))
            .sum();
        total / f64::from(reps)
    }

    /// Latency profile over `g_list`. Each grid size gets its own sub-seeds
    /// so the result does not depend on list order.
    pub fn sweep_profile(
        &self,
        g_list: &[u64],
        l: u64,
        blm: &BlockLatency,
        reps: u32,
    ) -> Vec<(u64, f64)> {
        g_list
            .par_iter()
            .map(|&g| (g, self.mean_latency(g, l, blm, reps)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLatency {
    pub macro_id: u32,
    pub micro_id: u32,
    pub g: u64,
    pub l: u64,
    pub latency_us: f64,
}

/// Measures every feasible pair on `x`, in `(macro_id, micro_id)` order.
/// Pair `(a, b)` repetition `r` is seeded by `mix(seed, [a, b, r])`.
pub fn evaluate_pairs(
    machine: &SimMachine,
    x: &KernelWorkload,
    registry: &ConfigRegistry,
    ground: &SyntheticGround,
    sigma_us: f64,
    reps: u32,
) -> Result<Vec<PairLatency>> {
    let pairs: Vec<(u32, u32)> = registry.feasible_pairs().collect();
    if pairs.is_empty() {
        return Err(Error::NoFeasiblePair);
    }
    pairs
        .par_iter()
        .map(|&(macro_id, micro_id)| {
            let c = registry
                .macro_config(macro_id)
                .expect("registry ids are consistent");
            let (g, l) = map_workload(x, c)?;
            let blm = ground
                .block_latency(macro_id, micro_id, sigma_us)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "ground truth has no entry for ({macro_id}, {micro_id})"
                    ))
                })?;
            let reps = reps.max(1);
            let total: f64 = (0..reps)
                .map(|r| {
                    machine
                        .reseed(&[u64::from(macro_id), u64::from(micro_id), u64::from(r)])
                        .simulate(g, l, &blm)
                })
                .sum();
            Ok(PairLatency {
                macro_id,
                micro_id,
                g,
                l,
                latency_us: total / f64::from(reps),
            })
        })
        .collect()
}

/// Argmin over measured pairs; ties go to the lexicographically smallest
/// `(macro_id, micro_id)`.
pub fn argmin_pair(measured: &[PairLatency]) -> Option<PairLatency> {
    measured
        .iter()
        .copied()
        .fold(None, |best: Option<PairLatency>, p| match best {
            Some(b)
                if (b.latency_us, b.macro_id, b.micro_id)
                    <= (p.latency_us, p.macro_id, p.micro_id) =>
            {
                Some(b)
            }
            _ => Some(p),
        })
}

/// Exhaustive search: the best feasible config for `x` on the simulator.
pub fn oracle_best(
    machine: &SimMachine,
    x: &KernelWorkload,
    registry: &ConfigRegistry,
    ground: &SyntheticGround,
    sigma_us: f64,
    reps: u32,
) -> Result<PairLatency> {
    let measured = evaluate_pairs(machine, x, registry, ground, sigma_us, reps)?;
    argmin_pair(&measured).ok_or(Error::NoFeasiblePair)
}

/// A latency-vs-grid-size experiment, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimExperiment {
    pub n_sm: u64,
    #[serde(default = "default_bps")]
    pub blocks_per_sm: u64,
    /// Constant block latency. Exactly one of `mu` and `ground` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Affine block latency `base_us + per_iter_us * l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground: Option<BlockLatency>,
    pub sigma: f64,
    pub seed: u64,
    pub g_range: [u64; 2],
    #[serde(default = "default_l")]
    pub l: u64,
    #[serde(default = "default_reps")]
    pub repetitions: u32,
}

fn default_bps() -> u64 {
    1
}

fn default_l() -> u64 {
    1
}

fn default_reps() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: u64,
    pub l: u64,
    pub sigma: f64,
    pub seed: u64,
    pub latency_us: f64,
}

impl SimExperiment {
    pub fn from_json(text: &str) -> Result<Self> {
        let exp: SimExperiment = serde_json::from_str(text)?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        const WHAT: &str = "simulation config";
        self.hardware().validate()?;
        if self.mu.is_some() == self.ground.is_some() {
            return Err(Error::field(
                WHAT,
                "mu",
                "exactly one of `mu` and `ground` must be given",
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::field(
                WHAT,
                "sigma",
                "must be a finite non-negative number",
            ));
        }
        let [lo, hi] = self.g_range;
        if lo == 0 || lo > hi {
            return Err(Error::field(WHAT, "g_range", "expected 1 <= lo <= hi"));
        }
        if self.l == 0 {
            return Err(Error::field(WHAT, "l", "must be >= 1"));
        }
        self.block().validate()
    }

    pub fn hardware(&self) -> HardwareSpec {
        HardwareSpec::new("sim", self.n_sm).with_blocks_per_sm(self.blocks_per_sm)
    }

    pub fn block(&self) -> BlockLatency {
        let mut b = match (self.mu, self.ground) {
            (Some(mu), _) => BlockLatency::constant(mu, self.sigma),
            (None, Some(g)) => g,
            (None, None) => BlockLatency::constant(f64::NAN, self.sigma),
        };
        b.sigma_us = self.sigma;
        b
    }

    pub fn run(&self) -> Vec<SweepRow> {
        let machine = SimMachine::new(self.hardware(), self.seed);
        let gs: Vec<u64> = (self.g_range[0]..=self.g_range[1]).collect();
        machine
            .sweep_profile(&gs, self.l, &self.block(), self.repetitions)
            .into_iter()
            .map(|(g, latency_us)| SweepRow {
                g,
                l: self.l,
                sigma: self.sigma,
                seed: self.seed,
                latency_us,
            })
            .collect()
    }
}

/// Writes sweep rows as CSV with header `g,l,sigma,seed,latency_us`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}
