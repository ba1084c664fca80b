//! Profiling runs: turn a sampling plan into measured [`ProfileRecord`]s.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    instantiate_workload, map_workload, wave_count, HardwareSpec, KernelWorkload, MacroConfig,
    MicroConfig, Tiles,
};
use crate::plan::SamplingPlan;
use crate::registry::ConfigRegistry;
use crate::sim::{SimMachine, SyntheticGround};

/// One measurement. CSV header: `g,l,w,macro_id,micro_id,latency_us`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub g: u64,
    pub l: u64,
    pub w: u64,
    pub macro_id: u32,
    pub micro_id: u32,
    pub latency_us: f64,
}

impl ProfileRecord {
    fn check(&self, row: usize) -> Result<()> {
        let reason = if self.g == 0 || self.l == 0 || self.w == 0 {
            "g, l and w must be >= 1"
        } else if !(self.latency_us.is_finite() && self.latency_us > 0.0) {
            "latency_us must be a positive finite number"
        } else {
            return Ok(());
        };
        Err(Error::Parse {
            line: row + 2,
            reason: reason.into(),
        })
    }
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<ProfileRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let expected = ["g", "l", "w", "macro_id", "micro_id", "latency_us"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.deserialize::<ProfileRecord>().enumerate() {
        let rec = rec?;
        rec.check(row)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[ProfileRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["g", "l", "w", "macro_id", "micro_id", "latency_us"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<profile csv>", e))?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ProfileRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file))
}

pub fn save_records(records: &[ProfileRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, std::io::BufWriter::new(file))
}

/// Checks that every record's wave index agrees with `hw`.
pub fn check_waves(records: &[ProfileRecord], hw: &HardwareSpec) -> Result<()> {
    for (row, r) in records.iter().enumerate() {
        if r.w != wave_count(r.g, hw) {
            return Err(Error::Parse {
                line: row + 2,
                reason: format!(
                    "w = {} but ceil(g / capacity) = {}",
                    r.w,
                    wave_count(r.g, hw)
                ),
            });
        }
    }
    Ok(())
}

/// Something that can time one kernel launch.
pub trait MeasurementBackend: Sync {
    /// Mean latency in microseconds.
    fn measure(
        &self,
        x: &KernelWorkload,
        macro_cfg: &MacroConfig,
        micro: &MicroConfig,
    ) -> Result<f64>;

    /// Whether independent measurements may run concurrently.
    fn concurrent(&self) -> bool {
        false
    }
}

/// Measures on the discrete-event simulator.
///
/// Repetition `r` of `(g, l, macro, micro)` is seeded by
/// `mix(seed, [g, l, macro, micro, r])`. The first `warmup` repetitions are
/// discarded (never simulated, since they cannot affect later runs) and the
/// next `measured` are averaged.
#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    pub machine: SimMachine,
    pub ground: SyntheticGround,
    pub sigma_us: f64,
    pub warmup: u32,
    pub measured: u32,
}

impl SimulatorBackend {
    pub fn new(machine: SimMachine, ground: SyntheticGround, sigma_us: f64) -> Self {
        SimulatorBackend {
            machine,
            ground,
            sigma_us,
            warmup: 3,
            measured: 5,
        }
    }

    pub fn with_iterations(mut self, warmup: u32, measured: u32) -> Self {
        self.warmup = warmup;
        self.measured = measured.max(1);
        self
    }
}

impl MeasurementBackend for SimulatorBackend {
    fn measure(
        &self,
        x: &KernelWorkload,
        macro_cfg: &MacroConfig,
        micro: &MicroConfig,
    ) -> Result<f64> {
        let (g, l) = map_workload(x, macro_cfg)?;
        let blm = self
            .ground
            .block_latency(macro_cfg.id, micro.id, self.sigma_us)
            .ok_or_else(|| Error::Measurement {
                tuple: format!("({}, {})", macro_cfg.id, micro.id),
                reason: "no ground-truth entry".into(),
            })?;
        let ids = [g, l, u64::from(macro_cfg.id), u64::from(micro.id)];
        let total: f64 = (self.warmup..self.warmup + self.measured)
            .map(|r| {
                let mut parts = ids.to_vec();
                parts.push(u64::from(r));
                self.machine.reseed(&parts).simulate(g, l, &blm)
            })
            .sum();
        Ok(total / f64::from(self.measured))
    }

    fn concurrent(&self) -> bool {
        true
    }
}

/// Replays latencies from an existing dataset; a lookup miss is an error.
#[derive(Debug, Clone, Default)]
pub struct CsvReplayBackend {
    table: HashMap<(u64, u64, u32, u32), f64>,
}

impl CsvReplayBackend {
    pub fn new(records: &[ProfileRecord]) -> Self {
        CsvReplayBackend {
            table: records
                .iter()
                .map(|r| ((r.g, r.l, r.macro_id, r.micro_id), r.latency_us))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(&load_records(path)?))
    }
}

impl MeasurementBackend for CsvReplayBackend {
    fn measure(
        &self,
        x: &KernelWorkload,
        macro_cfg: &MacroConfig,
        micro: &MicroConfig,
    ) -> Result<f64> {
        let (g, l) = map_workload(x, macro_cfg)?;
        self.table
            .get(&(g, l, macro_cfg.id, micro.id))
            .copied()
            .ok_or_else(|| Error::Measurement {
                tuple: format!("(g={g}, l={l}, macro={}, micro={})", macro_cfg.id, micro.id),
                reason: "not present in replay dataset".into(),
            })
    }

    fn concurrent(&self) -> bool {
        true
    }
}

/// Runs a user-supplied executable once per measurement.
///
/// The command is invoked as `program [fixed args...] <workload...>
/// <macro...> <micro...>` where
///
/// * workload is the three whitespace-separated fields of the workload line
///   format, e.g. `dense_gemm 1408 768 4096` or `grouped_gemm 100,50 128 64`;
/// * macro is `<id> <t_m> <t_n> <t_k>` or `<id> <t_q> <t_kv>`;
/// * micro is `<id> <n_stages> <n_warps>` followed by one `name=value`
///   argument per extra parameter.
///
/// It must exit successfully and print exactly one decimal latency in
/// microseconds on standard output.
#[derive(Debug, Clone)]
pub struct ExternalCommandBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalCommandBackend {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExternalCommandBackend {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn with_args(mut self, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.args.extend(args.into_iter().map(Into::into));
        self
    }

    pub fn command_args(
        x: &KernelWorkload,
        macro_cfg: &MacroConfig,
        micro: &MicroConfig,
    ) -> Vec<String> {
        let mut out: Vec<String> = x.to_string().split(' ').map(str::to_owned).collect();
        out.push(macro_cfg.id.to_string());
        match macro_cfg.tiles {
            Tiles::Gemm { t_m, t_n, t_k } => out.extend([t_m, t_n, t_k].map(|v| v.to_string())),
            Tiles::Attention { t_q, t_kv } => out.extend([t_q, t_kv].map(|v| v.to_string())),
        }
        out.extend([micro.id, micro.n_stages, micro.n_warps].map(|v| v.to_string()));
        out.extend(micro.extra.iter().map(|(k, v)| format!("{k}={v}")));
        out
    }
}

pub fn parse_latency_output(stdout: &str) -> std::result::Result<f64, String> {
    let text = stdout.trim();
    let value: f64 = text
        .parse()
        .map_err(|_| format!("expected one decimal number on stdout, got `{text}`"))?;
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(format!("latency must be positive and finite, got {value}"))
    }
}

impl MeasurementBackend for ExternalCommandBackend {
    fn measure(
        &self,
        x: &KernelWorkload,
        macro_cfg: &MacroConfig,
        micro: &MicroConfig,
    ) -> Result<f64> {
        let tuple = format!("({x}, macro={}, micro={})", macro_cfg.id, micro.id);
        let output = Command::new(&self.program)
            .args(&self.args)
            .args(Self::command_args(x, macro_cfg, micro))
            .output()
            .map_err(|e| Error::Measurement {
                tuple: tuple.clone(),
                reason: format!("cannot run {}: {e}", self.program.display()),
            })?;
        if !output.status.success() {
            return Err(Error::Measurement {
                tuple,
                reason: format!("command exited with {}", output.status),
            });
        }
        parse_latency_output(&String::from_utf8_lossy(&output.stdout))
            .map_err(|reason| Error::Measurement { tuple, reason })
    }
}

/// Fraction of failed measurements above which a run is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

/// Measures every (grid point, loop anchor, macro, feasible micro) tuple of
/// the plan. Records come out ordered by `(w, i, l, macro_id, micro_id)`.
/// Failed measurements are logged and skipped.
pub fn run_profile(
    plan: &SamplingPlan,
    registry: &ConfigRegistry,
    backend: &dyn MeasurementBackend,
) -> Result<Vec<ProfileRecord>> {
    if plan.family != registry.family() {
        return Err(Error::InvalidConfig(format!(
            "plan family {} differs from registry family {}",
            plan.family,
            registry.family()
        )));
    }
    let mut macros: Vec<&MacroConfig> = registry.macros().iter().collect();
    macros.sort_by_key(|c| c.id);

    struct Job<'a> {
        g: u64,
        l: u64,
        w: u64,
        macro_cfg: &'a MacroConfig,
        micro: &'a MicroConfig,
        x: KernelWorkload,
    }
    let mut jobs = Vec::new();
    for gp in &plan.grid_points {
        for &l in &plan.loop_anchors {
            for &c in &macros {
                let x = instantiate_workload(plan.family, &gp.shape, l, c)?;
                for micro_id in registry.feasible_micros(c.id) {
                    jobs.push(Job {
                        g: gp.g(),
                        l,
                        w: wave_count(gp.g(), &plan.hardware),
                        macro_cfg: c,
                        micro: registry.micro_config(micro_id).expect("feasible ids exist"),
                        x: x.clone(),
                    });
                }
            }
        }
    }

    let measure = |job: &Job| backend.measure(&job.x, job.macro_cfg, job.micro);
    let results: Vec<Result<f64>> = if backend.concurrent() {
        jobs.par_iter().map(measure).collect()
    } else {
        jobs.iter().map(measure).collect()
    };

    let total = jobs.len();
    let mut failed = 0;
    let mut records = Vec::with_capacity(total);
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(latency_us) if latency_us.is_finite() && latency_us > 0.0 => {
                records.push(ProfileRecord {
                    g: job.g,
                    l: job.l,
                    w: job.w,
                    macro_id: job.macro_cfg.id,
                    micro_id: job.micro.id,
                    latency_us,
                })
            }
            Ok(bad) => {
                failed += 1;
                log::warn!(
                    "skipping (g={}, l={}, macro={}, micro={}): non-positive latency {bad}",
                    job.g,
                    job.l,
                    job.macro_cfg.id,
                    job.micro.id
                );
            }
            Err(e) => {
                failed += 1;
                log::warn!(
                    "skipping (g={}, l={}, macro={}, micro={}): {e}",
                    job.g,
                    job.l,
                    job.macro_cfg.id,
                    job.micro.id
                );
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::ProfileAborted { failed, total });
    }
    Ok(records)
}
