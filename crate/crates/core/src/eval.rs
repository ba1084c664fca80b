//! Evaluation harness: a built-in synthetic landscape, held-out query
//! generation and the per-method comparison report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{
    map_workload, wave_count, HardwareSpec, KernelFamily, KernelWorkload, MacroConfig, MicroConfig,
};
use crate::model::TableSet;
use crate::plan::SamplingPlan;
use crate::registry::ConfigRegistry;
use crate::seed::mix;
use crate::sim::{
    argmin_pair, evaluate_pairs, GroundEntry, PairLatency, SimMachine, SyntheticGround,
};
use crate::tuner::{tune, tune_baseline, BaselinePredictor, Tuned};

/// Registry, ground truth and machine of one synthetic experiment.
#[derive(Debug, Clone)]
pub struct Landscape {
    pub hardware: HardwareSpec,
    pub registry: ConfigRegistry,
    pub ground: SyntheticGround,
}

/// Shared-memory budget used to rule out deep pipelines on large tiles.
const SMEM_BYTES: u64 = 128 * 1024;

/// Dense-GEMM landscape with six macros and eight micros on 132 SMs.
///
/// Larger tiles run more efficiently per flop, so they win once the grid
/// spans many waves; smaller tiles fill a partial wave better and win on
/// small problems. Deeper pipelines cut per-iteration cost but pay a longer
/// fill, so the best stage count grows with the loop count.
pub fn two_regime_landscape() -> Landscape {
    let tiles = [
        (128, 128, 64),
        (64, 64, 64),
        (64, 128, 64),
        (128, 64, 64),
        (128, 128, 32),
        (64, 64, 128),
    ];
    let macros: Vec<MacroConfig> = tiles
        .iter()
        .enumerate()
        .map(|(i, &(m, n, k))| MacroConfig::gemm(i as u32, m, n, k))
        .collect();
    let mut micros = Vec::new();
    for (i, (stages, warps)) in [2, 3, 4, 5]
        .iter()
        .flat_map(|&s| [(s, 4), (s, 8)])
        .enumerate()
    {
        micros.push(MicroConfig::new(i as u32, stages, warps));
    }

    let mut feasible = Vec::new();
    let mut entries = Vec::new();
    for (c, &(t_m, t_n, t_k)) in macros.iter().zip(&tiles) {
        let area = (t_m * t_n) as f64;
        let eff = (area / 16384.0).powf(0.25);
        let tile_iter = (t_m * t_n * t_k) as f64 / (2.1e6 * eff) + 0.05;
        for u in &micros {
            let smem = u64::from(u.n_stages) * (t_m + t_n) * t_k * 2;
            if smem > SMEM_BYTES {
                continue;
            }
            feasible.push((c.id, u.id));
            let stages = f64::from(u.n_stages);
            let (warp_mult, warp_base) = match (u.n_warps, area >= 16384.0) {
                (8, true) => (0.92, 0.5),
                (8, false) => (1.08, 0.5),
                _ => (1.0, 0.0),
            };
            let per_iter = tile_iter * (1.0 + 0.8 / (stages * stages)) * warp_mult;
            let base = 3.0 + 8.0 * area / 16384.0 + 0.5 * stages * tile_iter + warp_base;
            entries.push(GroundEntry {
                macro_id: c.id,
                micro_id: u.id,
                base_us: base,
                per_iter_us: per_iter,
                dispatch_gap_us: 0.0,
            });
        }
    }
    Landscape {
        hardware: HardwareSpec::new("sim-132", 132),
        registry: ConfigRegistry::new(KernelFamily::DenseGemm, macros, micros, feasible)
            .expect("built-in landscape is valid"),
        ground: SyntheticGround::new(entries).expect("built-in ground truth is valid"),
    }
}

/// `(g, l)` points profiled under any macro: grid points x loop anchors.
pub fn profiled_points(plan: &SamplingPlan) -> HashSet<(u64, u64)> {
    plan.grid_points
        .iter()
        .flat_map(|gp| plan.loop_anchors.iter().map(move |&l| (gp.g(), l)))
        .collect()
}

/// Random dense-GEMM queries for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub count: usize,
    pub seed: u64,
    /// Inclusive wave range under the reference macro.
    pub waves: (u64, u64),
    /// Inclusive range of the reduction dimension.
    pub k: (u64, u64),
}

/// Draws dense-GEMM workloads whose wave count under `reference` lies in
/// `spec.waves`, skipping any workload that lands on a profiled `(g, l)`
/// point under some macro.
pub fn generate_queries(
    spec: &QuerySpec,
    registry: &ConfigRegistry,
    reference: u32,
    hw: &HardwareSpec,
    exclude: &HashSet<(u64, u64)>,
) -> Result<Vec<KernelWorkload>> {
    let refc = registry
        .macro_config(reference)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown reference macro {reference}")))?;
    let crate::kernel::Tiles::Gemm { t_m, t_n, .. } = refc.tiles else {
        return Err(Error::InvalidConfig(
            "query generation needs a GEMM registry".into(),
        ));
    };
    let (w_lo, w_hi) = spec.waves;
    if w_lo == 0 || w_lo > w_hi || spec.k.0 == 0 || spec.k.0 > spec.k.1 {
        return Err(Error::InvalidConfig("bad query ranges".into()));
    }
    let cap = hw.wave_capacity();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[0x71]));
    let mut out = Vec::with_capacity(spec.count);
    let mut attempts = 0usize;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > spec.count * 1000 + 1000 {
            return Err(Error::InvalidConfig(
                "could not draw enough held-out queries".into(),
            ));
        }
        let g_target = rng.random_range((w_lo - 1) * cap + 1..=w_hi * cap);
        let root = (g_target as f64).sqrt();
        let lo = (root / 4.0).max(1.0).ln();
        let hi = (root * 4.0).min(g_target as f64).ln().max(lo);
        let m_g = (rng.random_range(lo..=hi).exp().round() as u64).clamp(1, g_target);
        let n_g = g_target.div_ceil(m_g);
        let m = m_g * t_m - rng.random_range(0..t_m);
        let n = n_g * t_n - rng.random_range(0..t_n);
        let k = rng.random_range(spec.k.0..=spec.k.1);
        let x = KernelWorkload::DenseGemm { m, n, k };
        let (g, _) = map_workload(&x, refc)?;
        if !(w_lo..=w_hi).contains(&wave_count(g, hw)) {
            continue;
        }
        let mut clash = false;
        for c in registry.macros() {
            if exclude.contains(&map_workload(&x, c)?) {
                clash = true;
                break;
            }
        }
        if !clash {
            out.push(x);
        }
    }
    Ok(out)
}

/// Methods compared in a report, in column order.
pub const METHODS: [&str; 5] = ["tuned", "step", "linear", "oracle", "default"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodChoice {
    pub macro_id: u32,
    pub micro_id: u32,
    /// Model prediction; NaN for the oracle and default stub.
    pub predicted_us: f64,
    pub measured_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub workload: KernelWorkload,
    /// Indexed like [`METHODS`].
    pub choices: [MethodChoice; 5],
    pub tuned: Tuned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: &'static str,
    /// Geometric mean of default latency / method latency.
    pub speedup_vs_default: f64,
    /// Geometric mean of oracle latency / method latency.
    pub oracle_ratio: f64,
    /// Mean absolute percentage error of the chosen config's prediction;
    /// NaN for methods without a model.
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionCostSummary {
    pub max_model_evals: usize,
    pub max_anchor_comparisons: usize,
    pub total_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<QueryRow>,
    pub summary: Vec<MethodSummary>,
    pub decision_cost: DecisionCostSummary,
}

/// Everything needed to score the methods on the simulator.
pub struct EvalContext<'a> {
    pub tables: &'a TableSet,
    pub registry: &'a ConfigRegistry,
    pub step: &'a BaselinePredictor,
    pub linear: &'a BaselinePredictor,
    pub machine: &'a SimMachine,
    pub ground: &'a SyntheticGround,
    pub sigma_us: f64,
    pub reps: u32,
}

fn geomean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.ln(), n + 1));
    (sum / n as f64).exp()
}

/// Scores every method on every query. All configs of a query are measured
/// once, with query-specific seeds, and every method reads its latency from
/// that shared matrix; the oracle is its argmin.
pub fn evaluate(queries: &[KernelWorkload], ctx: &EvalContext) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let default = ctx.registry.default_pair();
    let mut rows = Vec::with_capacity(queries.len());
    for (qi, x) in queries.iter().enumerate() {
        let machine = ctx.machine.reseed(&[0xE7A1, qi as u64]);
        let matrix = evaluate_pairs(
            &machine,
            x,
            ctx.registry,
            ctx.ground,
            ctx.sigma_us,
            ctx.reps,
        )?;
        let lookup = |pair: (u32, u32)| -> Result<f64> {
            matrix
                .iter()
                .find(|p| (p.macro_id, p.micro_id) == pair)
                .map(|p| p.latency_us)
                .ok_or_else(|| Error::InvalidConfig(format!("pair {pair:?} was not measured")))
        };
        let choice = |t: &Tuned| -> Result<MethodChoice> {
            Ok(MethodChoice {
                macro_id: t.macro_id,
                micro_id: t.micro_id,
                predicted_us: t.predicted_latency_us,
                measured_us: lookup((t.macro_id, t.micro_id))?,
            })
        };
        let tuned = tune(x, ctx.tables, ctx.registry)?;
        let step = tune_baseline(x, ctx.step, ctx.tables, ctx.registry)?;
        let linear = tune_baseline(x, ctx.linear, ctx.tables, ctx.registry)?;
        let best: PairLatency = argmin_pair(&matrix).ok_or(Error::NoFeasiblePair)?;
        let unmodelled = |(macro_id, micro_id): (u32, u32), measured_us: f64| MethodChoice {
            macro_id,
            micro_id,
            predicted_us: f64::NAN,
            measured_us,
        };
        rows.push(QueryRow {
            workload: x.clone(),
            choices: [
                choice(&tuned)?,
                choice(&step)?,
                choice(&linear)?,
                unmodelled((best.macro_id, best.micro_id), best.latency_us),
                unmodelled(default, lookup(default)?),
            ],
            tuned,
        });
    }

    let summary = METHODS
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let chosen = || rows.iter().map(move |r| (r, r.choices[m]));
            let mape = if m < 3 {
                chosen()
                    .map(|(_, c)| ((c.predicted_us - c.measured_us) / c.measured_us).abs())
                    .sum::<f64>()
                    / rows.len() as f64
            } else {
                f64::NAN
            };
            MethodSummary {
                method,
                speedup_vs_default: geomean(
                    chosen().map(|(r, c)| r.choices[4].measured_us / c.measured_us),
                ),
                oracle_ratio: geomean(
                    chosen().map(|(r, c)| r.choices[3].measured_us / c.measured_us),
                ),
                mape,
            }
        })
        .collect();
    let decision_cost = DecisionCostSummary {
        max_model_evals: rows
            .iter()
            .map(|r| r.tuned.decision_stats.model_evals)
            .max()
            .unwrap_or(0),
        max_anchor_comparisons: rows
            .iter()
            .map(|r| r.tuned.decision_stats.anchor_comparisons)
            .max()
            .unwrap_or(0),
        total_fallbacks: rows.iter().map(|r| r.tuned.decision_stats.fallbacks).sum(),
    };
    Ok(EvalReport {
        rows,
        summary,
        decision_cost,
    })
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == name)
    }

    /// One row per (query, method): `query,workload,method,macro_id,micro_id,
    /// predicted_us,measured_us,speedup_vs_default,oracle_ratio`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "query",
            "workload",
            "method",
            "macro_id",
            "micro_id",
            "predicted_us",
            "measured_us",
            "speedup_vs_default",
            "oracle_ratio",
        ])?;
        for (qi, r) in self.rows.iter().enumerate() {
            for (m, c) in r.choices.iter().enumerate() {
                let predicted = if c.predicted_us.is_nan() {
                    String::new()
                } else {
                    c.predicted_us.to_string()
                };
                w.write_record([
                    qi.to_string(),
                    r.workload.to_string(),
                    METHODS[m].to_string(),
                    c.macro_id.to_string(),
                    c.micro_id.to_string(),
                    predicted,
                    c.measured_us.to_string(),
                    (r.choices[4].measured_us / c.measured_us).to_string(),
                    (r.choices[3].measured_us / c.measured_us).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<eval csv>", e))?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("queries: {}\n", self.rows.len());
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>10}",
            "method", "vs_default", "vs_oracle", "mape"
        );
        for m in &self.summary {
            let mape = if m.mape.is_nan() {
                "-".to_string()
            } else {
                format!("{:.4}", m.mape)
            };
            let _ = writeln!(
                s,
                "{:<8} {:>12.4} {:>12.4} {:>10}",
                m.method, m.speedup_vs_default, m.oracle_ratio, mape
            );
        }
        let d = &self.decision_cost;
        let _ = writeln!(
            s,
            "decision cost: max model evals {}, max anchor comparisons {}, fallbacks {}",
            d.max_model_evals, d.max_anchor_comparisons, d.total_fallbacks
        );
        s
    }
}
