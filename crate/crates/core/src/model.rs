//! Wave-conditioned bilinear latency models and the dual-table artifact.
//!
//! Profile records are bucketed by `<macro, wave>`. Inside a bucket, each
//! loop anchor gets one shared micro config (the one with the lowest mean
//! latency across the sampled grid sizes) and the bucket is fitted with
//!
//! ```text
//! T(G, L) = alpha * G * L + beta * G + gamma * L + delta
//! ```
//!
//! using only the shared micros' latencies. The last `p` profiled waves are
//! pooled into one more fit used beyond the profiled horizon.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{HardwareSpec, KernelFamily};
use crate::lstsq;
use crate::profile::ProfileRecord;
use crate::registry::{check_version, ConfigRegistry};

pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// Fewest samples for a bucket to enter the coefficient table.
pub const MIN_BUCKET_SAMPLES: usize = 4;

/// `<alpha, beta, gamma, delta>`, in µs per unit of `G*L`, `G`, `L` and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BilinearCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl From<[f64; 4]> for BilinearCoeffs {
    fn from([alpha, beta, gamma, delta]: [f64; 4]) -> Self {
        BilinearCoeffs {
            alpha,
            beta,
            gamma,
            delta,
        }
    }
}

impl From<BilinearCoeffs> for [f64; 4] {
    fn from(c: BilinearCoeffs) -> Self {
        [c.alpha, c.beta, c.gamma, c.delta]
    }
}

impl BilinearCoeffs {
    pub fn predict(&self, g: u64, l: u64) -> f64 {
        let (g, l) = (g as f64, l as f64);
        self.alpha * g * l + self.beta * g + self.gamma * l + self.delta
    }

    pub fn is_finite(&self) -> bool {
        [self.alpha, self.beta, self.gamma, self.delta]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn predict(theta: &BilinearCoeffs, g: u64, l: u64) -> f64 {
    theta.predict(g, l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub g: u64,
    pub l: u64,
    pub latency_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Collinear design columns were dropped and their coefficients zeroed.
    Degenerate,
    /// Too few samples; the bucket is left out of the coefficient table.
    Sparse,
    /// Some `(w, l)` group had no micro measured at every grid size.
    PartialMicroCoverage,
    /// Too few waves to pool; the extrapolation model copies a wave model.
    ExtrapolationFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_samples: usize,
    pub rank: usize,
    pub r2: f64,
    pub mape: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<FitFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFit {
    pub coeffs: BilinearCoeffs,
    pub diagnostics: FitDiagnostics,
}

/// Ordinary least squares fit of the bilinear model.
///
/// Rank-deficient designs (one distinct `l`, fewer than four points, ...)
/// get a reduced fit flagged [`FitFlag::Degenerate`].
pub fn fit_bucket(samples: &[Sample]) -> Result<BilinearFit> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let g: Vec<f64> = samples.iter().map(|s| s.g as f64).collect();
    let l: Vec<f64> = samples.iter().map(|s| s.l as f64).collect();
    let gl: Vec<f64> = g.iter().zip(&l).map(|(a, b)| a * b).collect();
    let ones = vec![1.0; samples.len()];
    let y: Vec<f64> = samples.iter().map(|s| s.latency_us).collect();
    let sol = lstsq::solve(&[gl, g, l, ones], &y);
    let coeffs = BilinearCoeffs::from([sol.coeffs[0], sol.coeffs[1], sol.coeffs[2], sol.coeffs[3]]);
    let (r2, mape) = goodness(&coeffs, samples);
    let mut flags = Vec::new();
    if !sol.is_full_rank() {
        flags.push(FitFlag::Degenerate);
    }
    Ok(BilinearFit {
        coeffs,
        diagnostics: FitDiagnostics {
            n_samples: samples.len(),
            rank: sol.rank,
            r2,
            mape,
            flags,
        },
    })
}

/// Coefficient of determination and mean absolute percentage error.
pub fn goodness(coeffs: &BilinearCoeffs, samples: &[Sample]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.latency_us).sum::<f64>() / n;
    let mut sse = 0.0;
    let mut sst = 0.0;
    let mut ape = 0.0;
    for s in samples {
        let pred = coeffs.predict(s.g, s.l);
        sse += (pred - s.latency_us).powi(2);
        sst += (s.latency_us - mean).powi(2);
        ape += ((pred - s.latency_us) / s.latency_us).abs();
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse <= 1e-24 * mean * mean * n {
        1.0
    } else {
        0.0
    };
    (r2, ape / n)
}

/// The micro config shared across one `<macro, w, l>` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedMicro {
    pub micro_id: u32,
    /// `(g, latency)` of the chosen micro, ascending in `g`.
    pub points: Vec<(u64, f64)>,
    /// False when no micro covered every grid size of the group.
    pub full_coverage: bool,
}

/// Picks the micro with the lowest arithmetic mean latency among the micros
/// measured at every grid size of the group; ties go to the smallest id.
/// When none covers every grid size, the best-covering micro is returned
/// (ties by smallest id) with `full_coverage == false`.
pub fn select_shared_micro(group: &[ProfileRecord]) -> Option<SharedMicro> {
    let grid: BTreeSet<u64> = group.iter().map(|r| r.g).collect();
    let mut by_micro: BTreeMap<u32, BTreeMap<u64, (f64, u32)>> = BTreeMap::new();
    for r in group {
        let slot = by_micro
            .entry(r.micro_id)
            .or_default()
            .entry(r.g)
            .or_insert((0.0, 0));
        slot.0 += r.latency_us;
        slot.1 += 1;
    }
    let points_of = |m: &BTreeMap<u64, (f64, u32)>| -> Vec<(u64, f64)> {
        m.iter()
            .map(|(&g, &(sum, n))| (g, sum / f64::from(n)))
            .collect()
    };

    let mut best: Option<(f64, u32)> = None;
    for (&id, pts) in &by_micro {
        if pts.len() != grid.len() {
            continue;
        }
        let mean = points_of(pts).iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        if best.is_none_or(|(m, _)| mean < m) {
            best = Some((mean, id));
        }
    }
    if let Some((_, id)) = best {
        return Some(SharedMicro {
            micro_id: id,
            points: points_of(&by_micro[&id]),
            full_coverage: true,
        });
    }
    // Descending ids, so the last maximum is the smallest id.
    let (&id, pts) = by_micro.iter().rev().max_by_key(|(_, pts)| pts.len())?;
    Some(SharedMicro {
        micro_id: id,
        points: points_of(pts),
        full_coverage: false,
    })
}

/// Shared-micro selections: macro -> wave -> loop anchor.
pub type SharedSelections = BTreeMap<u32, BTreeMap<u64, BTreeMap<u64, SharedMicro>>>;

/// Groups records by `<macro, w, l>` and selects the shared micro of each.
pub fn shared_selections(records: &[ProfileRecord]) -> SharedSelections {
    let mut groups: BTreeMap<(u32, u64, u64), Vec<ProfileRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.macro_id, r.w, r.l)).or_default().push(*r);
    }
    let mut out: SharedSelections = BTreeMap::new();
    for ((macro_id, w, l), group) in groups {
        if let Some(sel) = select_shared_micro(&group) {
            out.entry(macro_id)
                .or_default()
                .entry(w)
                .or_default()
                .insert(l, sel);
        }
    }
    out
}

fn samples_of(per_l: &BTreeMap<u64, SharedMicro>) -> Vec<Sample> {
    per_l
        .iter()
        .flat_map(|(&l, sel)| {
            sel.points
                .iter()
                .map(move |&(g, latency_us)| Sample { g, l, latency_us })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDiagnostics {
    /// Per-wave fit diagnostics, including sparse buckets left out of the table.
    pub buckets: BTreeMap<u64, FitDiagnostics>,
    pub extrapolation: FitDiagnostics,
    /// Waves pooled into the extrapolation fit.
    pub ext_waves: Vec<u64>,
}

/// Per-macro runtime artifact: wave-indexed coefficients, extrapolation
/// coefficients and `(w, L)`-indexed shared micros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualTable {
    pub macro_id: u32,
    pub coeffs: BTreeMap<u64, BilinearCoeffs>,
    pub theta_ext: BilinearCoeffs,
    pub anchors: BTreeMap<u64, BTreeMap<u64, u32>>,
    pub ext_anchors: BTreeMap<u64, u32>,
    pub diagnostics: TableDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub coeffs: BilinearCoeffs,
    /// Majority-vote micro per loop anchor.
    pub anchors: BTreeMap<u64, u32>,
    pub diagnostics: FitDiagnostics,
    /// Waves whose samples were pooled.
    pub waves: Vec<u64>,
}

/// Fits the extrapolation model from the waves `[max(1, W - p + 1), W]`.
pub fn fit_extrapolation(
    per_wave: &BTreeMap<u64, BTreeMap<u64, SharedMicro>>,
    coeffs: &BTreeMap<u64, BilinearCoeffs>,
    waves: u64,
    p: u64,
) -> Result<Extrapolation> {
    let first = waves.saturating_sub(p.max(1) - 1).max(1);
    let pooled: Vec<u64> = per_wave.range(first..=waves).map(|(&w, _)| w).collect();

    let mut votes: BTreeMap<u64, BTreeMap<u32, usize>> = BTreeMap::new();
    let mut samples = Vec::new();
    for w in &pooled {
        for (&l, sel) in &per_wave[w] {
            *votes.entry(l).or_default().entry(sel.micro_id).or_default() += 1;
        }
        samples.extend(samples_of(&per_wave[w]));
    }
    let ext_anchors = votes
        .into_iter()
        .map(|(l, counts)| {
            // BTreeMap iterates ids ascending, so `>` keeps the smallest id on ties.
            let winner = counts
                .iter()
                .fold(
                    (0u32, 0usize),
                    |best, (&id, &n)| if n > best.1 { (id, n) } else { best },
                )
                .0;
            (l, winner)
        })
        .collect();

    if pooled.len() >= 2 {
        let fit = fit_bucket(&samples)?;
        return Ok(Extrapolation {
            coeffs: fit.coeffs,
            anchors: ext_anchors,
            diagnostics: fit.diagnostics,
            waves: pooled,
        });
    }

    // Fallback: copy the highest available wave model.
    let Some((&w_top, &theta)) = coeffs.range(..=waves).next_back() else {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut fit = fit_bucket(&samples)?;
        fit.diagnostics.flags.push(FitFlag::ExtrapolationFallback);
        return Ok(Extrapolation {
            coeffs: fit.coeffs,
            anchors: ext_anchors,
            diagnostics: fit.diagnostics,
            waves: pooled,
        });
    };
    let top_samples = per_wave.get(&w_top).map(samples_of).unwrap_or_default();
    let (r2, mape) = if top_samples.is_empty() {
        (1.0, 0.0)
    } else {
        goodness(&theta, &top_samples)
    };
    let diagnostics = FitDiagnostics {
        n_samples: top_samples.len(),
        rank: 0,
        r2,
        mape,
        flags: vec![FitFlag::ExtrapolationFallback],
    };
    Ok(Extrapolation {
        coeffs: theta,
        anchors: ext_anchors,
        diagnostics,
        waves: vec![w_top],
    })
}

/// Fits one macro's dual table from its shared-micro selections.
pub fn build_table(
    macro_id: u32,
    per_wave: &BTreeMap<u64, BTreeMap<u64, SharedMicro>>,
    waves: u64,
    p: u64,
) -> Result<DualTable> {
    let mut coeffs = BTreeMap::new();
    let mut anchors = BTreeMap::new();
    let mut buckets = BTreeMap::new();
    for (&w, per_l) in per_wave.range(1..=waves) {
        anchors.insert(w, per_l.iter().map(|(&l, sel)| (l, sel.micro_id)).collect());
        let samples = samples_of(per_l);
        let mut fit = fit_bucket(&samples)?;
        if per_l.values().any(|s| !s.full_coverage) {
            fit.diagnostics.flags.push(FitFlag::PartialMicroCoverage);
        }
        if samples.len() < MIN_BUCKET_SAMPLES {
            fit.diagnostics.flags.push(FitFlag::Sparse);
            log::warn!(
                "macro {macro_id} wave {w}: only {} samples; bucket left out",
                samples.len()
            );
        } else {
            coeffs.insert(w, fit.coeffs);
        }
        buckets.insert(w, fit.diagnostics);
    }
    let ext = fit_extrapolation(per_wave, &coeffs, waves, p)?;
    Ok(DualTable {
        macro_id,
        coeffs,
        theta_ext: ext.coeffs,
        anchors,
        ext_anchors: ext.anchors,
        diagnostics: TableDiagnostics {
            buckets,
            extrapolation: ext.diagnostics,
            ext_waves: ext.waves,
        },
    })
}

/// The full artifact for one `<hardware, kernel>` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSet {
    pub schema_version: u32,
    pub kernel_family: KernelFamily,
    pub hardware: HardwareSpec,
    /// Profiled wave horizon.
    #[serde(rename = "W")]
    pub waves: u64,
    /// Extrapolation window length.
    pub p: u64,
    pub tables: Vec<DualTable>,
}

impl TableSet {
    pub fn table(&self, macro_id: u32) -> Option<&DualTable> {
        self.tables.iter().find(|t| t.macro_id == macro_id)
    }

    /// Checks macro ids and that every cached anchor micro is feasible.
    pub fn check_against(&self, registry: &ConfigRegistry) -> Result<()> {
        const WHAT: &str = "tables";
        if self.kernel_family != registry.family() {
            return Err(Error::field(
                WHAT,
                "kernel_family",
                "does not match the registry",
            ));
        }
        for (idx, t) in self.tables.iter().enumerate() {
            if registry.macro_config(t.macro_id).is_none() {
                return Err(Error::field(
                    WHAT,
                    format!("tables[{idx}].macro_id"),
                    "unknown macro id",
                ));
            }
            let cached = t
                .anchors
                .values()
                .flat_map(|m| m.values())
                .chain(t.ext_anchors.values());
            for &micro in cached {
                if !registry.is_feasible(t.macro_id, micro) {
                    return Err(Error::field(
                        WHAT,
                        format!("tables[{idx}].anchors"),
                        format!("micro {micro} is not feasible with macro {}", t.macro_id),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        const WHAT: &str = "tables";
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_version(WHAT, &value, "schema_version", TABLE_SCHEMA_VERSION)?;
        let set: TableSet = serde_json::from_value(value)?;
        set.hardware.validate()?;
        if set.tables.is_empty() {
            return Err(Error::field(WHAT, "tables", "must not be empty"));
        }
        for (idx, t) in set.tables.iter().enumerate() {
            let all_finite =
                t.theta_ext.is_finite() && t.coeffs.values().all(BilinearCoeffs::is_finite);
            if !all_finite {
                return Err(Error::field(
                    WHAT,
                    format!("tables[{idx}].coeffs"),
                    "non-finite coefficient",
                ));
            }
        }
        Ok(set)
    }
}

pub fn save_tables(set: &TableSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<TableSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TableSet::from_json(&text)
}

/// Builds one dual table per macro that has records.
///
/// `waves` is the profiled horizon `W`; records beyond it are ignored.
pub fn build_dual_tables(
    records: &[ProfileRecord],
    registry: &ConfigRegistry,
    hw: &HardwareSpec,
    waves: u64,
    p: u64,
) -> Result<TableSet> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if waves == 0 || p == 0 {
        return Err(Error::InvalidPlan("W and p must be >= 1".into()));
    }
    for r in records {
        if !registry.is_feasible(r.macro_id, r.micro_id) {
            return Err(Error::InvalidConfig(format!(
                "record ({}, {}) is not a feasible registry pair",
                r.macro_id, r.micro_id
            )));
        }
    }
    let in_horizon: Vec<ProfileRecord> = records.iter().copied().filter(|r| r.w <= waves).collect();
    if in_horizon.len() < records.len() {
        log::warn!(
            "{} records beyond W = {waves} ignored",
            records.len() - in_horizon.len()
        );
    }
    let selections = shared_selections(&in_horizon);
    let mut tables = Vec::new();
    for c in registry.macros() {
        match selections.get(&c.id) {
            Some(per_wave) => tables.push(build_table(c.id, per_wave, waves, p)?),
            None => log::warn!("macro {} has no records; omitted", c.id),
        }
    }
    if tables.is_empty() {
        return Err(Error::EmptyDataset);
    }
    tables.sort_by_key(|t| t.macro_id);
    Ok(TableSet {
        schema_version: TABLE_SCHEMA_VERSION,
        kernel_family: registry.family(),
        hardware: hw.clone(),
        waves,
        p,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{MacroConfig, MicroConfig};
    use proptest::prelude::*;

    const TRUTH: BilinearCoeffs = BilinearCoeffs {
        alpha: 0.01,
        beta: 0.5,
        gamma: 0.2,
        delta: 10.0,
    };

    fn generic_points() -> Vec<(u64, u64)> {
        vec![
            (13, 4),
            (40, 9),
            (77, 16),
            (100, 25),
            (131, 7),
            (60, 31),
            (90, 12),
            (25, 20),
        ]
    }

    fn rel(a: f64, b: f64) -> f64 {
        if b == 0.0 {
            a.abs()
        } else {
            ((a - b) / b).abs()
        }
    }

    #[test]
    fn exact_recovery() {
        let samples: Vec<Sample> = generic_points()
            .into_iter()
            .map(|(g, l)| Sample {
                g,
                l,
                latency_us: TRUTH.predict(g, l),
            })
            .collect();
        let fit = fit_bucket(&samples).unwrap();
        let c = fit.coeffs;
        for (got, want) in [
            (c.alpha, 0.01),
            (c.beta, 0.5),
            (c.gamma, 0.2),
            (c.delta, 10.0),
        ] {
            assert!(rel(got, want) <= 1e-9, "{got} vs {want}");
        }
        assert!((fit.diagnostics.r2 - 1.0).abs() <= 1e-12);
        // Held-out point inside the bucket's range.
        assert!(rel(c.predict(55, 18), TRUTH.predict(55, 18)) <= 1e-9);
    }

    #[test]
    fn predict_arithmetic() {
        assert_eq!(TRUTH.predict(100, 50), 120.0);
        let flat = BilinearCoeffs::from([0.0, 0.0, 0.0, 7.5]);
        assert_eq!(flat.predict(999, 3), 7.5);
    }

    #[test]
    fn constant_data() {
        let samples: Vec<Sample> = generic_points()
            .into_iter()
            .map(|(g, l)| Sample {
                g,
                l,
                latency_us: 42.0,
            })
            .collect();
        let c = fit_bucket(&samples).unwrap().coeffs;
        assert!(c.alpha.abs() < 1e-9 && c.beta.abs() < 1e-9 && c.gamma.abs() < 1e-9);
        assert!(rel(c.delta, 42.0) < 1e-9);
    }

    #[test]
    fn single_loop_count_is_degenerate() {
        let samples: Vec<Sample> = [33, 66, 99, 132]
            .into_iter()
            .map(|g| Sample {
                g,
                l: 16,
                latency_us: 3.0 + 0.25 * g as f64,
            })
            .collect();
        let fit = fit_bucket(&samples).unwrap();
        assert_eq!(fit.diagnostics.rank, 2);
        assert!(fit.diagnostics.flags.contains(&FitFlag::Degenerate));
        for s in &samples {
            assert!(rel(fit.coeffs.predict(s.g, s.l), s.latency_us) < 1e-9);
        }
    }

    fn rec(g: u64, l: u64, micro_id: u32, latency_us: f64) -> ProfileRecord {
        ProfileRecord {
            g,
            l,
            w: 1,
            macro_id: 0,
            micro_id,
            latency_us,
        }
    }

    #[test]
    fn shared_micro_rules() {
        let two = [
            rec(10, 4, 0, 100.0),
            rec(20, 4, 0, 100.0),
            rec(10, 4, 1, 80.0),
            rec(20, 4, 1, 100.0),
        ];
        let sel = select_shared_micro(&two).unwrap();
        assert_eq!(sel.micro_id, 1);
        assert_eq!(sel.points, vec![(10, 80.0), (20, 100.0)]);

        let single = [rec(10, 4, 5, 1.0)];
        assert_eq!(select_shared_micro(&single).unwrap().micro_id, 5);

        let tie = [rec(10, 4, 3, 50.0), rec(10, 4, 2, 50.0)];
        assert_eq!(select_shared_micro(&tie).unwrap().micro_id, 2);

        // Micro 0 is fastest but misses a grid size.
        let partial = [
            rec(10, 4, 0, 1.0),
            rec(10, 4, 1, 9.0),
            rec(20, 4, 1, 9.0),
            rec(30, 4, 2, 9.0),
        ];
        let sel = select_shared_micro(&partial).unwrap();
        assert_eq!(sel.micro_id, 1);
        assert!(!sel.full_coverage);
    }

    fn registry(n_macro: u32) -> ConfigRegistry {
        ConfigRegistry::fully_feasible(
            KernelFamily::DenseGemm,
            (0..n_macro)
                .map(|i| MacroConfig::gemm(i, 64, 64, 64))
                .collect(),
            vec![MicroConfig::new(0, 2, 4), MicroConfig::new(1, 3, 4)],
        )
        .unwrap()
    }

    /// Noise-free records, bilinear within each wave with wave-specific
    /// coefficients; micro 1 is uniformly 10% slower.
    fn synthetic_records(n_macro: u32, waves: u64, anchors: &[u64]) -> Vec<ProfileRecord> {
        let mut out = Vec::new();
        for macro_id in 0..n_macro {
            for w in 1..=waves {
                let theta = BilinearCoeffs::from([
                    0.002 * w as f64,
                    0.1 + 0.01 * f64::from(macro_id),
                    0.3 * w as f64,
                    5.0 * w as f64,
                ]);
                for g in [
                    (w - 1) * 132 + 25,
                    (w - 1) * 132 + 60,
                    (w - 1) * 132 + 99,
                    w * 132,
                ] {
                    for &l in anchors {
                        for micro_id in 0..2 {
                            let slow = if micro_id == 1 { 1.1 } else { 1.0 };
                            out.push(ProfileRecord {
                                g,
                                l,
                                w,
                                macro_id,
                                micro_id,
                                latency_us: theta.predict(g, l) * slow,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn table_cardinality_and_exact_fit() {
        let hw = HardwareSpec::new("t", 132);
        let records = synthetic_records(2, 3, &[8, 32]);
        let set = build_dual_tables(&records, &registry(2), &hw, 3, 10).unwrap();
        assert_eq!(set.tables.len(), 2);
        for t in &set.tables {
            assert_eq!(t.coeffs.len(), 3);
            assert_eq!(t.anchors.values().map(BTreeMap::len).sum::<usize>(), 6);
            assert!(t.anchors.values().flat_map(|m| m.values()).all(|&m| m == 0));
            for d in t.diagnostics.buckets.values() {
                assert!((d.r2 - 1.0).abs() <= 1e-12, "r2 = {}", d.r2);
            }
        }
    }

    #[test]
    fn extrapolation_pools_last_p_waves() {
        let hw = HardwareSpec::new("t", 132);
        let records = synthetic_records(1, 40, &[8, 32]);
        let set = build_dual_tables(&records, &registry(1), &hw, 40, 10).unwrap();
        assert_eq!(
            set.tables[0].diagnostics.ext_waves,
            (31..=40).collect::<Vec<_>>()
        );
        assert!(set.tables[0].diagnostics.extrapolation.flags.is_empty());
    }

    #[test]
    fn single_wave_extrapolation_falls_back() {
        let hw = HardwareSpec::new("t", 132);
        let records = synthetic_records(1, 1, &[8, 32]);
        let set = build_dual_tables(&records, &registry(1), &hw, 1, 10).unwrap();
        let t = &set.tables[0];
        assert_eq!(t.theta_ext, t.coeffs[&1]);
        assert!(t
            .diagnostics
            .extrapolation
            .flags
            .contains(&FitFlag::ExtrapolationFallback));
        assert_eq!(t.ext_anchors, t.anchors[&1]);
    }

    #[test]
    fn sparse_bucket_left_out() {
        let hw = HardwareSpec::new("t", 132);
        let mut records = synthetic_records(1, 2, &[8, 32]);
        records.retain(|r| r.w == 1 || (r.l == 8 && r.g <= 132 + 60));
        let set = build_dual_tables(&records, &registry(1), &hw, 2, 10).unwrap();
        let t = &set.tables[0];
        assert!(t.coeffs.contains_key(&1) && !t.coeffs.contains_key(&2));
        assert!(t.diagnostics.buckets[&2].flags.contains(&FitFlag::Sparse));
        assert!(t.anchors.contains_key(&2));
    }

    #[test]
    fn tables_round_trip_and_version_gate() {
        let hw = HardwareSpec::new("t", 132);
        let set = build_dual_tables(&synthetic_records(2, 3, &[8, 32]), &registry(2), &hw, 3, 10)
            .unwrap();
        let text = set.to_json().unwrap();
        assert_eq!(TableSet::from_json(&text).unwrap(), set);
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 7", 1);
        let err = TableSet::from_json(&bumped).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("expected 1") && msg.contains("found 7"),
            "{msg}"
        );
        assert!(TableSet::from_json("{\"schema_version\":1}").is_err());
        set.check_against(&registry(2)).unwrap();
        assert!(set.check_against(&registry(1)).is_err());
    }

    #[test]
    fn empty_records_error() {
        let hw = HardwareSpec::new("t", 132);
        assert!(matches!(
            build_dual_tables(&[], &registry(1), &hw, 3, 10),
            Err(Error::EmptyDataset)
        ));
    }

    /// Sum of squared residuals.
    fn sse(c: &BilinearCoeffs, samples: &[Sample]) -> f64 {
        samples
            .iter()
            .map(|s| (c.predict(s.g, s.l) - s.latency_us).powi(2))
            .sum()
    }

    proptest! {
        #[test]
        fn ols_is_locally_optimal(noise in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let pts = [(30u64, 8u64), (60, 8), (99, 8), (130, 8), (30, 32), (60, 32), (99, 32), (130, 32),
                       (45, 16), (80, 64), (120, 16), (10, 64)];
            let samples: Vec<Sample> = pts.iter().zip(&noise)
                .map(|(&(g, l), e)| Sample { g, l, latency_us: TRUTH.predict(g, l) + e })
                .collect();
            let c = fit_bucket(&samples).unwrap().coeffs;
            let base = sse(&c, &samples);
            let arr: [f64; 4] = c.into();
            for i in 0..4 {
                for sign in [-1.0, 1.0] {
                    let mut moved = arr;
                    let step = if arr[i] == 0.0 { 1e-6 } else { 1e-6 * arr[i].abs() };
                    moved[i] += sign * step;
                    let perturbed = sse(&BilinearCoeffs::from(moved), &samples);
                    prop_assert!(perturbed >= base * (1.0 - 1e-12), "coef {} {}: {} < {}", i, sign, perturbed, base);
                }
            }
        }

        #[test]
        fn exact_recovery_on_random_bilinear(a in 1e-4f64..0.1, b in 0.01f64..2.0, c in 0.01f64..2.0, d in 1.0f64..100.0,
                                             pts in proptest::collection::btree_set((1u64..5000, 1u64..300), 8..30)) {
            let truth = BilinearCoeffs::from([a, b, c, d]);
            let samples: Vec<Sample> = pts.iter().map(|&(g, l)| Sample { g, l, latency_us: truth.predict(g, l) }).collect();
            let fit = fit_bucket(&samples).unwrap();
            prop_assume!(fit.diagnostics.rank == 4);
            for (got, want) in [(fit.coeffs.alpha, a), (fit.coeffs.beta, b), (fit.coeffs.gamma, c), (fit.coeffs.delta, d)] {
                prop_assert!(rel(got, want) <= 1e-9 || (got - want).abs() <= 1e-9 * d, "{} vs {}", got, want);
            }
        }

        #[test]
        fn bucket_isolation(extra_latency in 1.0f64..500.0) {
            let hw = HardwareSpec::new("t", 132);
            let records = synthetic_records(1, 3, &[8, 32]);
            let base = build_dual_tables(&records, &registry(1), &hw, 3, 10).unwrap();
            let mut more = records.clone();
            more.extend([(140u64, 8u64), (180, 32), (250, 8), (200, 16)].map(|(g, l)| ProfileRecord {
                g, l, w: 2, macro_id: 0, micro_id: 0, latency_us: extra_latency,
            }));
            let changed = build_dual_tables(&more, &registry(1), &hw, 3, 10).unwrap();
            prop_assert_eq!(base.tables[0].coeffs[&1], changed.tables[0].coeffs[&1]);
            prop_assert_eq!(base.tables[0].coeffs[&3], changed.tables[0].coeffs[&3]);
        }
    }
}
