//! Runtime configuration selection over fitted dual tables.
//!
//! Stage I predicts every macro's latency with its wave-local bilinear
//! model and keeps the fastest. Stage II looks up the cached micro at the
//! loop anchor nearest to the winner's loop count. Nothing is measured.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{physical_coords, wave_count, HardwareSpec, KernelWorkload};
use crate::model::{fit_bucket, shared_selections, BilinearCoeffs, DualTable, Sample, TableSet};
use crate::profile::ProfileRecord;
use crate::registry::ConfigRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Profiled(u64),
    Extrapolated,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Profiled(w) => write!(f, "profiled({w})"),
            Regime::Extrapolated => f.write_str("extrapolated"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionStats {
    /// Latency-model evaluations in Stage I, one per macro candidate.
    pub model_evals: usize,
    /// Comparisons made by the Stage II anchor search.
    pub anchor_comparisons: usize,
    /// Missing-bucket or missing-anchor fallbacks taken.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub macro_id: u32,
    pub micro_id: u32,
    pub predicted_latency_us: f64,
    pub regime: Regime,
    pub g: u64,
    pub l: u64,
    /// Loop anchor the micro was retrieved from.
    pub anchor: u64,
    pub decision_stats: DecisionStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub latency_us: f64,
    pub regime: Regime,
    /// The wave's own bucket was missing and a neighbour's was used.
    pub fallback: bool,
}

/// Nearest entry of `list` (ascending keys) to `w`; ties go to the smaller key.
fn nearest_key<V>(map: &BTreeMap<u64, V>, w: u64) -> Option<(u64, &V)> {
    let below = map.range(..=w).next_back();
    let above = map.range(w..).next();
    match (below, above) {
        (Some(b), Some(a)) => Some(if w - b.0 <= a.0 - w {
            (*b.0, b.1)
        } else {
            (*a.0, a.1)
        }),
        (Some(b), None) => Some((*b.0, b.1)),
        (None, Some(a)) => Some((*a.0, a.1)),
        (None, None) => None,
    }
}

/// Predicts one macro's latency at `(g, l)`, switching to the extrapolation
/// model past the profiled horizon.
pub fn predict_latency(set: &TableSet, table: &DualTable, g: u64, l: u64) -> Prediction {
    let w = wave_count(g, &set.hardware);
    if w > set.waves {
        return Prediction {
            latency_us: table.theta_ext.predict(g, l),
            regime: Regime::Extrapolated,
            fallback: false,
        };
    }
    let (theta, fallback) = match table.coeffs.get(&w) {
        Some(theta) => (*theta, false),
        None => match nearest_key(&table.coeffs, w) {
            Some((_, theta)) => (*theta, true),
            None => (table.theta_ext, true),
        },
    };
    Prediction {
        latency_us: theta.predict(g, l),
        regime: Regime::Profiled(w),
        fallback,
    }
}

/// Index of the anchor nearest to `l` in ascending `anchors`, ties to the
/// smaller anchor, and the number of comparisons spent.
///
/// Each step compares `l` against the midpoint of two neighbouring anchors,
/// so at most `ceil(log2 n)` comparisons are made.
pub fn nearest_anchor(anchors: &[u64], l: u64) -> Option<(usize, usize)> {
    if anchors.is_empty() {
        return None;
    }
    let (mut lo, mut hi) = (0, anchors.len() - 1);
    let mut comparisons = 0;
    while lo < hi {
        let mid = (lo + hi) / 2;
        comparisons += 1;
        if 2 * u128::from(l) <= u128::from(anchors[mid]) + u128::from(anchors[mid + 1]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some((lo, comparisons))
}

/// Stage II: the cached micro for the winner's regime, falling back to the
/// nearest wave's anchor map (smaller wave first) when the regime has none.
fn retrieve_micro(
    table: &DualTable,
    regime: Regime,
    l: u64,
    stats: &mut DecisionStats,
) -> Result<(u64, u32)> {
    let own = match regime {
        Regime::Profiled(w) => table.anchors.get(&w),
        Regime::Extrapolated => Some(&table.ext_anchors),
    };
    let map = match own.filter(|m| !m.is_empty()) {
        Some(m) => m,
        None => {
            stats.fallbacks += 1;
            let target = match regime {
                Regime::Profiled(w) => w,
                Regime::Extrapolated => u64::MAX,
            };
            let non_empty: BTreeMap<u64, &BTreeMap<u64, u32>> = table
                .anchors
                .iter()
                .filter(|(_, m)| !m.is_empty())
                .map(|(&w, m)| (w, m))
                .collect();
            nearest_key(&non_empty, target)
                .map(|(_, m)| *m)
                .ok_or_else(|| Error::MissingTableData {
                    macro_id: table.macro_id,
                    reason: "no anchor micro configs".into(),
                })?
        }
    };
    let keys: Vec<u64> = map.keys().copied().collect();
    let (idx, comparisons) = nearest_anchor(&keys, l).expect("non-empty anchor map");
    stats.anchor_comparisons += comparisons;
    Ok((keys[idx], map[&keys[idx]]))
}

/// Shared two-stage driver; `predict` supplies the Stage I latency model.
fn tune_with<F>(
    x: &KernelWorkload,
    set: &TableSet,
    registry: &ConfigRegistry,
    mut predict: F,
) -> Result<Tuned>
where
    F: FnMut(&DualTable, u64, u64) -> Result<Prediction>,
{
    if set.tables.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if x.family() != set.kernel_family {
        return Err(Error::InvalidWorkload(format!(
            "{} workload given to {} tables",
            x.family(),
            set.kernel_family
        )));
    }
    let mut stats = DecisionStats::default();
    let mut best: Option<(&DualTable, u64, u64, Prediction)> = None;
    let mut tables: Vec<&DualTable> = set.tables.iter().collect();
    tables.sort_by_key(|t| t.macro_id);
    for table in tables {
        let c = registry
            .macro_config(table.macro_id)
            .ok_or_else(|| Error::MissingTableData {
                macro_id: table.macro_id,
                reason: "macro id not in registry".into(),
            })?;
        let coords = physical_coords(x, c, &set.hardware)?;
        let pred = predict(table, coords.g, coords.l)?;
        stats.model_evals += 1;
        if pred.fallback {
            stats.fallbacks += 1;
        }
        let better = match &best {
            None => pred.latency_us.is_finite(),
            Some((.., b)) => pred.latency_us < b.latency_us,
        };
        if better {
            best = Some((table, coords.g, coords.l, pred));
        }
    }
    let (table, g, l, pred) = best.ok_or(Error::EmptyDataset)?;
    let (anchor, micro_id) = retrieve_micro(table, pred.regime, l, &mut stats)?;
    if !registry.is_feasible(table.macro_id, micro_id) {
        return Err(Error::InvalidConfig(format!(
            "cached micro {micro_id} is not feasible with macro {}",
            table.macro_id
        )));
    }
    Ok(Tuned {
        macro_id: table.macro_id,
        micro_id,
        predicted_latency_us: pred.latency_us,
        regime: pred.regime,
        g,
        l,
        anchor,
        decision_stats: stats,
    })
}

/// Picks `<macro, micro>` for `x` from the fitted tables.
pub fn tune(x: &KernelWorkload, set: &TableSet, registry: &ConfigRegistry) -> Result<Tuned> {
    tune_with(x, set, registry, |t, g, l| {
        Ok(predict_latency(set, t, g, l))
    })
}

/// Ablation predictors: wave-count-only and wave-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselinePredictor {
    /// `t_wave * ceil(g / capacity)` with one `t_wave` per `(macro, anchor)`.
    Step {
        t_wave: BTreeMap<u32, BTreeMap<u64, f64>>,
    },
    /// One bilinear model per macro over all waves.
    GlobalLinear {
        coeffs: BTreeMap<u32, BilinearCoeffs>,
    },
}

impl BaselinePredictor {
    /// Per `(macro, anchor)`, `t_wave` is the latency of the largest wave-1
    /// grid under the shared micro, i.e. one full wave. Without wave-1 data
    /// it is the least-squares slope through the origin of latency on waves.
    pub fn fit_step(records: &[ProfileRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut t_wave: BTreeMap<u32, BTreeMap<u64, f64>> = BTreeMap::new();
        for (macro_id, per_wave) in shared_selections(records) {
            let mut by_l: BTreeMap<u64, Vec<(u64, u64, f64)>> = BTreeMap::new();
            for (&w, per_l) in &per_wave {
                for (&l, sel) in per_l {
                    by_l.entry(l)
                        .or_default()
                        .extend(sel.points.iter().map(|&(g, t)| (w, g, t)));
                }
            }
            let entry = t_wave.entry(macro_id).or_default();
            for (l, pts) in by_l {
                let full_wave = pts
                    .iter()
                    .filter(|p| p.0 == 1)
                    .max_by_key(|p| p.1)
                    .map(|p| p.2);
                let t = full_wave.unwrap_or_else(|| {
                    let num: f64 = pts.iter().map(|p| p.0 as f64 * p.2).sum();
                    let den: f64 = pts.iter().map(|p| (p.0 as f64).powi(2)).sum();
                    num / den
                });
                entry.insert(l, t);
            }
        }
        Ok(BaselinePredictor::Step { t_wave })
    }

    /// Fits one bilinear model per macro on the shared-micro samples of all waves.
    pub fn fit_global_linear(records: &[ProfileRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut coeffs = BTreeMap::new();
        for (macro_id, per_wave) in shared_selections(records) {
            let samples: Vec<Sample> = per_wave
                .values()
                .flat_map(|per_l| {
                    per_l.iter().flat_map(|(&l, sel)| {
                        sel.points
                            .iter()
                            .map(move |&(g, latency_us)| Sample { g, l, latency_us })
                    })
                })
                .collect();
            coeffs.insert(macro_id, fit_bucket(&samples)?.coeffs);
        }
        Ok(BaselinePredictor::GlobalLinear { coeffs })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselinePredictor::Step { .. } => "step",
            BaselinePredictor::GlobalLinear { .. } => "linear",
        }
    }
}

/// Baseline latency of `macro_id` at `(g, l)`.
pub fn baseline_predict(
    bp: &BaselinePredictor,
    macro_id: u32,
    g: u64,
    l: u64,
    hw: &HardwareSpec,
) -> Result<f64> {
    let missing = || Error::MissingTableData {
        macro_id,
        reason: format!("no {} baseline data", bp.name()),
    };
    match bp {
        BaselinePredictor::Step { t_wave } => {
            let per_l = t_wave
                .get(&macro_id)
                .filter(|m| !m.is_empty())
                .ok_or_else(missing)?;
            let keys: Vec<u64> = per_l.keys().copied().collect();
            let (idx, _) = nearest_anchor(&keys, l).expect("non-empty");
            Ok(per_l[&keys[idx]] * wave_count(g, hw) as f64)
        }
        BaselinePredictor::GlobalLinear { coeffs } => {
            Ok(coeffs.get(&macro_id).ok_or_else(missing)?.predict(g, l))
        }
    }
}

/// Two-stage selection with a baseline driving Stage I; Stage II still uses
/// the dual tables' anchor maps.
pub fn tune_baseline(
    x: &KernelWorkload,
    bp: &BaselinePredictor,
    set: &TableSet,
    registry: &ConfigRegistry,
) -> Result<Tuned> {
    tune_with(x, set, registry, |t, g, l| {
        let w = wave_count(g, &set.hardware);
        Ok(Prediction {
            latency_us: baseline_predict(bp, t.macro_id, g, l, &set.hardware)?,
            regime: if w > set.waves {
                Regime::Extrapolated
            } else {
                Regime::Profiled(w)
            },
            fallback: false,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelFamily, MacroConfig, MicroConfig};
    use crate::model::{build_dual_tables, FitDiagnostics, TableDiagnostics, TABLE_SCHEMA_VERSION};
    use proptest::prelude::*;

    fn brute_nearest(anchors: &[u64], l: u64) -> usize {
        let mut best = 0;
        for (i, &a) in anchors.iter().enumerate() {
            if a.abs_diff(l) < anchors[best].abs_diff(l) {
                best = i;
            }
        }
        best
    }

    #[test]
    fn nearest_anchor_examples() {
        assert_eq!(nearest_anchor(&[16, 32, 64], 40).map(|r| r.0), Some(1));
        assert_eq!(nearest_anchor(&[32, 64], 48).map(|r| r.0), Some(0));
        assert_eq!(nearest_anchor(&[32], 1000), Some((0, 0)));
        assert_eq!(nearest_anchor(&[], 5), None);
    }

    proptest! {
        #[test]
        fn nearest_anchor_matches_scan(set in proptest::collection::btree_set(1u64..500, 1..40), l in 1u64..600) {
            let anchors: Vec<u64> = set.into_iter().collect();
            let (idx, cmp) = nearest_anchor(&anchors, l).unwrap();
            prop_assert_eq!(idx, brute_nearest(&anchors, l));
            let bound = (anchors.len() as f64).log2().ceil() as usize + 1;
            prop_assert!(cmp <= bound);
        }
    }

    fn diag() -> FitDiagnostics {
        FitDiagnostics {
            n_samples: 0,
            rank: 4,
            r2: 1.0,
            mape: 0.0,
            flags: vec![],
        }
    }

    /// One hand-built table per macro with constant-per-wave models.
    fn hand_set(
        n_macro: u32,
        waves: u64,
        latency: impl Fn(u32, u64) -> f64,
    ) -> (TableSet, ConfigRegistry) {
        let registry = ConfigRegistry::fully_feasible(
            KernelFamily::DenseGemm,
            (0..n_macro)
                .map(|i| MacroConfig::gemm(i, 128, 128, 64))
                .collect(),
            vec![MicroConfig::new(0, 2, 4), MicroConfig::new(1, 3, 4)],
        )
        .unwrap();
        let tables = (0..n_macro)
            .map(|m| DualTable {
                macro_id: m,
                coeffs: (1..=waves)
                    .map(|w| (w, BilinearCoeffs::from([0.0, 0.0, 0.0, latency(m, w)])))
                    .collect(),
                theta_ext: BilinearCoeffs::from([0.0, 0.0, 0.0, latency(m, waves + 1)]),
                anchors: (1..=waves)
                    .map(|w| (w, [(16, 0), (32, 1), (48, 0), (64, 1), (80, 0)].into()))
                    .collect(),
                ext_anchors: [(16, 1), (80, 1)].into(),
                diagnostics: TableDiagnostics {
                    buckets: BTreeMap::new(),
                    extrapolation: diag(),
                    ext_waves: vec![],
                },
            })
            .collect();
        let set = TableSet {
            schema_version: TABLE_SCHEMA_VERSION,
            kernel_family: KernelFamily::DenseGemm,
            hardware: HardwareSpec::new("t", 132),
            waves,
            p: 10,
            tables,
        };
        (set, registry)
    }

    fn gemm(m: u64, n: u64, k: u64) -> KernelWorkload {
        KernelWorkload::DenseGemm { m, n, k }
    }

    #[test]
    fn regime_boundary() {
        let (set, _) = hand_set(1, 40, |_, w| w as f64);
        let t = &set.tables[0];
        assert_eq!(
            predict_latency(&set, t, 40 * 132, 8).regime,
            Regime::Profiled(40)
        );
        assert_eq!(
            predict_latency(&set, t, 40 * 132 + 1, 8).regime,
            Regime::Extrapolated
        );
        assert_eq!(predict_latency(&set, t, 40 * 132 + 1, 8).latency_us, 41.0);
    }

    #[test]
    fn missing_bucket_uses_nearest_wave() {
        let (mut set, _) = hand_set(1, 5, |_, w| w as f64);
        set.tables[0].coeffs.remove(&3);
        let p = predict_latency(&set, &set.tables[0], 3 * 132, 8);
        assert!(p.fallback);
        assert_eq!(p.latency_us, 2.0);
    }

    #[test]
    fn decision_cost_contract() {
        let (set, registry) = hand_set(12, 3, |m, _| 100.0 - f64::from(m));
        // 128x128 tiles, 64-deep: g = 16, l = 40.
        let t = tune(&gemm(512, 512, 2560), &set, &registry).unwrap();
        assert_eq!(t.decision_stats.model_evals, 12);
        assert!(t.decision_stats.anchor_comparisons <= 4);
        assert_eq!(t.macro_id, 11);
        assert_eq!((t.anchor, t.micro_id), (32, 1));
        assert_eq!(t.regime, Regime::Profiled(1));

        let (one, registry) = hand_set(1, 3, |_, _| 5.0);
        assert_eq!(
            tune(&gemm(512, 512, 2560), &one, &registry)
                .unwrap()
                .decision_stats
                .model_evals,
            1
        );
    }

    #[test]
    fn ties_go_to_smallest_macro() {
        let (set, registry) = hand_set(4, 3, |_, _| 7.0);
        assert_eq!(
            tune(&gemm(512, 512, 64), &set, &registry).unwrap().macro_id,
            0
        );
    }

    #[test]
    fn extrapolated_uses_ext_anchors() {
        let (set, registry) = hand_set(2, 3, |m, w| w as f64 * (1.0 + f64::from(m)));
        // 60 x 60 tiles of 128 -> g = 3600, w = 28 > 3.
        let t = tune(&gemm(60 * 128, 60 * 128, 64 * 30), &set, &registry).unwrap();
        assert_eq!(t.regime, Regime::Extrapolated);
        assert_eq!((t.anchor, t.micro_id), (16, 1));
    }

    #[test]
    fn empty_anchor_map_falls_back_to_smaller_wave() {
        let (mut set, registry) = hand_set(1, 3, |_, _| 1.0);
        set.tables[0].anchors.get_mut(&2).unwrap().clear();
        set.tables[0].anchors.get_mut(&3).unwrap().insert(40, 1);
        let t = tune(&gemm(2 * 128, 132 * 128, 64 * 40), &set, &registry).unwrap();
        assert_eq!(t.regime, Regime::Profiled(2));
        assert_eq!(t.decision_stats.fallbacks, 1);
        assert_eq!(t.anchor, 32);
    }

    #[test]
    fn argmin_and_determinism() {
        let (set, registry) = hand_set(6, 5, |m, w| ((m * 7 + 3) % 5) as f64 + w as f64);
        let x = gemm(1000, 3000, 777);
        let a = tune(&x, &set, &registry).unwrap();
        let b = tune(&x, &set, &registry).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for t in &set.tables {
            let c = physical_coords(
                &x,
                registry.macro_config(t.macro_id).unwrap(),
                &set.hardware,
            )
            .unwrap();
            assert!(predict_latency(&set, t, c.g, c.l).latency_us >= a.predicted_latency_us);
        }
    }

    #[test]
    fn baseline_examples() {
        let step = BaselinePredictor::Step {
            t_wave: [(0, [(16, 50.0)].into())].into(),
        };
        assert_eq!(
            baseline_predict(&step, 0, 10, 16, &HardwareSpec::new("t", 4)).unwrap(),
            150.0
        );
        let lin = BaselinePredictor::GlobalLinear {
            coeffs: [(0, BilinearCoeffs::from([0.01, 0.5, 0.2, 10.0]))].into(),
        };
        assert_eq!(
            baseline_predict(&lin, 0, 100, 50, &HardwareSpec::new("t", 4)).unwrap(),
            120.0
        );
        assert!(baseline_predict(&lin, 3, 100, 50, &HardwareSpec::new("t", 4)).is_err());
    }

    #[test]
    fn step_fit_uses_full_wave_latency() {
        let rec = |g, w, latency_us| ProfileRecord {
            g,
            l: 16,
            w,
            macro_id: 0,
            micro_id: 0,
            latency_us,
        };
        let records = [rec(66, 1, 40.0), rec(132, 1, 50.0), rec(264, 2, 100.0)];
        let BaselinePredictor::Step { t_wave } = BaselinePredictor::fit_step(&records).unwrap()
        else {
            unreachable!()
        };
        assert_eq!(t_wave[&0][&16], 50.0);
        let no_wave_one = [rec(264, 2, 100.0), rec(396, 3, 150.0)];
        let BaselinePredictor::Step { t_wave } = BaselinePredictor::fit_step(&no_wave_one).unwrap()
        else {
            unreachable!()
        };
        assert!((t_wave[&0][&16] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn tune_on_fitted_tables_prefers_dominant_macro() {
        let registry = ConfigRegistry::fully_feasible(
            KernelFamily::DenseGemm,
            vec![
                MacroConfig::gemm(0, 64, 64, 64),
                MacroConfig::gemm(1, 64, 64, 64),
            ],
            vec![MicroConfig::new(0, 2, 4)],
        )
        .unwrap();
        let hw = HardwareSpec::new("t", 132);
        let mut records = Vec::new();
        for macro_id in 0..2u32 {
            for g in [40u64, 80, 120, 132] {
                for l in [8u64, 16, 32] {
                    let scale = if macro_id == 1 { 0.5 } else { 1.0 };
                    records.push(ProfileRecord {
                        g,
                        l,
                        w: 1,
                        macro_id,
                        micro_id: 0,
                        latency_us: scale * (10.0 + l as f64),
                    });
                }
            }
        }
        let set = build_dual_tables(&records, &registry, &hw, 1, 10).unwrap();
        let t = tune(&gemm(640, 640, 64 * 20), &set, &registry).unwrap();
        assert_eq!((t.macro_id, t.micro_id, t.anchor), (1, 0, 16));
        assert!((t.predicted_latency_us - 15.0).abs() < 1e-9);
    }
}
