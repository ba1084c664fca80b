//! Wave-aware sparse sampling plans.
//!
//! The grid-size axis `[1, W * capacity]` is cut into `W` wave regions, each
//! split into `I` contiguous sub-intervals. One representative grid size is
//! picked per sub-interval and crossed with the loop anchors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{GridShape, HardwareSpec, KernelFamily};
use crate::registry::check_version;

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Wave index, 1-based.
    pub w: u64,
    /// Sub-interval index within the wave, 1-based.
    pub i: u64,
    /// Inclusive sub-interval bounds this point was drawn from.
    pub lo: u64,
    pub hi: u64,
    pub shape: GridShape,
}

impl GridPoint {
    pub fn g(&self) -> u64 {
        self.shape.grid_size()
    }

    /// Re-checks the family invariant (factoring or head alignment).
    pub fn is_admissible(&self, tau: f64) -> bool {
        let g = self.g();
        let in_region = self.lo <= g && g <= self.hi;
        in_region
            && match self.shape {
                GridShape::Factored { m_g, n_g } => {
                    m_g >= 1 && m_g <= n_g && (n_g as f64) <= tau * m_g as f64
                }
                GridShape::Headed { g, n_heads } => n_heads >= 1 && g % n_heads == 0,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub waves: u64,
    pub intervals: u64,
    pub tau: f64,
    pub loop_anchors: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub schema_version: u32,
    pub family: KernelFamily,
    pub hardware: HardwareSpec,
    #[serde(rename = "W")]
    pub waves: u64,
    #[serde(rename = "I")]
    pub intervals: u64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<u64>,
    pub loop_anchors: Vec<u64>,
    pub grid_points: Vec<GridPoint>,
}

impl SamplingPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        const WHAT: &str = "sampling plan";
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_version(WHAT, &value, "schema_version", PLAN_VERSION)?;
        let plan: SamplingPlan = serde_json::from_value(value)?;
        plan.hardware.validate()?;
        if plan.loop_anchors.is_empty() || plan.loop_anchors.contains(&0) {
            return Err(Error::field(
                WHAT,
                "loop_anchors",
                "must be non-empty positive integers",
            ));
        }
        if !plan.loop_anchors.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::field(
                WHAT,
                "loop_anchors",
                "must be strictly ascending",
            ));
        }
        let cap = plan.hardware.wave_capacity();
        for (idx, p) in plan.grid_points.iter().enumerate() {
            let region_ok = p.w >= 1 && p.w <= plan.waves && p.g().div_ceil(cap) == p.w;
            let family_ok = matches!(
                (plan.family.is_gemm(), p.shape),
                (true, GridShape::Factored { .. }) | (false, GridShape::Headed { .. })
            );
            if !region_ok || !family_ok || !p.is_admissible(plan.tau) {
                return Err(Error::field(
                    WHAT,
                    format!("grid_points[{idx}]"),
                    "inadmissible grid point",
                ));
            }
        }
        Ok(plan)
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

/// Splits `[lo, hi]` into `parts` contiguous intervals whose widths differ
/// by at most one; the leading intervals take the extra units.
pub fn split_interval(lo: u64, hi: u64, parts: u64) -> Vec<(u64, u64)> {
    let width = hi - lo + 1;
    let (base, extra) = (width / parts, width % parts);
    let mut out = Vec::with_capacity(parts as usize);
    let mut a = lo;
    for i in 0..parts {
        let len = base + u64::from(i < extra);
        out.push((a, a + len - 1));
        a += len;
    }
    out
}

/// Squarest factoring `g = m * n` with `m <= n`, if its aspect ratio is
/// within `tau`. Any other factoring is more elongated, so only this one
/// needs checking.
pub fn squarest_factoring(g: u64, tau: f64) -> Option<(u64, u64)> {
    let mut m = g.isqrt();
    while m >= 1 {
        if g.is_multiple_of(m) {
            let n = g / m;
            return ((n as f64) <= tau * m as f64).then_some((m, n));
        }
        m -= 1;
    }
    None
}

/// Representative grid size of the interval `[a, b]`.
///
/// GEMM: the largest `g` in the interval with a factoring within `tau`.
/// Attention: `floor(b / n_heads) * n_heads`, absent when that falls below `a`.
pub fn select_grid_point(
    a: u64,
    b: u64,
    family: KernelFamily,
    tau: f64,
    n_heads: Option<u64>,
) -> Option<GridShape> {
    if a == 0 || a > b {
        return None;
    }
    if family.is_gemm() {
        (a..=b).rev().find_map(|g| {
            squarest_factoring(g, tau).map(|(m_g, n_g)| GridShape::Factored { m_g, n_g })
        })
    } else {
        let n_heads = n_heads.filter(|&h| h > 0)?;
        let g = b / n_heads * n_heads;
        (g >= a && g > 0).then_some(GridShape::Headed { g, n_heads })
    }
}

pub fn build_plan(
    hw: &HardwareSpec,
    family: KernelFamily,
    params: &PlanParams,
) -> Result<SamplingPlan> {
    hw.validate()?;
    let cap = hw.wave_capacity();
    if params.waves == 0 || params.intervals == 0 {
        return Err(Error::InvalidPlan("W and I must be >= 1".into()));
    }
    if params.intervals > cap {
        return Err(Error::InvalidPlan(format!(
            "I = {} exceeds the wave capacity {cap}",
            params.intervals
        )));
    }
    if !(params.tau > 1.0 && params.tau.is_finite()) {
        return Err(Error::InvalidPlan("tau must be a finite number > 1".into()));
    }
    if params.loop_anchors.is_empty() {
        return Err(Error::InvalidPlan("loop anchors must be non-empty".into()));
    }
    if params.loop_anchors.contains(&0) {
        return Err(Error::InvalidPlan("loop anchors must be >= 1".into()));
    }
    let n_heads = match family {
        KernelFamily::Attention => match params.n_heads {
            Some(h) if h > 0 => Some(h),
            _ => {
                return Err(Error::InvalidPlan(
                    "attention plans need n_heads >= 1".into(),
                ))
            }
        },
        _ => None,
    };
    let mut anchors = params.loop_anchors.clone();
    anchors.sort_unstable();
    anchors.dedup();

    let mut grid_points = Vec::new();
    let mut dropped = 0usize;
    for w in 1..=params.waves {
        let region = ((w - 1) * cap + 1, w * cap);
        for (idx, (lo, hi)) in split_interval(region.0, region.1, params.intervals)
            .into_iter()
            .enumerate()
        {
            match select_grid_point(lo, hi, family, params.tau, n_heads) {
                Some(shape) => grid_points.push(GridPoint {
                    w,
                    i: idx as u64 + 1,
                    lo,
                    hi,
                    shape,
                }),
                None => {
                    dropped += 1;
                    log::debug!(
                        "no admissible grid size in [{lo}, {hi}] (wave {w}); interval dropped"
                    );
                }
            }
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} sub-intervals had no admissible grid size and were dropped");
    }
    Ok(SamplingPlan {
        schema_version: PLAN_VERSION,
        family,
        hardware: hw.clone(),
        waves: params.waves,
        intervals: params.intervals,
        tau: params.tau,
        n_heads,
        loop_anchors: anchors,
        grid_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(waves: u64, intervals: u64) -> PlanParams {
        PlanParams {
            waves,
            intervals,
            tau: 1.1,
            loop_anchors: vec![16, 32, 48, 64, 80],
            n_heads: None,
        }
    }

    #[test]
    fn equal_partition_of_one_wave() {
        assert_eq!(
            split_interval(1, 132, 4),
            vec![(1, 33), (34, 66), (67, 99), (100, 132)]
        );
        assert_eq!(split_interval(1, 10, 3), vec![(1, 4), (5, 7), (8, 10)]);
    }

    /// Brute force: every factor pair of every g in the interval.
    fn brute_force_gemm(a: u64, b: u64, tau: f64) -> Option<(u64, u64, u64)> {
        let mut best = None;
        for g in a..=b {
            for m in 1..=g {
                if g.is_multiple_of(m) {
                    let n = g / m;
                    if m <= n && n as f64 <= tau * m as f64 {
                        let better = match best {
                            None => true,
                            Some((bg, bm, _)) => g > bg || (g == bg && m > bm),
                        };
                        if better {
                            best = Some((g, m, n));
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn gemm_point_in_last_quarter() {
        let got = select_grid_point(100, 132, KernelFamily::DenseGemm, 1.1, None);
        assert_eq!(got, Some(GridShape::Factored { m_g: 11, n_g: 12 }));
        assert_eq!(brute_force_gemm(100, 132, 1.1), Some((132, 11, 12)));
    }

    #[test]
    fn attention_alignment() {
        assert_eq!(
            select_grid_point(100, 131, KernelFamily::Attention, 1.1, Some(16)),
            Some(GridShape::Headed {
                g: 128,
                n_heads: 16
            })
        );
        assert_eq!(
            select_grid_point(97, 99, KernelFamily::Attention, 1.1, Some(50)),
            None
        );
    }

    #[test]
    fn full_scale_plan_has_at_most_160_points() {
        let hw = HardwareSpec::new("h100", 132);
        let plan = build_plan(&hw, KernelFamily::DenseGemm, &params(40, 4)).unwrap();
        assert!(plan.grid_points.len() <= 160);
        assert!(plan.grid_points.iter().all(|p| p.is_admissible(1.1)));
    }

    #[test]
    fn attention_plan_is_head_aligned() {
        let hw = HardwareSpec::new("h100", 132);
        let mut p = params(2, 3);
        p.n_heads = Some(16);
        let plan = build_plan(&hw, KernelFamily::Attention, &p).unwrap();
        assert!(!plan.grid_points.is_empty());
        assert!(plan.grid_points.iter().all(|gp| gp.g() % 16 == 0));
        p.n_heads = None;
        assert!(build_plan(&hw, KernelFamily::Attention, &p).is_err());
    }

    #[test]
    fn plan_errors() {
        let hw = HardwareSpec::new("h100", 132);
        let mut p = params(4, 4);
        p.loop_anchors.clear();
        assert!(build_plan(&hw, KernelFamily::DenseGemm, &p).is_err());
        let mut p = params(4, 4);
        p.tau = 1.0;
        assert!(build_plan(&hw, KernelFamily::DenseGemm, &p).is_err());
        assert!(build_plan(&hw, KernelFamily::DenseGemm, &params(0, 4)).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let hw = HardwareSpec::new("h100", 132);
        let plan = build_plan(&hw, KernelFamily::DenseGemm, &params(3, 4)).unwrap();
        let back = SamplingPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        let mut skinny = plan.clone();
        let g = skinny.grid_points[0].g();
        skinny.grid_points[0].shape = GridShape::Factored { m_g: 1, n_g: g };
        let err = SamplingPlan::from_json(&skinny.to_json().unwrap()).unwrap_err();
        assert!(err.to_string().contains("grid_points[0]"), "{err}");
    }

    proptest! {
        #[test]
        fn gemm_selection_matches_brute_force(a in 1u64..600, width in 0u64..80, tau in 1.01f64..2.0) {
            let b = a + width;
            let fast = select_grid_point(a, b, KernelFamily::DenseGemm, tau, None)
                .map(|s| match s { GridShape::Factored { m_g, n_g } => (m_g * n_g, m_g, n_g), _ => unreachable!() });
            prop_assert_eq!(fast, brute_force_gemm(a, b, tau));
        }

        #[test]
        fn regions_cover_without_overlap(n_sm in 1u64..300, waves in 1u64..12, intervals in 1u64..9) {
            prop_assume!(intervals <= n_sm);
            let cap = n_sm;
            let mut next = 1;
            for w in 1..=waves {
                let parts = split_interval((w - 1) * cap + 1, w * cap, intervals);
                prop_assert_eq!(parts.len() as u64, intervals);
                let widths: Vec<u64> = parts.iter().map(|(a, b)| b - a + 1).collect();
                prop_assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 1);
                for (a, b) in parts {
                    prop_assert_eq!(a, next);
                    next = b + 1;
                }
            }
            prop_assert_eq!(next, waves * cap + 1);
        }

        #[test]
        fn plan_points_are_admissible(n_sm in 8u64..200, waves in 1u64..6, intervals in 1u64..5,
                                      tau in 1.05f64..1.6, heads in proptest::option::of(1u64..64)) {
            prop_assume!(intervals <= n_sm);
            let hw = HardwareSpec::new("p", n_sm);
            let family = if heads.is_some() { KernelFamily::Attention } else { KernelFamily::DenseGemm };
            let p = PlanParams { waves, intervals, tau, loop_anchors: vec![4, 8], n_heads: heads };
            let plan = build_plan(&hw, family, &p).unwrap();
            prop_assert!(plan.grid_points.len() as u64 <= waves * intervals);
            for gp in &plan.grid_points {
                prop_assert!(gp.is_admissible(tau));
                prop_assert_eq!(gp.g().div_ceil(n_sm), gp.w);
            }
        }
    }
}
