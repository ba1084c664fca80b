//! Kernel families, tile configurations and the projection of logical
//! workloads onto physical `(G, L)` coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[serde(alias = "gemm")]
    DenseGemm,
    #[serde(alias = "grouped", alias = "moe")]
    GroupedGemm,
    #[serde(alias = "flash_attention")]
    Attention,
}

impl KernelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::DenseGemm => "dense_gemm",
            KernelFamily::GroupedGemm => "grouped_gemm",
            KernelFamily::Attention => "attention",
        }
    }

    /// GEMM-like families sample factored 2D grids; attention samples
    /// head-aligned grids.
    pub fn is_gemm(self) -> bool {
        matches!(self, KernelFamily::DenseGemm | KernelFamily::GroupedGemm)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_gemm" | "gemm" => Ok(KernelFamily::DenseGemm),
            "grouped_gemm" | "grouped" | "moe" => Ok(KernelFamily::GroupedGemm),
            "attention" | "flash_attention" => Ok(KernelFamily::Attention),
            other => Err(Error::InvalidWorkload(format!(
                "unknown kernel family `{other}`"
            ))),
        }
    }
}

/// A logical kernel input shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelWorkload {
    DenseGemm {
        m: u64,
        n: u64,
        k: u64,
    },
    /// `group_rows[i]` is the number of tokens routed to expert `i`.
    GroupedGemm {
        group_rows: Vec<u64>,
        n: u64,
        k: u64,
    },
    Attention {
        n_heads: u64,
        s_q: u64,
        s_kv: u64,
    },
}

impl KernelWorkload {
    pub fn family(&self) -> KernelFamily {
        match self {
            KernelWorkload::DenseGemm { .. } => KernelFamily::DenseGemm,
            KernelWorkload::GroupedGemm { .. } => KernelFamily::GroupedGemm,
            KernelWorkload::Attention { .. } => KernelFamily::Attention,
        }
    }

    /// Uniform-routing approximation: `total_tokens` split evenly across
    /// `experts`, the remainder going to the lowest-indexed experts.
    pub fn grouped_uniform(total_tokens: u64, experts: u64, n: u64, k: u64) -> Result<Self> {
        if experts == 0 {
            return Err(Error::InvalidWorkload("expert count must be >= 1".into()));
        }
        let share = total_tokens / experts;
        let extra = total_tokens % experts;
        let group_rows = (0..experts).map(|i| share + u64::from(i < extra)).collect();
        let x = KernelWorkload::GroupedGemm { group_rows, n, k };
        x.validate()?;
        Ok(x)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: u64| {
            if v == 0 {
                Err(Error::InvalidWorkload(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self {
            KernelWorkload::DenseGemm { m, n, k } => {
                positive("m", *m)?;
                positive("n", *n)?;
                positive("k", *k)
            }
            KernelWorkload::GroupedGemm { group_rows, n, k } => {
                positive("n", *n)?;
                positive("k", *k)?;
                if group_rows.iter().all(|&r| r == 0) {
                    return Err(Error::InvalidWorkload(
                        "grouped gemm needs at least one non-empty group".into(),
                    ));
                }
                Ok(())
            }
            KernelWorkload::Attention { n_heads, s_q, s_kv } => {
                positive("n_heads", *n_heads)?;
                positive("s_q", *s_q)?;
                positive("s_kv", *s_kv)
            }
        }
    }
}

/// Line format used by workload batch files:
///
/// ```text
/// dense_gemm <m> <n> <k>
/// grouped_gemm <m_0>,<m_1>,... <n> <k>
/// attention <n_heads> <s_q> <s_kv>
/// ```
impl fmt::Display for KernelWorkload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelWorkload::DenseGemm { m, n, k } => write!(f, "dense_gemm {m} {n} {k}"),
            KernelWorkload::GroupedGemm { group_rows, n, k } => {
                f.write_str("grouped_gemm ")?;
                for (i, r) in group_rows.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{r}")?;
                }
                write!(f, " {n} {k}")
            }
            KernelWorkload::Attention { n_heads, s_q, s_kv } => {
                write!(f, "attention {n_heads} {s_q} {s_kv}")
            }
        }
    }
}

impl FromStr for KernelWorkload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::InvalidWorkload(reason);
        let fields: Vec<&str> = s.split_whitespace().collect();
        let [family, a, b, c] = fields.as_slice() else {
            return Err(bad(format!(
                "expected `<family> <a> <b> <c>`, got {} fields",
                fields.len()
            )));
        };
        let num = |name: &str, v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|e| bad(format!("{name} `{v}`: {e}")))
        };
        let x = match family.parse::<KernelFamily>()? {
            KernelFamily::DenseGemm => KernelWorkload::DenseGemm {
                m: num("m", a)?,
                n: num("n", b)?,
                k: num("k", c)?,
            },
            KernelFamily::GroupedGemm => KernelWorkload::GroupedGemm {
                group_rows: a
                    .split(',')
                    .map(|r| num("group rows", r))
                    .collect::<Result<_>>()?,
                n: num("n", b)?,
                k: num("k", c)?,
            },
            KernelFamily::Attention => KernelWorkload::Attention {
                n_heads: num("n_heads", a)?,
                s_q: num("s_q", b)?,
                s_kv: num("s_kv", c)?,
            },
        };
        x.validate()?;
        Ok(x)
    }
}

/// Parses a workload batch: one workload per line, blank lines and `#`
/// comments ignored.
pub fn parse_workloads(text: &str) -> Result<Vec<KernelWorkload>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let x = line.parse().map_err(|e: Error| Error::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tiles {
    Gemm { t_m: u64, t_n: u64, t_k: u64 },
    Attention { t_q: u64, t_kv: u64 },
}

impl Tiles {
    fn label(&self) -> &'static str {
        match self {
            Tiles::Gemm { .. } => "gemm tiles",
            Tiles::Attention { .. } => "attention tiles",
        }
    }

    pub fn supports(&self, family: KernelFamily) -> bool {
        match self {
            Tiles::Gemm { .. } => family.is_gemm(),
            Tiles::Attention { .. } => family == KernelFamily::Attention,
        }
    }
}

/// Tiling parameters that fix the workload partitioning, and hence `(G, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacroConfig {
    pub id: u32,
    #[serde(flatten)]
    pub tiles: Tiles,
}

impl MacroConfig {
    pub fn gemm(id: u32, t_m: u64, t_n: u64, t_k: u64) -> Self {
        MacroConfig {
            id,
            tiles: Tiles::Gemm { t_m, t_n, t_k },
        }
    }

    pub fn attention(id: u32, t_q: u64, t_kv: u64) -> Self {
        MacroConfig {
            id,
            tiles: Tiles::Attention { t_q, t_kv },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.tiles {
            Tiles::Gemm { t_m, t_n, t_k } => t_m > 0 && t_n > 0 && t_k > 0,
            Tiles::Attention { t_q, t_kv } => t_q > 0 && t_kv > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "macro {}: tile dims must be >= 1",
                self.id
            )))
        }
    }
}

/// Intra-tile execution parameters. They change per-block efficiency but
/// never `(G, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MicroConfig {
    pub id: u32,
    pub n_stages: u32,
    pub n_warps: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<(String, u32)>,
}

impl MicroConfig {
    pub fn new(id: u32, n_stages: u32, n_warps: u32) -> Self {
        MicroConfig {
            id,
            n_stages,
            n_warps,
            extra: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 || self.n_warps == 0 {
            return Err(Error::InvalidConfig(format!(
                "micro {}: n_stages and n_warps must be >= 1",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    pub n_sm: u64,
    #[serde(default = "one")]
    pub blocks_per_sm: u64,
}

fn one() -> u64 {
    1
}

impl HardwareSpec {
    pub fn new(name: impl Into<String>, n_sm: u64) -> Self {
        HardwareSpec {
            name: name.into(),
            n_sm,
            blocks_per_sm: 1,
        }
    }

    pub fn with_blocks_per_sm(mut self, blocks_per_sm: u64) -> Self {
        self.blocks_per_sm = blocks_per_sm;
        self
    }

    /// Blocks resident at once; the width of one wave.
    pub fn wave_capacity(&self) -> u64 {
        self.n_sm * self.blocks_per_sm
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sm == 0 || self.blocks_per_sm == 0 {
            return Err(Error::InvalidHardware(
                "n_sm and blocks_per_sm must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhysicalCoords {
    pub g: u64,
    pub l: u64,
    pub w: u64,
}

/// Number of waves needed to run `g` blocks.
pub fn wave_count(g: u64, hw: &HardwareSpec) -> u64 {
    g.div_ceil(hw.wave_capacity())
}

/// Projects a workload onto `(G, L)` under a macro config.
pub fn map_workload(x: &KernelWorkload, c: &MacroConfig) -> Result<(u64, u64)> {
    let mismatch = || Error::FamilyMismatch {
        workload: x.family(),
        config: c.tiles.label(),
    };
    let (g, l) = match (x, c.tiles) {
        (KernelWorkload::DenseGemm { m, n, k }, Tiles::Gemm { t_m, t_n, t_k }) => {
            (m.div_ceil(t_m) * n.div_ceil(t_n), k.div_ceil(t_k))
        }
        (KernelWorkload::GroupedGemm { group_rows, n, k }, Tiles::Gemm { t_m, t_n, t_k }) => {
            let cols = n.div_ceil(t_n);
            let g = group_rows.iter().map(|r| r.div_ceil(t_m) * cols).sum();
            (g, k.div_ceil(t_k))
        }
        (KernelWorkload::Attention { n_heads, s_q, s_kv }, Tiles::Attention { t_q, t_kv }) => {
            (n_heads * s_q.div_ceil(t_q), s_kv.div_ceil(t_kv))
        }
        _ => return Err(mismatch()),
    };
    if g == 0 {
        return Err(Error::EmptyGrid);
    }
    if l == 0 {
        return Err(Error::InvalidWorkload(
            "reduction length must be >= 1".into(),
        ));
    }
    Ok((g, l))
}

pub fn physical_coords(
    x: &KernelWorkload,
    c: &MacroConfig,
    hw: &HardwareSpec,
) -> Result<PhysicalCoords> {
    let (g, l) = map_workload(x, c)?;
    Ok(PhysicalCoords {
        g,
        l,
        w: wave_count(g, hw),
    })
}

/// A sampled grid, in the form needed to rebuild a workload from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridShape {
    /// 2D block grid `m_g x n_g` of a GEMM.
    Factored { m_g: u64, n_g: u64 },
    /// Attention grid of `g` blocks spread over `n_heads` heads.
    Headed { g: u64, n_heads: u64 },
}

impl GridShape {
    pub fn grid_size(&self) -> u64 {
        match *self {
            GridShape::Factored { m_g, n_g } => m_g * n_g,
            GridShape::Headed { g, .. } => g,
        }
    }
}

/// Builds a concrete workload whose projection under `c` is exactly
/// `(shape.grid_size(), l)`. Grouped GEMM is instantiated as a single group.
pub fn instantiate_workload(
    family: KernelFamily,
    shape: &GridShape,
    l: u64,
    c: &MacroConfig,
) -> Result<KernelWorkload> {
    if !c.tiles.supports(family) {
        return Err(Error::FamilyMismatch {
            workload: family,
            config: c.tiles.label(),
        });
    }
    if l == 0 {
        return Err(Error::InvalidWorkload("loop count must be >= 1".into()));
    }
    let x = match (*shape, c.tiles) {
        (GridShape::Factored { m_g, n_g }, Tiles::Gemm { t_m, t_n, t_k }) => {
            let (m, n, k) = (m_g * t_m, n_g * t_n, l * t_k);
            if family == KernelFamily::GroupedGemm {
                KernelWorkload::GroupedGemm {
                    group_rows: vec![m],
                    n,
                    k,
                }
            } else {
                KernelWorkload::DenseGemm { m, n, k }
            }
        }
        (GridShape::Headed { g, n_heads }, Tiles::Attention { t_q, t_kv }) => {
            if n_heads == 0 || g % n_heads != 0 {
                return Err(Error::HeadMisaligned { g, n_heads });
            }
            KernelWorkload::Attention {
                n_heads,
                s_q: g / n_heads * t_q,
                s_kv: l * t_kv,
            }
        }
        _ => {
            return Err(Error::InvalidWorkload(format!(
                "grid shape {shape:?} does not fit {family} tiles"
            )))
        }
    };
    x.validate()?;
    Ok(x)
}
