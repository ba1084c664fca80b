//! Configuration registries: the macro and micro configs of one kernel
//! family plus the table of jointly feasible pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, MacroConfig, MicroConfig, Tiles};

pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigRegistry {
    family: KernelFamily,
    macros: Vec<MacroConfig>,
    micros: Vec<MicroConfig>,
    feasible: BTreeSet<(u32, u32)>,
}

impl ConfigRegistry {
    pub fn new(
        family: KernelFamily,
        macros: Vec<MacroConfig>,
        micros: Vec<MicroConfig>,
        feasible: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        if macros.is_empty() || micros.is_empty() {
            return Err(Error::InvalidConfig(
                "registry needs at least one macro and one micro".into(),
            ));
        }
        let mut macro_ids = BTreeSet::new();
        for c in &macros {
            c.validate()?;
            if !c.tiles.supports(family) {
                return Err(Error::InvalidConfig(format!(
                    "macro {} has tiles that do not fit family {family}",
                    c.id
                )));
            }
            if !macro_ids.insert(c.id) {
                return Err(Error::InvalidConfig(format!("duplicate macro id {}", c.id)));
            }
        }
        let mut micro_ids = BTreeSet::new();
        for c in &micros {
            c.validate()?;
            if !micro_ids.insert(c.id) {
                return Err(Error::InvalidConfig(format!("duplicate micro id {}", c.id)));
            }
        }
        let feasible: BTreeSet<(u32, u32)> = feasible.into_iter().collect();
        for &(ma, mi) in &feasible {
            if !macro_ids.contains(&ma) || !micro_ids.contains(&mi) {
                return Err(Error::InvalidConfig(format!(
                    "feasible pair ({ma}, {mi}) references an unknown id"
                )));
            }
        }
        for id in &macro_ids {
            if !feasible.iter().any(|&(ma, _)| ma == *id) {
                return Err(Error::InvalidConfig(format!(
                    "macro {id} has no feasible micro"
                )));
            }
        }
        Ok(ConfigRegistry {
            family,
            macros,
            micros,
            feasible,
        })
    }

    /// Registry in which every pair is feasible.
    pub fn fully_feasible(
        family: KernelFamily,
        macros: Vec<MacroConfig>,
        micros: Vec<MicroConfig>,
    ) -> Result<Self> {
        let pairs: Vec<_> = macros
            .iter()
            .flat_map(|a| micros.iter().map(move |b| (a.id, b.id)))
            .collect();
        Self::new(family, macros, micros, pairs)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn macros(&self) -> &[MacroConfig] {
        &self.macros
    }

    pub fn micros(&self) -> &[MicroConfig] {
        &self.micros
    }

    pub fn macro_config(&self, id: u32) -> Option<&MacroConfig> {
        self.macros.iter().find(|c| c.id == id)
    }

    pub fn micro_config(&self, id: u32) -> Option<&MicroConfig> {
        self.micros.iter().find(|c| c.id == id)
    }

    pub fn is_feasible(&self, macro_id: u32, micro_id: u32) -> bool {
        self.feasible.contains(&(macro_id, micro_id))
    }

    /// Feasible micro ids of one macro, ascending.
    pub fn feasible_micros(&self, macro_id: u32) -> impl Iterator<Item = u32> + '_ {
        self.feasible
            .range((macro_id, 0)..=(macro_id, u32::MAX))
            .map(|&(_, mi)| mi)
    }

    /// All feasible pairs in `(macro_id, micro_id)` lexicographic order.
    pub fn feasible_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.feasible.iter().copied()
    }

    pub fn feasible_count(&self) -> usize {
        self.feasible.len()
    }

    /// The designated default config: macro 0 (or the smallest macro id
    /// when 0 is absent) with its smallest feasible micro.
    pub fn default_pair(&self) -> (u32, u32) {
        let macro_id = if self.macro_config(0).is_some() {
            0
        } else {
            self.macros
                .iter()
                .map(|c| c.id)
                .min()
                .expect("registry is non-empty")
        };
        let micro_id = self
            .feasible_micros(macro_id)
            .next()
            .expect("every macro has a feasible micro");
        (macro_id, micro_id)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = RegistryDoc {
            version: REGISTRY_VERSION,
            family: self.family,
            macros: self.macros.iter().map(MacroEntry::from).collect(),
            micros: self.micros.iter().map(MicroEntry::from).collect(),
            feasible: self.feasible.iter().map(|&(a, b)| [a, b]).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        const WHAT: &str = "registry";
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_version(WHAT, &value, "version", REGISTRY_VERSION)?;
        let doc: RegistryDoc = serde_json::from_value(value)?;
        let macros = doc
            .macros
            .iter()
            .enumerate()
            .map(|(i, e)| e.to_config(doc.family, i))
            .collect::<Result<Vec<_>>>()?;
        let micros = doc.micros.into_iter().map(MicroConfig::from).collect();
        let feasible = doc.feasible.iter().map(|&[a, b]| (a, b));
        ConfigRegistry::new(doc.family, macros, micros, feasible)
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

pub(crate) fn check_version(
    what: &'static str,
    value: &serde_json::Value,
    key: &str,
    expected: u32,
) -> Result<()> {
    match value.get(key) {
        None => Err(Error::field(what, key, "missing")),
        Some(v) if v.as_u64() == Some(u64::from(expected)) => Ok(()),
        Some(v) => Err(Error::SchemaVersion {
            what,
            expected,
            found: v.to_string(),
        }),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryDoc {
    version: u32,
    family: KernelFamily,
    macros: Vec<MacroEntry>,
    micros: Vec<MicroEntry>,
    feasible: Vec<[u32; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MacroEntry {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_q: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_kv: Option<u64>,
}

impl MacroEntry {
    fn to_config(&self, family: KernelFamily, index: usize) -> Result<MacroConfig> {
        let need = |name: &str, v: Option<u64>| {
            v.ok_or_else(|| Error::field("registry", format!("macros[{index}].{name}"), "missing"))
        };
        let tiles = if family.is_gemm() {
            Tiles::Gemm {
                t_m: need("t_m", self.t_m)?,
                t_n: need("t_n", self.t_n)?,
                t_k: need("t_k", self.t_k)?,
            }
        } else {
            Tiles::Attention {
                t_q: need("t_q", self.t_q)?,
                t_kv: need("t_kv", self.t_kv)?,
            }
        };
        Ok(MacroConfig { id: self.id, tiles })
    }
}

impl From<&MacroConfig> for MacroEntry {
    fn from(c: &MacroConfig) -> Self {
        let mut e = MacroEntry {
            id: c.id,
            t_m: None,
            t_n: None,
            t_k: None,
            t_q: None,
            t_kv: None,
        };
        match c.tiles {
            Tiles::Gemm { t_m, t_n, t_k } => {
                e.t_m = Some(t_m);
                e.t_n = Some(t_n);
                e.t_k = Some(t_k);
            }
            Tiles::Attention { t_q, t_kv } => {
                e.t_q = Some(t_q);
                e.t_kv = Some(t_kv);
            }
        }
        e
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MicroEntry {
    id: u32,
    n_stages: u32,
    n_warps: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, u32>,
}

impl From<&MicroConfig> for MicroEntry {
    fn from(c: &MicroConfig) -> Self {
        MicroEntry {
            id: c.id,
            n_stages: c.n_stages,
            n_warps: c.n_warps,
            extra: c.extra.iter().cloned().collect(),
        }
    }
}

impl From<MicroEntry> for MicroConfig {
    fn from(e: MicroEntry) -> Self {
        MicroConfig {
            id: e.id,
            n_stages: e.n_stages,
            n_warps: e.n_warps,
            extra: e.extra.into_iter().collect(),
        }
    }
}
