//! Machine descriptions: data-cache hierarchy and SIMD register file.
//!
//! Descriptions are JSON documents shipped under `machines/`:
//!
//! ```json
//! {
//!   "name": "carmel",
//!   "registers": { "simd_bits": 128, "count": 32, "element_bits": 64 },
//!   "caches": [
//!     { "level": 1, "size_kib": 64, "assoc": 4, "line_bytes": 64, "shared_by_cores": 1 }
//!   ],
//!   "static_ccps": { "mc": 120, "nc": 3072, "kc": 240 },
//!   "kernels": ["12x4", "6x8"]
//! }
//! ```
//!
//! `static_ccps` (the fixed blocking of the vendor library) and `kernels`
//! (ranked micro-kernel preference) are optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccp::StaticProfile;
use crate::microkernel::MicroKernelShape;

#[derive(Debug, Error)]
pub enum DescError {
    #[error("malformed machine description: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("invalid machine description at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
    #[error("cannot read machine description {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> DescError {
    DescError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLevel {
    pub level: u8,
    pub size_bytes: usize,
    pub associativity: usize,
    pub line_bytes: usize,
    pub shared_by_cores: usize,
}

impl CacheLevel {
    /// Bytes held by one way across all sets.
    pub fn way_capacity(&self) -> usize {
        self.size_bytes / self.associativity
    }

    pub fn sets(&self) -> usize {
        self.way_capacity() / self.line_bytes
    }

    fn validate(&self, path: &str) -> Result<(), DescError> {
        if self.associativity == 0 {
            return Err(invalid(
                format!("{path}.assoc"),
                "associativity must be at least 1",
            ));
        }
        if self.line_bytes == 0 {
            return Err(invalid(
                format!("{path}.line_bytes"),
                "line size must be positive",
            ));
        }
        if self.shared_by_cores == 0 {
            return Err(invalid(
                format!("{path}.shared_by_cores"),
                "must be at least 1",
            ));
        }
        let way_line = self.associativity * self.line_bytes;
        if self.size_bytes == 0 || !self.size_bytes.is_multiple_of(way_line) {
            return Err(invalid(
                format!("{path}.size_kib"),
                format!(
                    "size {} bytes is not a positive multiple of assoc x line = {way_line}",
                    self.size_bytes
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterFile {
    pub simd_bits: usize,
    pub register_count: usize,
    pub element_bits: usize,
}

impl RegisterFile {
    /// Elements per vector register.
    pub fn lanes(&self) -> usize {
        self.simd_bits / self.element_bits
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHierarchy {
    pub name: String,
    pub levels: Vec<CacheLevel>,
    pub registers: RegisterFile,
}

impl CacheHierarchy {
    pub fn new(
        name: impl Into<String>,
        levels: Vec<CacheLevel>,
        registers: RegisterFile,
    ) -> Result<Self, DescError> {
        let h = Self {
            name: name.into(),
            levels,
            registers,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn level(&self, ordinal: u8) -> Option<&CacheLevel> {
        self.levels.iter().find(|l| l.level == ordinal)
    }

    pub fn l1(&self) -> &CacheLevel {
        &self.levels[0]
    }

    fn validate(&self) -> Result<(), DescError> {
        let r = &self.registers;
        if r.element_bits == 0 || r.simd_bits == 0 || !r.simd_bits.is_multiple_of(r.element_bits) {
            return Err(invalid(
                "registers.simd_bits",
                format!(
                    "{} is not a positive multiple of element_bits {}",
                    r.simd_bits, r.element_bits
                ),
            ));
        }
        if r.register_count == 0 {
            return Err(invalid("registers.count", "must be at least 1"));
        }
        if self.levels.is_empty() {
            return Err(invalid("caches", "at least one cache level is required"));
        }
        if self.levels[0].level != 1 {
            return Err(invalid(
                "caches[0].level",
                "the first entry must be the L1 data cache",
            ));
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            let path = format!("caches[{i}]");
            if !(1..=3).contains(&lvl.level) {
                return Err(invalid(
                    format!("{path}.level"),
                    format!("level {} outside 1..3", lvl.level),
                ));
            }
            lvl.validate(&path)?;
            if i > 0 {
                let prev = &self.levels[i - 1];
                if lvl.level <= prev.level {
                    return Err(invalid(
                        format!("{path}.level"),
                        "levels must be strictly increasing",
                    ));
                }
                if lvl.size_bytes < prev.size_bytes {
                    return Err(invalid(
                        format!("{path}.size_kib"),
                        "sizes must be non-decreasing",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A parsed description file: the hierarchy plus optional library data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineDesc {
    pub hierarchy: CacheHierarchy,
    pub static_profile: Option<StaticProfile>,
    pub kernel_preference: Vec<MicroKernelShape>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegisters {
    simd_bits: usize,
    count: usize,
    element_bits: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCache {
    level: u8,
    size_kib: usize,
    assoc: usize,
    line_bytes: usize,
    shared_by_cores: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStatic {
    mc: usize,
    nc: usize,
    kc: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesc {
    name: String,
    registers: RawRegisters,
    caches: Vec<RawCache>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    static_ccps: Option<RawStatic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    kernels: Vec<String>,
    /// Free-form provenance notes; ignored by the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

/// Parses and validates a machine-description document.
pub fn parse_machine_desc(text: &str) -> Result<MachineDesc, DescError> {
    let raw: RawDesc = serde_json::from_str(text)?;
    let levels = raw
        .caches
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let size_bytes = c
                .size_kib
                .checked_mul(1024)
                .ok_or_else(|| invalid(format!("caches[{i}].size_kib"), "size overflows"))?;
            Ok(CacheLevel {
                level: c.level,
                size_bytes,
                associativity: c.assoc,
                line_bytes: c.line_bytes,
                shared_by_cores: c.shared_by_cores,
            })
        })
        .collect::<Result<Vec<_>, DescError>>()?;
    let registers = RegisterFile {
        simd_bits: raw.registers.simd_bits,
        register_count: raw.registers.count,
        element_bits: raw.registers.element_bits,
    };
    let hierarchy = CacheHierarchy::new(raw.name.clone(), levels, registers)?;
    let static_profile = raw
        .static_ccps
        .map(|s| StaticProfile::new(raw.name.clone(), s.mc, s.nc, s.kc))
        .transpose()
        .map_err(|e| invalid("static_ccps", e.to_string()))?;
    let kernel_preference = raw
        .kernels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse().map_err(|e: crate::microkernel::ShapeParseError| {
                invalid(format!("kernels[{i}]"), e.to_string())
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MachineDesc {
        hierarchy,
        static_profile,
        kernel_preference,
    })
}

impl MachineDesc {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DescError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DescError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_machine_desc(&text)
    }

    /// One of the descriptions shipped with the crate, by name.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "carmel" => CARMEL_JSON,
            "epyc7282" => EPYC7282_JSON,
            _ => return None,
        };
        Some(parse_machine_desc(text).expect("shipped machine description is valid"))
    }

    pub fn name(&self) -> &str {
        &self.hierarchy.name
    }

    /// Serializes back to the description schema. Sizes are emitted in KiB, so
    /// only hierarchies with KiB-multiple caches round-trip.
    pub fn to_json(&self) -> String {
        let h = &self.hierarchy;
        let raw = RawDesc {
            name: h.name.clone(),
            registers: RawRegisters {
                simd_bits: h.registers.simd_bits,
                count: h.registers.register_count,
                element_bits: h.registers.element_bits,
            },
            caches: h
                .levels
                .iter()
                .map(|l| RawCache {
                    level: l.level,
                    size_kib: l.size_bytes / 1024,
                    assoc: l.associativity,
                    line_bytes: l.line_bytes,
                    shared_by_cores: l.shared_by_cores,
                })
                .collect(),
            static_ccps: self.static_profile.as_ref().map(|p| RawStatic {
                mc: p.mc0,
                nc: p.nc0,
                kc: p.kc0,
            }),
            kernels: self
                .kernel_preference
                .iter()
                .map(|s| s.to_string())
                .collect(),
            notes: Vec::new(),
        };
        serde_json::to_string_pretty(&raw).expect("description serializes")
    }
}

pub const CARMEL_JSON: &str = include_str!("../machines/carmel.json");
pub const EPYC7282_JSON: &str = include_str!("../machines/epyc7282.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carmel_has_three_levels() {
        let m = MachineDesc::builtin("carmel").unwrap();
        let h = &m.hierarchy;
        assert_eq!(h.levels.len(), 3);
        assert_eq!(h.l1().size_bytes, 64 * 1024);
        assert_eq!(h.l1().associativity, 4);
        assert_eq!(h.level(2).unwrap().size_bytes, 2 * 1024 * 1024);
        assert_eq!(h.level(2).unwrap().associativity, 16);
        assert_eq!(h.level(3).unwrap().size_bytes, 4 * 1024 * 1024);
        assert_eq!(h.registers.register_count, 32);
        assert_eq!(h.registers.lanes(), 2);
    }

    #[test]
    fn epyc_has_three_levels() {
        let m = MachineDesc::builtin("epyc7282").unwrap();
        let h = &m.hierarchy;
        assert_eq!(h.levels.len(), 3);
        assert_eq!(h.l1().size_bytes, 32 * 1024);
        assert_eq!(h.level(2).unwrap().size_bytes, 512 * 1024);
        assert_eq!(h.level(2).unwrap().associativity, 8);
        assert_eq!(h.level(3).unwrap().shared_by_cores, 4);
    }

    #[test]
    fn minimal_single_level() {
        let text = r#"{"name":"tiny","registers":{"simd_bits":64,"count":1,"element_bits":64},
            "caches":[{"level":1,"size_kib":64,"assoc":1,"line_bytes":64,"shared_by_cores":1}]}"#;
        let m = parse_machine_desc(text).unwrap();
        assert_eq!(m.hierarchy.levels.len(), 1);
        assert!(m.static_profile.is_none());
    }

    #[test]
    fn way_capacities() {
        let m = MachineDesc::builtin("carmel").unwrap();
        assert_eq!(m.hierarchy.l1().way_capacity(), 16384);
        assert_eq!(m.hierarchy.level(2).unwrap().way_capacity(), 131072);
        let direct = CacheLevel {
            level: 1,
            size_bytes: 4096,
            associativity: 1,
            line_bytes: 64,
            shared_by_cores: 1,
        };
        assert_eq!(direct.way_capacity(), 4096);
    }

    #[test]
    fn indivisible_size_reports_field_path() {
        let text = r#"{"name":"bad","registers":{"simd_bits":128,"count":32,"element_bits":64},
            "caches":[{"level":1,"size_kib":1,"assoc":3,"line_bytes":64,"shared_by_cores":1}]}"#;
        match parse_machine_desc(text) {
            Err(DescError::Invalid { path, .. }) => assert_eq!(path, "caches[0].size_kib"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_invalid_documents() {
        assert!(matches!(
            parse_machine_desc("{"),
            Err(DescError::Malformed(_))
        ));
        let no_levels = r#"{"name":"x","registers":{"simd_bits":128,"count":32,"element_bits":64},"caches":[]}"#;
        assert!(matches!(
            parse_machine_desc(no_levels),
            Err(DescError::Invalid { .. })
        ));
        let bad_regs = r#"{"name":"x","registers":{"simd_bits":100,"count":32,"element_bits":64},
            "caches":[{"level":1,"size_kib":64,"assoc":4,"line_bytes":64,"shared_by_cores":1}]}"#;
        match parse_machine_desc(bad_regs) {
            Err(DescError::Invalid { path, .. }) => assert_eq!(path, "registers.simd_bits"),
            other => panic!("unexpected {other:?}"),
        }
        let shrinking = r#"{"name":"x","registers":{"simd_bits":128,"count":32,"element_bits":64},
            "caches":[{"level":1,"size_kib":64,"assoc":4,"line_bytes":64,"shared_by_cores":1},
                      {"level":2,"size_kib":32,"assoc":4,"line_bytes":64,"shared_by_cores":1}]}"#;
        assert!(matches!(
            parse_machine_desc(shrinking),
            Err(DescError::Invalid { .. })
        ));
        let repeated = r#"{"name":"x","registers":{"simd_bits":128,"count":32,"element_bits":64},
            "caches":[{"level":1,"size_kib":64,"assoc":4,"line_bytes":64,"shared_by_cores":1},
                      {"level":1,"size_kib":64,"assoc":4,"line_bytes":64,"shared_by_cores":1}]}"#;
        assert!(matches!(
            parse_machine_desc(repeated),
            Err(DescError::Invalid { .. })
        ));
    }

    #[test]
    fn shipped_files_round_trip() {
        for name in ["carmel", "epyc7282"] {
            let m = MachineDesc::builtin(name).unwrap();
            assert_eq!(parse_machine_desc(&m.to_json()).unwrap(), m);
        }
    }
}
