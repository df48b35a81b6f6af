//! Cache configuration parameters (CCPs): the `(m_c, n_c, k_c)` strides of
//! the three outer GEMM loops.
//!
//! The analytical model budgets whole cache *ways*. In every set of a
//! `W`-way cache one line is kept for the streaming `C` micro-tile and the
//! remaining `W - 1` lines are split between the two operands:
//!
//! * L1 holds the `k_c x n_r` micro-panel `B_r` and a column stream of
//!   `A_r`; the split is proportional to `m_r : n_r`, and `k_c` is the
//!   longest `A_r` micro-panel that fits the ways given to `A`.
//! * L2 holds the packed `m_c x k_c` block `A_c`; the split is proportional
//!   to `k_c : n_r`, and `m_c` fills the ways given to `A`.
//! * L3 holds the packed `k_c x n_c` block `B_c` in whatever ways `A_c`
//!   leaves free.
//!
//! The *refined* model feeds the actual `k_c = min(k, k_c^m)` (and then the
//! actual `m_c`) into the next level; the *original* model derives every
//! level from the unclamped optimum and clamps at the end. Static profiles
//! reproduce a library's fixed blocking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::hwdesc::{CacheHierarchy, CacheLevel};
use crate::microkernel::{MicroKernelEntry, MicroKernelShape};
use crate::ELEM_BYTES;

/// `m_c` is rounded down to a multiple of this many elements.
pub const MC_GRANULE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Static,
    OriginalModel,
    RefinedModel,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Static => "static",
            Provenance::OriginalModel => "original",
            Provenance::RefinedModel => "refined",
        })
    }
}

/// Ways assigned to each operand by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WayAllocation {
    pub l1_ways_for_a: usize,
    pub l1_ways_for_b: usize,
    pub l2_ways_for_a: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcpTriple {
    pub mc: usize,
    pub nc: usize,
    pub kc: usize,
    pub provenance: Provenance,
    /// `None` for static CCPs, which carry no way budget.
    pub ways: Option<WayAllocation>,
}

impl CcpTriple {
    /// Hand-picked blocking, treated like a static profile.
    pub fn fixed(mc: usize, nc: usize, kc: usize) -> Self {
        assert!(mc >= 1 && nc >= 1 && kc >= 1, "CCPs must be positive");
        Self {
            mc,
            nc,
            kc,
            provenance: Provenance::Static,
            ways: None,
        }
    }

    fn clamp_to(mut self, m: usize, n: usize, k: usize) -> Self {
        self.mc = self.mc.min(m);
        self.nc = self.nc.min(n);
        self.kc = self.kc.min(k);
        self
    }
}

impl fmt::Display for CcpTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}) [{}]",
            self.mc, self.nc, self.kc, self.provenance
        )
    }
}

/// A library's fixed `(m_c, n_c, k_c)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticProfile {
    pub name: String,
    pub mc0: usize,
    pub nc0: usize,
    pub kc0: usize,
}

impl StaticProfile {
    pub fn new(
        name: impl Into<String>,
        mc0: usize,
        nc0: usize,
        kc0: usize,
    ) -> Result<Self, CcpError> {
        if mc0 == 0 || nc0 == 0 || kc0 == 0 {
            return Err(CcpError::ZeroDimension);
        }
        Ok(Self {
            name: name.into(),
            mc0,
            nc0,
            kc0,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CcpError {
    #[error("cache level L{0} is required by the model but absent")]
    MissingLevel(u8),
    #[error("L{level} has {ways} ways; the model needs at least 3 (one each for C, A and B)")]
    TooFewWays { level: u8, ways: usize },
    #[error("one L1 way cannot hold a single {mr}-element column of A_r")]
    KcZero { mr: usize },
    #[error("model m_c = {mc} is smaller than m_r = {mr}")]
    McBelowMr { mc: usize, mr: usize },
    #[error("CCPs and problem dimensions must be positive")]
    ZeroDimension,
    #[error("no candidate micro-kernel fits the register file")]
    NoViableKernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KcDerivation {
    pub kc: usize,
    pub l1_ways_for_a: usize,
    pub l1_ways_for_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McDerivation {
    pub mc: usize,
    pub l2_ways_for_a: usize,
}

/// The analytical model bound to one cache hierarchy.
#[derive(Debug, Clone, Copy)]
pub struct CcpModel<'h> {
    hier: &'h CacheHierarchy,
    elem_bytes: usize,
}

fn require(hier: &CacheHierarchy, ordinal: u8) -> Result<&CacheLevel, CcpError> {
    let lvl = hier.level(ordinal).ok_or(CcpError::MissingLevel(ordinal))?;
    if lvl.associativity < 3 {
        return Err(CcpError::TooFewWays {
            level: ordinal,
            ways: lvl.associativity,
        });
    }
    Ok(lvl)
}

impl<'h> CcpModel<'h> {
    pub fn new(hier: &'h CacheHierarchy) -> Self {
        Self {
            hier,
            elem_bytes: ELEM_BYTES,
        }
    }

    pub fn with_elem_bytes(mut self, elem_bytes: usize) -> Self {
        assert!(elem_bytes > 0);
        self.elem_bytes = elem_bytes;
        self
    }

    pub fn hierarchy(&self) -> &'h CacheHierarchy {
        self.hier
    }

    /// `k_c^m` and the L1 way split between `A` and `B`.
    pub fn derive_kc(&self, mk: MicroKernelShape) -> Result<KcDerivation, CcpError> {
        let l1 = require(self.hier, 1)?;
        let free = l1.associativity - 1;
        let ways_a = (free * mk.mr / (mk.mr + mk.nr)).max(1);
        let ways_b = free - ways_a;
        let kc = ways_a * l1.way_capacity() / (mk.mr * self.elem_bytes);
        if kc == 0 {
            return Err(CcpError::KcZero { mr: mk.mr });
        }
        Ok(KcDerivation {
            kc,
            l1_ways_for_a: ways_a,
            l1_ways_for_b: ways_b,
        })
    }

    /// `m_c^m` for a given `k_c`, and the L2 ways given to `A_c`.
    pub fn derive_mc(&self, mk: MicroKernelShape, kc: usize) -> Result<McDerivation, CcpError> {
        if kc == 0 {
            return Err(CcpError::ZeroDimension);
        }
        let l2 = require(self.hier, 2)?;
        let free = l2.associativity - 1;
        let ways_a = (free * kc / (kc + mk.nr)).max(1);
        let raw = ways_a * l2.way_capacity() / (kc * self.elem_bytes);
        let mc = raw / MC_GRANULE * MC_GRANULE;
        if mc < mk.mr {
            return Err(CcpError::McBelowMr { mc, mr: mk.mr });
        }
        Ok(McDerivation {
            mc,
            l2_ways_for_a: ways_a,
        })
    }

    /// `n_c^m` from the L3 ways left over by `A_c`; `None` without an L3.
    pub fn derive_nc(&self, mk: MicroKernelShape, kc: usize, mc: usize) -> Option<usize> {
        let l3 = self.hier.level(3)?;
        let way = l3.way_capacity();
        let ways_a = (mc * kc * self.elem_bytes).div_ceil(way);
        let ways_b = l3.associativity.saturating_sub(1 + ways_a).max(1);
        let raw = ways_b * way / (kc.max(1) * self.elem_bytes);
        Some((raw / mk.nr * mk.nr).max(mk.nr))
    }

    /// Dimension-aware CCPs for an `m x n x k` product.
    pub fn refined(
        &self,
        mk: MicroKernelShape,
        m: usize,
        n: usize,
        k: usize,
    ) -> Result<CcpTriple, CcpError> {
        if m == 0 || n == 0 || k == 0 {
            return Err(CcpError::ZeroDimension);
        }
        let kd = self.derive_kc(mk)?;
        let kc = k.min(kd.kc);
        let md = self.derive_mc(mk, kc)?;
        let mc = m.min(md.mc);
        let nc = n.min(self.derive_nc(mk, kc, mc).unwrap_or(n));
        Ok(CcpTriple {
            mc,
            nc,
            kc,
            provenance: Provenance::RefinedModel,
            ways: Some(WayAllocation {
                l1_ways_for_a: kd.l1_ways_for_a,
                l1_ways_for_b: kd.l1_ways_for_b,
                l2_ways_for_a: md.l2_ways_for_a,
            }),
        })
    }

    /// Dimension-oblivious CCPs, clamped to the problem only at the end.
    pub fn original(
        &self,
        mk: MicroKernelShape,
        m: usize,
        n: usize,
        k: usize,
    ) -> Result<CcpTriple, CcpError> {
        if m == 0 || n == 0 || k == 0 {
            return Err(CcpError::ZeroDimension);
        }
        let kd = self.derive_kc(mk)?;
        let md = self.derive_mc(mk, kd.kc)?;
        let nc = self.derive_nc(mk, kd.kc, md.mc).unwrap_or(n);
        let t = CcpTriple {
            mc: md.mc,
            nc,
            kc: kd.kc,
            provenance: Provenance::OriginalModel,
            ways: Some(WayAllocation {
                l1_ways_for_a: kd.l1_ways_for_a,
                l1_ways_for_b: kd.l1_ways_for_b,
                l2_ways_for_a: md.l2_ways_for_a,
            }),
        };
        Ok(t.clamp_to(m, n, k))
    }

    /// Theoretical footprint of `B_r` in L1 and `A_c` in L2.
    pub fn occupancy(
        &self,
        mk: MicroKernelShape,
        ccps: &CcpTriple,
    ) -> Result<OccupancyReport, CcpError> {
        let l1 = self.hier.level(1).ok_or(CcpError::MissingLevel(1))?;
        let l2 = self.hier.level(2).ok_or(CcpError::MissingLevel(2))?;
        let (br_max, ac_max) = match (ccps.provenance, ccps.ways) {
            (Provenance::Static, _) | (_, None) => (None, None),
            (_, Some(w)) => (
                Some(Share::new(w.l1_ways_for_b, l1.associativity)),
                Some(Share::new(w.l2_ways_for_a, l2.associativity)),
            ),
        };
        Ok(OccupancyReport {
            br: Share::new(ccps.kc * mk.nr * self.elem_bytes, l1.size_bytes),
            br_max,
            ac: Share::new(ccps.mc * ccps.kc * self.elem_bytes, l2.size_bytes),
            ac_max,
        })
    }

    /// CCPs for `policy`. Static policy needs a profile.
    pub fn plan(
        &self,
        policy: &CcpPolicy,
        mk: MicroKernelShape,
        m: usize,
        n: usize,
        k: usize,
    ) -> Result<CcpTriple, CcpError> {
        match policy {
            CcpPolicy::Static(p) => static_ccps(p, m, n, k),
            CcpPolicy::Original => self.original(mk, m, n, k),
            CcpPolicy::Refined => self.refined(mk, m, n, k),
        }
    }
}

/// The library's fixed CCPs, clamped to the problem.
pub fn static_ccps(
    profile: &StaticProfile,
    m: usize,
    n: usize,
    k: usize,
) -> Result<CcpTriple, CcpError> {
    if m == 0 || n == 0 || k == 0 {
        return Err(CcpError::ZeroDimension);
    }
    Ok(CcpTriple {
        mc: profile.mc0,
        nc: profile.nc0,
        kc: profile.kc0,
        provenance: Provenance::Static,
        ways: None,
    }
    .clamp_to(m, n, k))
}

/// Flops per memory access of one micro-kernel call:
/// `2 m_r n_r k_c / (2 m_r n_r + m_r k_c + k_c n_r)`.
pub fn flops_per_memop(mk: MicroKernelShape, kc: usize) -> f64 {
    let (mr, nr, kc) = (mk.mr as f64, mk.nr as f64, kc as f64);
    2.0 * mr * nr * kc / (2.0 * mr * nr + mr * kc + kc * nr)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CcpPolicy {
    Static(StaticProfile),
    Original,
    Refined,
}

impl CcpPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            CcpPolicy::Static(_) => "static",
            CcpPolicy::Original => "original",
            CcpPolicy::Refined => "refined",
        }
    }
}

/// An exact ratio `num / den`, kept as integers so that tables can be
/// rendered with correct decimal rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Share {
    pub num: usize,
    pub den: usize,
}

impl Share {
    fn new(num: usize, den: usize) -> Self {
        Self { num, den }
    }

    pub fn fraction(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Percentage with one decimal, ties to even.
    pub fn percent_1dp(&self) -> String {
        decimal_1dp(self.num as u128 * 100, self.den as u128)
    }
}

/// `num / den` with one decimal digit, rounding ties to even.
pub fn decimal_1dp(num: u128, den: u128) -> String {
    assert!(den > 0);
    let scaled = num * 10;
    let mut tenths = scaled / den;
    let rem = scaled % den;
    match (2 * rem).cmp(&den) {
        Ordering::Greater => tenths += 1,
        Ordering::Equal if tenths % 2 == 1 => tenths += 1,
        _ => {}
    }
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Theoretical cache occupation of `B_r` (L1) and `A_c` (L2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OccupancyReport {
    /// `B_r` bytes over L1 bytes.
    pub br: Share,
    /// Ways for `B` over L1 ways; absent for static CCPs.
    pub br_max: Option<Share>,
    /// `A_c` bytes over L2 bytes.
    pub ac: Share,
    pub ac_max: Option<Share>,
}

impl OccupancyReport {
    pub fn br_bytes(&self) -> usize {
        self.br.num
    }

    pub fn ac_bytes(&self) -> usize {
        self.ac.num
    }

    pub fn br_fraction_of_l1(&self) -> f64 {
        self.br.fraction()
    }

    pub fn ac_fraction_of_l2(&self) -> f64 {
        self.ac.fraction()
    }

    pub fn br_max_fraction(&self) -> Option<f64> {
        self.br_max.map(|s| s.fraction())
    }

    pub fn ac_max_fraction(&self) -> Option<f64> {
        self.ac_max.map(|s| s.fraction())
    }
}

pub const OCCUPANCY_CSV_HEADER: &str =
    "policy,mr,nr,k,mc,nc,kc,br_kib,br_pct,br_max_pct,ac_kib,ac_pct,ac_max_pct";

/// One CSV row in the [`OCCUPANCY_CSV_HEADER`] layout; absent maxima render as `--`.
pub fn occupancy_csv_row(
    mk: MicroKernelShape,
    k: usize,
    ccps: &CcpTriple,
    rep: &OccupancyReport,
) -> String {
    let max = |s: Option<Share>| s.map_or_else(|| "--".to_string(), |s| s.percent_1dp());
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        ccps.provenance,
        mk.mr,
        mk.nr,
        k,
        ccps.mc,
        ccps.nc,
        ccps.kc,
        decimal_1dp(rep.br.num as u128, 1024),
        rep.br.percent_1dp(),
        max(rep.br_max),
        decimal_1dp(rep.ac.num as u128, 1024),
        rep.ac.percent_1dp(),
        max(rep.ac_max),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectPolicy {
    /// First candidate (in the machine's ranked order) within budget.
    ProfilePreference,
    /// Best predicted L2 occupancy, then flops/memop, then tile area.
    ModelScore,
}

impl FromStr for SelectPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "profile" => Ok(Self::ProfilePreference),
            "model" => Ok(Self::ModelScore),
            _ => Err(format!(
                "unknown selection policy {s:?} (expected profile|model)"
            )),
        }
    }
}

/// Picks a micro-kernel for an `m x n x k` product and returns it with its
/// refined CCPs. Candidates over the register budget, or for which the model
/// is undefined, are skipped.
pub fn select_kernel(
    candidates: &[MicroKernelEntry],
    hier: &CacheHierarchy,
    policy: SelectPolicy,
    m: usize,
    n: usize,
    k: usize,
) -> Result<(MicroKernelEntry, CcpTriple), CcpError> {
    let model = CcpModel::new(hier);
    let viable = candidates
        .iter()
        .filter(|e| e.budget(&hier.registers).fits)
        .filter_map(|e| model.refined(e.shape, m, n, k).ok().map(|c| (*e, c)));
    match policy {
        SelectPolicy::ProfilePreference => {
            viable.into_iter().next().ok_or(CcpError::NoViableKernel)
        }
        SelectPolicy::ModelScore => {
            let scored: Vec<_> = viable
                .map(|(e, c)| {
                    let occ = model
                        .occupancy(e.shape, &c)
                        .map(|r| r.ac_fraction_of_l2())
                        .unwrap_or(0.0);
                    let fpm = flops_per_memop(e.shape, c.kc);
                    (e, c, occ, fpm)
                })
                .collect();
            scored
                .into_iter()
                .max_by(|x, y| {
                    x.2.total_cmp(&y.2)
                        .then(x.3.total_cmp(&y.3))
                        .then(x.0.shape.area().cmp(&y.0.shape.area()))
                        // Smaller (m_r, n_r) wins ties, hence the reversal.
                        .then((y.0.shape.mr, y.0.shape.nr).cmp(&(x.0.shape.mr, x.0.shape.nr)))
                        .then(x.0.kind.cmp(&y.0.kind))
                        .then(y.0.name.cmp(x.0.name))
                })
                .map(|(e, c, _, _)| (e, c))
                .ok_or(CcpError::NoViableKernel)
        }
    }
}
