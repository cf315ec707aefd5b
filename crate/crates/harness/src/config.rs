//! Scenario configuration: a TOML file with command-line overrides.

use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Serialize};
use soaheap::{AllocConfig, OomPolicy, K2};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppKind {
    Nbody,
    Collision,
    Wator,
    Gol,
    Synthetic,
    Scalability,
}

impl FromStr for AppKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "nbody" => AppKind::Nbody,
            "collision" => AppKind::Collision,
            "wator" | "wa-tor" => AppKind::Wator,
            "gol" | "generation" => AppKind::Gol,
            "synthetic" => AppKind::Synthetic,
            "scalability" | "linux-scalability" => AppKind::Scalability,
            _ => return Err(HarnessError::Config(format!("unknown app `{s}`"))),
        })
    }
}

/// When to defragment, checked after every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    None,
    Every(usize),
    /// Once the candidate count reaches k2·n/(n+1).
    Massive,
}

impl FromStr for Policy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Policy::None),
            "massive" => Ok(Policy::Massive),
            _ => {
                let m = s.strip_prefix("every:").and_then(|m| m.parse::<usize>().ok()).ok_or_else(|| {
                    HarnessError::Config(format!("bad defrag policy `{s}` (none | every:M | massive)"))
                })?;
                if m == 0 {
                    return Err(HarnessError::Config("defrag interval must be at least 1".into()));
                }
                Ok(Policy::Every(m))
            }
        }
    }
}

/// "N" is an absolute candidate count, "N%" a fraction of the heap's blocks.
pub fn parse_k2(s: &str) -> Result<K2, HarnessError> {
    let bad = || HarnessError::Config(format!("bad k2 `{s}`"));
    match s.strip_suffix('%') {
        Some(p) => {
            let v: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(0.0..=100.0).contains(&v) {
                return Err(bad());
            }
            Ok(K2::Fraction(v / 100.0))
        }
        None => s.trim().parse().map(K2::Absolute).map_err(|_| bad()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSection {
    pub retries: usize,
    pub defrag_n: usize,
    pub oom: String,
}

impl Default for AllocatorSection {
    fn default() -> Self {
        AllocatorSection { retries: 5, defrag_n: 1, oom: "error".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefragSection {
    pub policy: String,
    pub k1: usize,
    pub k2: String,
}

impl Default for DefragSection {
    fn default() -> Self {
        DefragSection { policy: "none".into(), k1: 0, k2: "10%".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodiesSection {
    pub bodies: usize,
    pub dt: f32,
    pub gravity: f64,
    pub softening: f64,
    pub max_speed: f32,
    pub merge_radius: f32,
}

impl Default for BodiesSection {
    fn default() -> Self {
        let p = soaheap_apps::body::Physics::default();
        BodiesSection {
            bodies: 1024,
            dt: p.dt,
            gravity: p.gravity,
            softening: p.softening,
            max_speed: 0.05,
            merge_radius: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatorSection {
    pub width: usize,
    pub height: usize,
    pub fish_density: f64,
    pub shark_density: f64,
    pub fish_spawn: u32,
    pub shark_spawn: u32,
    pub shark_energy_start: u32,
    pub shark_energy_boost: u32,
}

impl Default for WatorSection {
    fn default() -> Self {
        let p = soaheap_apps::wator::WatorParams::default();
        WatorSection {
            width: p.width,
            height: p.height,
            fish_density: p.fish_density,
            shark_density: p.shark_density,
            fish_spawn: p.fish_spawn,
            shark_spawn: p.shark_spawn,
            shark_energy_start: p.shark_energy_start,
            shark_energy_boost: p.shark_energy_boost,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GolSection {
    /// PBM file; a random soup of `width`x`height` is used when absent.
    pub pattern: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub density: f64,
    /// "classic" or "generation".
    pub rule: String,
}

impl Default for GolSection {
    fn default() -> Self {
        GolSection { pattern: None, width: 64, height: 64, density: 0.35, rule: "classic".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub objects: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { objects: 1 << 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalabilitySection {
    pub threads: usize,
    pub allocs_per_thread: usize,
    pub object_size: usize,
}

impl Default for ScalabilitySection {
    fn default() -> Self {
        ScalabilitySection { threads: 16, allocs_per_thread: 1 << 16, object_size: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub app: AppKind,
    pub iterations: usize,
    pub seed: u64,
    pub workers: usize,
    /// In smallest objects; each app picks a size when unset.
    pub heap_size: Option<usize>,
    pub audit: bool,
    pub timings: bool,
    pub dump_bitmaps: bool,
    pub out: PathBuf,
    pub allocator: AllocatorSection,
    pub defrag: DefragSection,
    pub nbody: BodiesSection,
    pub collision: BodiesSection,
    pub wator: WatorSection,
    pub gol: GolSection,
    pub synthetic: SyntheticSection,
    pub scalability: ScalabilitySection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            app: AppKind::Wator,
            iterations: 100,
            seed: 42,
            workers: 1,
            heap_size: None,
            audit: false,
            timings: true,
            dump_bitmaps: false,
            out: PathBuf::from("out"),
            allocator: AllocatorSection::default(),
            defrag: DefragSection::default(),
            nbody: BodiesSection::default(),
            collision: BodiesSection::default(),
            wator: WatorSection::default(),
            gol: GolSection::default(),
            synthetic: SyntheticSection::default(),
            scalability: ScalabilitySection::default(),
        }
    }
}

/// Flags that override values from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// nbody | collision | wator | gol | synthetic | scalability
    #[arg(long)]
    pub app: Option<String>,
    /// Heap size in smallest objects (multiple of 64).
    #[arg(long)]
    pub heap_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Active-block lookups before claiming a fresh block.
    #[arg(long)]
    pub retries: Option<usize>,
    #[arg(long)]
    pub defrag_n: Option<usize>,
    /// none | every:M | massive
    #[arg(long)]
    pub defrag_policy: Option<String>,
    #[arg(long)]
    pub k1: Option<usize>,
    /// Candidate threshold for the massive policy: N or N%.
    #[arg(long)]
    pub k2: Option<String>,
    /// error | spin
    #[arg(long)]
    pub oom: Option<String>,
    /// Check heap invariants after every iteration and defrag pass.
    #[arg(long)]
    pub audit: bool,
    /// Write the final state bitmaps next to the metrics.
    #[arg(long)]
    pub dump_bitmaps: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Zero the timing columns so that output is reproducible.
    #[arg(long)]
    pub no_timings: bool,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads `--config` if given, applies the other flags, and validates.
    pub fn load(o: &Overrides) -> Result<ScenarioConfig, HarnessError> {
        let mut c = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                Self::from_toml(&text)?
            }
            None => ScenarioConfig::default(),
        };
        c.apply(o)?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), HarnessError> {
        if let Some(a) = &o.app {
            self.app = a.parse()?;
        }
        if o.heap_size.is_some() {
            self.heap_size = o.heap_size;
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = o.$src.clone() { self.$($dst).+ = v; })*
            };
        }
        set!(
            iterations => iterations,
            seed => seed,
            workers => workers,
            retries => allocator.retries,
            defrag_n => allocator.defrag_n,
            oom => allocator.oom,
            defrag_policy => defrag.policy,
            k1 => defrag.k1,
            k2 => defrag.k2,
            out => out,
        );
        self.audit |= o.audit;
        self.dump_bitmaps |= o.dump_bitmaps;
        if o.no_timings {
            self.timings = false;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if let Some(h) = self.heap_size {
            if h == 0 || h % 64 != 0 {
                return bad(format!("heap size {h} is not a positive multiple of 64"));
            }
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.allocator.defrag_n == 0 {
            return bad("defrag_n must be at least 1".into());
        }
        self.policy()?;
        self.k2()?;
        self.oom()?;
        Ok(())
    }

    pub fn policy(&self) -> Result<Policy, HarnessError> {
        self.defrag.policy.parse()
    }

    pub fn k2(&self) -> Result<K2, HarnessError> {
        parse_k2(&self.defrag.k2)
    }

    pub fn oom(&self) -> Result<OomPolicy, HarnessError> {
        match self.allocator.oom.as_str() {
            "error" => Ok(OomPolicy::Error),
            "spin" => Ok(OomPolicy::Spin),
            s => Err(HarnessError::Config(format!("bad oom policy `{s}` (error | spin)"))),
        }
    }

    pub fn alloc_config(&self) -> Result<AllocConfig, HarnessError> {
        Ok(AllocConfig {
            retries: self.allocator.retries,
            defrag_n: self.allocator.defrag_n,
            oom: self.oom()?,
            workers: self.workers,
            timing: self.timings,
            ..AllocConfig::default()
        })
    }
}
