//! Scenario execution.

use std::collections::BTreeMap;
use std::path::Path;

use soaheap::{Allocator, TypeId};
use soaheap_apps::body::Physics;
use soaheap_apps::collision::{Collision, CollisionParams};
use soaheap_apps::gol::{Gol, Rule};
use soaheap_apps::nbody::{NBody, NBodyParams};
use soaheap_apps::pbm::Pattern;
use soaheap_apps::wator::{Wator, WatorParams};
use soaheap_apps::{scalability, synthetic, Simulation};

use crate::config::{AppKind, BodiesSection, Policy, ScenarioConfig};
use crate::error::HarnessError;
use crate::metrics::{write_rows, write_table, PassSummary, Row, Summary, TimingSummary};

/// Everything a run produces, before it is written anywhere.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: Vec<u8>,
    pub summary: Summary,
    /// Final state bitmaps and per-block fill, when requested.
    pub bitmaps: Option<(String, String)>,
}

fn physics(b: &BodiesSection) -> Physics {
    Physics { gravity: b.gravity, softening: b.softening, dt: b.dt }
}

pub fn build_simulation(c: &ScenarioConfig) -> Result<Box<dyn Simulation>, HarnessError> {
    let cfg = c.alloc_config()?;
    Ok(match c.app {
        AppKind::Nbody => {
            let b = &c.nbody;
            let p = NBodyParams {
                bodies: b.bodies,
                seed: c.seed,
                physics: physics(b),
                max_speed: b.max_speed,
                heap_size: c.heap_size,
            };
            Box::new(NBody::new(&p, cfg)?)
        }
        AppKind::Collision => {
            let b = &c.collision;
            let p = CollisionParams {
                bodies: b.bodies,
                seed: c.seed,
                physics: physics(b),
                max_speed: b.max_speed,
                merge_radius: b.merge_radius,
                heap_size: c.heap_size,
            };
            Box::new(Collision::new(&p, cfg)?)
        }
        AppKind::Wator => {
            let w = &c.wator;
            let p = WatorParams {
                width: w.width,
                height: w.height,
                seed: c.seed,
                fish_density: w.fish_density,
                shark_density: w.shark_density,
                fish_spawn: w.fish_spawn,
                shark_spawn: w.shark_spawn,
                shark_energy_start: w.shark_energy_start,
                shark_energy_boost: w.shark_energy_boost,
                heap_size: c.heap_size,
            };
            Box::new(Wator::new(&p, cfg)?)
        }
        AppKind::Gol => {
            let g = &c.gol;
            let pattern = match &g.pattern {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                    Pattern::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
                }
                None => Pattern::random(g.width, g.height, g.density, c.seed),
            };
            let rule = match g.rule.as_str() {
                "classic" => Rule::Classic,
                "generation" => Rule::Generation,
                r => return Err(HarnessError::Config(format!("unknown gol rule `{r}`"))),
            };
            Box::new(Gol::new(&pattern, rule, c.heap_size, cfg)?)
        }
        AppKind::Synthetic | AppKind::Scalability => {
            return Err(HarnessError::Config(format!("{:?} is not an iterated simulation", c.app)))
        }
    })
}

fn audit(sim: &dyn Simulation, iteration: usize) -> Result<(), HarnessError> {
    let a = sim.allocator();
    a.audit().map_err(|source| HarnessError::Audit { iteration, source })?;
    a.audit_references().map_err(|source| HarnessError::Audit { iteration, source })?;
    sim.check().map_err(|source| HarnessError::Invariant { iteration, source })
}

fn utilization(a: &Allocator) -> f64 {
    let stats = a.stats();
    let blocks: usize = stats.types.iter().map(|t| t.allocated_blocks).sum();
    if blocks == 0 {
        return 0.0;
    }
    let live: usize = stats.types.iter().map(|t| t.used_slots * a.registry().ty(t.type_id).object_size).sum();
    live as f64 / (blocks * a.heap().data_bytes()) as f64
}

fn row_for(sim: &dyn Simulation, iteration: usize) -> Row {
    Row {
        iteration,
        live: sim.live_counts().into_iter().map(|(_, n)| n).collect(),
        fragmentation: sim.allocator().fragmentation(),
        alloc_ns: 0,
        dealloc_ns: 0,
        defrag_passes: 0,
        moved: 0,
        rewritten: 0,
    }
}

/// Runs an iterated simulation under the configured defrag policy.
pub fn run_simulation(c: &ScenarioConfig, sim: &mut dyn Simulation) -> Result<RunOutput, HarnessError> {
    let policy = c.policy()?;
    let k2 = c.k2()?;
    let names: Vec<String> = sim.live_counts().into_iter().map(|(n, _)| n).collect();
    let mut rows = vec![row_for(sim, 0)];
    let mut passes = Vec::new();
    let mut timings = TimingSummary::default();
    if c.audit {
        audit(sim, 0)?;
    }
    let _ = sim.allocator().take_timings();

    for it in 1..=c.iterations {
        sim.step()?;
        if c.audit {
            audit(sim, it)?;
        }
        let t = sim.allocator().take_timings();
        timings.add(&t);

        let a = sim.allocator();
        let types: Vec<TypeId> = match policy {
            Policy::None => Vec::new(),
            Policy::Every(m) if it % m == 0 => sim.defrag_types(),
            Policy::Every(_) => Vec::new(),
            Policy::Massive => sim.defrag_types().into_iter().filter(|&t| a.should_defrag(t, k2)).collect(),
        };
        let mut row = row_for(sim, it);
        for t in types {
            let name = &a.registry().ty(t).name;
            for p in a.defragment(t, c.defrag.k1).passes {
                row.defrag_passes += 1;
                row.moved += p.moved;
                row.rewritten += p.rewritten;
                passes.push(PassSummary::new(it, name, &p, c.timings));
            }
        }
        if row.defrag_passes > 0 {
            row.fragmentation = a.fragmentation();
            if c.audit {
                audit(sim, it)?;
            }
        }
        row.alloc_ns = t.alloc_ns;
        row.dealloc_ns = t.dealloc_ns;
        rows.push(row);
    }

    let mut csv = Vec::new();
    write_rows(&mut csv, &names, &rows)?;
    let a = sim.allocator();
    let summary = Summary {
        app: sim.name().to_string(),
        iterations: c.iterations,
        seed: c.seed,
        workers: c.workers,
        defrag_policy: c.defrag.policy.clone(),
        final_fragmentation: a.fragmentation(),
        utilization: utilization(a),
        live: sim.live_counts().into_iter().collect(),
        defrag_passes: passes.len(),
        moved: passes.iter().map(|p| p.moved).sum(),
        rewritten: passes.iter().map(|p| p.rewritten).sum(),
        passes,
        timings,
        extra: BTreeMap::new(),
    };
    let bitmaps = c.dump_bitmaps.then(|| (a.dump_bitmaps(), a.heap_csv()));
    Ok(RunOutput { csv, summary, bitmaps })
}

fn empty_summary(c: &ScenarioConfig, app: &str) -> Summary {
    Summary {
        app: app.into(),
        iterations: 0,
        seed: c.seed,
        workers: c.workers,
        defrag_policy: c.defrag.policy.clone(),
        final_fragmentation: 0.0,
        utilization: 0.0,
        live: BTreeMap::new(),
        defrag_passes: 0,
        moved: 0,
        rewritten: 0,
        passes: Vec::new(),
        timings: TimingSummary::default(),
        extra: BTreeMap::new(),
    }
}

/// Deletion-ratio sweep with one defragmentation per ratio.
pub fn run_synthetic(c: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    let n = c.allocator.defrag_n;
    let rows = synthetic::sweep(c.synthetic.objects, n, c.defrag.k1, c.seed, c.workers)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.1}", r.deletion_ratio),
                format!("{:.6}", r.fragmentation_before),
                format!("{:.6}", r.fragmentation_after),
                r.passes.to_string(),
                r.moved.to_string(),
                r.blocks_before.to_string(),
                r.blocks_after.to_string(),
            ]
        })
        .collect();
    let mut csv = Vec::new();
    let header = ["deletion_ratio", "F_before", "F", "defrag_passes", "moved", "blocks_before", "blocks_after"];
    write_table(&mut csv, &header, &table)?;
    let mut s = empty_summary(c, "synthetic");
    s.final_fragmentation = rows.iter().map(|r| r.fragmentation_after).fold(0.0, f64::max);
    s.defrag_passes = rows.iter().map(|r| r.passes).sum();
    s.moved = rows.iter().map(|r| r.moved).sum();
    s.extra.insert("bound".into(), 1.0 / (n as f64 + 1.0));
    s.extra.insert("objects".into(), c.synthetic.objects as f64);
    Ok(RunOutput { csv, summary: s, bitmaps: None })
}

pub fn run_scalability(c: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    let p = &c.scalability;
    let r = scalability::run(p.threads, p.allocs_per_thread, p.object_size)?;
    let ns = if c.timings { r.ns_per_alloc() } else { 0.0 };
    let mut csv = Vec::new();
    write_table(
        &mut csv,
        &["threads", "requested", "achieved", "heap_objects", "blocks_used", "utilization", "ns_per_alloc"],
        &[vec![
            r.threads.to_string(),
            r.requested.to_string(),
            r.achieved.to_string(),
            r.heap_objects.to_string(),
            r.blocks_used.to_string(),
            format!("{:.6}", r.utilization),
            format!("{ns:.1}"),
        ]],
    )?;
    let mut s = empty_summary(c, "scalability");
    s.utilization = r.utilization;
    s.extra.insert("achieved".into(), r.achieved as f64);
    s.extra.insert("ns_per_alloc".into(), ns);
    s.extra.insert("all_free_after".into(), if r.all_free_after { 1.0 } else { 0.0 });
    Ok(RunOutput { csv, summary: s, bitmaps: None })
}

pub fn run(c: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    c.validate()?;
    match c.app {
        AppKind::Synthetic => run_synthetic(c),
        AppKind::Scalability => run_scalability(c),
        _ => {
            let mut sim = build_simulation(c)?;
            run_simulation(c, sim.as_mut())
        }
    }
}

/// Writes `metrics.csv`, `summary.json` and, if present, `bitmaps.txt`
/// and `heap.csv` into `dir`.
pub fn write_output(dir: &Path, out: &RunOutput) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), &out.csv)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    if let Some((bitmaps, heap)) = &out.bitmaps {
        std::fs::write(dir.join("bitmaps.txt"), bitmaps)?;
        std::fs::write(dir.join("heap.csv"), heap)?;
    }
    Ok(())
}
