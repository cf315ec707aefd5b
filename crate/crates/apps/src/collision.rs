//! n-body with perfectly inelastic merging of close bodies.
//!
//! One iteration runs six phases: force, update, reset merge state,
//! prepare merges, perform merges, delete merged bodies. A body merges
//! into the lightest-id heavier body within the merge radius. A receiver
//! accepts one incoming body per iteration (the one with the lowest id),
//! and a body that is itself receiving does not merge away. Both choices
//! are independent of enumeration order, so runs are reproducible with
//! any number of workers and across defragmentation.

use std::sync::atomic::{AtomicUsize, Ordering};

use soaheap::{AllocConfig, Allocator, Field, Handle, Heap, Registry, TypeId};

use crate::body::{self, BodyState, Physics, MASS, POS_X, POS_Y, VEL_X, VEL_Y};
use crate::nbody::random_body;
use crate::{heap_size_for, AppError, Simulation};

pub const ID: usize = 7;
pub const MERGE_TARGET: usize = 8;
pub const INCOMING: usize = 9;
pub const MERGED: usize = 10;

#[derive(Debug, Clone)]
pub struct CollisionParams {
    pub bodies: usize,
    pub seed: u64,
    pub physics: Physics,
    pub max_speed: f32,
    pub merge_radius: f32,
    pub heap_size: Option<usize>,
}

impl Default for CollisionParams {
    fn default() -> Self {
        CollisionParams {
            bodies: 1024,
            seed: 42,
            physics: Physics::default(),
            max_speed: 0.05,
            merge_radius: 0.02,
            heap_size: None,
        }
    }
}

pub struct Collision {
    alloc: Allocator,
    body: TypeId,
    physics: Physics,
    radius: f32,
    initial: usize,
    merges: usize,
}

fn key(heap: &Heap, h: Handle) -> (f32, u32) {
    (heap.get(h, MASS), heap.get(h, ID))
}

impl Collision {
    pub fn new(p: &CollisionParams, cfg: AllocConfig) -> Result<Collision, AppError> {
        let states: Vec<BodyState> = (0..p.bodies).map(|i| random_body(p.seed, i, p.max_speed)).collect();
        Self::from_states(&states, p.physics, p.merge_radius, p.heap_size, cfg)
    }

    /// Bodies get ids in the order given.
    pub fn from_states(
        states: &[BodyState],
        physics: Physics,
        merge_radius: f32,
        heap_size: Option<usize>,
        cfg: AllocConfig,
    ) -> Result<Collision, AppError> {
        let mut reg = Registry::new();
        let me = reg.next_id();
        let mut fields = body::body_fields();
        fields.extend([
            Field::scalar("id", 4),
            Field::reference("merge_target", me),
            Field::reference("incoming", me),
            Field::scalar("successful_merge", 1),
        ]);
        let body = reg.register_type("Body", None, false, fields)?;
        let slack = 64 * cfg.workers;
        reg.freeze(heap_size.unwrap_or(heap_size_for(states.len(), 1.0) + slack))?;
        let alloc = Allocator::new(reg, cfg)?;
        alloc.parallel_new(body, states.len(), |_, h, i| {
            let heap = alloc.heap();
            states[i].store(heap, h);
            heap.set(h, ID, i as u32);
            heap.set(h, MERGE_TARGET, Handle::NULL);
            heap.set(h, INCOMING, Handle::NULL);
            heap.set(h, MERGED, false);
        })?;
        Ok(Collision { alloc, body, physics, radius: merge_radius, initial: states.len(), merges: 0 })
    }

    pub fn merges(&self) -> usize {
        self.merges
    }

    pub fn initial_count(&self) -> usize {
        self.initial
    }

    /// Live bodies as (id, state), sorted by id.
    pub fn bodies(&self) -> Vec<(u32, BodyState)> {
        let heap = self.alloc.heap();
        let mut v: Vec<(u32, BodyState)> = self
            .alloc
            .live_handles(self.body)
            .into_iter()
            .map(|h| (heap.get(h, ID), BodyState::load(heap, h)))
            .collect();
        v.sort_by_key(|b| b.0);
        v
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies().iter().map(|(_, b)| b.mass as f64).sum()
    }

    fn prepare_merge(&self, h: Handle) {
        let heap = self.alloc.heap();
        let me = key(heap, h);
        let (x, y) = (heap.get::<f32>(h, POS_X) as f64, heap.get::<f32>(h, POS_Y) as f64);
        let r2 = self.radius as f64 * self.radius as f64;
        let mut best: Option<(u32, Handle)> = None;
        self.alloc.device_do(self.body, false, |o| {
            if o == h {
                return;
            }
            let dx = heap.get::<f32>(o, POS_X) as f64 - x;
            let dy = heap.get::<f32>(o, POS_Y) as f64 - y;
            if dx * dx + dy * dy >= r2 {
                return;
            }
            let other = key(heap, o);
            if other.0 < me.0 || (other.0 == me.0 && other.1 < me.1) {
                return;
            }
            if best.is_none_or(|b| other.1 < b.0) {
                best = Some((other.1, o));
            }
        });
        let Some((_, target)) = best else { return };
        heap.set(h, MERGE_TARGET, target);
        let mut cur = heap.get::<Handle>(target, INCOMING);
        loop {
            if !cur.is_null() && heap.get::<u32>(cur, ID) < me.1 {
                break;
            }
            match heap.compare_exchange_handle(target, INCOMING, cur, h) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
    }

    fn perform_merge(&self, h: Handle) {
        let heap = self.alloc.heap();
        let m: Handle = heap.get(h, MERGE_TARGET);
        if m.is_null() || heap.get::<Handle>(m, INCOMING) != h || !heap.get::<Handle>(h, INCOMING).is_null() {
            return;
        }
        let (mx, mm): (f32, f32) = (heap.get(h, MASS), heap.get(m, MASS));
        let total = mx + mm;
        for f in [POS_X, POS_Y, VEL_X, VEL_Y] {
            let v = (mx * heap.get::<f32>(h, f) + mm * heap.get::<f32>(m, f)) / total;
            heap.set(m, f, v);
        }
        heap.set(m, MASS, total);
        heap.set(h, MERGED, true);
    }
}

impl Simulation for Collision {
    fn name(&self) -> &'static str {
        "collision"
    }

    fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    fn step(&mut self) -> Result<(), AppError> {
        let (a, t, p) = (&self.alloc, self.body, self.physics);
        a.parallel_do(t, false, |_, h| body::compute_force(a, t, h, &p));
        a.parallel_do(t, false, |_, h| body::update(a.heap(), h, p.dt));
        a.parallel_do(t, false, |_, h| {
            a.heap().set(h, MERGE_TARGET, Handle::NULL);
            a.heap().set(h, INCOMING, Handle::NULL);
            a.heap().set(h, MERGED, false);
        });
        a.parallel_do(t, false, |_, h| self.prepare_merge(h));
        a.parallel_do(t, false, |_, h| self.perform_merge(h));
        let merged = AtomicUsize::new(0);
        a.parallel_do(t, false, |_, h| {
            if a.heap().get::<bool>(h, MERGED) {
                merged.fetch_add(1, Ordering::Relaxed);
                a.deallocate(h);
            } else {
                // No references may outlive the iteration: the merged
                // bodies they could point at are gone.
                a.heap().set(h, MERGE_TARGET, Handle::NULL);
                a.heap().set(h, INCOMING, Handle::NULL);
            }
        });
        self.merges += merged.into_inner();
        Ok(())
    }

    fn defrag_types(&self) -> Vec<TypeId> {
        vec![self.body]
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (id, b) in self.bodies() {
            out.extend_from_slice(&id.to_le_bytes());
            b.to_bytes(&mut out);
        }
        out
    }

    fn check(&self) -> Result<(), AppError> {
        let heap = self.alloc.heap();
        let live = self.alloc.live_handles(self.body);
        if live.len() + self.merges != self.initial {
            return Err(AppError::Invariant(format!(
                "{} live + {} merged != {} initial",
                live.len(),
                self.merges,
                self.initial
            )));
        }
        for h in live {
            if heap.get::<f32>(h, MASS).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(AppError::Invariant(format!("body {h:?} has no mass")));
            }
            if !heap.get::<Handle>(h, MERGE_TARGET).is_null() || !heap.get::<Handle>(h, INCOMING).is_null() {
                return Err(AppError::Invariant(format!("body {h:?} keeps a merge reference")));
            }
        }
        Ok(())
    }
}
