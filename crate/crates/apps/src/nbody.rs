//! All-pairs gravitational n-body simulation.

use soaheap::{AllocConfig, Allocator, Handle, Registry, TypeId};

use crate::body::{self, BodyState, Physics};
use crate::rng::{seed_for, unit};
use crate::{heap_size_for, AppError, Simulation};

#[derive(Debug, Clone)]
pub struct NBodyParams {
    pub bodies: usize,
    pub seed: u64,
    pub physics: Physics,
    /// Initial velocity components are uniform in ±max_speed.
    pub max_speed: f32,
    /// Heap size in smallest objects; derived from `bodies` if unset.
    pub heap_size: Option<usize>,
}

impl Default for NBodyParams {
    fn default() -> Self {
        NBodyParams { bodies: 1024, seed: 42, physics: Physics::default(), max_speed: 0.05, heap_size: None }
    }
}

pub struct NBody {
    alloc: Allocator,
    body: TypeId,
    physics: Physics,
}

/// Random body number `i` of a seeded run. Masses are multiples of 1/1024.
pub fn random_body(seed: u64, i: usize, max_speed: f32) -> BodyState {
    let r = |k: u64| unit(seed_for(seed, k, i as u64));
    let sym = |k: u64| (2.0 * r(k) - 1.0) as f32;
    BodyState {
        pos: [sym(1), sym(2)],
        vel: [sym(3) * max_speed, sym(4) * max_speed],
        force: [0.0, 0.0],
        mass: (1.0 + (r(5) * 1024.0).floor().min(1023.0)) as f32 / 1024.0,
    }
}

impl NBody {
    pub fn new(p: &NBodyParams, cfg: AllocConfig) -> Result<NBody, AppError> {
        let states: Vec<BodyState> = (0..p.bodies).map(|i| random_body(p.seed, i, p.max_speed)).collect();
        Self::from_states(&states, p.physics, p.heap_size, cfg)
    }

    pub fn from_states(
        states: &[BodyState],
        physics: Physics,
        heap_size: Option<usize>,
        cfg: AllocConfig,
    ) -> Result<NBody, AppError> {
        let mut reg = Registry::new();
        let body = reg.register_type("Body", None, false, body::body_fields())?;
        let slack = 64 * cfg.workers;
        reg.freeze(heap_size.unwrap_or(heap_size_for(states.len(), 1.0) + slack))?;
        let alloc = Allocator::new(reg, cfg)?;
        alloc.parallel_new(body, states.len(), |_, h, i| states[i].store(alloc.heap(), h))?;
        Ok(NBody { alloc, body, physics })
    }

    pub fn body_type(&self) -> TypeId {
        self.body
    }

    pub fn bodies(&self) -> Vec<(Handle, BodyState)> {
        self.alloc.live_handles(self.body).into_iter().map(|h| (h, BodyState::load(self.alloc.heap(), h))).collect()
    }

    /// Total momentum Σ m·v in double precision.
    pub fn momentum(&self) -> [f64; 2] {
        self.bodies().iter().fold([0.0, 0.0], |acc, (_, b)| {
            [acc[0] + b.mass as f64 * b.vel[0] as f64, acc[1] + b.mass as f64 * b.vel[1] as f64]
        })
    }
}

impl Simulation for NBody {
    fn name(&self) -> &'static str {
        "nbody"
    }

    fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    fn step(&mut self) -> Result<(), AppError> {
        let (a, t, p) = (&self.alloc, self.body, self.physics);
        a.parallel_do(t, false, |_, h| body::compute_force(a, t, h, &p));
        a.parallel_do(t, false, |_, h| body::update(a.heap(), h, p.dt));
        Ok(())
    }

    fn defrag_types(&self) -> Vec<TypeId> {
        vec![self.body]
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut recs: Vec<Vec<u8>> = self
            .bodies()
            .iter()
            .map(|(_, b)| {
                let mut v = Vec::with_capacity(28);
                b.to_bytes(&mut v);
                v
            })
            .collect();
        recs.sort();
        recs.concat()
    }

    fn check(&self) -> Result<(), AppError> {
        for (h, b) in self.bodies() {
            if b.mass.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(AppError::Invariant(format!("body {h:?} has mass {}", b.mass)));
            }
        }
        Ok(())
    }
}
