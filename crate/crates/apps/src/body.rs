//! Gravitational bodies shared by nbody and collision.
//!
//! Forces are summed in 64-bit fixed point with wrapping adds. Each
//! pairwise term depends only on the two bodies, and integer addition is
//! associative, so the total does not depend on the order in which
//! `device_do` walks the heap.
//! That keeps runs bit-identical across defragmentation and worker counts.

use soaheap::{Allocator, Field, Handle, Heap, TypeId};

pub const POS_X: usize = 0;
pub const POS_Y: usize = 1;
pub const VEL_X: usize = 2;
pub const VEL_Y: usize = 3;
pub const FORCE_X: usize = 4;
pub const FORCE_Y: usize = 5;
pub const MASS: usize = 6;

/// The seven 32-bit real fields every body starts with.
pub fn body_fields() -> Vec<Field> {
    ["pos_x", "pos_y", "vel_x", "vel_y", "force_x", "force_y", "mass"].iter().map(|n| Field::scalar(n, 4)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub gravity: f64,
    /// Softening length; keeps close encounters finite.
    pub softening: f64,
    pub dt: f32,
}

impl Default for Physics {
    fn default() -> Self {
        Physics { gravity: 2e-4, softening: 0.05, dt: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyState {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
    pub force: [f32; 2],
    pub mass: f32,
}

impl BodyState {
    pub fn load(heap: &Heap, h: Handle) -> BodyState {
        BodyState {
            pos: [heap.get(h, POS_X), heap.get(h, POS_Y)],
            vel: [heap.get(h, VEL_X), heap.get(h, VEL_Y)],
            force: [heap.get(h, FORCE_X), heap.get(h, FORCE_Y)],
            mass: heap.get(h, MASS),
        }
    }

    pub fn store(&self, heap: &Heap, h: Handle) {
        heap.set(h, POS_X, self.pos[0]);
        heap.set(h, POS_Y, self.pos[1]);
        heap.set(h, VEL_X, self.vel[0]);
        heap.set(h, VEL_Y, self.vel[1]);
        heap.set(h, FORCE_X, self.force[0]);
        heap.set(h, FORCE_Y, self.force[1]);
        heap.set(h, MASS, self.mass);
    }

    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        for v in [self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.force[0], self.force[1], self.mass] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

const FX_SCALE: f64 = (1u64 << 40) as f64;
const FX_LIMIT: f64 = (1u64 << 20) as f64;

/// Truncates toward zero, so `to_fixed(-v) == -to_fixed(v)`.
pub fn to_fixed(v: f64) -> i64 {
    (v.clamp(-FX_LIMIT, FX_LIMIT) * FX_SCALE) as i64
}

pub fn from_fixed(v: i64) -> f64 {
    v as f64 / FX_SCALE
}

/// Force on `r` exerted by `o`. Exactly antisymmetric in its arguments.
pub fn pair_force(r: &BodyState, o: &BodyState, p: &Physics) -> [f64; 2] {
    let dx = o.pos[0] as f64 - r.pos[0] as f64;
    let dy = o.pos[1] as f64 - r.pos[1] as f64;
    let d2 = dx * dx + dy * dy;
    if d2 == 0.0 {
        return [0.0, 0.0];
    }
    let dist = d2.sqrt();
    let f = p.gravity * (r.mass as f64 * o.mass as f64) / (d2 + p.softening * p.softening);
    [f * dx / dist, f * dy / dist]
}

/// Sums the force of every other body of type `t` on `h` and stores it.
pub fn compute_force(alloc: &Allocator, t: TypeId, h: Handle, p: &Physics) {
    let heap = alloc.heap();
    let me = BodyState::load(heap, h);
    let (mut fx, mut fy) = (0i64, 0i64);
    alloc.device_do(t, false, |o| {
        if o != h {
            let other = BodyState {
                pos: [heap.get(o, POS_X), heap.get(o, POS_Y)],
                mass: heap.get(o, MASS),
                ..BodyState::default()
            };
            let f = pair_force(&me, &other, p);
            fx = fx.wrapping_add(to_fixed(f[0]));
            fy = fy.wrapping_add(to_fixed(f[1]));
        }
    });
    heap.set(h, FORCE_X, from_fixed(fx) as f32);
    heap.set(h, FORCE_Y, from_fixed(fy) as f32);
}

/// Advances velocity and position by one step; walls at ±1 reflect.
pub fn integrate(b: &mut BodyState, dt: f32) {
    for k in 0..2 {
        b.vel[k] += b.force[k] / b.mass * dt;
        b.pos[k] += b.vel[k] * dt;
        if b.pos[k] < -1.0 || b.pos[k] > 1.0 {
            b.vel[k] = -b.vel[k];
        }
    }
}

pub fn update(heap: &Heap, h: Handle, dt: f32) {
    let mut b = BodyState::load(heap, h);
    integrate(&mut b, dt);
    b.store(heap, h);
}
