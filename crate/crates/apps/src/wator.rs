//! Wa-tor predator/prey simulation on a torus.
//!
//! Cells hold at most one agent. Moves are negotiated in three phases:
//! agents mark a request on the neighbor they want (slot 4 of their own
//! cell means "stay"), every cell picks one requester, and agents then
//! move to whatever cell picked them. Fish go first, then sharks.

use soaheap::{AllocConfig, Allocator, Field, Handle, Heap, Registry, TypeId};

use crate::rng::{below, next_u64, seed_for, unit};
use crate::{heap_size_for, new_indexed, AppError, Simulation};

// Cell fields.
const AGENT: usize = 0;
const NEIGHBOR: usize = 1; // four consecutive references: N, E, S, W
const REQUEST: usize = 5;
const CELL_RNG: usize = 6;
// Agent fields.
const POSITION: usize = 0;
const NEW_POSITION: usize = 1;
const AGENT_RNG: usize = 2;
const EGG_TIMER: usize = 3;
const ENERGY: usize = 4;

const STAY: usize = 4;

/// The defaults keep both species alive for at least 500 iterations on a
/// 64x64 grid (checked over seeds 0..5).
#[derive(Debug, Clone)]
pub struct WatorParams {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Initial occupancy probabilities per cell.
    pub fish_density: f64,
    pub shark_density: f64,
    /// Agents spawn once their egg timer exceeds this.
    pub fish_spawn: u32,
    pub shark_spawn: u32,
    pub shark_energy_start: u32,
    pub shark_energy_boost: u32,
    pub heap_size: Option<usize>,
}

impl Default for WatorParams {
    fn default() -> Self {
        WatorParams {
            width: 64,
            height: 64,
            seed: 42,
            fish_density: 0.3,
            shark_density: 0.05,
            fish_spawn: 3,
            shark_spawn: 6,
            shark_energy_start: 3,
            shark_energy_boost: 2,
            heap_size: None,
        }
    }
}

pub struct Wator {
    alloc: Allocator,
    cell: TypeId,
    fish: TypeId,
    shark: TypeId,
    /// Cells never die, so their handles are stable.
    cells: Vec<Handle>,
    p: WatorParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupant {
    Empty,
    Fish,
    Shark,
}

impl Wator {
    /// Random initial population drawn from the densities in `p`.
    pub fn new(p: &WatorParams, cfg: AllocConfig) -> Result<Wator, AppError> {
        let grid: Vec<Occupant> = (0..p.width * p.height)
            .map(|i| {
                let r = unit(seed_for(p.seed, 2, i as u64));
                if r < p.fish_density {
                    Occupant::Fish
                } else if r < p.fish_density + p.shark_density {
                    Occupant::Shark
                } else {
                    Occupant::Empty
                }
            })
            .collect();
        Self::from_grid(p, &grid, cfg)
    }

    /// Starts from an explicit row-major grid; densities in `p` are ignored.
    pub fn from_grid(p: &WatorParams, grid: &[Occupant], cfg: AllocConfig) -> Result<Wator, AppError> {
        if p.width < 2 || p.height < 2 {
            return Err(AppError::Params(format!("grid {}x{} is smaller than 2x2", p.width, p.height)));
        }
        if grid.len() != p.width * p.height {
            return Err(AppError::Params(format!("grid has {} cells, expected {}", grid.len(), p.width * p.height)));
        }
        let mut reg = Registry::new();
        let cell_id = reg.next_id();
        let agent_id = cell_id + 1;
        let cell = reg.register_type(
            "Cell",
            None,
            false,
            vec![
                Field::reference("agent", agent_id),
                Field::reference("north", cell_id),
                Field::reference("east", cell_id),
                Field::reference("south", cell_id),
                Field::reference("west", cell_id),
                Field::array("neighbor_request", 1, 5),
                Field::scalar("rng", 8),
            ],
        )?;
        let agent = reg.register_type(
            "Agent",
            None,
            true,
            vec![Field::reference("position", cell), Field::reference("new_position", cell), Field::scalar("rng", 8)],
        )?;
        let fish = reg.register_type("Fish", Some(agent), false, vec![Field::scalar("egg_timer", 4)])?;
        let shark = reg.register_type(
            "Shark",
            Some(agent),
            false,
            vec![Field::scalar("egg_timer", 4), Field::scalar("energy", 4)],
        )?;
        let n = p.width * p.height;
        // Smallest type is Fish; cells and sharks take more room per object.
        reg.freeze(p.heap_size.unwrap_or(heap_size_for(n * 6, 1.0) + 64 * 4 * cfg.workers))?;
        let alloc = Allocator::new(reg, cfg)?;

        let cells = new_indexed(&alloc, cell, n, |h, i| {
            let heap = alloc.heap();
            heap.set(h, AGENT, Handle::NULL);
            for k in 0..5 {
                heap.set_elem(h, REQUEST, k, false);
            }
            heap.set(h, CELL_RNG, seed_for(p.seed, 1, i as u64));
        })?;
        let w = Wator { alloc, cell, fish, shark, cells, p: p.clone() };
        w.link_and_populate(grid)?;
        Ok(w)
    }

    fn link_and_populate(&self, grid: &[Occupant]) -> Result<(), AppError> {
        let (wd, ht) = (self.p.width, self.p.height);
        let heap = self.alloc.heap();
        for y in 0..ht {
            for x in 0..wd {
                let h = self.cells[y * wd + x];
                let at = |x: usize, y: usize| self.cells[y * wd + x];
                heap.set(h, NEIGHBOR, at(x, (y + ht - 1) % ht));
                heap.set(h, NEIGHBOR + 1, at((x + 1) % wd, y));
                heap.set(h, NEIGHBOR + 2, at(x, (y + 1) % ht));
                heap.set(h, NEIGHBOR + 3, at((x + wd - 1) % wd, y));
            }
        }
        for (i, &c) in self.cells.iter().enumerate() {
            let kind = match grid[i] {
                Occupant::Empty => continue,
                Occupant::Fish => self.fish,
                Occupant::Shark => self.shark,
            };
            let a = self.alloc.allocate(kind, i as u64)?;
            self.init_agent(a, c, seed_for(self.p.seed, 3, i as u64));
            heap.set(c, AGENT, a);
        }
        Ok(())
    }

    fn init_agent(&self, a: Handle, cell: Handle, rng: u64) {
        let heap = self.alloc.heap();
        heap.set(a, POSITION, cell);
        heap.set(a, NEW_POSITION, cell);
        heap.set(a, AGENT_RNG, rng);
        heap.set(a, EGG_TIMER, 0u32);
        if a.type_id() == self.shark {
            heap.set(a, ENERGY, self.p.shark_energy_start);
        }
    }

    pub fn fish_type(&self) -> TypeId {
        self.fish
    }

    pub fn shark_type(&self) -> TypeId {
        self.shark
    }

    pub fn cell_type(&self) -> TypeId {
        self.cell
    }

    /// Occupants in row-major order.
    pub fn grid(&self) -> Vec<Occupant> {
        let heap = self.alloc.heap();
        self.cells
            .iter()
            .map(|&c| {
                let a: Handle = heap.get(c, AGENT);
                match a {
                    a if a.is_null() => Occupant::Empty,
                    a if a.type_id() == self.fish => Occupant::Fish,
                    _ => Occupant::Shark,
                }
            })
            .collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        let g = self.grid();
        let f = g.iter().filter(|&&o| o == Occupant::Fish).count();
        let s = g.iter().filter(|&&o| o == Occupant::Shark).count();
        (f, s)
    }

    fn is_free(heap: &Heap, cell: Handle) -> bool {
        heap.get::<Handle>(cell, AGENT).is_null()
    }

    fn has_fish(&self, heap: &Heap, cell: Handle) -> bool {
        let a: Handle = heap.get(cell, AGENT);
        !a.is_null() && a.type_id() == self.fish
    }

    /// Marks a request on a random neighbor of `agent`'s cell satisfying
    /// `pred`. Returns false if there is none.
    fn request_neighbor(&self, agent: Handle, pred: impl Fn(Handle) -> bool) -> bool {
        let heap = self.alloc.heap();
        let cell: Handle = heap.get(agent, POSITION);
        let mut cand = [0usize; 4];
        let mut n = 0;
        for (i, c) in (0..4).map(|i| (i, heap.get::<Handle>(cell, NEIGHBOR + i))) {
            if pred(c) {
                cand[n] = i;
                n += 1;
            }
        }
        if n == 0 {
            return false;
        }
        let dir = cand[below(heap, agent, AGENT_RNG, n as u32) as usize];
        let target: Handle = heap.get(cell, NEIGHBOR + dir);
        heap.set_elem(target, REQUEST, (dir + 2) % 4, true);
        true
    }

    fn stay(&self, agent: Handle) {
        let heap = self.alloc.heap();
        let cell: Handle = heap.get(agent, POSITION);
        heap.set_elem(cell, REQUEST, STAY, true);
    }

    fn reset_cells(&self) {
        let a = &self.alloc;
        a.parallel_do(self.cell, false, |_, c| {
            for k in 0..5 {
                a.heap().set_elem(c, REQUEST, k, false);
            }
        });
    }

    fn decide(&self) {
        let a = &self.alloc;
        a.parallel_do(self.cell, false, |_, c| {
            let heap = a.heap();
            if heap.get_elem::<bool>(c, REQUEST, STAY) {
                let agent: Handle = heap.get(c, AGENT);
                heap.set(agent, NEW_POSITION, c);
                return;
            }
            let mut cand = [0usize; 4];
            let mut n = 0;
            for i in 0..4 {
                if heap.get_elem::<bool>(c, REQUEST, i) {
                    cand[n] = i;
                    n += 1;
                }
            }
            if n > 0 {
                let dir = cand[below(heap, c, CELL_RNG, n as u32) as usize];
                let from: Handle = heap.get(c, NEIGHBOR + dir);
                let agent: Handle = heap.get(from, AGENT);
                heap.set(agent, NEW_POSITION, c);
            }
        });
    }

    /// Moves `agent` if a cell picked it; leaves a newborn behind when its
    /// egg timer ran out.
    fn relocate(&self, agent: Handle, spawn_after: u32) -> Result<(), AppError> {
        let heap = self.alloc.heap();
        let old: Handle = heap.get(agent, POSITION);
        let new: Handle = heap.get(agent, NEW_POSITION);
        if old == new {
            return Ok(());
        }
        heap.set(old, AGENT, Handle::NULL);
        heap.set(new, AGENT, agent);
        heap.set(agent, POSITION, new);
        let timer: u32 = heap.get(agent, EGG_TIMER);
        if timer > spawn_after {
            let seed = next_u64(heap, agent, AGENT_RNG);
            let child = self.alloc.allocate(agent.type_id(), seed)?;
            self.init_agent(child, old, seed);
            heap.set(old, AGENT, child);
            heap.set(agent, EGG_TIMER, 0u32);
        }
        Ok(())
    }
}

impl Simulation for Wator {
    fn name(&self) -> &'static str {
        "wator"
    }

    fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    fn step(&mut self) -> Result<(), AppError> {
        let a = &self.alloc;
        let this = &*self;

        this.reset_cells();
        a.parallel_do(this.fish, false, |_, f| {
            let heap = a.heap();
            heap.set(f, EGG_TIMER, heap.get::<u32>(f, EGG_TIMER) + 1);
            heap.set(f, NEW_POSITION, heap.get::<Handle>(f, POSITION));
            if !this.request_neighbor(f, |c| Self::is_free(heap, c)) {
                this.stay(f);
            }
        });
        this.decide();
        a.try_parallel_do(this.fish, false, |_, f| this.relocate(f, this.p.fish_spawn))?;

        this.reset_cells();
        a.parallel_do(this.shark, false, |_, s| {
            let heap = a.heap();
            heap.set(s, EGG_TIMER, heap.get::<u32>(s, EGG_TIMER) + 1);
            let energy = heap.get::<u32>(s, ENERGY).saturating_sub(1);
            heap.set(s, ENERGY, energy);
            heap.set(s, NEW_POSITION, heap.get::<Handle>(s, POSITION));
            if energy == 0 {
                return;
            }
            if !this.request_neighbor(s, |c| this.has_fish(heap, c))
                && !this.request_neighbor(s, |c| Self::is_free(heap, c))
            {
                this.stay(s);
            }
        });
        this.decide();
        a.try_parallel_do(this.shark, false, |_, s| {
            let heap = a.heap();
            if heap.get::<u32>(s, ENERGY) == 0 {
                let cell: Handle = heap.get(s, POSITION);
                heap.set(cell, AGENT, Handle::NULL);
                a.deallocate(s);
                return Ok(());
            }
            let new: Handle = heap.get(s, NEW_POSITION);
            if new != heap.get::<Handle>(s, POSITION) && this.has_fish(heap, new) {
                let prey: Handle = heap.get(new, AGENT);
                heap.set(new, AGENT, Handle::NULL);
                a.deallocate(prey);
                heap.set(s, ENERGY, heap.get::<u32>(s, ENERGY) + this.p.shark_energy_boost);
            }
            this.relocate(s, this.p.shark_spawn)
        })?;
        Ok(())
    }

    fn defrag_types(&self) -> Vec<TypeId> {
        vec![self.fish, self.shark]
    }

    fn state_bytes(&self) -> Vec<u8> {
        let heap = self.alloc.heap();
        let mut out = Vec::with_capacity(self.cells.len() * 16);
        for &c in &self.cells {
            let a: Handle = heap.get(c, AGENT);
            if a.is_null() {
                out.push(0);
                continue;
            }
            out.push(if a.type_id() == self.fish { 1 } else { 2 });
            out.extend_from_slice(&heap.get::<u64>(a, AGENT_RNG).to_le_bytes());
            out.extend_from_slice(&heap.get::<u32>(a, EGG_TIMER).to_le_bytes());
            if a.type_id() == self.shark {
                out.extend_from_slice(&heap.get::<u32>(a, ENERGY).to_le_bytes());
            }
        }
        out
    }

    fn check(&self) -> Result<(), AppError> {
        let heap = self.alloc.heap();
        let mut seen = 0usize;
        for &c in &self.cells {
            let a: Handle = heap.get(c, AGENT);
            if a.is_null() {
                continue;
            }
            seen += 1;
            if heap.get::<Handle>(a, POSITION) != c {
                return Err(AppError::Invariant(format!("agent {a:?} does not point back at its cell")));
            }
        }
        let live = self.alloc.live_handles(self.fish).len() + self.alloc.live_handles(self.shark).len();
        if live != seen {
            return Err(AppError::Invariant(format!("{live} live agents but {seen} occupied cells")));
        }
        Ok(())
    }
}
