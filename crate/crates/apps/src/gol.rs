//! Game of life with only live cells and their dead neighbors on the heap.
//!
//! Dead cells next to a live cell hold a `Candidate` agent; every other
//! dead cell holds nothing. An iteration has four phases:
//!
//! 1. candidates decide whether they come alive,
//! 2. live cells decide whether they die,
//! 3. candidates turn into live cells or disappear,
//! 4. live cells that just appeared put candidates on empty neighbors,
//!    and dying cells turn into candidates.
//!
//! The grid does not wrap; cells beyond the edge count as dead.

use soaheap::{AllocConfig, Allocator, Field, Handle, Registry, TypeId};

use crate::pbm::Pattern;
use crate::{heap_size_for, new_indexed, AppError, Simulation};

// Cell field.
const AGENT: usize = 0;
// Agent fields.
const CELL_ID: usize = 0;
const IS_NEW: usize = 1;
const ACTION: usize = 2;
const DECAY: usize = 3;

const KEEP: u8 = 0;
const SPAWN: u8 = 1;
const DIE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// B3/S23.
    Classic,
    /// Survive on 0235678, born on 3468; a dying cell stays blocked for
    /// 255 iterations.
    Generation,
}

impl Rule {
    fn survives(self, n: u32) -> bool {
        match self {
            Rule::Classic => n == 2 || n == 3,
            Rule::Generation => matches!(n, 0 | 2 | 3 | 5 | 6 | 7 | 8),
        }
    }

    fn born(self, n: u32) -> bool {
        match self {
            Rule::Classic => n == 3,
            Rule::Generation => matches!(n, 3 | 4 | 6 | 8),
        }
    }

    pub const DECAY_ITERATIONS: u8 = 255;
}

pub struct Gol {
    alloc: Allocator,
    cell: TypeId,
    alive: TypeId,
    candidate: TypeId,
    rule: Rule,
    width: usize,
    height: usize,
    /// Cells are never deallocated or moved.
    cells: Vec<Handle>,
}

impl Gol {
    pub fn new(pattern: &Pattern, rule: Rule, heap_size: Option<usize>, cfg: AllocConfig) -> Result<Gol, AppError> {
        let (width, height) = (pattern.width, pattern.height);
        if width == 0 || height == 0 || pattern.cells.len() != width * height {
            return Err(AppError::Params(format!("bad pattern dimensions {width}x{height}")));
        }
        let mut reg = Registry::new();
        let agent_id = reg.next_id() + 1;
        let cell = reg.register_type("Cell", None, false, vec![Field::reference("agent", agent_id)])?;
        let agent = reg.register_type(
            "Agent",
            None,
            true,
            vec![Field::scalar("cell_id", 4), Field::scalar("is_new", 1), Field::scalar("action", 1)],
        )?;
        let alive_fields = match rule {
            Rule::Classic => vec![],
            Rule::Generation => vec![Field::scalar("decay", 1)],
        };
        let alive = reg.register_type("Alive", Some(agent), false, alive_fields)?;
        let candidate = reg.register_type("Candidate", Some(agent), false, vec![])?;
        let n = width * height;
        reg.freeze(heap_size.unwrap_or(heap_size_for(n * 3, 1.0) + 64 * 3 * cfg.workers))?;
        let alloc = Allocator::new(reg, cfg)?;

        let cells = new_indexed(&alloc, cell, n, |h, _| alloc.heap().set(h, AGENT, Handle::NULL))?;
        let g = Gol { alloc, cell, alive, candidate, rule, width, height, cells };
        let live: Vec<usize> = (0..n).filter(|&i| pattern.cells[i]).collect();
        g.alloc.parallel_new(alive, live.len(), |_, h, k| g.init_agent(h, live[k], true))?;
        g.alloc.try_parallel_do(alive, false, |_, h| g.update_alive(h))?;
        Ok(g)
    }

    pub fn alive_type(&self) -> TypeId {
        self.alive
    }

    pub fn candidate_type(&self) -> TypeId {
        self.candidate
    }

    pub fn cell_type(&self) -> TypeId {
        self.cell
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn init_agent(&self, h: Handle, cell_id: usize, is_new: bool) {
        let heap = self.alloc.heap();
        heap.set(h, CELL_ID, cell_id as u32);
        heap.set(h, IS_NEW, is_new);
        heap.set(h, ACTION, KEEP);
        if h.type_id() == self.alive && self.rule == Rule::Generation {
            heap.set(h, DECAY, 0u8);
        }
        heap.set(self.cells[cell_id], AGENT, h);
    }

    fn agent_at(&self, i: usize) -> Handle {
        self.alloc.heap().get(self.cells[i], AGENT)
    }

    fn decay(&self, h: Handle) -> u8 {
        match self.rule {
            Rule::Classic => 0,
            Rule::Generation => self.alloc.heap().get(h, DECAY),
        }
    }

    fn is_live(&self, h: Handle) -> bool {
        !h.is_null() && h.type_id() == self.alive && self.decay(h) == 0
    }

    /// Indices of the up to 8 neighbors of cell `i`, top to bottom, left
    /// to right, optionally including `i` itself in its scan position.
    fn neighborhood(&self, i: usize, include_self: bool) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
        (-1..=1isize)
            .flat_map(move |dy| (-1..=1isize).map(move |dx| (x + dx, y + dy)))
            .filter(move |&(nx, ny)| {
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < self.width
                    && (ny as usize) < self.height
                    && (include_self || (nx, ny) != (x, y))
            })
            .map(move |(nx, ny)| ny as usize * self.width + nx as usize)
    }

    fn live_neighbors(&self, i: usize) -> u32 {
        self.neighborhood(i, false).filter(|&j| self.is_live(self.agent_at(j))).count() as u32
    }

    fn cell_of(&self, h: Handle) -> usize {
        self.alloc.heap().get::<u32>(h, CELL_ID) as usize
    }

    fn prepare_candidate(&self, h: Handle) {
        let n = self.live_neighbors(self.cell_of(h));
        let action = if self.rule.born(n) {
            SPAWN
        } else if n == 0 {
            DIE
        } else {
            KEEP
        };
        self.alloc.heap().set(h, ACTION, action);
    }

    fn prepare_alive(&self, h: Handle) {
        let heap = self.alloc.heap();
        heap.set(h, IS_NEW, false);
        let action =
            if self.decay(h) > 0 || self.rule.survives(self.live_neighbors(self.cell_of(h))) { KEEP } else { DIE };
        heap.set(h, ACTION, action);
    }

    fn update_candidate(&self, h: Handle) -> Result<(), AppError> {
        let heap = self.alloc.heap();
        let i = self.cell_of(h);
        match heap.get::<u8>(h, ACTION) {
            SPAWN => {
                let a = self.alloc.allocate(self.alive, i as u64)?;
                self.init_agent(a, i, true);
                self.alloc.deallocate(h);
            }
            DIE => {
                heap.set(self.cells[i], AGENT, Handle::NULL);
                self.alloc.deallocate(h);
            }
            _ => {}
        }
        Ok(())
    }

    fn replace_with_candidate(&self, h: Handle, i: usize) -> Result<(), AppError> {
        let c = self.alloc.allocate(self.candidate, i as u64)?;
        self.init_agent(c, i, false);
        self.alloc.deallocate(h);
        Ok(())
    }

    fn update_alive(&self, h: Handle) -> Result<(), AppError> {
        let heap = self.alloc.heap();
        let i = self.cell_of(h);
        if heap.get::<bool>(h, IS_NEW) {
            for j in self.neighborhood(i, false) {
                if self.agent_at(j).is_null() && self.first_new_alive_near(j) == Some(i) {
                    let c = self.alloc.allocate(self.candidate, j as u64)?;
                    self.init_agent(c, j, false);
                }
            }
            return Ok(());
        }
        match self.rule {
            Rule::Classic => {
                if heap.get::<u8>(h, ACTION) == DIE {
                    self.replace_with_candidate(h, i)?;
                }
            }
            Rule::Generation => {
                let d: u8 = heap.get(h, DECAY);
                if d > 0 {
                    heap.set(h, DECAY, d - 1);
                    if d == 1 {
                        self.replace_with_candidate(h, i)?;
                    }
                } else if heap.get::<u8>(h, ACTION) == DIE {
                    heap.set(h, DECAY, Rule::DECAY_ITERATIONS);
                }
            }
        }
        Ok(())
    }

    /// The first cell in the 3x3 block around `j` (top to bottom, left to
    /// right) holding a live cell created this iteration.
    fn first_new_alive_near(&self, j: usize) -> Option<usize> {
        let heap = self.alloc.heap();
        self.neighborhood(j, true).find(|&k| {
            let a = self.agent_at(k);
            !a.is_null() && a.type_id() == self.alive && heap.get::<bool>(a, IS_NEW)
        })
    }

    /// Per-cell state, row-major: 0 dead, 1 alive, 1 + remaining decay
    /// iterations for a dying cell.
    pub fn states(&self) -> Vec<u16> {
        (0..self.cells.len())
            .map(|i| {
                let a = self.agent_at(i);
                if a.is_null() || a.type_id() != self.alive {
                    0
                } else {
                    1 + self.decay(a) as u16
                }
            })
            .collect()
    }

    pub fn pattern(&self) -> Pattern {
        let cells = self.states().iter().map(|&s| s == 1).collect();
        Pattern { width: self.width, height: self.height, cells }
    }

    /// Coordinates of live (not dying) cells, row-major order.
    pub fn alive_cells(&self) -> Vec<(usize, usize)> {
        self.pattern().alive()
    }
}

impl Simulation for Gol {
    fn name(&self) -> &'static str {
        "gol"
    }

    fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    fn step(&mut self) -> Result<(), AppError> {
        let (a, g) = (&self.alloc, &*self);
        a.parallel_do(g.candidate, false, |_, h| g.prepare_candidate(h));
        a.parallel_do(g.alive, false, |_, h| g.prepare_alive(h));
        a.try_parallel_do(g.candidate, false, |_, h| g.update_candidate(h))?;
        a.try_parallel_do(g.alive, false, |_, h| g.update_alive(h))?;
        Ok(())
    }

    fn defrag_types(&self) -> Vec<TypeId> {
        vec![self.alive, self.candidate]
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.cells.len() * 2);
        for (i, s) in self.states().into_iter().enumerate() {
            let a = self.agent_at(i);
            let tag = if !a.is_null() && a.type_id() == self.candidate { 1u8 } else { 0 };
            out.extend_from_slice(&s.to_le_bytes());
            out.push(tag);
        }
        out
    }

    fn check(&self) -> Result<(), AppError> {
        let mut occupied = 0;
        for i in 0..self.cells.len() {
            let a = self.agent_at(i);
            if a.is_null() {
                continue;
            }
            occupied += 1;
            if self.cell_of(a) != i {
                return Err(AppError::Invariant(format!("agent in cell {i} claims cell {}", self.cell_of(a))));
            }
        }
        let live = self.alloc.live_handles(self.alive).len() + self.alloc.live_handles(self.candidate).len();
        if live != occupied {
            return Err(AppError::Invariant(format!("{live} agents but {occupied} occupied cells")));
        }
        Ok(())
    }
}
