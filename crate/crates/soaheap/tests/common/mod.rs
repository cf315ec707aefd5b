#![allow(dead_code)]

use soaheap::{AllocConfig, Allocator, Field, Registry, TypeId};

/// One 8-byte type ("Small") and one 16-byte type ("Pair") plus an
/// abstract base; Small is the smallest, so Pair gets capacity 32.
pub struct Two {
    pub alloc: Allocator,
    pub small: TypeId,
    pub pair: TypeId,
}

pub fn two_types(heap_size: usize, config: AllocConfig) -> Two {
    let mut r = Registry::new();
    let small = r.register_type("Small", None, false, vec![Field::scalar("v", 8)]).unwrap();
    let pair = r.register_type("Pair", None, false, vec![Field::scalar("a", 8), Field::scalar("b", 8)]).unwrap();
    r.freeze(heap_size).unwrap();
    Two { alloc: Allocator::new(r, config).unwrap(), small, pair }
}

/// Linked-node type with a payload and a self reference.
pub struct Nodes {
    pub alloc: Allocator,
    pub node: TypeId,
    pub holder: TypeId,
}

pub const NODE_ID: usize = 0;
pub const NODE_NEXT: usize = 1;
pub const HOLDER_REF: usize = 0;

pub fn nodes(heap_size: usize, config: AllocConfig) -> Nodes {
    let mut r = Registry::new();
    let node = r.register_type("Node", None, false, vec![Field::scalar("id", 8), Field::reference("next", 1)]).unwrap();
    let holder = r.register_type("Holder", None, false, vec![Field::reference("target", node)]).unwrap();
    r.freeze(heap_size).unwrap();
    Nodes { alloc: Allocator::new(r, config).unwrap(), node, holder }
}

pub fn cfg(workers: usize) -> AllocConfig {
    AllocConfig { workers, ..Default::default() }
}

pub fn cfg_n(workers: usize, n: usize) -> AllocConfig {
    AllocConfig { workers, defrag_n: n, ..Default::default() }
}
