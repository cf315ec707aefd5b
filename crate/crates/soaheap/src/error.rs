use thiserror::Error;

use crate::registry::TypeId;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry is frozen")]
    Frozen,
    #[error("duplicate type name `{0}`")]
    DuplicateName(String),
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("unknown type id {0}")]
    UnknownType(TypeId),
    #[error("at most 255 types can be registered")]
    TooManyTypes,
    #[error("concrete type `{0}` has no fields")]
    NoFields(String),
    #[error("field `{0}` has unsupported size {1}")]
    BadFieldSize(String, usize),
    #[error("no concrete types registered")]
    NoConcreteTypes,
    #[error("heap size {0} is not a positive multiple of 64")]
    BadHeapSize(usize),
    #[error("type `{name}` is {size} bytes, larger than the {limit}-byte limit (64x the smallest type)")]
    TypeTooLarge { name: String, size: usize, limit: usize },
}

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("out of memory allocating type {type_id} ({allocated} of {requested} handles obtained)")]
    OutOfMemory { type_id: TypeId, requested: usize, allocated: usize },
    #[error("type {0} is abstract or unknown")]
    NotAllocatable(TypeId),
    #[error("registry must be frozen before building an allocator")]
    NotFrozen,
    #[error("invalid allocator config: {0}")]
    Config(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("bitmap `{name}` has {count} inconsistent summary bits, first at level {level} bit {bit}")]
    Summary { name: String, count: usize, level: usize, bit: usize },
    #[error("block {block}: {what}")]
    Block { block: usize, what: String },
    #[error("dangling reference in type {holder} field {field}: {handle:#x}")]
    Dangling { holder: TypeId, field: usize, handle: u64 },
}
