//! Type registry: field layouts, supertype links and block capacities.
//!
//! The registry is built single-threaded and frozen once the heap size is
//! known. Freezing fixes every concrete type's block capacity and the SOA
//! layout of its data segment; afterwards the registry is read-only.

use crate::error::RegistryError;

pub type TypeId = u8;

/// Header bytes in front of every data segment: alloc word, iteration word,
/// type tag plus padding.
pub const HEADER_BYTES: usize = 24;
/// Bytes a source block needs for its forwarding table during defrag.
pub const FORWARDING_BYTES: usize = 64 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Scalar { size: u8 },
    Reference(TypeId),
    Array { elem_size: u8, len: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDescriptor {
    pub index: usize,
    pub name: String,
    pub kind: FieldKind,
}

impl FieldDescriptor {
    /// Element size in bytes.
    pub fn size(&self) -> usize {
        match self.kind {
            FieldKind::Scalar { size } => size as usize,
            FieldKind::Reference(_) => 8,
            FieldKind::Array { elem_size, .. } => elem_size as usize,
        }
    }

    /// Number of elements per object (1 unless this is an array).
    pub fn elements(&self) -> usize {
        match self.kind {
            FieldKind::Array { len, .. } => len as usize,
            _ => 1,
        }
    }

    /// Bytes per object.
    pub fn bytes(&self) -> usize {
        self.size() * self.elements()
    }

    pub fn reference_target(&self) -> Option<TypeId> {
        match self.kind {
            FieldKind::Reference(t) => Some(t),
            _ => None,
        }
    }
}

/// Field declaration passed to `register_type`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

impl Field {
    pub fn scalar(name: &str, size: u8) -> Self {
        Field { name: name.into(), kind: FieldKind::Scalar { size } }
    }

    pub fn reference(name: &str, target: TypeId) -> Self {
        Field { name: name.into(), kind: FieldKind::Reference(target) }
    }

    pub fn array(name: &str, elem_size: u8, len: u16) -> Self {
        Field { name: name.into(), kind: FieldKind::Array { elem_size, len } }
    }
}

#[derive(Debug, Clone)]
pub struct TypeDescriptor {
    pub type_id: TypeId,
    pub name: String,
    pub supertype: Option<TypeId>,
    pub is_abstract: bool,
    pub fields: Vec<FieldDescriptor>,
    pub object_size: usize,
    /// Objects per block; 0 for abstract types and before freeze.
    pub block_capacity: usize,
    /// Start of each field's SOA array inside the data segment.
    soa_offsets: Vec<usize>,
}

impl TypeDescriptor {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Bytes of data segment this type's layout occupies.
    pub fn layout_bytes(&self) -> usize {
        match (self.soa_offsets.last(), self.fields.last()) {
            (Some(off), Some(f)) => off + self.block_capacity * f.bytes(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutPlan {
    pub heap_size: usize,
    pub num_blocks: usize,
    pub smallest_type: TypeId,
    pub data_bytes: usize,
    pub block_bytes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    types: Vec<TypeDescriptor>,
    plan: Option<LayoutPlan>,
}

fn align_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// SOA array offsets for `fields` at the given capacity.
pub fn soa_offsets(fields: &[FieldDescriptor], capacity: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(fields.len());
    let mut cursor = 0;
    for f in fields {
        cursor = align_up(cursor, f.size());
        offsets.push(cursor);
        cursor += capacity * f.bytes();
    }
    offsets
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_type(
        &mut self,
        name: &str,
        supertype: Option<TypeId>,
        is_abstract: bool,
        fields: Vec<Field>,
    ) -> Result<TypeId, RegistryError> {
        if self.plan.is_some() {
            return Err(RegistryError::Frozen);
        }
        if self.types.iter().any(|t| t.name == name) {
            return Err(RegistryError::DuplicateName(name.into()));
        }
        if self.types.len() >= 255 {
            return Err(RegistryError::TooManyTypes);
        }
        let mut all = match supertype {
            Some(s) => self.get(s).ok_or(RegistryError::UnknownType(s))?.fields.clone(),
            None => Vec::new(),
        };
        for f in fields {
            match f.kind {
                FieldKind::Scalar { size } | FieldKind::Array { elem_size: size, .. } => {
                    if ![1, 2, 4, 8].contains(&size) {
                        return Err(RegistryError::BadFieldSize(f.name, size as usize));
                    }
                }
                // Targets may be registered later; `freeze` checks them.
                FieldKind::Reference(t) => {
                    if t == 0 {
                        return Err(RegistryError::UnknownType(0));
                    }
                }
            }
            if let FieldKind::Array { len: 0, .. } = f.kind {
                return Err(RegistryError::BadFieldSize(f.name, 0));
            }
            if all.iter().any(|d: &FieldDescriptor| d.name == f.name) {
                return Err(RegistryError::DuplicateField(f.name));
            }
            all.push(FieldDescriptor { index: all.len(), name: f.name, kind: f.kind });
        }
        if !is_abstract && all.is_empty() {
            return Err(RegistryError::NoFields(name.into()));
        }
        let type_id = self.types.len() as TypeId + 1;
        let object_size = all.iter().map(FieldDescriptor::bytes).sum();
        self.types.push(TypeDescriptor {
            type_id,
            name: name.into(),
            supertype,
            is_abstract,
            fields: all,
            object_size,
            block_capacity: 0,
            soa_offsets: Vec::new(),
        });
        Ok(type_id)
    }

    /// Fixes capacities and layouts. `heap_size` counts smallest objects.
    pub fn freeze(&mut self, heap_size: usize) -> Result<LayoutPlan, RegistryError> {
        if self.plan.is_some() {
            return Err(RegistryError::Frozen);
        }
        if heap_size == 0 || !heap_size.is_multiple_of(64) {
            return Err(RegistryError::BadHeapSize(heap_size));
        }
        let smallest = self
            .types
            .iter()
            .filter(|t| !t.is_abstract)
            .min_by_key(|t| (t.object_size, t.type_id))
            .ok_or(RegistryError::NoConcreteTypes)?;
        let (s_id, s_size) = (smallest.type_id, smallest.object_size);
        for t in &self.types {
            for f in &t.fields {
                if let Some(target) = f.reference_target() {
                    if self.get(target).is_none() {
                        return Err(RegistryError::UnknownType(target));
                    }
                }
            }
        }
        let mut data_bytes = (64 * s_size).max(FORWARDING_BYTES);
        for t in self.types.iter_mut().filter(|t| !t.is_abstract) {
            if t.object_size > 64 * s_size {
                return Err(RegistryError::TypeTooLarge {
                    name: t.name.clone(),
                    size: t.object_size,
                    limit: 64 * s_size,
                });
            }
            t.block_capacity = 64 * s_size / t.object_size;
            t.soa_offsets = soa_offsets(&t.fields, t.block_capacity);
            data_bytes = data_bytes.max(t.layout_bytes());
        }
        let data_bytes = align_up(data_bytes, 8);
        let plan = LayoutPlan {
            heap_size,
            num_blocks: heap_size / 64,
            smallest_type: s_id,
            data_bytes,
            block_bytes: HEADER_BYTES + data_bytes,
        };
        self.plan = Some(plan);
        Ok(plan)
    }

    /// Id the next `register_type` call will return.
    pub fn next_id(&self) -> TypeId {
        self.types.len() as TypeId + 1
    }

    pub fn is_frozen(&self) -> bool {
        self.plan.is_some()
    }

    pub fn plan(&self) -> Option<&LayoutPlan> {
        self.plan.as_ref()
    }

    pub fn get(&self, t: TypeId) -> Option<&TypeDescriptor> {
        (t as usize).checked_sub(1).and_then(|i| self.types.get(i))
    }

    /// Descriptor lookup for ids known to be valid.
    pub fn ty(&self, t: TypeId) -> &TypeDescriptor {
        self.get(t).unwrap_or_else(|| panic!("unknown type id {t}"))
    }

    pub fn by_name(&self, name: &str) -> Option<&TypeDescriptor> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn types(&self) -> &[TypeDescriptor] {
        &self.types
    }

    pub fn concrete_types(&self) -> impl Iterator<Item = &TypeDescriptor> {
        self.types.iter().filter(|t| !t.is_abstract)
    }

    pub fn capacity(&self, t: TypeId) -> usize {
        self.ty(t).block_capacity
    }

    /// Byte offset of (field, slot) inside a data segment.
    pub fn field_location(&self, t: TypeId, field: usize, capacity: usize, slot: usize) -> usize {
        let ty = self.ty(t);
        debug_assert!(field < ty.fields.len(), "field {field} out of range for {}", ty.name);
        debug_assert!(slot < capacity, "slot {slot} >= capacity {capacity}");
        let f = &ty.fields[field];
        let start = if capacity == ty.block_capacity && !ty.soa_offsets.is_empty() {
            ty.soa_offsets[field]
        } else {
            soa_offsets(&ty.fields[..=field], capacity)[field]
        };
        start + slot * f.bytes()
    }

    /// Reflexive-transitive supertype check: is `a` a subtype of `b`?
    pub fn is_subtype(&self, a: TypeId, b: TypeId) -> bool {
        let mut cur = Some(a);
        while let Some(t) = cur {
            if t == b {
                return true;
            }
            cur = self.get(t).and_then(|d| d.supertype);
        }
        false
    }

    /// Concrete types that are `t` or inherit from it.
    pub fn concrete_subtypes(&self, t: TypeId) -> Vec<TypeId> {
        self.concrete_types().filter(|d| self.is_subtype(d.type_id, t)).map(|d| d.type_id).collect()
    }

    /// Every (holder, field) whose declared reference target is `t` or one
    /// of its supertypes. Only concrete holders are listed, since abstract
    /// types own no blocks.
    pub fn reference_bearing_scan_set(&self, t: TypeId) -> Result<Vec<(TypeId, usize)>, RegistryError> {
        if self.get(t).is_none() {
            return Err(RegistryError::UnknownType(t));
        }
        let mut out = Vec::new();
        for holder in self.concrete_types() {
            for f in &holder.fields {
                if let Some(target) = f.reference_target() {
                    if self.is_subtype(t, target) {
                        out.push((holder.type_id, f.index));
                    }
                }
            }
        }
        Ok(out)
    }
}
