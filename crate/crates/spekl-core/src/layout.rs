//! Layouts, composed memories and layout randomization.
//!
//! A layout places every identifier at a base address, with non-overlapping
//! footprints and strict user/kernel space separation. User placement is
//! always fixed (packed from address 0 in declaration order); randomization
//! only moves kernel objects. The slot scheme divides kernel space into
//! equally sized slots and assigns each kernel object to the start of a
//! distinct slot, uniformly at random.

use crate::lang::{Addr, Cmd, IdKind, IdName, Identifier, Space, Store, StoreEntry, System, Value};
use num::rational::Ratio;
use num::{One, Zero};
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Exact probability / bound arithmetic.
pub type Rational = Ratio<i64>;

/// Identifier placement. Footprints are derived from the system's sizes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Layout {
    map: BTreeMap<IdName, Addr>,
}

impl Layout {
    pub fn new(map: BTreeMap<IdName, Addr>) -> Layout {
        Layout { map }
    }

    pub fn base(&self, name: &str) -> Option<Addr> {
        self.map.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&IdName, Addr)> {
        self.map.iter().map(|(n, a)| (n, *a))
    }

    /// Addresses occupied by one identifier: `base..base+size` for arrays,
    /// the base alone for procedures.
    pub fn footprint(&self, id: &Identifier) -> Option<std::ops::Range<Addr>> {
        let base = self.base(&id.name)?;
        Some(base..base + id.size)
    }

    /// The identifier (with element offset) occupying an address, if any.
    pub fn resolve<'a>(&self, sys: &'a System, addr: Addr) -> Option<(&'a Identifier, u64)> {
        sys.idents.iter().find_map(|id| {
            let fp = self.footprint(id)?;
            fp.contains(&addr).then(|| (id, addr - fp.start))
        })
    }

    /// True when `addr` falls inside the footprint of an identifier of the
    /// given space and kind.
    pub fn addr_in(&self, sys: &System, addr: Addr, space: Space, kind: IdKind) -> bool {
        self.resolve(sys, addr)
            .map_or(false, |(id, _)| id.space == space && id.kind == kind)
    }

    /// True when `addr` falls inside the footprint of any named capability.
    pub fn addr_in_caps(
        &self,
        sys: &System,
        addr: Addr,
        caps: &std::collections::BTreeSet<IdName>,
    ) -> bool {
        self.resolve(sys, addr).map_or(false, |(id, _)| caps.contains(&id.name))
    }

    /// Checks non-overlap and space separation against a system.
    pub fn is_valid_for(&self, sys: &System) -> bool {
        let mut occupied: Vec<Addr> = Vec::new();
        for id in &sys.idents {
            let Some(fp) = self.footprint(id) else { return false };
            let space_range = match id.space {
                Space::User => 0..sys.kappa_user,
                Space::Kernel => sys.kappa_user..sys.addr_count(),
            };
            if fp.start < space_range.start || fp.end > space_range.end {
                return false;
            }
            for a in fp {
                if occupied.contains(&a) {
                    return false;
                }
                occupied.push(a);
            }
        }
        self.map.len() == sys.idents.len()
    }
}

/// Memory cell content.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    None,
    Val(Value),
    Code(Cmd),
}

/// Total map from addresses to cell contents.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Memory {
    cells: Vec<Cell>,
}

impl Memory {
    pub fn all_none(addr_count: u64) -> Memory {
        Memory { cells: vec![Cell::None; addr_count as usize] }
    }

    pub fn addr_count(&self) -> u64 {
        self.cells.len() as u64
    }

    pub fn get(&self, addr: Addr) -> &Cell {
        &self.cells[addr as usize]
    }

    /// Pointwise update with a value. Updating with a command is forbidden by
    /// construction: memory writes model data stores only.
    pub fn update(&self, addr: Addr, value: Value) -> Memory {
        let mut next = self.clone();
        next.cells[addr as usize] = Cell::Val(value);
        next
    }
}

/// Places a store in memory under a layout: procedure code at its base,
/// array element `k` at `base + k`, `None` everywhere else.
pub fn compose(sys: &System, layout: &Layout, store: &Store) -> Memory {
    let mut mem = Memory::all_none(sys.addr_count());
    for id in &sys.idents {
        let base = layout.base(&id.name).expect("layout covers the store") as usize;
        match store.get(&id.name) {
            Some(StoreEntry::Array(values)) => {
                for (k, v) in values.iter().enumerate() {
                    mem.cells[base + k] = Cell::Val(v.clone());
                }
            }
            Some(StoreEntry::Proc(body)) => {
                mem.cells[base] = Cell::Code(body.clone());
            }
            None => {}
        }
    }
    mem
}

/// Reads a store back from a memory, using the layout for footprints. Array
/// footprints always hold values for memories reachable from a composed
/// start, which the read asserts.
pub fn recover_store(sys: &System, layout: &Layout, mem: &Memory) -> Store {
    let mut store = Store::new();
    for id in &sys.idents {
        let base = layout.base(&id.name).expect("layout covers the system");
        match id.kind {
            IdKind::Array => {
                let values: Vec<Value> = (0..id.size)
                    .map(|k| match mem.get(base + k) {
                        Cell::Val(v) => v.clone(),
                        other => panic!(
                            "array '{}' cell {} holds {:?}, not a value",
                            id.name, k, other
                        ),
                    })
                    .collect();
                store.insert(id.name.clone(), StoreEntry::Array(values));
            }
            IdKind::Procedure => {
                let body = match mem.get(base) {
                    Cell::Code(body) => body.clone(),
                    other => panic!("procedure '{}' cell holds {:?}, not code", id.name, other),
                };
                store.insert(id.name.clone(), StoreEntry::Proc(body));
            }
        }
    }
    store
}

/// Randomization scheme over kernel placements.
#[derive(Clone, Debug)]
pub enum LayoutDistribution {
    /// Kernel space split into `kappa_kernel / theta` slots; each kernel
    /// object goes to the start of a distinct slot, uniformly.
    SlotUniform { theta: u64 },
    /// Explicit finite distribution.
    ExplicitWeighted(Vec<(Layout, Rational)>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistributionError {
    #[error("slot size {theta} does not divide the kernel space size {kappa_kernel}")]
    SlotsDontDivide { theta: u64, kappa_kernel: u64 },
    #[error("slot size {theta} is smaller than the largest kernel object ({max_size})")]
    SlotTooSmall { theta: u64, max_size: u64 },
    #[error("{slots} slots cannot hold {objects} kernel objects")]
    TooFewSlots { slots: u64, objects: u64 },
    #[error("explicit distribution is empty or its probabilities do not sum to 1")]
    BadWeights,
    #[error("layout in the distribution support is invalid for this system")]
    InvalidSupport,
    #[error("supported layouts disagree on user-space placement")]
    UserPlacementNotFixed,
    #[error("support size {size} exceeds the enumeration cap {cap}")]
    SupportTooLarge { size: u64, cap: u64 },
}

/// Fixed user placement: user identifiers packed from address 0 in
/// declaration order.
pub fn fixed_user_placement(sys: &System) -> BTreeMap<IdName, Addr> {
    let mut map = BTreeMap::new();
    let mut next: Addr = 0;
    for id in sys.idents_in(Space::User) {
        map.insert(id.name.clone(), next);
        next += id.size;
    }
    map
}

fn slot_count(sys: &System, theta: u64) -> Result<u64, DistributionError> {
    if theta == 0 || sys.kappa_kernel % theta != 0 {
        return Err(DistributionError::SlotsDontDivide { theta, kappa_kernel: sys.kappa_kernel });
    }
    let max_size = sys.max_kernel_object_size();
    if theta < max_size {
        return Err(DistributionError::SlotTooSmall { theta, max_size });
    }
    let slots = sys.kappa_kernel / theta;
    let objects = sys.kernel_ident_count() as u64;
    if slots < objects {
        return Err(DistributionError::TooFewSlots { slots, objects });
    }
    Ok(slots)
}

/// Validates a distribution against a system.
pub fn validate_distribution(
    sys: &System,
    dist: &LayoutDistribution,
) -> Result<(), DistributionError> {
    match dist {
        LayoutDistribution::SlotUniform { theta } => slot_count(sys, *theta).map(|_| ()),
        LayoutDistribution::ExplicitWeighted(support) => {
            let total: Rational = support.iter().map(|(_, p)| *p).sum();
            if support.is_empty() || !total.is_one() {
                return Err(DistributionError::BadWeights);
            }
            let user = fixed_user_placement(sys);
            for (layout, p) in support {
                if p < &Rational::zero() {
                    return Err(DistributionError::BadWeights);
                }
                if !layout.is_valid_for(sys) {
                    return Err(DistributionError::InvalidSupport);
                }
                for (name, addr) in &user {
                    if layout.base(name) != Some(*addr) {
                        return Err(DistributionError::UserPlacementNotFixed);
                    }
                }
            }
            Ok(())
        }
    }
}

/// Draws one layout. Deterministic for a fixed seed and draw sequence.
pub fn sample_layout(
    sys: &System,
    dist: &LayoutDistribution,
    rng: &mut impl Rng,
) -> Result<Layout, DistributionError> {
    validate_distribution(sys, dist)?;
    match dist {
        LayoutDistribution::SlotUniform { theta } => {
            let slots = slot_count(sys, *theta)?;
            let kernel_ids: Vec<&Identifier> = sys.idents_in(Space::Kernel).collect();
            // Partial Fisher-Yates: the first |kernel_ids| entries of a
            // shuffled slot list form a uniform injective assignment.
            let mut slot_ids: Vec<u64> = (0..slots).collect();
            for i in 0..kernel_ids.len() {
                let j = rng.gen_range(i..slot_ids.len());
                slot_ids.swap(i, j);
            }
            let mut map = fixed_user_placement(sys);
            for (id, slot) in kernel_ids.iter().zip(&slot_ids) {
                map.insert(id.name.clone(), sys.kappa_user + slot * theta);
            }
            Ok(Layout::new(map))
        }
        LayoutDistribution::ExplicitWeighted(support) => {
            // Inverse-CDF over exact weights using a common denominator.
            let denom = support
                .iter()
                .fold(1i64, |acc, (_, p)| num::integer::lcm(acc, *p.denom()));
            let total: i64 = support.iter().map(|(_, p)| p.numer() * (denom / p.denom())).sum();
            let mut pick = rng.gen_range(0..total);
            for (layout, p) in support {
                let w = p.numer() * (denom / p.denom());
                if pick < w {
                    return Ok(layout.clone());
                }
                pick -= w;
            }
            Ok(support.last().expect("non-empty support").0.clone())
        }
    }
}

/// Full support with exact probabilities. Errors out when the support exceeds
/// `cap` layouts.
pub fn enumerate_layouts(
    sys: &System,
    dist: &LayoutDistribution,
    cap: u64,
) -> Result<Vec<(Layout, Rational)>, DistributionError> {
    validate_distribution(sys, dist)?;
    match dist {
        LayoutDistribution::ExplicitWeighted(support) => {
            if support.len() as u64 > cap {
                return Err(DistributionError::SupportTooLarge {
                    size: support.len() as u64,
                    cap,
                });
            }
            Ok(support.clone())
        }
        LayoutDistribution::SlotUniform { theta } => {
            let slots = slot_count(sys, *theta)?;
            let kernel_ids: Vec<&Identifier> = sys.idents_in(Space::Kernel).collect();
            let n = kernel_ids.len() as u64;
            let size: u64 = (0..n).map(|k| slots - k).product();
            if size > cap {
                return Err(DistributionError::SupportTooLarge { size, cap });
            }
            let prob = Rational::new(1, size.max(1) as i64);
            let mut out = Vec::new();
            let mut assignment: Vec<u64> = Vec::new();
            enumerate_assignments(slots, kernel_ids.len(), &mut assignment, &mut |slots_chosen| {
                let mut map = fixed_user_placement(sys);
                for (id, slot) in kernel_ids.iter().zip(slots_chosen) {
                    map.insert(id.name.clone(), sys.kappa_user + slot * theta);
                }
                out.push((Layout::new(map), prob));
            });
            Ok(out)
        }
    }
}

fn enumerate_assignments(
    slots: u64,
    remaining: usize,
    chosen: &mut Vec<u64>,
    emit: &mut impl FnMut(&[u64]),
) {
    if remaining == 0 {
        emit(chosen);
        return;
    }
    for slot in 0..slots {
        if chosen.contains(&slot) {
            continue;
        }
        chosen.push(slot);
        enumerate_assignments(slots, remaining - 1, chosen, emit);
        chosen.pop();
    }
}

/// Closed-form lower bound on the probability that a fixed kernel-address
/// probe misses, under the uniform slot scheme:
/// `min over syscalls of (slots - |kernel ids|) / (slots - |refs|)`.
///
/// Systems without syscalls cannot be probed at all, so the bound is 1.
pub fn delta_lower_bound(sys: &System, theta: u64) -> Result<Rational, DistributionError> {
    let slots = slot_count(sys, theta)? as i64;
    let kernel_objects = sys.kernel_ident_count() as i64;
    let mut best: Option<Rational> = None;
    for body in sys.syscalls.values() {
        let refs = sys
            .refs(body)
            .map_err(|_| DistributionError::InvalidSupport)?;
        let ref_count = refs
            .idents
            .iter()
            .filter(|n| sys.ident(n).map_or(false, |i| i.space == Space::Kernel))
            .count() as i64;
        let bound = Rational::new(slots - kernel_objects, slots - ref_count);
        best = Some(best.map_or(bound, |b: Rational| b.min(bound)));
    }
    Ok(best.unwrap_or_else(Rational::one))
}
