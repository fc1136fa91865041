//! Write buffers and buffered memories.
//!
//! Stores performed under the speculative semantics are delayed: they join a
//! write buffer in front of the memory, newest entry first. Loads may read
//! any buffered generation of an address, which models store-to-load
//! forwarding; reading anything but the most recent generation raises a
//! staleness flag.

use crate::lang::{Addr, Value};
use crate::layout::{Cell, Memory};

/// Delayed writes, newest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct WriteBuffer {
    entries: Vec<(Addr, Value)>,
}

impl WriteBuffer {
    pub fn empty() -> WriteBuffer {
        WriteBuffer::default()
    }

    pub fn from_entries(newest_first: Vec<(Addr, Value)>) -> WriteBuffer {
        WriteBuffer { entries: newest_first }
    }

    pub fn push(&mut self, addr: Addr, value: Value) {
        self.entries.insert(0, (addr, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of buffered writes for one address.
    pub fn count_for(&self, addr: Addr) -> usize {
        self.entries.iter().filter(|(a, _)| *a == addr).count()
    }

    /// Buffered addresses, newest first.
    pub fn addrs(&self) -> impl Iterator<Item = Addr> + '_ {
        self.entries.iter().map(|(a, _)| *a)
    }

    fn iter(&self) -> std::slice::Iter<'_, (Addr, Value)> {
        self.entries.iter()
    }
}

/// A memory behind a write buffer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BufferedMemory {
    pub buffer: WriteBuffer,
    pub memory: Memory,
}

impl BufferedMemory {
    pub fn new(memory: Memory) -> BufferedMemory {
        BufferedMemory { buffer: WriteBuffer::empty(), memory }
    }

    pub fn with_buffer(buffer: WriteBuffer, memory: Memory) -> BufferedMemory {
        BufferedMemory { buffer, memory }
    }

    /// Reads the `n`-th most recent value for `addr`. The flag is false only
    /// when the result is the most recent value for that address; indices
    /// past the buffered generations fall through to memory.
    pub fn read(&self, addr: Addr, n: u32) -> (Cell, bool) {
        for (i, (a, v)) in self.buffer.iter().enumerate() {
            if *a != addr {
                continue;
            }
            if n == 0 {
                // Fresh only if this is the newest entry for the address.
                let newest = !self.buffer.iter().take(i).any(|(b, _)| *b == addr);
                debug_assert!(newest, "scan visits newest entries first");
                return (Cell::Val(v.clone()), false);
            }
            // Skipping a buffered generation makes every deeper read stale.
            return (self.read_after(i + 1, addr, n - 1).0, true);
        }
        (self.memory.get(addr).clone(), false)
    }

    fn read_after(&self, skip: usize, addr: Addr, n: u32) -> (Cell, bool) {
        let mut n = n;
        for (a, v) in self.buffer.iter().skip(skip) {
            if *a != addr {
                continue;
            }
            if n == 0 {
                return (Cell::Val(v.clone()), false);
            }
            n -= 1;
        }
        let _ = n;
        (self.memory.get(addr).clone(), false)
    }

    /// Appends a delayed write.
    pub fn buffered_write(&self, addr: Addr, value: Value) -> BufferedMemory {
        let mut next = self.clone();
        next.buffer.push(addr, value);
        next
    }

    /// Folds the buffered writes into the memory, oldest first, so the newest
    /// write for each address wins.
    pub fn commit(&self) -> Memory {
        let mut mem = self.memory.clone();
        for (addr, value) in self.buffer.iter().rev() {
            mem = mem.update(*addr, value.clone());
        }
        mem
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_with(addr: Addr, v: Value) -> Memory {
        Memory::all_none(16).update(addr, v)
    }

    #[test]
    fn empty_buffer_reads_memory_fresh() {
        let bm = BufferedMemory::new(mem_with(3, Value::Int(4)));
        assert_eq!(bm.read(3, 0), (Cell::Val(Value::Int(4)), false));
        // Any index falls through to memory on an empty buffer.
        assert_eq!(bm.read(3, 5), (Cell::Val(Value::Int(4)), false));
    }

    #[test]
    fn newest_entry_is_fresh() {
        let bm = BufferedMemory::new(mem_with(3, Value::Int(4))).buffered_write(3, Value::Int(5));
        assert_eq!(bm.read(3, 0), (Cell::Val(Value::Int(5)), false));
    }

    #[test]
    fn deeper_generations_are_stale() {
        // Two buffered writes to the same address: index 1 reaches the older
        // one and is flagged stale.
        let bm = BufferedMemory::new(mem_with(3, Value::Int(4)))
            .buffered_write(3, Value::Int(3))
            .buffered_write(3, Value::Int(5));
        assert_eq!(bm.read(3, 1), (Cell::Val(Value::Int(3)), true));
        assert_eq!(bm.read(3, 2), (Cell::Val(Value::Int(4)), true));
        assert_eq!(bm.read(3, 7), (Cell::Val(Value::Int(4)), true));
    }

    #[test]
    fn unrelated_addresses_do_not_interfere() {
        let bm = BufferedMemory::new(mem_with(3, Value::Int(4)))
            .buffered_write(9, Value::Int(1))
            .buffered_write(3, Value::Int(5))
            .buffered_write(9, Value::Int(2));
        assert_eq!(bm.read(3, 0), (Cell::Val(Value::Int(5)), false));
        assert_eq!(bm.read(9, 0), (Cell::Val(Value::Int(2)), false));
        assert_eq!(bm.read(9, 1), (Cell::Val(Value::Int(1)), true));
    }

    #[test]
    fn commit_folds_oldest_to_newest() {
        let bm = BufferedMemory::new(mem_with(3, Value::Int(4))).buffered_write(3, Value::Int(5));
        assert_eq!(bm.commit().get(3), &Cell::Val(Value::Int(5)));

        let bm = bm.buffered_write(3, Value::Int(6));
        assert_eq!(bm.commit().get(3), &Cell::Val(Value::Int(6)));
        assert_eq!(bm.commit().get(4), &Cell::None);
    }

    #[test]
    fn index_zero_agrees_with_commit() {
        let bm = BufferedMemory::new(mem_with(1, Value::Int(10)))
            .buffered_write(1, Value::Int(11))
            .buffered_write(2, Value::Int(20))
            .buffered_write(1, Value::Int(12));
        let committed = bm.commit();
        for addr in 0..16 {
            assert_eq!(bm.read(addr, 0).0, *committed.get(addr), "addr {addr}");
        }
    }
}
