// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard};

/// The global registers of one stage. Every access goes through the lock,
/// so a reader never sees half of an entry's update list applied.
#[derive(Debug)]
pub struct GlobalRegisters {
    regs: Mutex<Vec<u32>>,
    grants: AtomicU64,
}

impl GlobalRegisters {
    pub fn new(h: usize, init: &[u32]) -> Self {
        let mut regs = vec![0; h];
        regs[..init.len()].copy_from_slice(init);
        GlobalRegisters {
            regs: Mutex::new(regs),
            grants: AtomicU64::new(0),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Vec<u32>> {
        self.regs.lock()
    }

    /// Locks the registers and returns the grant's position in this
    /// array's lock order, counted across every sharer of the array.
    pub fn lock_ordered(&self) -> (MutexGuard<'_, Vec<u32>>, u64) {
        let g = self.regs.lock();
        let n = self.grants.fetch_add(1, Ordering::Relaxed);
        (g, n)
    }

    pub fn snapshot(&self) -> Vec<u32> {
        self.regs.lock().clone()
    }

    pub fn get(&self, index: usize) -> u32 {
        self.regs.lock()[index]
    }

    pub fn set(&self, index: usize, value: u32) {
        self.regs.lock()[index] = value;
    }

    pub fn len(&self) -> usize {
        self.regs.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
