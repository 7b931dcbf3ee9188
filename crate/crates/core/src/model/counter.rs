use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Forward/backward pass tally, safe to share across scoring threads.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicU64,
    backward: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub forward: u64,
    pub backward: u64,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_forward(&self, n: u64) {
        self.forward.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_backward(&self, n: u64) {
        self.backward.fetch_add(n, Ordering::Relaxed);
    }

    pub fn counts(&self) -> PassCounts {
        PassCounts {
            forward: self.forward.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
        }
    }
}

impl std::ops::Add for PassCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            forward: self.forward + rhs.forward,
            backward: self.backward + rhs.backward,
        }
    }
}
