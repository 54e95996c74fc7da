//! Communication accounting in transmitted scalars.
//!
//! A broadcast is counted once, not once per recipient.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommCounts {
    pub up_scalars: u64,
    pub up_seed_ids: u64,
    pub down_scalars: u64,
    pub down_seed_ids: u64,
}

impl CommCounts {
    fn add(&mut self, other: &CommCounts) {
        self.up_scalars += other.up_scalars;
        self.up_seed_ids += other.up_seed_ids;
        self.down_scalars += other.down_scalars;
        self.down_seed_ids += other.down_seed_ids;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    rounds: Vec<CommCounts>,
    total: CommCounts,
}

impl CommLedger {
    pub fn record(&mut self, counts: CommCounts) {
        self.total.add(&counts);
        self.rounds.push(counts);
    }

    pub fn per_round(&self) -> &[CommCounts] {
        &self.rounds
    }

    pub fn total(&self) -> CommCounts {
        self.total
    }
}
