//! Operation counting over a recorded tape.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::Graph;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    per_op: BTreeMap<&'static str, u64>,
}

impl FlopTally {
    pub(crate) fn record(&mut self, op: &'static str, flops: u64) {
        *self.per_op.entry(op).or_default() += flops;
    }

    pub fn total(&self) -> u64 {
        self.per_op.values().sum()
    }

    pub fn get(&self, op: &str) -> u64 {
        self.per_op.get(op).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    /// Sorted by op name; zero-count ops are omitted.
    pub per_op: Vec<(String, u64)>,
    pub total: u64,
}

/// Per-op and total counts; an empty report if the tape was recorded without a tally.
pub fn flop_report(graph: &Graph) -> FlopReport {
    let Some(t) = graph.flop_tally() else {
        return FlopReport { per_op: Vec::new(), total: 0 };
    };
    FlopReport {
        per_op: t
            .per_op
            .iter()
            .filter(|(_, &v)| v > 0)
            .map(|(k, &v)| (String::from(*k), v))
            .collect(),
        total: t.total(),
    }
}
