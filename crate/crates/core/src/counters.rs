use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Tallies of scalar arithmetic by category.
///
/// `mults` counts real-by-real products only; divisions are kept apart in
/// `divs`. `relu_ops` counts one comparison per rectified element.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCounters {
    pub mults: u64,
    pub adds_subs: u64,
    pub abs_ops: u64,
    pub relu_ops: u64,
    pub exps: u64,
    pub divs: u64,
}

impl OpCounters {
    pub const ZERO: OpCounters = OpCounters {
        mults: 0,
        adds_subs: 0,
        abs_ops: 0,
        relu_ops: 0,
        exps: 0,
        divs: 0,
    };

    /// Counts accumulated after `earlier` was taken. Panics if any field
    /// went backwards, which would mean the two snapshots are unrelated.
    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        let sub = |a: u64, b: u64| a.checked_sub(b).expect("counter snapshot out of order");
        OpCounters {
            mults: sub(self.mults, earlier.mults),
            adds_subs: sub(self.adds_subs, earlier.adds_subs),
            abs_ops: sub(self.abs_ops, earlier.abs_ops),
            relu_ops: sub(self.relu_ops, earlier.relu_ops),
            exps: sub(self.exps, earlier.exps),
            divs: sub(self.divs, earlier.divs),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl Add for OpCounters {
    type Output = OpCounters;

    fn add(mut self, rhs: OpCounters) -> OpCounters {
        self += rhs;
        self
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, rhs: OpCounters) {
        self.mults += rhs.mults;
        self.adds_subs += rhs.adds_subs;
        self.abs_ops += rhs.abs_ops;
        self.relu_ops += rhs.relu_ops;
        self.exps += rhs.exps;
        self.divs += rhs.divs;
    }
}
