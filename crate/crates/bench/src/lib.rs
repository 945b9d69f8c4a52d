//! Shared inputs for the criterion benches.

use qd_erk::{construct_default, ButcherTableau};

/// Default-parameter tableau of order `p` at `prec` bits.
pub fn tableau(p: usize, prec: u32) -> ButcherTableau {
    construct_default(p, prec).expect("default construction")
}
