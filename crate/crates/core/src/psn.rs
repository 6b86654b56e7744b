//! Wrap-around PSN ordering.
//!
//! Two predicates are provided. [`psn_newer`] is the relaxed single-stage
//! comparison a pipeline target can evaluate without branching on the wrap
//! direction; [`psn_newer_exact`] is plain modular arithmetic and is what
//! the rest of the simulator uses. They agree whenever `a` is at or ahead
//! of `b`; they can disagree when `b` is ahead of `a`, see
//! [`relaxed_disagreement`].

use thiserror::Error;

use crate::wire::Psn;

/// Largest number of PSNs that may be outstanding between any two values
/// this module compares.
pub const MAX_INFLIGHT: u32 = (1 << 22) - 1;

const WINDOW: u32 = 1 << 22;
const RELAXED_LOW_MAX: u32 = 0x3F_FFFF;
const RELAXED_HIGH_MIN: u32 = 0x60_0000;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PsnError {
    #[error("PSNs {a} and {b} are not within 2^22 of each other")]
    OutOfWindow { a: Psn, b: Psn },
    #[error("cannot take the minimum of an empty set")]
    EmptyInput,
}

/// Relaxed comparison: `a > b || (a <= 0x3FFFFF && b >= 0x600000)`.
pub fn psn_newer(a: Psn, b: Psn) -> bool {
    let (a, b) = (a.value(), b.value());
    a > b || (a <= RELAXED_LOW_MAX && b >= RELAXED_HIGH_MIN)
}

/// True iff `(a - b) mod 2^24` lies in `[1, 2^22 - 1]`.
///
/// Fails when neither directed distance is below 2^22.
pub fn psn_newer_exact(a: Psn, b: Psn) -> Result<bool, PsnError> {
    let forward = b.distance_to(a);
    let backward = a.distance_to(b);
    if forward >= WINDOW && backward >= WINDOW {
        return Err(PsnError::OutOfWindow { a, b });
    }
    Ok(forward != 0 && forward < WINDOW)
}

/// Wrap-aware `a >= b`.
pub fn psn_ge(a: Psn, b: Psn) -> Result<bool, PsnError> {
    Ok(a == b || psn_newer_exact(a, b)?)
}

/// Wrap-aware `a <= b`.
pub fn psn_le(a: Psn, b: Psn) -> Result<bool, PsnError> {
    psn_ge(b, a)
}

/// Oldest PSN in `values` under the modular order. Ties go to the entry
/// with the smallest index.
pub fn psn_min(values: &[(usize, Psn)]) -> Result<(usize, Psn), PsnError> {
    let (&first, rest) = values.split_first().ok_or(PsnError::EmptyInput)?;
    rest.iter().try_fold(first, |best, &cand| {
        let older = psn_newer_exact(best.1, cand.1)?;
        let tie = best.1 == cand.1 && cand.0 < best.0;
        Ok(if older || tie { cand } else { best })
    })
}

/// Whether the relaxed predicate can differ from the exact one for this
/// in-window pair. Happens only when `b` is strictly ahead of `a` and the
/// pair either straddles the wrap point or sits across the relaxed bands.
pub fn relaxed_disagreement(a: Psn, b: Psn) -> bool {
    match psn_newer_exact(a, b) {
        Ok(exact) => exact != psn_newer(a, b),
        Err(_) => false,
    }
}
