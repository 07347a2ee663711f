//! Scalar types usable as path costs.

use std::cmp::Ordering;
use std::fmt::Debug;
use std::ops::Add;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

/// Bits per second in one Mbps. Link costs are reciprocals of spare Mbps.
pub const BPS_PER_MBPS: u64 = 1_000_000;

/// A totally ordered additive scalar for accumulating link costs.
///
/// Costs are never NaN: a link cost is only computed for strictly positive
/// available bandwidth.
pub trait Scalar: Clone + PartialOrd + Zero + Add<Output = Self> + Debug + Send + Sync + 'static {
    /// Cost of crossing a link with `available_bps` of spare capacity,
    /// `1 / (available in Mbps)`.
    fn link_cost(available_bps: u64) -> Self;

    fn to_f64(&self) -> f64;

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.partial_cmp(other).expect("path costs are never NaN")
    }
}

macro_rules! impl_float_scalar {
    ($f:ty) => {
        impl Scalar for $f {
            fn link_cost(available_bps: u64) -> Self {
                debug_assert!(available_bps > 0);
                (BPS_PER_MBPS as $f) / (available_bps as $f)
            }

            fn to_f64(&self) -> f64 {
                *self as f64
            }
        }
    };
}

impl_float_scalar!(f32);
impl_float_scalar!(f64);

impl Scalar for BigRational {
    fn link_cost(available_bps: u64) -> Self {
        debug_assert!(available_bps > 0);
        BigRational::new(BigInt::from(BPS_PER_MBPS), BigInt::from(available_bps))
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::INFINITY)
    }
}

/// A path weight: a finite cost or the infeasible marker, which orders above
/// every finite cost.
#[derive(Clone, Debug, PartialEq)]
pub enum Weight<C> {
    Finite(C),
    Infinite,
}

impl<C: Scalar> Weight<C> {
    pub fn zero() -> Self {
        Weight::Finite(C::zero())
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Weight::Finite(_))
    }

    pub fn finite(&self) -> Option<&C> {
        match self {
            Weight::Finite(c) => Some(c),
            Weight::Infinite => None,
        }
    }

    /// Extends a path weight by one link. Infinite stays infinite.
    pub fn extend(&self, cost: C) -> Self {
        match self {
            Weight::Finite(c) => Weight::Finite(c.clone() + cost),
            Weight::Infinite => Weight::Infinite,
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Weight::Finite(c) => c.to_f64(),
            Weight::Infinite => f64::INFINITY,
        }
    }
}

impl<C: Scalar> Eq for Weight<C> {}

impl<C: Scalar> PartialOrd for Weight<C> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<C: Scalar> Ord for Weight<C> {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Weight::Finite(a), Weight::Finite(b)) => a.total_cmp(b),
            (Weight::Finite(_), Weight::Infinite) => Ordering::Less,
            (Weight::Infinite, Weight::Finite(_)) => Ordering::Greater,
            (Weight::Infinite, Weight::Infinite) => Ordering::Equal,
        }
    }
}
