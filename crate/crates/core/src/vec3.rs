//! Tiny fixed-size vector helpers shared by the geometry code.

use crate::Real;

pub type V3<T> = [T; 3];

#[inline(always)]
pub fn dot<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline(always)]
pub fn add<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline(always)]
pub fn sub<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline(always)]
pub fn scale<T: Real>(a: V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline(always)]
pub fn norm<T: Real>(a: V3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline(always)]
pub fn cross<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize<T: Real>(a: V3<T>) -> Option<V3<T>> {
    let n = norm(a);
    if n > T::zero() && n.is_finite() {
        Some(scale(a, T::one() / n))
    } else {
        None
    }
}

#[inline(always)]
pub fn cast<T: Real>(a: [f64; 3]) -> V3<T> {
    [T::lit(a[0]), T::lit(a[1]), T::lit(a[2])]
}

#[inline(always)]
pub fn to_f64<T: Real>(a: V3<T>) -> [f64; 3] {
    [a[0].as_f64(), a[1].as_f64(), a[2].as_f64()]
}

pub fn is_finite<T: Real>(a: V3<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}
