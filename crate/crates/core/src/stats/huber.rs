use crate::Scalar;

/// `sum_i log((1 - eps) / p_i * hit_i + eps)` at a single `eps`.
pub fn huber_objective<T: Scalar>(eps: T, points: impl IntoIterator<Item = (bool, T)>) -> T {
    let one = T::one();
    let mut total = T::zero();
    let mut misses = 0usize;
    for (hit, p) in points {
        if hit {
            total = total + ((one - eps) / p + eps).ln();
        } else {
            misses += 1;
        }
    }
    if misses > 0 {
        total = total + T::of_usize(misses) * eps.ln();
    }
    total
}

/// Maximum of [`huber_objective`] over `eps` in `[0, 1]`.
///
/// The objective is concave in `eps`, so a ternary search to a bracket
/// width below `1e-9` finds the interior optimum; both endpoints are also
/// checked. The value is never negative since `eps = 1` gives zero.
pub fn huber_max<T: Scalar>(points: impl IntoIterator<Item = (bool, T)>) -> T {
    let mut inv_p = Vec::new();
    let mut misses = 0usize;
    for (hit, p) in points {
        if hit {
            inv_p.push(T::one() / p);
        } else {
            misses += 1;
        }
    }
    if inv_p.is_empty() {
        return T::zero();
    }
    let one = T::one();
    let m = T::of_usize(misses);
    let f = |eps: T| -> T {
        let mut s = T::zero();
        for &q in &inv_p {
            s = s + ((one - eps) * q + eps).ln();
        }
        if misses > 0 {
            s = s + m * eps.ln();
        }
        s
    };
    let at_zero = if misses > 0 { T::neg_infinity() } else { f(T::zero()) };
    let mut best = at_zero.max(T::zero());
    let (mut lo, mut hi) = (T::zero(), one);
    let tol = T::of(1e-9).max(T::epsilon() * T::of(4.0));
    while hi - lo > tol {
        let third = (hi - lo) / T::of(3.0);
        let (a, b) = (lo + third, hi - third);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let mid = f((lo + hi) * T::half());
    if mid > best {
        best = mid;
    }
    best
}
