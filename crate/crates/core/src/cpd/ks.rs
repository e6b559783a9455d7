use crate::error::{invalid, Result};

#[inline]
fn split_weight(left: usize, right: usize) -> f64 {
    (left as f64 * right as f64) / ((left + right) as f64).powf(1.5)
}

#[inline]
fn cdf_gap(cl: usize, nl: usize, cr: usize, nr: usize) -> f64 {
    (cl as f64 / nl as f64 - cr as f64 / nr as f64).abs()
}

/// Scaled two-sample CDF distance between `p[r..tau]` and `p[tau..s]`
/// (positions `r+1..=tau` and `tau+1..=s` in one-based terms):
/// `(tau - r)(s - tau) / (s - r)^{3/2} * sup_t |F_left(t) - F_right(t)|`.
///
/// The supremum is attained at a pooled sample value and is evaluated
/// exactly there.
pub fn ks_stat(p: &[f64], r: usize, s: usize, tau: usize) -> Result<f64> {
    if !(r < tau && tau < s && s <= p.len()) {
        return invalid(format!("degenerate split r={r} tau={tau} s={s} for length {}", p.len()));
    }
    let mut left = p[r..tau].to_vec();
    let mut right = p[tau..s].to_vec();
    left.sort_by(f64::total_cmp);
    right.sort_by(f64::total_cmp);
    let (nl, nr) = (left.len(), right.len());
    let (mut i, mut j) = (0, 0);
    let mut sup = 0.0f64;
    while i < nl || j < nr {
        let v = match (left.get(i), right.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < nl && left[i] <= v {
            i += 1;
        }
        while j < nr && right[j] <= v {
            j += 1;
        }
        sup = sup.max(cdf_gap(i, nl, j, nr));
    }
    Ok(split_weight(nl, nr) * sup)
}

/// Dense ranks of `values` (equal values share a level) and the level count.
pub(crate) fn dense_levels(values: &[f64]) -> (Vec<u32>, usize) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let lv = values
        .iter()
        .map(|v| sorted.partition_point(|x| x < v) as u32)
        .collect();
    (lv, sorted.len())
}

/// Scans splits of a level-coded segment. For every admissible split
/// (at least `margin` on each side) computes the scaled CDF distance;
/// splits whose weight alone cannot reach `floor` are skipped. `visit`
/// returns `true` to stop early.
fn scan_splits(lv: &[u32], levels: usize, margin: usize, floor: f64, mut visit: impl FnMut(usize, f64) -> bool) {
    let len = lv.len();
    let mut total = vec![0usize; levels];
    for &g in lv {
        total[g as usize] += 1;
    }
    let mut left = vec![0usize; levels];
    for tau in 1..len {
        left[lv[tau - 1] as usize] += 1;
        if tau < margin || len - tau < margin {
            continue;
        }
        let (nl, nr) = (tau, len - tau);
        let w = split_weight(nl, nr);
        if w < floor {
            continue;
        }
        let (mut cl, mut ct) = (0usize, 0usize);
        let mut sup = 0.0f64;
        for g in 0..levels {
            cl += left[g];
            ct += total[g];
            let d = cdf_gap(cl, nl, ct - cl, nr);
            if d > sup {
                sup = d;
            }
        }
        if visit(tau, w * sup) {
            return;
        }
    }
}

/// Best split of a level-coded segment: `(tau, S)` with `tau` relative to
/// the segment start, ties resolved toward the smallest `tau`.
pub(crate) fn best_split_levels(lv: &[u32], levels: usize, margin: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    scan_splits(lv, levels, margin, f64::NEG_INFINITY, |tau, s| {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((tau, s));
        }
        false
    });
    best
}

/// Whether some admissible split reaches `threshold`.
pub(crate) fn split_reaches(lv: &[u32], levels: usize, margin: usize, threshold: f64) -> bool {
    let mut hit = false;
    scan_splits(lv, levels, margin, threshold, |_, s| {
        hit = s >= threshold;
        hit
    });
    hit
}

/// Best admissible split of positions `(r, s]`: the returned `tau` is the
/// last index of the left part, `r + margin <= tau <= s - margin`, ties go to
/// the smallest `tau`.
pub fn best_split(p: &[f64], r: usize, s: usize, margin: usize) -> Result<(usize, f64)> {
    let margin = margin.max(1);
    if !(r < s && s <= p.len()) || s - r < 2 * margin {
        return invalid(format!("interval ({r}, {s}] admits no split with margin {margin}"));
    }
    let (lv, levels) = dense_levels(&p[r..s]);
    let (tau, stat) = best_split_levels(&lv, levels, margin).expect("admissible split exists");
    Ok((r + tau, stat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_ten_ten_example() {
        let p: Vec<f64> = [vec![0.1; 10], vec![0.9; 10]].concat();
        let v = ks_stat(&p, 0, 20, 10).unwrap();
        assert!((v - 100.0 / 20f64.powf(1.5)).abs() < 1e-15);
        assert!((v - 1.118).abs() < 1e-3);
    }

    #[test]
    fn identical_halves_give_zero() {
        let p = [0.3, 0.7, 0.5, 0.3, 0.7, 0.5];
        assert_eq!(ks_stat(&p, 0, 6, 3).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let p = [0.1, 0.2, 0.3];
        assert!(ks_stat(&p, 0, 3, 0).is_err());
        assert!(ks_stat(&p, 0, 3, 3).is_err());
        assert!(ks_stat(&p, 0, 4, 2).is_err());
    }

    #[test]
    fn level_scan_matches_direct_statistic() {
        let p = [0.01, 0.5, 0.01, 0.3, 0.9, 0.9, 0.2, 0.01, 0.7, 0.4];
        let (lv, g) = dense_levels(&p);
        let mut seen = Vec::new();
        scan_splits(&lv, g, 1, f64::NEG_INFINITY, |tau, s| {
            seen.push((tau, s));
            false
        });
        assert_eq!(seen.len(), 9);
        for (tau, s) in seen {
            assert_eq!(s, ks_stat(&p, 0, 10, tau).unwrap());
        }
    }

    #[test]
    fn constant_sequence_picks_first_admissible_split() {
        let p = [0.5; 12];
        assert_eq!(best_split(&p, 0, 12, 3).unwrap(), (3, 0.0));
        assert_eq!(best_split(&p, 2, 12, 3).unwrap(), (5, 0.0));
        assert!(best_split(&p, 0, 5, 3).is_err());
    }

    #[test]
    fn obvious_boundary_is_found() {
        let p: Vec<f64> = (0..40).map(|i| if i < 25 { 0.01 } else { 0.2 + 0.02 * (i % 30) as f64 }).collect();
        assert_eq!(best_split(&p, 0, 40, 2).unwrap().0, 25);
    }
}
