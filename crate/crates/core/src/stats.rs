//! Small numeric helpers shared by the scoring and aggregation code.

/// Pairwise (tree) summation.
///
/// Blocks of at most 8 values are summed left to right; larger slices are
/// split at `len / 2` and the two halves added. The summation order depends
/// only on the slice length, so results are reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().fold(0.0, |acc, v| acc + v)
    } else {
        let (lo, hi) = values.split_at(values.len() / 2);
        pairwise_sum(lo) + pairwise_sum(hi)
    }
}

/// Arithmetic mean via [`pairwise_sum`], NaN for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Mean of the non-NaN entries, NaN if there are none.
pub fn nan_mean(values: &[f64]) -> f64 {
    let valid: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    mean(&valid)
}

/// Median by selection; averages the two middle values for even lengths.
///
/// Reorders `values`. Returns NaN when empty. Values must not be NaN.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (left, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}
