use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator on an independent stream, so sub-tasks (folds, classes,
/// layers) never share random draws.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Index of the first maximum. Scores within `tol` of the running best count
/// as ties and keep the earlier index.
pub(crate) fn argmax_first(scores: &[f64], tol: f64) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if s > b + tol * (1.0 + b.abs().max(s.abs())) {
            best = i;
        }
    }
    best
}

/// Mean and sample (n-1) standard deviation. Values are summed in sorted
/// order so the result does not depend on the order they were produced in.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_first(&[1.0, 1.0, 0.5], 0.0), 0);
        assert_eq!(argmax_first(&[0.0, 2.0, 2.0], 0.0), 1);
        assert_eq!(argmax_first(&[1.0, 1.0 + 1e-15], 1e-9), 0);
        assert_eq!(argmax_first(&[1.0, 1.0 + 1e-15], 0.0), 1);
    }

    #[test]
    fn mean_std_is_order_independent() {
        let a = [0.1, 0.7, 0.3, 0.9, 0.2];
        let b = [0.9, 0.2, 0.1, 0.3, 0.7];
        assert_eq!(mean_std(&a), mean_std(&b));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
