use rand::seq::index::sample;
use rand::Rng;

/// Iterations needed to draw an all-inlier sample of size `sample_size`
/// with probability `confidence`, given the current inlier ratio.
pub fn adaptive_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64, cap: usize) -> usize {
    if inlier_ratio <= 0.0 {
        return cap;
    }
    let good = inlier_ratio.powi(sample_size as i32);
    if good >= 1.0 {
        return 1;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

pub fn draw<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_counts() {
        assert_eq!(adaptive_iterations(1.0, 3, 0.9999, 1000), 1);
        assert_eq!(adaptive_iterations(0.0, 3, 0.9999, 1000), 1000);
        // 0.5^3 = 0.125 -> ln(1e-4)/ln(0.875) = 68.97
        assert_eq!(adaptive_iterations(0.5, 3, 0.9999, 1000), 69);
        assert_eq!(adaptive_iterations(0.1, 8, 0.9999, 500), 500);
    }
}
