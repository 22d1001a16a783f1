/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending, find the largest `k` with `1 + k z_(k) > sum_{j<=k} z_(j)`,
/// threshold at `tau = (sum_{j<=k} z_(j) - 1) / k`.
pub fn sparsemax_row(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (k, &zk) in sorted.iter().enumerate() {
        cumsum += zk;
        if 1.0 + (k as f64 + 1.0) * zk > cumsum {
            support = k + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    z.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Vector-Jacobian product of sparsemax at output `p`: on the support `S`
/// the Jacobian is `I - 1 1^T / |S|`, zero elsewhere.
pub fn sparsemax_backward(p: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (sum, count) = p
        .iter()
        .zip(grad_out)
        .filter(|(pi, _)| **pi > 0.0)
        .fold((0.0, 0usize), |(s, c), (_, g)| (s + g, c + 1));
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    p.iter()
        .zip(grad_out)
        .map(|(&pi, &g)| if pi > 0.0 { g - mean } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(sparsemax_row(&[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(sparsemax_row(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = sparsemax_row(&[1.2, 1.0, 0.3]);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn backward_sums_to_zero_on_support() {
        let p = sparsemax_row(&[0.9, 0.7, -1.0, 0.8]);
        let g = sparsemax_backward(&p, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g[2], 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
