//! Mean / standard-error helpers for two-level (chain x Brownian)
//! Monte-Carlo samples, plus a tiny least-squares fit used by the
//! optimality checks.

use alloc::vec::Vec;

use crate::scalar;

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

/// Plain iid mean and standard error.
pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    if n == 0 {
        return MeanSe {
            mean: f64::NAN,
            se: f64::NAN,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return MeanSe {
            mean,
            se: 0.0,
            count: 1,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    MeanSe {
        mean,
        se: scalar::sqrt(var / n as f64),
        count: n,
    }
}

/// Cluster-robust mean and standard error: samples sharing a chain path
/// are dependent, so the SE is computed from the spread of per-chain
/// means.
pub fn clustered_mean_se(per_chain: &[Vec<f64>]) -> MeanSe {
    let clusters: Vec<&Vec<f64>> = per_chain.iter().filter(|c| !c.is_empty()).collect();
    let n_clusters = clusters.len();
    let total: usize = clusters.iter().map(|c| c.len()).sum();
    if total == 0 {
        return MeanSe {
            mean: f64::NAN,
            se: f64::NAN,
            count: 0,
        };
    }
    let grand = clusters
        .iter()
        .map(|c| c.iter().sum::<f64>())
        .sum::<f64>()
        / total as f64;
    if n_clusters == 1 {
        // single chain: fall back to iid SE over inner samples
        let mut inner = mean_se(clusters[0]);
        inner.count = total;
        return inner;
    }
    // Equal-weight clusters (the drivers use a fixed inner count).
    let cluster_means: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mean_of_means = cluster_means.iter().sum::<f64>() / n_clusters as f64;
    let var = cluster_means
        .iter()
        .map(|m| (m - mean_of_means) * (m - mean_of_means))
        .sum::<f64>()
        / (n_clusters - 1) as f64;
    MeanSe {
        mean: grand,
        se: scalar::sqrt(var / n_clusters as f64),
        count: total,
    }
}

/// Least-squares fit of `y ~ a * x` through the origin, reporting the
/// coefficient and the R-squared of the fit about the mean of `y`.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    debug_assert_eq!(x.len(), y.len());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let y_mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(xv, yv)| {
            let r = yv - a * xv;
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    (a, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    #[test]
    fn iid_mean_se() {
        let m = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m.mean, 2.5);
        // var = 5/3, se = sqrt(5/12)
        assert_relative_eq!(m.se, (5.0f64 / 12.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn clustered_se_sees_between_chain_spread() {
        // Two chains with inner-constant values: iid SE would shrink with
        // inner count, the cluster SE must not.
        let chains = vec![vec![1.0; 100], vec![3.0; 100]];
        let m = clustered_mean_se(&chains);
        assert_relative_eq!(m.mean, 2.0);
        // cluster means 1 and 3: var = 2, se = 1.
        assert_relative_eq!(m.se, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn origin_fit_recovers_coefficient() {
        let x = [1.0, 4.0, 9.0];
        let y = [2.0, 8.0, 18.0];
        let (a, r2) = fit_through_origin(&x, &y);
        assert_relative_eq!(a, 2.0, epsilon = 1e-12);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
    }
}
