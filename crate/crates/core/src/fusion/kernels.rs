//! Per-cell fusion arithmetic in double precision.
//!
//! Map layers are stored in `f32`; the update path loads a cell's state,
//! applies one of these kernels and stores the result back.

/// Within-message average `a = sum / N` of the observations in one cell.
#[inline]
pub fn cell_average(sum: f64, count: u32) -> f64 {
    sum / count as f64
}

/// `theta_t = w * a_t + (1 - w) * theta_{t-1}`.
#[inline]
pub fn exponential(previous: f64, average: f64, weight: f64) -> f64 {
    weight * average + (1.0 - weight) * previous
}

/// Normal posterior over a cell mean with known measurement variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    /// Conjugate update with a batch of `count` observations whose sample
    /// mean is `sample_mean`, each with variance `measurement_variance`:
    ///
    /// ```text
    /// mu_N     = (s_f^2 mu_0 + N s_0^2 mu_ML) / (N s_0^2 + s_f^2)
    /// sigma_N^2 = s_f^2 s_0^2 / (N s_0^2 + s_f^2)
    /// ```
    ///
    /// An empty batch leaves the posterior unchanged.
    #[inline]
    pub fn observe(self, count: u32, sample_mean: f64, measurement_variance: f64) -> Self {
        if count == 0 {
            return self;
        }
        let n = count as f64;
        let denom = n * self.variance + measurement_variance;
        Self {
            mean: (measurement_variance * self.mean + n * self.variance * sample_mean) / denom,
            variance: measurement_variance * self.variance / denom,
        }
    }
}

/// `alpha_t = alpha_{t-1} + sum_i m_i`, classwise.
#[inline]
pub fn dirichlet_accumulate(alpha: &mut [f64], observation_sums: &[f64]) {
    debug_assert_eq!(alpha.len(), observation_sums.len());
    for (a, m) in alpha.iter_mut().zip(observation_sums) {
        *a += m;
    }
}

/// Posterior class probabilities `theta = alpha / sum(alpha)`.
#[inline]
pub fn dirichlet_posterior(alpha: &[f64], theta: &mut [f64]) {
    let total: f64 = alpha.iter().sum();
    for (t, a) in theta.iter_mut().zip(alpha) {
        *t = a / total;
    }
}

/// Height estimate of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightEstimate {
    pub height: f64,
    pub variance: f64,
}

impl HeightEstimate {
    /// First observation of a cell: `h = z_mean`, `var = sigma_z^2 / N`.
    pub fn first(mean_z: f64, count: u32, measurement_variance: f64) -> Self {
        Self {
            height: mean_z,
            variance: measurement_variance / count as f64,
        }
    }

    /// Precision-weighted fusion of the stored height with the mean of `count`
    /// new measurements:
    ///
    /// ```text
    /// h'   = (var * z_mean + (s_z^2 / N) * h) / (var + s_z^2 / N)
    /// var' = var * (s_z^2 / N) / (var + s_z^2 / N)
    /// ```
    pub fn update(self, mean_z: f64, count: u32, measurement_variance: f64) -> Self {
        if count == 0 {
            return self;
        }
        let batch = measurement_variance / count as f64;
        let denom = self.variance + batch;
        Self {
            height: (self.variance * mean_z + batch * self.height) / denom,
            variance: self.variance * batch / denom,
        }
    }
}
