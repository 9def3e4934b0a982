//! Small statistical helpers shared by the analysis and experiment code.

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_slope(&lx, &ly)
}

/// `n` points whose `1 - t` values are log-spaced between `1 - lo` and `1 - hi`.
pub fn boundary_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = ((1.0 - lo).ln(), (1.0 - hi).ln());
    (0..n)
        .map(|i| 1.0 - (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Gaussian tail `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard error of a Bernoulli rate estimate.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Means of `blocks` contiguous, nearly equal chunks of `values`.
pub fn block_means(values: &[f64], blocks: usize) -> Vec<f64> {
    let n = values.len();
    (0..blocks)
        .map(|b| {
            let chunk = &values[b * n / blocks..(b + 1) * n / blocks];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect()
}

/// Block means of `values` that weight every stratum of `keys ∈ [0, 1]`
/// equally: each block averages the means of its non-empty strata.
pub fn stratified_block_means(values: &[f64], keys: &[f64], blocks: usize, strata: usize) -> Vec<f64> {
    assert_eq!(values.len(), keys.len());
    let n = values.len();
    (0..blocks)
        .map(|b| {
            let range = b * n / blocks..(b + 1) * n / blocks;
            let mut acc = vec![(0.0, 0usize); strata];
            for (v, k) in values[range.clone()].iter().zip(&keys[range]) {
                let j = ((k * strata as f64) as usize).min(strata - 1);
                acc[j].0 += v;
                acc[j].1 += 1;
            }
            let means: Vec<f64> = acc.iter().filter(|a| a.1 > 0).map(|a| a.0 / a.1 as f64).collect();
            means.iter().sum::<f64>() / means.len() as f64
        })
        .collect()
}

pub fn is_nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}
