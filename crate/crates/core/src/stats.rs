//! Batch-means error bars for time averages of autocorrelated series.

/// Mean and standard error of a stationary series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMeans {
    pub mean: f64,
    pub std_error: f64,
    pub batches: usize,
}

/// Default number of batches; large enough for a stable variance estimate,
/// small enough that batches outlast the correlation time.
pub const DEFAULT_BATCHES: usize = 50;

/// Splits `xs` into `batches` contiguous batches of equal length (dropping
/// the remainder at the end) and uses the spread of the batch averages as
/// the error of the overall average.
pub fn batch_means(xs: &[f64], batches: usize) -> BatchMeans {
    let batches = batches.max(2);
    let len = xs.len() / batches;
    assert!(len > 0, "series of length {} too short for {batches} batches", xs.len());
    let avgs: Vec<f64> = xs
        .chunks_exact(len)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    let mean = avgs.iter().sum::<f64>() / batches as f64;
    let var = avgs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    BatchMeans {
        mean,
        std_error: (var / batches as f64).sqrt(),
        batches,
    }
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Median of a non-empty slice (average of the middle pair for even length).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}
