use crate::error::{Error, Result};

/// Equal-width histogram over `[min z, max z]`.
///
/// Bins are left-closed, `[a, b)`, except the last, which also holds the
/// maximum. A sample with zero spread gets bins of width `1/n_bins`
/// starting at the common value, so all of its mass lands in the first bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub counts: Vec<u64>,
    pub bin_width: f64,
    pub lower: f64,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Centers and log counts of the nonempty bins.
    pub fn log_counts(&self) -> (Vec<f64>, Vec<f64>) {
        self.centers
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(&x, &c)| (x, (c as f64).ln()))
            .unzip()
    }
}

pub fn build_histogram(z: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins < 2 {
        return Err(Error::domain(format!("histogram needs at least 2 bins, got {n_bins}")));
    }
    if z.is_empty() {
        return Err(Error::domain("histogram of an empty sample"));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("histogram data must be finite, got {bad}")));
    }
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = span / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for &v in z {
        let k = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let centers = (0..n_bins).map(|k| lo + (k as f64 + 0.5) * width).collect();
    Ok(Histogram {
        centers,
        counts,
        bin_width: width,
        lower: lo,
    })
}
