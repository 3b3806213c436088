use std::fmt::Write as _;

use crate::dataio::SeriesDataset;
use crate::error::{Error, Result};
use crate::patching::PatchConfig;

pub const MAX_BINS: usize = 64;

/// `ceil(sqrt(n))`, capped at [`MAX_BINS`].
pub fn default_bins(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, MAX_BINS)
}

/// Equal-width bin index of every value; `None` for a constant series.
fn discretize(x: &[f64], bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = hi - lo;
    if !(width > 0.0) {
        return None;
    }
    Some(
        x.iter()
            .map(|&v| (((v - lo) / width * bins as f64) as usize).min(bins - 1))
            .collect(),
    )
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Histogram estimate of `2 I(X;Y) / (H(X) + H(Y))`, natural log.
///
/// Identical series score 1. Otherwise a constant series scores 0.
pub fn nmi(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if bins == 0 || x.len() < bins {
        return Err(Error::Analysis(format!(
            "{} samples cannot fill {bins} bins",
            x.len()
        )));
    }
    if x == y {
        return Ok(1.0);
    }
    let (Some(bx), Some(by)) = (discretize(x, bins), discretize(y, bins)) else {
        return Ok(0.0);
    };
    let n = x.len() as f64;
    let mut cx = vec![0usize; bins];
    let mut cy = vec![0usize; bins];
    let mut joint = vec![0usize; bins * bins];
    for (&i, &j) in bx.iter().zip(&by) {
        cx[i] += 1;
        cy[j] += 1;
        joint[i * bins + j] += 1;
    }
    let (hx, hy, hxy) = (entropy(&cx, n), entropy(&cy, n), entropy(&joint, n));
    let mi = hx + hy - hxy;
    Ok((2.0 * mi / (hx + hy)).clamp(0.0, 1.0))
}

/// Symmetric pairwise NMI with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct NmiMatrix {
    pub labels: Vec<String>,
    /// Row-major `labels.len()²` entries.
    pub values: Vec<f64>,
    pub bin_count: usize,
}

impl NmiMatrix {
    pub fn from_series(labels: Vec<String>, series: &[Vec<f64>], bins: usize) -> Result<Self> {
        let k = series.len();
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            values[i * k + i] = 1.0;
            for j in i + 1..k {
                let v = nmi(&series[i], &series[j], bins)?;
                values[i * k + j] = v;
                values[j * k + i] = v;
            }
        }
        Ok(NmiMatrix {
            labels,
            values,
            bin_count: bins,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.size();
        if k < 2 {
            return 0.0;
        }
        let total: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        total / (k * (k - 1)) as f64
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let k = self.size();
        (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(l);
            for j in 0..self.size() {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Which series feeds the patch matrix, and how it is cut.
#[derive(Clone, Copy, Debug)]
pub struct PatchNmiSpec {
    pub patch: PatchConfig,
    pub variable: usize,
    /// Histogram bins; `None` uses [`default_bins`] of the sample count.
    pub bins: Option<usize>,
}

/// Sample vector of each patch position: the series is cut into
/// non-overlapping look-back windows, each window is padded and unfolded, and
/// position `j` collects patch `j` of every window.
pub fn patch_position_samples(series: &[f64], patch: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    let (l, p, s) = (patch.lookback, patch.patch_len, patch.stride);
    let windows = series.len() / l;
    if windows == 0 {
        return Err(Error::Analysis(format!(
            "series of {} steps is shorter than the look-back {l}",
            series.len()
        )));
    }
    let n = patch.num_patches();
    let mut out = vec![Vec::with_capacity(windows * p); n];
    for w in series.chunks_exact(l) {
        let at = |i: usize| w[i.min(l - 1)];
        for (j, sample) in out.iter_mut().enumerate() {
            sample.extend((0..p).map(|q| at(j * s + q)));
        }
    }
    Ok(out)
}

/// `(variable matrix, patch matrix)` for one dataset.
pub fn channel_vs_patch_nmi(ds: &SeriesDataset, spec: &PatchNmiSpec) -> Result<(NmiMatrix, NmiMatrix)> {
    if ds.num_vars() < 2 {
        return Err(Error::Analysis("need at least two variables".into()));
    }
    if spec.variable >= ds.num_vars() {
        return Err(Error::Analysis(format!(
            "variable {} out of range ({} variables)",
            spec.variable,
            ds.num_vars()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..ds.num_vars()).map(|v| ds.raw_row(v).to_vec()).collect();
    let bins = spec.bins.unwrap_or_else(|| default_bins(ds.total_steps()));
    let channels = NmiMatrix::from_series(ds.names().to_vec(), &rows, bins)?;

    let samples = patch_position_samples(ds.raw_row(spec.variable), &spec.patch)?;
    let bins = spec.bins.unwrap_or_else(|| default_bins(samples[0].len()));
    let labels = (0..samples.len()).map(|j| format!("patch{j}")).collect();
    let patches = NmiMatrix::from_series(labels, &samples, bins)?;
    Ok((channels, patches))
}
