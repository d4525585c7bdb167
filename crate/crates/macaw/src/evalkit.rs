//! Evaluation utilities: running moments, Frechet distance between Gaussian
//! fits, a linear ridge probe, separable Gaussian blur, a two-sample
//! Kolmogorov-Smirnov test, and small alignment helpers (Pearson r, binned
//! means).

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sqrt_psd, sym_eigen_desc};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Per-column mean and unbiased variance, accumulated with Welford updates
/// so a single pass stays stable on long columns.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub n: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn moments(data: &ArrayView2<f64>) -> Result<MomentReport> {
    let (n, d) = (data.nrows(), data.ncols());
    if n < 2 {
        return Err(Error::Shape("moments need at least two rows".into()));
    }
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for (r, row) in data.rows().into_iter().enumerate() {
        let k = (r + 1) as f64;
        for j in 0..d {
            let delta = row[j] - mean[j];
            mean[j] += delta / k;
            m2[j] += delta * (row[j] - mean[j]);
        }
    }
    let var = m2.iter().map(|v| v / (n - 1) as f64).collect();
    Ok(MomentReport { n, mean, var })
}

/// Pearson correlation of two equally long slices.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("pearson_r needs two equal slices of length >= 2".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Config("pearson_r is undefined for a constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Means of two aligned value arrays inside equal-width bins of a key array.
#[derive(Debug, Clone)]
pub struct BinnedMeans {
    pub lo: f64,
    pub hi: f64,
    pub count: Vec<usize>,
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
}

pub fn binned_means(
    key: &[f64],
    a: &[f64],
    b: &[f64],
    lo: f64,
    hi: f64,
    n_bins: usize,
) -> Result<BinnedMeans> {
    if key.len() != a.len() || key.len() != b.len() {
        return Err(Error::Shape("binned_means needs equally long inputs".into()));
    }
    if !(hi > lo) || n_bins == 0 {
        return Err(Error::Config("bin range must be non-empty".into()));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut count = vec![0usize; n_bins];
    let mut sum_a = vec![0.0; n_bins];
    let mut sum_b = vec![0.0; n_bins];
    for ((k, va), vb) in key.iter().zip(a).zip(b) {
        if *k < lo || *k >= hi {
            continue;
        }
        let bin = (((k - lo) / width) as usize).min(n_bins - 1);
        count[bin] += 1;
        sum_a[bin] += va;
        sum_b[bin] += vb;
    }
    let mean_of = |sums: &[f64]| {
        sums.iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect()
    };
    Ok(BinnedMeans {
        lo,
        hi,
        mean_a: mean_of(&sum_a),
        mean_b: mean_of(&sum_b),
        count,
    })
}

/// Counterfactual audit of a model against the recorded-noise ground truth
/// of the five-variable benchmark.
#[derive(Debug, Clone)]
pub struct CfReport {
    /// Per variable, sum over rows of |counterfactual - observed|.
    pub abs_residual: Vec<f64>,
    /// Model (a) vs ground truth (b) mean of the sink variable, binned by
    /// the observed value of the first intervened variable.
    pub curve: BinnedMeans,
    /// Per-row correlation between model and ground-truth sink values.
    pub pearson: f64,
}

/// Runs the model's counterfactual over every row of a benchmark table and
/// compares against mechanism-level recomputation with pinned noise.
pub fn cf_residuals(
    model: &crate::flow::MacawModel,
    data: &crate::datasets::ScmDataset,
    intervention: &crate::queries::Intervention,
    curve_lo: f64,
    curve_hi: f64,
    n_bins: usize,
) -> Result<CfReport> {
    use crate::datasets::{scm_counterfactual, SCM_D};
    let n = data.values.nrows();
    if n < 100 {
        return Err(Error::Config(format!(
            "counterfactual audit needs at least 100 rows, got {n}"
        )));
    }
    if intervention.is_empty() {
        return Err(Error::Config("counterfactual audit needs an intervention".into()));
    }
    let cf = crate::queries::counterfactual_batch(model, &data.values.view(), intervention)?;
    let mut abs_residual = vec![0.0; SCM_D];
    let mut model_sink = Vec::with_capacity(n);
    let mut oracle_sink = Vec::with_capacity(n);
    let key_var = intervention.pairs()[0].0;
    let mut key = Vec::with_capacity(n);
    let sink = SCM_D - 1;
    for r in 0..n {
        let mut row = [0.0; SCM_D];
        for j in 0..SCM_D {
            row[j] = data.values[[r, j]];
            abs_residual[j] += (cf[[r, j]] - data.values[[r, j]]).abs();
        }
        let truth = scm_counterfactual(&row, intervention.pairs());
        model_sink.push(cf[[r, sink]]);
        oracle_sink.push(truth[sink]);
        key.push(row[key_var]);
    }
    Ok(CfReport {
        abs_residual,
        curve: binned_means(&key, &model_sink, &oracle_sink, curve_lo, curve_hi, n_bins)?,
        pearson: pearson_r(&model_sink, &oracle_sink)?,
    })
}

/// Mean and unbiased covariance of rows, covariance symmetrized.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianStats {
    pub fn fit(x: &ArrayView2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Shape("covariance needs at least two rows".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rows for a Gaussian fit".into()));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let xc = x - &mean.view().insert_axis(Axis(0));
        let mut cov = xc.t().dot(&xc) / (n - 1) as f64;
        for r in 0..cov.nrows() {
            for c in 0..r {
                let v = 0.5 * (cov[[r, c]] + cov[[c, r]]);
                cov[[r, c]] = v;
                cov[[c, r]] = v;
            }
        }
        Ok(Self { mean, cov })
    }
}

/// Frechet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`.
/// Eigenvalues of the product term are floored at zero before the root.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape("Gaussian fits have different dimensions".into()));
    }
    let dmu = &a.mean - &b.mean;
    let mean_term = dmu.dot(&dmu);
    let sa_sqrt = sqrt_psd(&a.cov.view())?;
    let mut inner = sa_sqrt.dot(&b.cov).dot(&sa_sqrt);
    for r in 0..inner.nrows() {
        for c in 0..r {
            let v = 0.5 * (inner[[r, c]] + inner[[c, r]]);
            inner[[r, c]] = v;
            inner[[c, r]] = v;
        }
    }
    let (vals, _) = sym_eigen_desc(&inner.view())?;
    let cross: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let trace = a.cov.diag().sum() + b.cov.diag().sum();
    Ok((mean_term + trace - 2.0 * cross).max(0.0))
}

/// Linear ridge regression with an intercept, solved in closed form.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

/// The seed is accepted for interface stability with iterative solvers; the
/// closed-form solution ignores it.
pub fn fit_probe(
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    ridge: f64,
    _seed: u64,
) -> Result<LinearProbe> {
    let n = x.nrows();
    if n != y.len() || n < 2 {
        return Err(Error::Shape("probe needs matching row counts >= 2".into()));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::Config("ridge must be non-negative".into()));
    }
    let mean_x = x.mean_axis(Axis(0)).unwrap();
    let mean_y = y.mean().unwrap();
    let xc = x - &mean_x.view().insert_axis(Axis(0));
    let yc = y.mapv(|v| v - mean_y);
    let gram = xc.t().dot(&xc);
    let rhs = xc.t().dot(&yc).insert_axis(Axis(1));
    let w = solve_spd(&gram.view(), ridge, &rhs.view())?;
    let mut weights = w.column(0).to_owned();
    let mut intercept = mean_y - mean_x.dot(&weights);

    // Undo ridge attenuation: rescale so the regression slope of training
    // predictions against targets is one. Probes with no detectable signal
    // keep the raw fit instead of dividing by noise.
    let fitted = xc.dot(&weights);
    let var_y: f64 = yc.iter().map(|v| v * v).sum();
    let slope = yc.dot(&fitted) / var_y;
    if slope > 1e-6 {
        weights /= slope;
        intercept = mean_y - mean_x.dot(&weights);
    }
    Ok(LinearProbe { weights, intercept })
}

impl LinearProbe {
    pub fn predict(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.intercept
    }
}

pub fn mae(pred: &ArrayView1<f64>, target: &ArrayView1<f64>) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Separable Gaussian blur on flattened square images. The kernel radius is
/// `ceil(3 sigma)` and out-of-range taps clamp to the nearest edge pixel.
pub fn gaussian_blur(images: &ArrayView2<f64>, side: usize, sigma: f64) -> Result<Array2<f64>> {
    if images.ncols() != side * side {
        return Err(Error::Shape(format!(
            "{} pixels is not a {side}x{side} image",
            images.ncols()
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for t in -radius..=radius {
        kernel.push((-0.5 * (t as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let n = images.nrows();
    let mut out = images.to_owned();
    let mut tmp = vec![0.0; side * side];
    for r in 0..n {
        {
            let row = out.row(r);
            // Horizontal pass into tmp.
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0;
                    for (ki, t) in (-radius..=radius).enumerate() {
                        let xx = (x as i64 + t).clamp(0, side as i64 - 1) as usize;
                        acc += kernel[ki] * row[y * side + xx];
                    }
                    tmp[y * side + x] = acc;
                }
            }
        }
        // Vertical pass back into the row.
        let mut row = out.row_mut(r);
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (ki, t) in (-radius..=radius).enumerate() {
                    let yy = (y as i64 + t).clamp(0, side as i64 - 1) as usize;
                    acc += kernel[ki] * tmp[yy * side + x];
                }
                row[y * side + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Two-sample Kolmogorov-Smirnov test at level `alpha`. The critical value
/// is the large-sample approximation `c(alpha) sqrt((n + m) / (n m))` with
/// `c(alpha) = sqrt(-ln(alpha / 2) / 2)`.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
}

pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape("KS test needs non-empty samples".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config("alpha must lie in (0, 1)".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KS samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len(), sb.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = sa[i].min(sb[j]);
        while i < n && sa[i] <= t {
            i += 1;
        }
        while j < m && sb[j] <= t {
            j += 1;
        }
        let fa = i as f64 / n as f64;
        let fb = j as f64 / m as f64;
        d = d.max((fa - fb).abs());
    }
    let c = (-((alpha / 2.0).ln()) / 2.0).sqrt();
    let critical = c * (((n + m) as f64) / ((n * m) as f64)).sqrt();
    Ok(KsResult {
        statistic: d,
        critical,
        reject: d > critical,
    })
}
