//! Synthetic benchmark data: a five-variable structural model with known
//! mechanisms, and a procedural medical-style image set whose attributes
//! (age, sex, BMI) drive ring geometry and brightness.
//!
//! Both generators record their noise draws, so ground-truth counterfactuals
//! can be produced by pinning the noise and re-running the mechanisms.

use crate::error::{Error, Result};
use crate::graph::CausalDag;
use crate::prior::Prior;
use crate::rng::{rng, subrng};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SCM_D: usize = 5;

/// Distribution of the first exogenous variable. The wide variant shifts it
/// to [1, 2], which keeps the product mechanism well away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmVariant {
    Uniform01,
    Uniform12,
}

#[derive(Debug, Clone)]
pub struct ScmDataset {
    /// n x 5 observed values.
    pub values: Array2<f64>,
    /// n x 5 exogenous noise, aligned row for row with `values`.
    pub noise: Array2<f64>,
    pub variant: ScmVariant,
}

/// x0 -> x2 <- x1, x0 -> x3, {x2, x3} -> x4.
pub fn scm_dag() -> CausalDag {
    CausalDag::from_edges(
        vec!["x0".into(), "x1".into(), "x2".into(), "x3".into(), "x4".into()],
        &[(0, 2), (1, 2), (0, 3), (2, 4), (3, 4)],
    )
    .expect("static graph is acyclic")
}

pub fn scm_priors(variant: ScmVariant) -> Vec<Prior> {
    let x0 = match variant {
        ScmVariant::Uniform01 => Prior::Uniform { low: 0.0, high: 1.0 },
        ScmVariant::Uniform12 => Prior::Uniform { low: 1.0, high: 2.0 },
    };
    vec![
        x0,
        Prior::Normal { mean: 1.0, std: 1.0 },
        Prior::StandardNormal,
        Prior::StandardNormal,
        Prior::StandardNormal,
    ]
}

/// Mechanisms applied to one exogenous noise row, honouring interventions:
/// an intervened variable is pinned to its value and its noise ignored.
pub fn scm_run_do(noise: &[f64; SCM_D], interventions: &[(usize, f64)]) -> [f64; SCM_D] {
    let pinned = |i: usize| interventions.iter().find(|(j, _)| *j == i).map(|(_, v)| *v);
    let mut x = [0.0; SCM_D];
    x[0] = pinned(0).unwrap_or(noise[0]);
    x[1] = pinned(1).unwrap_or(noise[1]);
    x[2] = pinned(2).unwrap_or(2.0 * x[0] + x[1] + noise[2]);
    x[3] = pinned(3).unwrap_or(2.0 * x[0] + noise[3]);
    x[4] = pinned(4).unwrap_or(6.0 * x[2] * x[3] + noise[4]);
    x
}

pub fn scm_run(noise: &[f64; SCM_D]) -> [f64; SCM_D] {
    scm_run_do(noise, &[])
}

/// Inverts the mechanisms: recovers the exogenous noise that produced an
/// observed row. Exact because every mechanism is additive in its noise.
pub fn scm_abduct(values: &[f64; SCM_D]) -> [f64; SCM_D] {
    [
        values[0],
        values[1],
        values[2] - 2.0 * values[0] - values[1],
        values[3] - 2.0 * values[0],
        values[4] - 6.0 * values[2] * values[3],
    ]
}

/// Ground-truth counterfactual: abduct the noise, then re-run the mechanisms
/// with the interventions applied.
pub fn scm_counterfactual(values: &[f64; SCM_D], interventions: &[(usize, f64)]) -> [f64; SCM_D] {
    scm_run_do(&scm_abduct(values), interventions)
}

/// Samples one noise row. Draw order is fixed (x0..x4) so a row depends only
/// on its own stream.
fn scm_sample_noise<R: Rng>(variant: ScmVariant, r: &mut R) -> [f64; SCM_D] {
    let u: f64 = r.random();
    let n0 = match variant {
        ScmVariant::Uniform01 => u,
        ScmVariant::Uniform12 => 1.0 + u,
    };
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n1 = 1.0 + std_normal.sample(r);
    let n2 = 2.0 * std_normal.sample(r);
    let n3 = 0.5 * std_normal.sample(r);
    let n4 = 0.1 * std_normal.sample(r);
    [n0, n1, n2, n3, n4]
}

/// Generates `n` rows. Each row uses its own derived stream, so a prefix of a
/// larger dataset equals the smaller dataset with the same seed and the rows
/// can be produced in parallel without changing the output.
pub fn gen_scm(n: usize, variant: ScmVariant, seed: u64) -> ScmDataset {
    let rows: Vec<([f64; SCM_D], [f64; SCM_D])> = (0..n)
        .into_par_iter()
        .map(|row| {
            let mut r = subrng(seed, row as u64);
            let nz = scm_sample_noise(variant, &mut r);
            (scm_run(&nz), nz)
        })
        .collect();
    let mut values = Array2::zeros((n, SCM_D));
    let mut noise = Array2::zeros((n, SCM_D));
    for (row, (x, nz)) in rows.iter().enumerate() {
        for j in 0..SCM_D {
            noise[[row, j]] = nz[j];
            values[[row, j]] = x[j];
        }
    }
    ScmDataset { values, noise, variant }
}

// ---------------------------------------------------------------------------
// Synthetic image benchmark
// ---------------------------------------------------------------------------

pub const IMG_SIDE: usize = 32;
pub const AGE_MIN: u32 = 46;
pub const AGE_MAX: u32 = 81;

/// Every knob of the image generator. Attributes feed geometry and
/// brightness: sex widens the outer ring, age grows the inner dark core, BMI
/// raises overall intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageGenOpts {
    /// Image side length in pixels.
    pub side: usize,
    /// Inclusive integer age range.
    pub age_min: u32,
    pub age_max: u32,
    /// BMI mechanism: base + age_coef * (age - age_ref) + sex_coef * sex + noise.
    pub bmi_base: f64,
    pub bmi_age_ref: f64,
    pub bmi_age_coef: f64,
    pub bmi_sex_coef: f64,
    pub bmi_noise_std: f64,
    /// Outer ring radius: base + sex_coef * sex + noise.
    pub outer_base: f64,
    pub outer_sex_coef: f64,
    pub outer_noise_std: f64,
    /// Inner core radius: base + age_coef * (age - age_min) + noise.
    pub inner_base: f64,
    pub inner_age_coef: f64,
    pub inner_noise_std: f64,
    /// Brightness: clamp(base + bmi_coef * (bmi - bmi_ref), lo, hi).
    pub intensity_base: f64,
    pub intensity_bmi_coef: f64,
    pub intensity_bmi_ref: f64,
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    /// Vertical compression of the elliptical radius.
    pub aspect: f64,
    /// Depth of the dark core dip, as a fraction of local brightness.
    pub core_dip: f64,
    pub pixel_noise_std: f64,
}

impl Default for ImageGenOpts {
    fn default() -> Self {
        Self {
            side: IMG_SIDE,
            age_min: AGE_MIN,
            age_max: AGE_MAX,
            bmi_base: 25.0,
            bmi_age_ref: 60.0,
            bmi_age_coef: 0.12,
            bmi_sex_coef: 3.0,
            bmi_noise_std: 2.0,
            outer_base: 11.0,
            outer_sex_coef: 1.5,
            outer_noise_std: 0.3,
            inner_base: 2.0,
            inner_age_coef: 0.09,
            inner_noise_std: 0.25,
            intensity_base: 0.55,
            intensity_bmi_coef: 0.012,
            intensity_bmi_ref: 25.0,
            intensity_lo: 0.2,
            intensity_hi: 0.95,
            aspect: 1.25,
            core_dip: 0.15,
            pixel_noise_std: 0.01,
        }
    }
}

impl ImageGenOpts {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::Config("image side must be positive".into()));
        }
        if self.age_min > self.age_max {
            return Err(Error::Config(format!(
                "age range [{}, {}] is empty",
                self.age_min, self.age_max
            )));
        }
        if self.outer_base <= 0.0 || self.inner_base <= 0.0 {
            return Err(Error::Config(format!(
                "ring radii must be positive, got outer {} inner {}",
                self.outer_base, self.inner_base
            )));
        }
        for (name, v) in [
            ("bmi_noise_std", self.bmi_noise_std),
            ("outer_noise_std", self.outer_noise_std),
            ("inner_noise_std", self.inner_noise_std),
            ("pixel_noise_std", self.pixel_noise_std),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.intensity_lo <= self.intensity_hi) {
            return Err(Error::Config("intensity clamp range is empty".into()));
        }
        if !(self.aspect > 0.0) {
            return Err(Error::Config(format!(
                "aspect must be positive, got {}",
                self.aspect
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageRecord {
    pub age: f64,
    pub sex: f64,
    pub bmi: f64,
    pub eps_bmi: f64,
    pub eta_outer: f64,
    pub eta_inner: f64,
    pub pixel_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub records: Vec<ImageRecord>,
    /// n x side^2 pixel intensities in [0, 1], rows flattened row-major.
    pub images: Array2<f64>,
    pub side: usize,
    /// Generator settings, kept so counterfactual re-renders stay faithful.
    pub opts: ImageGenOpts,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// BMI mechanism shared by generation and counterfactual re-rendering.
pub fn bmi_mechanism(opts: &ImageGenOpts, age: f64, sex: f64, eps: f64) -> f64 {
    opts.bmi_base
        + opts.bmi_age_coef * (age - opts.bmi_age_ref)
        + opts.bmi_sex_coef * sex
        + eps
}

/// Renders one image. Pixel noise comes from the record's own seed so an
/// identical record renders bit for bit.
pub fn render_image(opts: &ImageGenOpts, rec: &ImageRecord) -> Vec<f64> {
    let side = opts.side;
    let r_out = opts.outer_base + opts.outer_sex_coef * rec.sex + rec.eta_outer;
    let r_in = opts.inner_base + opts.inner_age_coef * (rec.age - opts.age_min as f64)
        + rec.eta_inner;
    let intensity = (opts.intensity_base + opts.intensity_bmi_coef * (rec.bmi - opts.intensity_bmi_ref))
        .clamp(opts.intensity_lo, opts.intensity_hi);
    let c = (side as f64 - 1.0) / 2.0;
    let mut px = vec![0.0; side * side];
    let noise = Normal::new(0.0, opts.pixel_noise_std).unwrap();
    let mut nr = rng(rec.pixel_seed);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            // Elliptical radius; the vertical axis is compressed.
            let reff = (dx * dx + (opts.aspect * dy) * (opts.aspect * dy)).sqrt();
            let body = sigmoid(r_out - reff);
            let core = 1.0 - opts.core_dip * sigmoid(r_in - reff);
            let v = intensity * body * core + noise.sample(&mut nr);
            px[y * side + x] = v.clamp(0.0, 1.0);
        }
    }
    px
}

/// Samples attributes and renders. Age is drawn uniformly from the integer
/// range, sex is a fair coin. Rows render in parallel; per-row streams keep
/// the output independent of the thread count.
pub fn gen_images_with(n: usize, seed: u64, opts: &ImageGenOpts) -> Result<ImageDataset> {
    opts.validate()?;
    let side = opts.side;
    let n_ages = (opts.age_max - opts.age_min + 1) as f64;
    let rows: Vec<(ImageRecord, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|row| {
            let mut r = subrng(seed, row as u64);
            let age =
                opts.age_min as f64 + ((r.random::<f64>() * n_ages).floor()).min(n_ages - 1.0);
            let sex = if r.random::<f64>() < 0.5 { 0.0 } else { 1.0 };
            let std_normal = Normal::new(0.0, 1.0).unwrap();
            let eps_bmi = opts.bmi_noise_std * std_normal.sample(&mut r);
            let eta_outer = opts.outer_noise_std * std_normal.sample(&mut r);
            let eta_inner = opts.inner_noise_std * std_normal.sample(&mut r);
            let pixel_seed: u64 = r.random();
            let rec = ImageRecord {
                age,
                sex,
                bmi: bmi_mechanism(opts, age, sex, eps_bmi),
                eps_bmi,
                eta_outer,
                eta_inner,
                pixel_seed,
            };
            let px = render_image(opts, &rec);
            (rec, px)
        })
        .collect();
    let mut records = Vec::with_capacity(n);
    let mut images = Array2::zeros((n, side * side));
    for (row, (rec, px)) in rows.into_iter().enumerate() {
        for (j, v) in px.iter().enumerate() {
            images[[row, j]] = *v;
        }
        records.push(rec);
    }
    Ok(ImageDataset { records, images, side, opts: *opts })
}

/// [`gen_images_with`] under the default generator settings.
pub fn gen_images(n: usize, seed: u64) -> ImageDataset {
    gen_images_with(n, seed, &ImageGenOpts::default()).expect("default options are valid")
}

/// Ground-truth counterfactual record: pinned noise, intervened attributes,
/// downstream attributes recomputed. `do(bmi)` severs the BMI mechanism;
/// `do(age)`/`do(sex)` propagate into BMI through the pinned noise.
pub fn image_record_do(
    opts: &ImageGenOpts,
    rec: &ImageRecord,
    do_age: Option<f64>,
    do_sex: Option<f64>,
    do_bmi: Option<f64>,
) -> ImageRecord {
    let age = do_age.unwrap_or(rec.age);
    let sex = do_sex.unwrap_or(rec.sex);
    let bmi = do_bmi.unwrap_or_else(|| bmi_mechanism(opts, age, sex, rec.eps_bmi));
    ImageRecord { age, sex, bmi, ..*rec }
}

/// Counterfactual image for one record.
pub fn image_counterfactual(
    opts: &ImageGenOpts,
    rec: &ImageRecord,
    do_age: Option<f64>,
    do_sex: Option<f64>,
    do_bmi: Option<f64>,
) -> Vec<f64> {
    render_image(opts, &image_record_do(opts, rec, do_age, do_sex, do_bmi))
}

/// Splits rows into train/test, stratified over the given labels. Per-label
/// test counts follow the largest-remainder rule so the global test size is
/// exactly `round(test_fraction * n)`.
pub fn stratified_split(
    labels: &[f64],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
    }
    if labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("split labels".into()));
    }
    let n = labels.len();
    let target = (test_fraction * n as f64).round() as usize;
    if target == 0 || target >= n {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} leaves an empty split for {n} rows"
        )));
    }
    // Group row indices by label bits; sort groups for a stable order.
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let key = l.to_bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.sort_by(|a, b| f64::from_bits(a.0).partial_cmp(&f64::from_bits(b.0)).unwrap());

    let mut quotas: Vec<(usize, usize, f64)> = Vec::new(); // (group, floor, remainder)
    for (g, (_, rows)) in groups.iter().enumerate() {
        let exact = test_fraction * rows.len() as f64;
        quotas.push((g, exact.floor() as usize, exact - exact.floor()));
    }
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    // Hand out the leftover seats to the largest remainders; ties go to the
    // smaller label for determinism.
    let mut by_rem: Vec<usize> = (0..quotas.len()).collect();
    by_rem.sort_by(|&a, &b| {
        quotas[b]
            .2
            .partial_cmp(&quotas[a].2)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut extra = vec![0usize; quotas.len()];
    let mut k = 0;
    // Sum of floors never exceeds the rounded target, so only grants remain.
    while assigned < target {
        let g = by_rem[k % by_rem.len()];
        if quotas[g].1 + extra[g] < groups[g].1.len() {
            extra[g] += 1;
            assigned += 1;
        }
        k += 1;
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut r = subrng(seed, 0);
    for (g, (_, rows)) in groups.iter().enumerate() {
        let mut rows = rows.clone();
        use rand::seq::SliceRandom;
        rows.shuffle(&mut r);
        let n_test = quotas[g].1 + extra[g];
        for (i, row) in rows.into_iter().enumerate() {
            if i < n_test {
                test.push(row);
            } else {
                train.push(row);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
