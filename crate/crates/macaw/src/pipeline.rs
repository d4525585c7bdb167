//! End-to-end experiment drivers shared by the CLI and the test suites:
//! the five-variable benchmark (generate, train, sample, counterfactual
//! audit) and the image benchmark (codec, grouped flows, classification,
//! counterfactual sweep, probe).

use crate::codec::KpcaCodec;
use crate::config::{Config, DataKind};
use crate::datasets::{gen_images_with, gen_scm, stratified_split, ImageDataset, ScmDataset};
use crate::error::{Error, Result};
use crate::evalkit::{
    cf_residuals, fit_probe, frechet_distance, gaussian_blur, moments, CfReport, GaussianStats,
    LinearProbe, MomentReport,
};
use crate::flow::MacawModel;
use crate::graph::CausalDag;
use crate::prior::Prior;
use crate::queries::{sample, GroupedModel, Intervention, Posterior};
use crate::rng::derive_seed;
use crate::train::{train, TrainReport};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

/// Stream offset separating model initialization from the trainer's epoch
/// streams, which start at the same master seed.
const INIT_STREAM: u64 = 1 << 40;

fn require_kind(cfg: &Config, kind: DataKind) -> Result<()> {
    if cfg.data.kind != kind {
        return Err(Error::Config(format!(
            "this experiment needs data.kind {kind:?}, config says {:?}",
            cfg.data.kind
        )));
    }
    Ok(())
}

fn slice_scm(ds: &ScmDataset, lo: usize, hi: usize) -> ScmDataset {
    ScmDataset {
        values: ds.values.slice(s![lo..hi, ..]).to_owned(),
        noise: ds.noise.slice(s![lo..hi, ..]).to_owned(),
        variant: ds.variant,
    }
}

/// Benchmark tables: `n` training rows plus `round(test_fraction * n)` test
/// rows drawn further down the same per-row streams, so the training rows do
/// not depend on how many test rows follow.
pub fn scm_datasets(cfg: &Config) -> Result<(ScmDataset, ScmDataset)> {
    require_kind(cfg, DataKind::Scm)?;
    let n = cfg.data.n;
    let n_test = (cfg.data.test_fraction * n as f64).round() as usize;
    let full = gen_scm(n + n_test, cfg.data.variant, cfg.data.seed);
    Ok((slice_scm(&full, 0, n), slice_scm(&full, n, n + n_test)))
}

/// Builds the configured model and fits it on the given rows.
pub fn fit_model(cfg: &Config, rows: &ArrayView2<f64>) -> Result<(MacawModel, TrainReport)> {
    let (dag, priors) = cfg.model_inputs()?;
    let mut model = MacawModel::init(
        dag,
        priors,
        cfg.flow,
        derive_seed(cfg.train.seed, INIT_STREAM),
    )?;
    model.config_echo = cfg.to_toml();
    let report = train(&mut model, rows, &cfg.train)?;
    Ok((model, report))
}

/// Everything the benchmark acceptance checks need from one run.
pub struct ScmExperiment {
    pub model: MacawModel,
    pub train_report: TrainReport,
    pub test: ScmDataset,
    /// Moments of a fresh sample of `eval.sample_n` rows from the model.
    pub sample_moments: MomentReport,
    /// Counterfactual audit of `eval.intervention` over the test rows.
    pub cf: CfReport,
}

pub fn run_scm(cfg: &Config) -> Result<ScmExperiment> {
    let (train_ds, test_ds) = scm_datasets(cfg)?;
    let (model, train_report) = fit_model(cfg, &train_ds.values.view())?;
    let samples = sample(&model, cfg.eval.sample_n, cfg.eval.seed)?;
    let sample_moments = moments(&samples.view())?;
    let iv = Intervention::parse(&cfg.eval.intervention, model.dag())?;
    let cf = cf_residuals(
        &model,
        &test_ds,
        &iv,
        cfg.eval.curve_lo,
        cfg.eval.curve_hi,
        cfg.eval.curve_bins,
    )?;
    Ok(ScmExperiment {
        model,
        train_report,
        test: test_ds,
        sample_moments,
        cf,
    })
}

// ---------------------------------------------------------------------------
// Image benchmark
// ---------------------------------------------------------------------------

/// Index of the first latent column in a group's local table; the shared
/// prefix is [age, sex, bmi].
pub const IMG_SHARED: usize = 3;

/// Generates the image pool and splits it by age so every age keeps the same
/// train share.
pub fn image_datasets(cfg: &Config) -> Result<(ImageDataset, Vec<usize>, Vec<usize>)> {
    require_kind(cfg, DataKind::Images)?;
    let ds = gen_images_with(cfg.data.n, cfg.data.seed, &cfg.data.images)?;
    let ages: Vec<f64> = ds.records.iter().map(|r| r.age).collect();
    let (train_idx, test_idx) =
        stratified_split(&ages, cfg.data.test_fraction, derive_seed(cfg.data.seed, 1))?;
    Ok((ds, train_idx, test_idx))
}

/// Graph and priors for one latent group: age and sex are categorical roots,
/// BMI depends on both, and every latent depends on all three attributes.
pub fn image_group_model_inputs(cfg: &Config, block: usize) -> Result<(CausalDag, Vec<Prior>)> {
    let opts = &cfg.data.images;
    let mut names: Vec<String> = vec!["age".into(), "sex".into(), "bmi".into()];
    for j in 0..block {
        names.push(format!("z{j}"));
    }
    let mut edges = vec![(0usize, 2usize), (1, 2)];
    for j in 0..block {
        for a in 0..IMG_SHARED {
            edges.push((a, IMG_SHARED + j));
        }
    }
    let dag = CausalDag::from_edges(names, &edges)?;
    let ages: Vec<f64> = (opts.age_min..=opts.age_max).map(f64::from).collect();
    let uniform = vec![1.0 / ages.len() as f64; ages.len()];
    let mut priors = vec![
        Prior::Categorical { values: ages, probs: uniform },
        Prior::Categorical { values: vec![0.0, 1.0], probs: vec![0.5, 0.5] },
    ];
    priors.resize(IMG_SHARED + block, Prior::StandardNormal);
    Ok((dag, priors))
}

/// Rows of `[age, sex, bmi, z-scored latent scores...]` for the given subset
/// of the dataset.
pub fn image_table(
    codec: &KpcaCodec,
    ds: &ImageDataset,
    idx: &[usize],
) -> Result<Array2<f64>> {
    let images = ds.images.select(Axis(0), idx);
    let z = codec.encode_z(&images.view())?;
    let mut table = Array2::zeros((idx.len(), IMG_SHARED + z.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        let rec = &ds.records[i];
        table[[r, 0]] = rec.age;
        table[[r, 1]] = rec.sex;
        table[[r, 2]] = rec.bmi;
    }
    table.slice_mut(s![.., IMG_SHARED..]).assign(&z);
    Ok(table)
}

/// Codec plus grouped flow fitted on the training split.
pub struct ImageModel {
    pub codec: KpcaCodec,
    pub model: GroupedModel,
    pub train_reports: Vec<TrainReport>,
    /// Full training table in grouped global layout.
    pub train_table: Array2<f64>,
}

pub fn fit_image_model(
    cfg: &Config,
    ds: &ImageDataset,
    train_idx: &[usize],
) -> Result<ImageModel> {
    let train_images = ds.images.select(Axis(0), train_idx);
    let codec = KpcaCodec::fit(&train_images.view(), cfg.kpca)?;
    let table = image_table(&codec, ds, train_idx)?;
    let groups_n = cfg.kpca.groups;
    let block = cfg.kpca.components / groups_n;
    let (dag, priors) = image_group_model_inputs(cfg, block)?;
    let mut groups = Vec::with_capacity(groups_n);
    let mut train_reports = Vec::with_capacity(groups_n);
    for g in 0..groups_n {
        let mut local = Array2::zeros((table.nrows(), IMG_SHARED + block));
        local
            .slice_mut(s![.., ..IMG_SHARED])
            .assign(&table.slice(s![.., ..IMG_SHARED]));
        let lo = IMG_SHARED + g * block;
        local
            .slice_mut(s![.., IMG_SHARED..])
            .assign(&table.slice(s![.., lo..lo + block]));
        let mut group_cfg = cfg.train.clone();
        group_cfg.seed = derive_seed(cfg.train.seed, g as u64);
        let mut model = MacawModel::init(
            dag.clone(),
            priors.clone(),
            cfg.flow,
            derive_seed(group_cfg.seed, INIT_STREAM),
        )?;
        model.config_echo = cfg.to_toml();
        train_reports.push(train(&mut model, &local.view(), &group_cfg)?);
        groups.push(model);
    }
    Ok(ImageModel {
        codec,
        model: GroupedModel::new(groups, IMG_SHARED)?,
        train_reports,
        train_table: table,
    })
}

/// Age classification of a test table against the predict-the-median
/// baseline.
pub struct ClassReport {
    pub posteriors: Vec<Posterior>,
    pub map_mae: f64,
    pub baseline_mae: f64,
    /// Mean posterior mass within the configured radius of the true age, and
    /// the mean mass outside it.
    pub mass_within: f64,
    pub mass_outside: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn classify_ages(
    cfg: &Config,
    im: &ImageModel,
    test_table: &ArrayView2<f64>,
    train_ages: &[f64],
) -> Result<ClassReport> {
    let opts = &cfg.data.images;
    let candidates: Vec<f64> = (opts.age_min..=opts.age_max).map(f64::from).collect();
    let posteriors = im.model.classify_batch(test_table, 0, &candidates)?;
    let mut sorted = train_ages.to_vec();
    let baseline = median(&mut sorted);
    let mut map_err = 0.0;
    let mut base_err = 0.0;
    let mut mass_in = 0.0;
    for (p, row) in posteriors.iter().zip(test_table.rows()) {
        let truth = row[0];
        map_err += (p.map_value() - truth).abs();
        base_err += (baseline - truth).abs();
        mass_in += p.mass_within(truth, cfg.eval.posterior_radius);
    }
    let n = posteriors.len() as f64;
    Ok(ClassReport {
        map_mae: map_err / n,
        baseline_mae: base_err / n,
        mass_within: mass_in / n,
        mass_outside: 1.0 - mass_in / n,
        posteriors,
    })
}

/// Latent-space realism and effectiveness of a counterfactual age sweep.
pub struct CfSweepReport {
    /// Ages the sweep pinned, in offset order.
    pub alphas: Vec<f64>,
    /// Frechet distance of each counterfactual latent set to the training
    /// latents.
    pub fd_cf: Vec<f64>,
    pub fd_test: f64,
    pub fd_blur: f64,
    /// Probe MAE towards the pinned age, measured on decoded counterfactual
    /// images and keyed by |pinned - observed| gap: close is gap <= 5, far
    /// is 10 <= gap <= 20.
    pub probe_close_mae: f64,
    pub probe_far_mae: f64,
    /// Per-row probe errors and gaps across the whole sweep, for curves.
    pub gaps: Vec<f64>,
    pub probe_errors: Vec<f64>,
}

fn latent_block(table: &ArrayView2<f64>) -> Array2<f64> {
    table.slice(s![.., IMG_SHARED..]).to_owned()
}

pub fn cf_sweep(
    cfg: &Config,
    im: &ImageModel,
    ds: &ImageDataset,
    test_idx: &[usize],
) -> Result<CfSweepReport> {
    let test_table = image_table(&im.codec, ds, test_idx)?;
    let train_lat = latent_block(&im.train_table.view());
    let test_lat = latent_block(&test_table.view());
    let stats_train = GaussianStats::fit(&train_lat.view())?;
    let fd_test = frechet_distance(&stats_train, &GaussianStats::fit(&test_lat.view())?)?;

    // Blurred test images re-encoded through the codec.
    let test_images = ds.images.select(Axis(0), test_idx);
    let blurred = gaussian_blur(&test_images.view(), ds.side, cfg.eval.blur_sigma)?;
    let blur_scores = im.codec.encode_z(&blurred.view())?;
    let fd_blur = frechet_distance(&stats_train, &GaussianStats::fit(&blur_scores.view())?)?;

    // Probe fitted on training latents against true ages.
    let train_ages: Array1<f64> = im.train_table.column(0).to_owned();
    let probe: LinearProbe = fit_probe(
        &train_lat.view(),
        &train_ages.view(),
        cfg.eval.probe_ridge,
        cfg.eval.seed,
    )?;

    let mut test_ages: Vec<f64> = test_table.column(0).to_vec();
    let med = median(&mut test_ages);
    let mut alphas = Vec::new();
    let mut fd_cf = Vec::new();
    let mut gaps = Vec::new();
    let mut probe_errors = Vec::new();
    let mut close = (0.0, 0usize);
    let mut far = (0.0, 0usize);
    for &off in &cfg.eval.cf_age_offsets {
        let alpha = (med + off).round();
        let iv = Intervention::new(vec![(0, alpha)])?;
        let cf = im.model.counterfactual_batch(&test_table.view(), &iv)?;
        let cf_lat = latent_block(&cf.view());
        fd_cf.push(frechet_distance(
            &stats_train,
            &GaussianStats::fit(&cf_lat.view())?,
        )?);
        // The probe judges rendered counterfactuals the same way training
        // images were scored: decode to pixels, re-encode, predict.
        let cf_images = im.codec.decode_z(&cf_lat.view())?;
        let cf_scores = im.codec.encode_z(&cf_images.view())?;
        let preds = probe.predict(&cf_scores.view());
        for (r, p) in preds.iter().enumerate() {
            let gap = (alpha - test_table[[r, 0]]).abs();
            let err = (p - alpha).abs();
            gaps.push(gap);
            probe_errors.push(err);
            if gap <= 5.0 {
                close.0 += err;
                close.1 += 1;
            } else if (10.0..=20.0).contains(&gap) {
                far.0 += err;
                far.1 += 1;
            }
        }
        alphas.push(alpha);
    }
    if close.1 == 0 || far.1 == 0 {
        return Err(Error::Config(
            "age sweep produced an empty probe bucket; widen cf_age_offsets".into(),
        ));
    }
    Ok(CfSweepReport {
        alphas,
        fd_cf,
        fd_test,
        fd_blur,
        probe_close_mae: close.0 / close.1 as f64,
        probe_far_mae: far.0 / far.1 as f64,
        gaps,
        probe_errors,
    })
}

/// Full image experiment: codec, grouped model, classification report and
/// counterfactual sweep.
pub struct ImageExperiment {
    pub dataset: ImageDataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub model: ImageModel,
    pub class: ClassReport,
    pub sweep: CfSweepReport,
    pub test_table: Array2<f64>,
}

pub fn run_images(cfg: &Config) -> Result<ImageExperiment> {
    let (ds, train_idx, test_idx) = image_datasets(cfg)?;
    let model = fit_image_model(cfg, &ds, &train_idx)?;
    let test_table = image_table(&model.codec, &ds, &test_idx)?;
    let train_ages: Vec<f64> = train_idx.iter().map(|&i| ds.records[i].age).collect();
    let class = classify_ages(cfg, &model, &test_table.view(), &train_ages)?;
    let sweep = cf_sweep(cfg, &model, &ds, &test_idx)?;
    Ok(ImageExperiment {
        dataset: ds,
        train_idx,
        test_idx,
        model,
        class,
        sweep,
        test_table,
    })
}
