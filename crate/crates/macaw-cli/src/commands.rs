//! Implementations behind the CLI subcommands. Each one reads what it needs
//! (config, containers, tables), does the work through the library, and
//! writes delimited reports plus any binary artifacts into the output
//! directory.

use std::path::Path;

use macaw::codec::KpcaCodec;
use macaw::config::{Config, DataKind};
use macaw::container;
use macaw::error::{Error, Result};
use macaw::flow::MacawModel;
use macaw::pipeline;
use macaw::queries::{self, GroupedModel, Intervention, Posterior};
use macaw::rng::derive_seed;
use macaw::train::{grad_check, TrainReport};
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::io::{read_table, write_png, write_table};

fn names_as_str(names: &[String]) -> Vec<&str> {
    names.iter().map(String::as_str).collect()
}

fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    let mut rows = Array2::zeros((report.epochs.len(), 3));
    for (i, e) in report.epochs.iter().enumerate() {
        rows[[i, 0]] = e.epoch as f64;
        rows[[i, 1]] = e.train_nll;
        rows[[i, 2]] = e.val_nll;
    }
    write_table(path, &["epoch", "train_nll", "val_nll"], &rows.view())
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    match cfg.data.kind {
        DataKind::Scm => {
            let (train, test) = pipeline::scm_datasets(cfg)?;
            let dag = cfg.graph.build()?;
            let names = names_as_str(dag.names());
            write_table(&out.join("train.tsv"), &names, &train.values.view())?;
            write_table(&out.join("test.tsv"), &names, &test.values.view())?;
            container::save_scm_table(&train, dag.names(), &out.join("train.macw"))?;
            container::save_scm_table(&test, dag.names(), &out.join("test.macw"))?;
            println!(
                "wrote {} train and {} test rows",
                train.values.nrows(),
                test.values.nrows()
            );
        }
        DataKind::Images => {
            let (ds, train_idx, test_idx) = pipeline::image_datasets(cfg)?;
            container::save_images(&ds, &out.join("images.macw"))?;
            let mut attrs = Array2::zeros((ds.records.len(), 4));
            for (r, rec) in ds.records.iter().enumerate() {
                attrs[[r, 0]] = rec.age;
                attrs[[r, 1]] = rec.sex;
                attrs[[r, 2]] = rec.bmi;
                attrs[[r, 3]] = if test_idx.contains(&r) { 1.0 } else { 0.0 };
            }
            write_table(
                &out.join("attrs.tsv"),
                &["age", "sex", "bmi", "in_test"],
                &attrs.view(),
            )?;
            let png_dir = out.join("pngs");
            std::fs::create_dir_all(&png_dir)?;
            for r in 0..ds.images.nrows() {
                let px: Vec<f64> = ds.images.row(r).to_vec();
                write_png(&png_dir.join(format!("img_{r:05}.png")), &px, ds.side)?;
            }
            println!(
                "wrote {} images ({} train / {} test)",
                ds.images.nrows(),
                train_idx.len(),
                test_idx.len()
            );
        }
    }
    Ok(())
}

pub fn train(cfg: &Config, out: &Path) -> Result<()> {
    match cfg.data.kind {
        DataKind::Scm => {
            let (train_ds, test_ds) = pipeline::scm_datasets(cfg)?;
            let (model, report) = pipeline::fit_model(cfg, &train_ds.values.view())?;
            container::save_model(&model, &out.join("model.macw"))?;
            let dag = cfg.graph.build()?;
            write_table(
                &out.join("test.tsv"),
                &names_as_str(dag.names()),
                &test_ds.values.view(),
            )?;
            write_train_report(&out.join("train_report.tsv"), &report)?;
            println!(
                "trained {} epochs, best validation NLL {:.4} at epoch {}",
                report.epochs.len(),
                report.best_val_nll,
                report.best_epoch
            );
        }
        DataKind::Images => {
            let (ds, train_idx, _) = pipeline::image_datasets(cfg)?;
            let im = pipeline::fit_image_model(cfg, &ds, &train_idx)?;
            container::save_grouped(&im.model, &out.join("model.macw"))?;
            container::save_codec(&im.codec, &out.join("codec.macw"))?;
            for (g, report) in im.train_reports.iter().enumerate() {
                write_train_report(&out.join(format!("train_report_g{g}.tsv")), report)?;
                println!(
                    "group {g}: {} epochs, best validation NLL {:.4}",
                    report.epochs.len(),
                    report.best_val_nll
                );
            }
        }
    }
    Ok(())
}

enum AnyModel {
    Single(MacawModel),
    Grouped(GroupedModel),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let kind = container::Container::load(path)?.kind;
    match kind.as_str() {
        "model" => Ok(AnyModel::Single(container::load_model(path)?)),
        "grouped" => Ok(AnyModel::Grouped(container::load_grouped(path)?)),
        other => Err(Error::Config(format!(
            "{} holds a {other:?} artifact, not a model",
            path.display()
        ))),
    }
}

fn grouped_names(gm: &GroupedModel) -> Vec<String> {
    let shared = &gm.groups[0].dag().names()[..gm.n_shared];
    let mut names: Vec<String> = shared.to_vec();
    for (g, m) in gm.groups.iter().enumerate() {
        for n in &m.dag().names()[gm.n_shared..] {
            names.push(format!("g{g}_{n}"));
        }
    }
    names
}

/// Decodes grouped-table latent blocks back to images, one PNG per row.
fn decode_rows(
    codec: &KpcaCodec,
    table: &ArrayView2<f64>,
    n_shared: usize,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let latents = table.slice(s![.., n_shared..]);
    let images = codec.decode_z(&latents)?;
    let side = (images.ncols() as f64).sqrt() as usize;
    for r in 0..images.nrows() {
        let px: Vec<f64> = images.row(r).to_vec();
        write_png(&dir.join(format!("{stem}_{r:04}.png")), &px, side)?;
    }
    Ok(())
}

pub fn sample(
    cfg: &Config,
    out: &Path,
    model: &Path,
    n: Option<usize>,
    codec: Option<&Path>,
    do_spec: Option<&str>,
) -> Result<()> {
    let n = n.unwrap_or(cfg.eval.sample_n);
    let (rows, names) = match load_any(model)? {
        AnyModel::Single(m) => {
            let iv = match do_spec {
                Some(spec) => Intervention::parse(spec, m.dag())?,
                None => Intervention::empty(),
            };
            let x = queries::sample_do(&m, n, cfg.eval.seed, &iv)?;
            (x, m.dag().names().to_vec())
        }
        AnyModel::Grouped(gm) => {
            let iv = match do_spec {
                Some(spec) => Intervention::parse(spec, gm.groups[0].dag())?,
                None => Intervention::empty(),
            };
            let x = gm.sample_do(n, cfg.eval.seed, &iv)?;
            if let Some(codec_path) = codec {
                let codec = container::load_codec(codec_path)?;
                decode_rows(&codec, &x.view(), gm.n_shared, &out.join("pngs"), "sample")?;
            }
            (x, grouped_names(&gm))
        }
    };
    let file = if do_spec.is_some() { "intervened.tsv" } else { "samples.tsv" };
    write_table(&out.join(file), &names_as_str(&names), &rows.view())?;
    println!("wrote {n} rows to {file}");
    Ok(())
}

fn parse_rows(spec: &str, n: usize) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let r: usize = part
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse row index {part:?}")))?;
        if r >= n {
            return Err(Error::Config(format!("row {r} is out of range (table has {n})")));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no row indices in {spec:?}")));
    }
    Ok(rows)
}

pub fn counterfactual(
    cfg: &Config,
    out: &Path,
    model: &Path,
    do_spec: &str,
    data: Option<&Path>,
    rows_spec: Option<&str>,
    codec: Option<&Path>,
) -> Result<()> {
    let (obs, cf, names) = match load_any(model)? {
        AnyModel::Single(m) => {
            let obs = match data {
                Some(path) => {
                    let (header, table) = read_table(path)?;
                    if header != m.dag().names() {
                        return Err(Error::Config(format!(
                            "{} columns {header:?} do not match the model variables",
                            path.display()
                        )));
                    }
                    table
                }
                None => pipeline::scm_datasets(cfg)?.1.values,
            };
            let obs = match rows_spec {
                Some(spec) => obs.select(Axis(0), &parse_rows(spec, obs.nrows())?),
                None => obs,
            };
            let iv = Intervention::parse(do_spec, m.dag())?;
            let cf = queries::counterfactual_batch(&m, &obs.view(), &iv)?;
            (obs, cf, m.dag().names().to_vec())
        }
        AnyModel::Grouped(gm) => {
            let codec_path = codec.ok_or_else(|| {
                Error::Config("grouped counterfactuals need --codec to embed images".into())
            })?;
            let codec = container::load_codec(codec_path)?;
            // Without --data the audit runs over the held-out split.
            let (ds, default_idx) = match data {
                Some(path) => {
                    let ds = container::load_images(path)?;
                    let all = (0..ds.images.nrows()).collect();
                    (ds, all)
                }
                None => {
                    let (ds, _, test_idx) = pipeline::image_datasets(cfg)?;
                    (ds, test_idx)
                }
            };
            let idx: Vec<usize> = match rows_spec {
                Some(spec) => parse_rows(spec, ds.images.nrows())?,
                None => default_idx,
            };
            let obs = pipeline::image_table(&codec, &ds, &idx)?;
            let iv = Intervention::parse(do_spec, gm.groups[0].dag())?;
            let cf = gm.counterfactual_batch(&obs.view(), &iv)?;
            decode_rows(&codec, &obs.view(), gm.n_shared, &out.join("pngs"), "obs")?;
            decode_rows(&codec, &cf.view(), gm.n_shared, &out.join("pngs"), "cf")?;
            (obs, cf, grouped_names(&gm))
        }
    };
    let d = names.len();
    let mut paired = Array2::zeros((obs.nrows(), 2 * d));
    paired.slice_mut(s![.., ..d]).assign(&obs);
    paired.slice_mut(s![.., d..]).assign(&cf);
    let mut header: Vec<String> = names.iter().map(|n| format!("{n}_obs")).collect();
    header.extend(names.iter().map(|n| format!("{n}_cf")));
    write_table(&out.join("obs_cf.tsv"), &names_as_str(&header), &paired.view())?;

    let residuals: Vec<f64> = (0..d)
        .map(|j| {
            obs.column(j)
                .iter()
                .zip(cf.column(j))
                .map(|(a, b)| (a - b).abs())
                .sum()
        })
        .collect();
    let mut lines = vec!["variable\tsum_abs_diff".to_owned()];
    for (j, name) in names.iter().enumerate() {
        lines.push(format!("{name}\t{}", residuals[j]));
    }
    std::fs::write(out.join("residuals.tsv"), lines.join("\n") + "\n")?;
    println!("wrote obs_cf.tsv and residuals.tsv for {} rows", obs.nrows());
    Ok(())
}

fn posterior_table(posteriors: &[Posterior], truths: &[f64]) -> (Vec<String>, Array2<f64>) {
    let cands = &posteriors[0].candidates;
    let mut header = vec!["row".to_owned(), "true".to_owned(), "map".to_owned()];
    header.extend(cands.iter().map(|c| format!("p{c}")));
    let mut table = Array2::zeros((posteriors.len(), 3 + cands.len()));
    for (r, p) in posteriors.iter().enumerate() {
        table[[r, 0]] = r as f64;
        table[[r, 1]] = truths[r];
        table[[r, 2]] = p.map_value();
        for (k, &prob) in p.probs.iter().enumerate() {
            table[[r, 3 + k]] = prob;
        }
    }
    (header, table)
}

/// Mean posterior mass as a function of candidate-minus-truth offset; the
/// plot-ready "posterior vs candidate age" curve.
fn posterior_offset_curve(posteriors: &[Posterior], truths: &[f64]) -> (Vec<i64>, Vec<f64>) {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (p, &truth) in posteriors.iter().zip(truths) {
        for (c, &prob) in p.candidates.iter().zip(&p.probs) {
            let off = (c - truth).round() as i64;
            let e = acc.entry(off).or_insert((0.0, 0));
            e.0 += prob;
            e.1 += 1;
        }
    }
    let offsets: Vec<i64> = acc.keys().copied().collect();
    let means: Vec<f64> = acc.values().map(|(s, c)| s / *c as f64).collect();
    (offsets, means)
}

pub fn classify(cfg: &Config, out: &Path, model: &Path, codec_path: &Path) -> Result<()> {
    let gm = match load_any(model)? {
        AnyModel::Grouped(gm) => gm,
        AnyModel::Single(_) => {
            return Err(Error::Config(
                "classify expects the grouped image model; train with data.kind = \"images\"".into(),
            ))
        }
    };
    let codec = container::load_codec(codec_path)?;
    let (ds, train_idx, test_idx) = pipeline::image_datasets(cfg)?;
    let test_table = pipeline::image_table(&codec, &ds, &test_idx)?;
    let train_ages: Vec<f64> = train_idx.iter().map(|&i| ds.records[i].age).collect();
    let im = pipeline::ImageModel {
        codec,
        model: gm,
        train_reports: Vec::new(),
        train_table: Array2::zeros((0, 0)),
    };
    let report = pipeline::classify_ages(cfg, &im, &test_table.view(), &train_ages)?;
    let truths: Vec<f64> = test_table.column(0).to_vec();
    let (header, table) = posterior_table(&report.posteriors, &truths);
    write_table(&out.join("posteriors.tsv"), &names_as_str(&header), &table.view())?;
    let (offsets, means) = posterior_offset_curve(&report.posteriors, &truths);
    let mut curve = Array2::zeros((offsets.len(), 2));
    for (i, (&o, &m)) in offsets.iter().zip(&means).enumerate() {
        curve[[i, 0]] = o as f64;
        curve[[i, 1]] = m;
    }
    write_table(
        &out.join("posterior_curve.tsv"),
        &["age_offset", "mean_mass"],
        &curve.view(),
    )?;
    let summary = [
        ("map_mae", report.map_mae),
        ("baseline_mae", report.baseline_mae),
        ("mass_within", report.mass_within),
        ("mass_outside", report.mass_outside),
    ];
    let lines: Vec<String> = std::iter::once("metric\tvalue".to_owned())
        .chain(summary.iter().map(|(k, v)| format!("{k}\t{v}")))
        .collect();
    std::fs::write(out.join("summary.tsv"), lines.join("\n") + "\n")?;
    println!(
        "MAP MAE {:.3} vs baseline {:.3}; mass within +-{} yrs {:.3}",
        report.map_mae, report.baseline_mae, cfg.eval.posterior_radius, report.mass_within
    );
    Ok(())
}

fn write_kv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let lines: Vec<String> = std::iter::once("metric\tvalue".to_owned())
        .chain(rows.iter().map(|(k, v)| format!("{k}\t{v}")))
        .collect();
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

pub fn eval(cfg: &Config, out: &Path) -> Result<()> {
    match cfg.data.kind {
        DataKind::Scm => {
            let exp = pipeline::run_scm(cfg)?;
            let dag = cfg.graph.build()?;
            let names = dag.names();
            let mut mom = Array2::zeros((names.len(), 2));
            for j in 0..names.len() {
                mom[[j, 0]] = exp.sample_moments.mean[j];
                mom[[j, 1]] = exp.sample_moments.var[j];
            }
            let mut lines = vec!["variable\tmean\tvar".to_owned()];
            for (j, n) in names.iter().enumerate() {
                lines.push(format!("{n}\t{}\t{}", mom[[j, 0]], mom[[j, 1]]));
            }
            std::fs::write(out.join("moments.tsv"), lines.join("\n") + "\n")?;

            let mut lines = vec!["variable\tsum_abs_diff".to_owned()];
            for (j, n) in names.iter().enumerate() {
                lines.push(format!("{n}\t{}", exp.cf.abs_residual[j]));
            }
            std::fs::write(out.join("cf_residuals.tsv"), lines.join("\n") + "\n")?;

            let curve = &exp.cf.curve;
            let width = (curve.hi - curve.lo) / curve.count.len() as f64;
            let mut rows = Array2::zeros((curve.count.len(), 5));
            for b in 0..curve.count.len() {
                rows[[b, 0]] = curve.lo + b as f64 * width;
                rows[[b, 1]] = curve.lo + (b + 1) as f64 * width;
                rows[[b, 2]] = curve.count[b] as f64;
                rows[[b, 3]] = curve.mean_a[b];
                rows[[b, 4]] = curve.mean_b[b];
            }
            write_table(
                &out.join("cf_curve.tsv"),
                &["bin_lo", "bin_hi", "count", "model_mean", "oracle_mean"],
                &rows.view(),
            )?;
            write_kv(
                &out.join("summary.tsv"),
                &[
                    ("pearson".into(), exp.cf.pearson),
                    ("best_val_nll".into(), exp.train_report.best_val_nll),
                    ("epochs".into(), exp.train_report.epochs.len() as f64),
                    ("train_wall_secs".into(), exp.train_report.wall_secs),
                ],
            )?;
            println!(
                "moments, counterfactual residuals and curve written; pearson {:.4}",
                exp.cf.pearson
            );
        }
        DataKind::Images => {
            let exp = pipeline::run_images(cfg)?;
            let truths: Vec<f64> = exp.test_table.column(0).to_vec();
            let (offsets, means) = posterior_offset_curve(&exp.class.posteriors, &truths);
            let mut curve = Array2::zeros((offsets.len(), 2));
            for (i, (&o, &m)) in offsets.iter().zip(&means).enumerate() {
                curve[[i, 0]] = o as f64;
                curve[[i, 1]] = m;
            }
            write_table(
                &out.join("posterior_curve.tsv"),
                &["age_offset", "mean_mass"],
                &curve.view(),
            )?;

            let mut lines = vec!["set\tfrechet".to_owned()];
            lines.push(format!("test\t{}", exp.sweep.fd_test));
            for (a, fd) in exp.sweep.alphas.iter().zip(&exp.sweep.fd_cf) {
                lines.push(format!("cf_age_{a}\t{fd}"));
            }
            lines.push(format!("blurred\t{}", exp.sweep.fd_blur));
            std::fs::write(out.join("frechet.tsv"), lines.join("\n") + "\n")?;

            // Probe MAE bucketed by age gap in 5-year steps.
            let max_gap = exp.sweep.gaps.iter().cloned().fold(0.0, f64::max);
            let n_bins = (max_gap / 5.0).ceil().max(1.0) as usize;
            let mut sums = vec![(0.0, 0usize); n_bins];
            for (g, e) in exp.sweep.gaps.iter().zip(&exp.sweep.probe_errors) {
                let b = ((g / 5.0).floor() as usize).min(n_bins - 1);
                sums[b].0 += e;
                sums[b].1 += 1;
            }
            let mut rows = Array2::zeros((n_bins, 4));
            for (b, (sum, count)) in sums.iter().enumerate() {
                rows[[b, 0]] = 5.0 * b as f64;
                rows[[b, 1]] = 5.0 * (b + 1) as f64;
                rows[[b, 2]] = *count as f64;
                rows[[b, 3]] = if *count > 0 { sum / *count as f64 } else { f64::NAN };
            }
            write_table(
                &out.join("probe_curve.tsv"),
                &["gap_lo", "gap_hi", "count", "mae"],
                &rows.view(),
            )?;
            write_kv(
                &out.join("summary.tsv"),
                &[
                    ("map_mae".into(), exp.class.map_mae),
                    ("baseline_mae".into(), exp.class.baseline_mae),
                    ("mass_within".into(), exp.class.mass_within),
                    ("mass_outside".into(), exp.class.mass_outside),
                    ("probe_close_mae".into(), exp.sweep.probe_close_mae),
                    ("probe_far_mae".into(), exp.sweep.probe_far_mae),
                ],
            )?;
            println!(
                "classification MAE {:.3} (baseline {:.3}); probe close {:.3} vs far {:.3}",
                exp.class.map_mae,
                exp.class.baseline_mae,
                exp.sweep.probe_close_mae,
                exp.sweep.probe_far_mae
            );
        }
    }
    Ok(())
}

pub fn grad_check_cmd(cfg: &Config, out: &Path, seeds: u64, step: f64) -> Result<()> {
    let (dag, priors) = cfg.model_inputs()?;
    let mut rows = Array2::zeros((seeds as usize, 2));
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut m = MacawModel::init(dag.clone(), priors.clone(), cfg.flow, derive_seed(7, s))?;
        m.perturb_params(derive_seed(11, s), 0.3);
        let x = queries::sample(&m, 1, derive_seed(cfg.eval.seed, s))?;
        let r = grad_check(&m, &x.row(0), step)?;
        rows[[s as usize, 0]] = s as f64;
        rows[[s as usize, 1]] = r.max_rel_err;
        worst = worst.max(r.max_rel_err);
    }
    write_table(&out.join("gradcheck.tsv"), &["seed", "max_rel_err"], &rows.view())?;
    println!("worst relative gradient error over {seeds} seeds: {worst:.3e}");
    Ok(())
}

pub fn manifest(
    cfg: &Config,
    out: &Path,
    command: &str,
    seed_override: Option<u64>,
    threads: usize,
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        version: &'a str,
        container_format: u32,
        threads: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        seed_override: Option<u64>,
        config: &'a Config,
    }
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        container_format: container::VERSION,
        threads,
        seed_override,
        config: cfg,
    };
    let text = toml::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("manifest.toml"), text)?;
    Ok(())
}
