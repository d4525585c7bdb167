//! Single-file persistence. Layout:
//!
//! ```text
//! "MACW" | version: u32 LE | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The header carries artifact metadata plus a directory of named f64 arrays
//! (byte offset into the payload, element count, shape) and an FNV-1a
//! checksum of the payload. Floats live in the payload as raw little-endian
//! bits, so a save/load round trip is exact to the last ulp.

use crate::codec::{KpcaCodec, KpcaOpts};
use crate::datasets::{ImageDataset, ScmDataset, ScmVariant};
use crate::error::{Error, Result};
use crate::flow::{FlowOpts, MacawModel};
use crate::graph::CausalDag;
use crate::prior::Prior;
use crate::queries::GroupedModel;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MACW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    offset: u64,
    len: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: BTreeMap<String, ArrayEntry>,
    /// FNV-1a 64 over the payload bytes, hex encoded.
    checksum: String,
}

/// An open container: artifact kind, free-form metadata, named arrays.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn put1(&mut self, name: &str, a: &Array1<f64>) {
        self.arrays
            .insert(name.to_string(), (vec![a.len()], a.to_vec()));
    }

    pub fn put2(&mut self, name: &str, a: &Array2<f64>) {
        let flat: Vec<f64> = a.iter().copied().collect();
        self.arrays
            .insert(name.to_string(), (vec![a.nrows(), a.ncols()], flat));
    }

    fn entry(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("missing array {name:?}")))
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f64>> {
        let (shape, data) = self.entry(name)?;
        if shape.len() != 1 {
            return Err(Error::Corrupt(format!(
                "array {name:?} has rank {}, expected 1",
                shape.len()
            )));
        }
        Ok(Array1::from_vec(data.clone()))
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.entry(name)?;
        if shape.len() != 2 {
            return Err(Error::Corrupt(format!(
                "array {name:?} has rank {}, expected 2",
                shape.len()
            )));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.clone())
            .map_err(|e| Error::Corrupt(format!("array {name:?}: {e}")))
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    /// Serializes and writes atomically: a temporary file in the same
    /// directory is renamed over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut dir = BTreeMap::new();
        for (name, (shape, data)) in &self.arrays {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let product: usize = shape.iter().product();
            debug_assert_eq!(product, data.len());
            dir.insert(
                name.clone(),
                ArrayEntry {
                    offset,
                    len: data.len() as u64,
                    shape: shape.clone(),
                },
            );
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: dir,
            checksum: format!("{:016x}", fnv1a(&payload)),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Corrupt(format!("header: {e}")))?;

        let mut bytes = Vec::with_capacity(16 + header_bytes.len() + payload.len());
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        bytes.extend_from_slice(&payload);

        let dir_path = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir_path)?;
        let tmp = dir_path.join(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("container"),
            std::process::id()
        ));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads and fully validates a container file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 {
            return Err(Error::Corrupt(format!(
                "file is {} bytes, smaller than the fixed header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .ok_or_else(|| Error::Corrupt("header length overflows".into()))?;
        if payload_start > bytes.len() {
            return Err(Error::Corrupt(format!(
                "header claims {header_len} bytes but the file ends early"
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Corrupt(format!("header does not parse: {e}")))?;
        let payload = &bytes[payload_start..];
        if format!("{:016x}", fnv1a(payload)) != header.checksum {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }

        // The directory must tile the payload exactly, in order.
        let mut entries: Vec<(&String, &ArrayEntry)> = header.arrays.iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut cursor = 0u64;
        for (name, e) in &entries {
            if e.offset != cursor {
                return Err(Error::Corrupt(format!(
                    "array {name:?} starts at {} but {} expected",
                    e.offset, cursor
                )));
            }
            let product: u64 = e.shape.iter().map(|&s| s as u64).product();
            if product != e.len {
                return Err(Error::Corrupt(format!(
                    "array {name:?} shape {:?} does not match {} elements",
                    e.shape, e.len
                )));
            }
            cursor = cursor
                .checked_add(e.len.checked_mul(8).ok_or_else(|| {
                    Error::Corrupt(format!("array {name:?} length overflows"))
                })?)
                .ok_or_else(|| Error::Corrupt(format!("array {name:?} end overflows")))?;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Corrupt(format!(
                "arrays cover {cursor} bytes, payload has {}",
                payload.len()
            )));
        }

        let mut arrays = BTreeMap::new();
        for (name, e) in entries {
            let start = e.offset as usize;
            let mut data = Vec::with_capacity(e.len as usize);
            for i in 0..e.len as usize {
                let b: [u8; 8] = payload[start + 8 * i..start + 8 * i + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(b));
            }
            arrays.insert(name.clone(), (e.shape.clone(), data));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }
}

// ---------------------------------------------------------------------------
// Artifact-level save/load
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DagMeta {
    names: Vec<String>,
    /// adjacency[j][i] == 1 means an edge j -> i.
    adjacency: Vec<Vec<u8>>,
}

impl DagMeta {
    fn of(dag: &CausalDag) -> Self {
        let adj = dag.adjacency();
        let d = dag.len();
        Self {
            names: dag.names().to_vec(),
            adjacency: (0..d)
                .map(|j| (0..d).map(|i| adj[[j, i]]).collect())
                .collect(),
        }
    }

    fn build(&self) -> Result<CausalDag> {
        let d = self.names.len();
        let mut adj = Array2::zeros((d, d));
        if self.adjacency.len() != d {
            return Err(Error::Corrupt("adjacency size mismatch".into()));
        }
        for (j, row) in self.adjacency.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Corrupt("adjacency row size mismatch".into()));
            }
            for (i, &v) in row.iter().enumerate() {
                adj[[j, i]] = v;
            }
        }
        CausalDag::from_adjacency(self.names.clone(), adj)
            .map_err(|e| Error::Corrupt(format!("stored graph is invalid: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    dag: DagMeta,
    priors: Vec<Prior>,
    opts: FlowOpts,
    config_echo: String,
}

fn model_into_container(model: &MacawModel, c: &mut Container, prefix: &str) {
    for (t, layer) in model.layers.iter().enumerate() {
        for (l, w) in layer.weights.iter().enumerate() {
            c.put2(&format!("{prefix}layer{t}/w{l}"), w);
        }
        for (l, b) in layer.biases.iter().enumerate() {
            c.put1(&format!("{prefix}layer{t}/b{l}"), b);
        }
        c.put2(&format!("{prefix}layer{t}/scale_w"), &layer.scale_w);
        c.put1(&format!("{prefix}layer{t}/scale_b"), &layer.scale_b);
        c.put2(&format!("{prefix}layer{t}/shift_w"), &layer.shift_w);
        c.put1(&format!("{prefix}layer{t}/shift_b"), &layer.shift_b);
    }
    c.put1(&format!("{prefix}norm/mean"), &model.norm_mean);
    c.put1(&format!("{prefix}norm/std"), &model.norm_std);
}

fn assign_like_1(name: &str, target: &mut Array1<f64>, value: Array1<f64>) -> Result<()> {
    if target.len() != value.len() {
        return Err(Error::Corrupt(format!(
            "array {name:?} has {} elements, expected {}",
            value.len(),
            target.len()
        )));
    }
    *target = value;
    Ok(())
}

fn assign_like_2(name: &str, target: &mut Array2<f64>, value: Array2<f64>) -> Result<()> {
    if target.dim() != value.dim() {
        return Err(Error::Corrupt(format!(
            "array {name:?} has shape {:?}, expected {:?}",
            value.dim(),
            target.dim()
        )));
    }
    *target = value;
    Ok(())
}

fn model_from_container(c: &Container, meta: &ModelMeta, prefix: &str) -> Result<MacawModel> {
    let dag = meta.dag.build()?;
    let mut model = MacawModel::init(dag, meta.priors.clone(), meta.opts, 0)
        .map_err(|e| Error::Corrupt(format!("stored model configuration is invalid: {e}")))?;
    for t in 0..model.layers.len() {
        let n_hidden = model.layers[t].weights.len();
        for l in 0..n_hidden {
            let name = format!("{prefix}layer{t}/w{l}");
            let v = c.get2(&name)?;
            assign_like_2(&name, &mut model.layers[t].weights[l], v)?;
            let name = format!("{prefix}layer{t}/b{l}");
            let v = c.get1(&name)?;
            assign_like_1(&name, &mut model.layers[t].biases[l], v)?;
        }
        let name = format!("{prefix}layer{t}/scale_w");
        let v = c.get2(&name)?;
        assign_like_2(&name, &mut model.layers[t].scale_w, v)?;
        let name = format!("{prefix}layer{t}/scale_b");
        let v = c.get1(&name)?;
        assign_like_1(&name, &mut model.layers[t].scale_b, v)?;
        let name = format!("{prefix}layer{t}/shift_w");
        let v = c.get2(&name)?;
        assign_like_2(&name, &mut model.layers[t].shift_w, v)?;
        let name = format!("{prefix}layer{t}/shift_b");
        let v = c.get1(&name)?;
        assign_like_1(&name, &mut model.layers[t].shift_b, v)?;
    }
    let mean = c.get1(&format!("{prefix}norm/mean"))?;
    let std = c.get1(&format!("{prefix}norm/std"))?;
    model
        .set_norm_stats(mean, std)
        .map_err(|e| Error::Corrupt(format!("stored normalization is invalid: {e}")))?;
    model.config_echo = meta.config_echo.clone();
    Ok(model)
}

pub fn save_model(model: &MacawModel, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        dag: DagMeta::of(model.dag()),
        priors: model.priors().to_vec(),
        opts: *model.opts(),
        config_echo: model.config_echo.clone(),
    };
    let mut c = Container::new(
        "model",
        serde_json::to_value(&meta).map_err(|e| Error::Corrupt(e.to_string()))?,
    );
    model_into_container(model, &mut c, "");
    c.save(path)
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(Error::Config(format!(
            "file holds a {:?} artifact, expected {kind:?}",
            c.kind
        )));
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MacawModel> {
    let c = Container::load(path)?;
    expect_kind(&c, "model")?;
    let meta: ModelMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Corrupt(format!("model metadata: {e}")))?;
    model_from_container(&c, &meta, "")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupedMeta {
    n_shared: usize,
    groups: Vec<ModelMeta>,
}

pub fn save_grouped(gm: &GroupedModel, path: &Path) -> Result<()> {
    let meta = GroupedMeta {
        n_shared: gm.n_shared,
        groups: gm
            .groups
            .iter()
            .map(|m| ModelMeta {
                dag: DagMeta::of(m.dag()),
                priors: m.priors().to_vec(),
                opts: *m.opts(),
                config_echo: m.config_echo.clone(),
            })
            .collect(),
    };
    let mut c = Container::new(
        "grouped",
        serde_json::to_value(&meta).map_err(|e| Error::Corrupt(e.to_string()))?,
    );
    for (g, m) in gm.groups.iter().enumerate() {
        model_into_container(m, &mut c, &format!("g{g}/"));
    }
    c.save(path)
}

pub fn load_grouped(path: &Path) -> Result<GroupedModel> {
    let c = Container::load(path)?;
    expect_kind(&c, "grouped")?;
    let meta: GroupedMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Corrupt(format!("grouped metadata: {e}")))?;
    let mut groups = Vec::with_capacity(meta.groups.len());
    for (g, gm) in meta.groups.iter().enumerate() {
        groups.push(model_from_container(&c, gm, &format!("g{g}/"))?);
    }
    GroupedModel::new(groups, meta.n_shared)
        .map_err(|e| Error::Corrupt(format!("stored grouped model is invalid: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodecMeta {
    opts: KpcaOpts,
    gamma: f64,
    k_mean: f64,
    recon_mse_mean: f64,
    recon_mse_max: f64,
}

pub fn save_codec(codec: &KpcaCodec, path: &Path) -> Result<()> {
    let meta = CodecMeta {
        opts: codec.opts,
        gamma: codec.gamma,
        k_mean: codec.k_mean,
        recon_mse_mean: codec.recon_mse_mean,
        recon_mse_max: codec.recon_mse_max,
    };
    let mut c = Container::new(
        "codec",
        serde_json::to_value(&meta).map_err(|e| Error::Corrupt(e.to_string()))?,
    );
    c.put2("anchors", &codec.anchors);
    c.put1("col_means", &codec.col_means);
    c.put1("eigvals", &codec.eigvals);
    c.put2("proj", &codec.proj);
    c.put2("train_scores", &codec.train_scores);
    c.put1("latent_mean", &codec.latent_mean);
    c.put1("latent_std", &codec.latent_std);
    c.put2("dual", &codec.dual);
    c.save(path)
}

pub fn load_codec(path: &Path) -> Result<KpcaCodec> {
    let c = Container::load(path)?;
    expect_kind(&c, "codec")?;
    let meta: CodecMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Corrupt(format!("codec metadata: {e}")))?;
    let codec = KpcaCodec {
        opts: meta.opts,
        gamma: meta.gamma,
        k_mean: meta.k_mean,
        recon_mse_mean: meta.recon_mse_mean,
        recon_mse_max: meta.recon_mse_max,
        anchors: c.get2("anchors")?,
        col_means: c.get1("col_means")?,
        eigvals: c.get1("eigvals")?,
        proj: c.get2("proj")?,
        train_scores: c.get2("train_scores")?,
        latent_mean: c.get1("latent_mean")?,
        latent_std: c.get1("latent_std")?,
        dual: c.get2("dual")?,
    };
    let a = codec.anchors.nrows();
    let cdim = codec.opts.components;
    if codec.proj.dim() != (a, cdim)
        || codec.train_scores.dim() != (a, cdim)
        || codec.dual.dim() != (a, codec.anchors.ncols())
        || codec.col_means.len() != a
        || codec.eigvals.len() != cdim
        || codec.latent_mean.len() != cdim
        || codec.latent_std.len() != cdim
    {
        return Err(Error::Corrupt("codec arrays disagree on dimensions".into()));
    }
    Ok(codec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScmTableMeta {
    variant: String,
    names: Vec<String>,
}

pub fn save_scm_table(ds: &ScmDataset, names: &[String], path: &Path) -> Result<()> {
    let meta = ScmTableMeta {
        variant: match ds.variant {
            ScmVariant::Uniform01 => "uniform01".into(),
            ScmVariant::Uniform12 => "uniform12".into(),
        },
        names: names.to_vec(),
    };
    let mut c = Container::new(
        "scm_table",
        serde_json::to_value(&meta).map_err(|e| Error::Corrupt(e.to_string()))?,
    );
    c.put2("values", &ds.values);
    c.put2("noise", &ds.noise);
    c.save(path)
}

pub fn load_scm_table(path: &Path) -> Result<(ScmDataset, Vec<String>)> {
    let c = Container::load(path)?;
    expect_kind(&c, "scm_table")?;
    let meta: ScmTableMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Corrupt(format!("table metadata: {e}")))?;
    let variant = match meta.variant.as_str() {
        "uniform01" => ScmVariant::Uniform01,
        "uniform12" => ScmVariant::Uniform12,
        other => return Err(Error::Corrupt(format!("unknown variant {other:?}"))),
    };
    let values = c.get2("values")?;
    let noise = c.get2("noise")?;
    if values.dim() != noise.dim() {
        return Err(Error::Corrupt("values and noise shapes differ".into()));
    }
    Ok((ScmDataset { values, noise, variant }, meta.names))
}

#[derive(Serialize, Deserialize)]
struct ImagesMeta {
    side: usize,
    opts: crate::datasets::ImageGenOpts,
    /// Per-record pixel-noise seeds; u64 survives JSON exactly, f64 would not.
    pixel_seeds: Vec<u64>,
}

pub fn save_images(ds: &ImageDataset, path: &Path) -> Result<()> {
    let meta = ImagesMeta {
        side: ds.side,
        opts: ds.opts,
        pixel_seeds: ds.records.iter().map(|r| r.pixel_seed).collect(),
    };
    let mut c = Container::new(
        "images",
        serde_json::to_value(&meta).map_err(|e| Error::Corrupt(e.to_string()))?,
    );
    let mut attrs = Array2::zeros((ds.records.len(), 6));
    for (r, rec) in ds.records.iter().enumerate() {
        attrs[[r, 0]] = rec.age;
        attrs[[r, 1]] = rec.sex;
        attrs[[r, 2]] = rec.bmi;
        attrs[[r, 3]] = rec.eps_bmi;
        attrs[[r, 4]] = rec.eta_outer;
        attrs[[r, 5]] = rec.eta_inner;
    }
    c.put2("attrs", &attrs);
    c.put2("images", &ds.images);
    c.save(path)
}

pub fn load_images(path: &Path) -> Result<ImageDataset> {
    let c = Container::load(path)?;
    expect_kind(&c, "images")?;
    let meta: ImagesMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Corrupt(format!("image metadata: {e}")))?;
    let attrs = c.get2("attrs")?;
    let images = c.get2("images")?;
    let n = attrs.nrows();
    if attrs.ncols() != 6
        || images.nrows() != n
        || meta.pixel_seeds.len() != n
        || images.ncols() != meta.side * meta.side
    {
        return Err(Error::Corrupt("image table shapes disagree".into()));
    }
    let records = (0..n)
        .map(|r| crate::datasets::ImageRecord {
            age: attrs[[r, 0]],
            sex: attrs[[r, 1]],
            bmi: attrs[[r, 2]],
            eps_bmi: attrs[[r, 3]],
            eta_outer: attrs[[r, 4]],
            eta_inner: attrs[[r, 5]],
            pixel_seed: meta.pixel_seeds[r],
        })
        .collect();
    Ok(ImageDataset {
        records,
        images,
        side: meta.side,
        opts: meta.opts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_scm;
    use crate::queries::sample;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tmpdir();
        let path = dir.path().join("m.macaw");
        let mut m = crate::flow::tests::randomized_model(51);
        m.set_norm_stats(
            ndarray::array![1.5, 1.0, 4.0, 3.0, 74.0],
            ndarray::array![0.29, 1.0, 2.3, 0.76, 49.6],
        )
        .unwrap();
        m.config_echo = "seed = 51".into();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m.flatten_params(), back.flatten_params());
        assert_eq!(back.config_echo, "seed = 51");
        let x = sample(&m, 100, 2).unwrap();
        let a = m.log_prob_batch(&x.view()).unwrap();
        let b = back.log_prob_batch(&x.view()).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p, q, "log-probability drifted across save/load");
        }
    }

    #[test]
    fn codec_round_trip_is_bitwise() {
        let dir = tmpdir();
        let path = dir.path().join("c.macaw");
        let ds = crate::datasets::gen_images(60, 3);
        let codec = crate::codec::KpcaCodec::fit(
            &ds.images.view(),
            crate::codec::KpcaOpts { components: 12, ..Default::default() },
        )
        .unwrap();
        save_codec(&codec, &path).unwrap();
        let back = load_codec(&path).unwrap();
        let probe = crate::datasets::gen_images(5, 4);
        let a = codec.encode_z(&probe.images.view()).unwrap();
        let b = back.encode_z(&probe.images.view()).unwrap();
        assert_eq!(a, b);
        let da = codec.decode_z(&a.view()).unwrap();
        let db = back.decode_z(&b.view()).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn grouped_round_trip_is_bitwise() {
        let dir = tmpdir();
        let path = dir.path().join("g.macaw");
        let dag = CausalDag::from_edges(
            vec!["s".into(), "a".into(), "b".into()],
            &[(0, 1), (0, 2)],
        )
        .unwrap();
        let priors = vec![
            Prior::Bernoulli { p: 0.5 },
            Prior::StandardNormal,
            Prior::StandardNormal,
        ];
        let g0 = MacawModel::init(dag.clone(), priors.clone(), FlowOpts { layers: 2, ..Default::default() }, 1).unwrap();
        let g1 = MacawModel::init(dag, priors, FlowOpts { layers: 2, ..Default::default() }, 2).unwrap();
        let gm = GroupedModel::new(vec![g0, g1], 1).unwrap();
        save_grouped(&gm, &path).unwrap();
        let back = load_grouped(&path).unwrap();
        assert_eq!(back.n_shared, 1);
        assert_eq!(back.groups.len(), 2);
        let x = gm.sample(20, 5).unwrap();
        let a = gm.log_prob_batch(&x.view()).unwrap();
        let b = back.log_prob_batch(&x.view()).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn scm_table_round_trip_is_exact() {
        let dir = tmpdir();
        let path = dir.path().join("t.macaw");
        let ds = gen_scm(200, ScmVariant::Uniform12, 5);
        let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
        save_scm_table(&ds, &names, &path).unwrap();
        let (back, back_names) = load_scm_table(&path).unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.noise, ds.noise);
        assert_eq!(back_names, names);
        assert_eq!(back.variant, ScmVariant::Uniform12);
    }

    #[test]
    fn image_table_round_trip_is_exact() {
        let dir = tmpdir();
        let path = dir.path().join("i.macaw");
        let ds = crate::datasets::gen_images(30, 7);
        save_images(&ds, &path).unwrap();
        let back = load_images(&path).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.records, ds.records);
        assert_eq!(back.side, ds.side);
        assert_eq!(back.opts, ds.opts);
    }

    #[test]
    fn wrong_kind_is_refused_by_typed_loaders() {
        let dir = tmpdir();
        let path = dir.path().join("t.macaw");
        let ds = gen_scm(20, ScmVariant::Uniform01, 5);
        let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
        save_scm_table(&ds, &names, &path).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Config(_))));
        assert!(matches!(load_codec(&path), Err(Error::Config(_))));
    }

    #[test]
    fn bad_magic_version_truncation_and_bitflips_are_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("m.macaw");
        let m = crate::flow::tests::randomized_model(53);
        save_model(&m, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let write = |bytes: &[u8]| {
            let p = dir.path().join("bad.macaw");
            std::fs::write(&p, bytes).unwrap();
            p
        };

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Container::load(&write(&bad)), Err(Error::Corrupt(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            Container::load(&write(&bad)),
            Err(Error::Version { found: 9, expected: 1 })
        ));

        let truncated = &good[..good.len() - 40];
        assert!(matches!(Container::load(&write(truncated)), Err(Error::Corrupt(_))));

        assert!(matches!(Container::load(&write(&good[..10])), Err(Error::Corrupt(_))));

        // Flip one payload bit: the checksum must catch it.
        let mut bad = good.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x40;
        assert!(matches!(Container::load(&write(&bad)), Err(Error::Corrupt(_))));

        // Garbage the header JSON.
        let mut bad = good.clone();
        bad[20] = 0xff;
        assert!(matches!(Container::load(&write(&bad)), Err(Error::Corrupt(_))));

        // The original still loads.
        assert!(load_model(&path).is_ok());
    }
}
