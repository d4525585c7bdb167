//! Kernel-PCA image codec. Images are embedded with a polynomial kernel
//! against a set of anchor images, projected onto the leading centered-kernel
//! eigenvectors, and decoded back through a kernel ridge regression from
//! latent scores to pixels.

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sym_eigen_desc};
use crate::rng::subrng;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpcaOpts {
    /// Number of latent components.
    pub components: usize,
    pub degree: u32,
    /// Kernel scale; 0 resolves to 1 / pixel_count.
    pub gamma: f64,
    pub coef0: f64,
    /// At most this many training rows become anchors.
    pub anchor_cap: usize,
    /// Additive ridge on the latent Gram of the preimage regression.
    pub ridge: f64,
    pub seed: u64,
    /// How many equal blocks downstream modelling splits the scores into.
    /// The codec itself ignores it.
    pub groups: usize,
}

impl Default for KpcaOpts {
    fn default() -> Self {
        Self {
            components: 60,
            degree: 3,
            gamma: 0.0,
            coef0: 1.0,
            anchor_cap: 4000,
            ridge: 1.0,
            seed: 17,
            groups: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KpcaCodec {
    pub opts: KpcaOpts,
    /// Resolved kernel scale (never 0).
    pub gamma: f64,
    /// Anchor images, one per row.
    pub anchors: Array2<f64>,
    /// Column means of the uncentered anchor Gram and its grand mean; both
    /// are needed to center test kernels consistently.
    pub col_means: Array1<f64>,
    pub k_mean: f64,
    pub eigvals: Array1<f64>,
    /// Eigenvectors scaled by 1/sqrt(eigval), anchors x components.
    pub proj: Array2<f64>,
    /// Scores of the anchors, produced by the same path `encode` uses.
    pub train_scores: Array2<f64>,
    pub latent_mean: Array1<f64>,
    pub latent_std: Array1<f64>,
    /// Ridge-regression weights mapping latent kernels back to pixels.
    pub dual: Array2<f64>,
    pub recon_mse_mean: f64,
    pub recon_mse_max: f64,
}

fn poly_kernel(x: &ArrayView2<f64>, y: &ArrayView2<f64>, gamma: f64, coef0: f64, degree: u32) -> Array2<f64> {
    let mut k = x.dot(&y.t());
    k.mapv_inplace(|v| (gamma * v + coef0).powi(degree as i32));
    k
}

impl KpcaCodec {
    /// Fits the codec on training images (rows are flattened pixels in
    /// [0, 1]). When there are more rows than `anchor_cap`, a seeded subset
    /// becomes the anchors.
    pub fn fit(train: &ArrayView2<f64>, opts: KpcaOpts) -> Result<Self> {
        let (n, p) = (train.nrows(), train.ncols());
        if n == 0 || p == 0 {
            return Err(Error::Shape("empty training matrix".into()));
        }
        if train.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training images".into()));
        }
        if opts.components == 0 {
            return Err(Error::Config("components must be positive".into()));
        }
        if opts.degree == 0 {
            return Err(Error::Config("degree must be positive".into()));
        }
        if !(opts.ridge.is_finite() && opts.ridge >= 0.0) {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        let n_anchor = n.min(opts.anchor_cap.max(1));
        if opts.components > n_anchor {
            return Err(Error::Rank(format!(
                "{} components exceed the {n_anchor} available anchors",
                opts.components
            )));
        }
        let gamma = if opts.gamma == 0.0 { 1.0 / p as f64 } else { opts.gamma };
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("kernel scale must be positive, got {gamma}")));
        }

        let anchors = if n_anchor == n {
            train.to_owned()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut subrng(opts.seed, 0));
            idx.truncate(n_anchor);
            idx.sort_unstable();
            train.select(Axis(0), &idx)
        };

        let k = poly_kernel(&anchors.view(), &anchors.view(), gamma, opts.coef0, opts.degree);
        let col_means = k.mean_axis(Axis(0)).unwrap();
        let k_mean = col_means.mean().unwrap();
        let mut kc = k;
        for r in 0..n_anchor {
            for c in 0..n_anchor {
                kc[[r, c]] += k_mean - col_means[r] - col_means[c];
            }
        }
        // Symmetry can drift in the last ulp; the eigensolver wants exact.
        for r in 0..n_anchor {
            for c in 0..r {
                let v = 0.5 * (kc[[r, c]] + kc[[c, r]]);
                kc[[r, c]] = v;
                kc[[c, r]] = v;
            }
        }

        let (eigvals_all, mut vecs) = sym_eigen_desc(&kc.view())?;
        let thresh = 1e-10 * eigvals_all[0].max(0.0);
        let usable = eigvals_all.iter().take_while(|&&v| v > thresh).count();
        if usable < opts.components {
            return Err(Error::Rank(format!(
                "kernel matrix supports {usable} components, {} requested",
                opts.components
            )));
        }
        let eigvals = eigvals_all.slice(ndarray::s![..opts.components]).to_owned();
        // Deterministic sign: the entry with the largest magnitude is positive.
        for j in 0..opts.components {
            let col = vecs.column(j);
            let mut best = 0;
            for i in 1..n_anchor {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            if col[best] < 0.0 {
                vecs.column_mut(j).mapv_inplace(|v| -v);
            }
        }
        let mut proj = Array2::zeros((n_anchor, opts.components));
        for j in 0..opts.components {
            let inv = 1.0 / eigvals[j].sqrt();
            for i in 0..n_anchor {
                proj[[i, j]] = vecs[[i, j]] * inv;
            }
        }

        let mut codec = Self {
            opts,
            gamma,
            anchors,
            col_means,
            k_mean,
            eigvals,
            proj,
            train_scores: Array2::zeros((0, 0)),
            latent_mean: Array1::zeros(opts.components),
            latent_std: Array1::ones(opts.components),
            dual: Array2::zeros((0, 0)),
            recon_mse_mean: 0.0,
            recon_mse_max: 0.0,
        };
        // Anchor scores go through the public path so there is no last-ulp
        // disagreement with later encodes.
        codec.train_scores = codec.encode_batch(&codec.anchors.view())?;
        codec.latent_mean = codec.train_scores.mean_axis(Axis(0)).unwrap();
        let mut std = codec.train_scores.std_axis(Axis(0), 1.0);
        std.mapv_inplace(|s| if s.is_finite() && s > 1e-8 { s } else { 1.0 });
        codec.latent_std = std;

        // Preimage map: kernel ridge regression from latent scores to pixels.
        let kss = codec.latent_kernel(&codec.train_scores.view());
        codec.dual = solve_spd(&kss.view(), opts.ridge, &codec.anchors.view())?;

        let recon = codec.decode_batch(&codec.train_scores.view())?;
        let mut mse_sum = 0.0;
        let mut mse_max: f64 = 0.0;
        for r in 0..n_anchor {
            let mut e = 0.0;
            for c in 0..p {
                let d = recon[[r, c]] - codec.anchors[[r, c]];
                e += d * d;
            }
            e /= p as f64;
            mse_sum += e;
            mse_max = mse_max.max(e);
        }
        codec.recon_mse_mean = mse_sum / n_anchor as f64;
        codec.recon_mse_max = mse_max;
        Ok(codec)
    }

    fn latent_kernel(&self, y: &ArrayView2<f64>) -> Array2<f64> {
        let gamma_s = 1.0 / self.opts.components as f64;
        poly_kernel(y, &self.train_scores.view(), gamma_s, self.opts.coef0, self.opts.degree)
    }

    pub fn components(&self) -> usize {
        self.opts.components
    }

    pub fn pixel_count(&self) -> usize {
        self.anchors.ncols()
    }

    /// Images to latent scores.
    pub fn encode_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.pixel_count() {
            return Err(Error::Shape(format!(
                "input has {} pixels, codec expects {}",
                x.ncols(),
                self.pixel_count()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("images to encode".into()));
        }
        let mut k = poly_kernel(x, &self.anchors.view(), self.gamma, self.opts.coef0, self.opts.degree);
        for mut row in k.rows_mut() {
            let row_mean = row.mean().unwrap();
            for (i, v) in row.iter_mut().enumerate() {
                *v += self.k_mean - row_mean - self.col_means[i];
            }
        }
        Ok(k.dot(&self.proj))
    }

    /// Latent scores back to images, clamped to [0, 1].
    pub fn decode_batch(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.components() {
            return Err(Error::Shape(format!(
                "input has {} components, codec expects {}",
                y.ncols(),
                self.components()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scores to decode".into()));
        }
        let k = self.latent_kernel(y);
        let mut out = k.dot(&self.dual);
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// Encode and z-score with the anchor-score statistics; what the flow
    /// trains on.
    pub fn encode_z(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut s = self.encode_batch(x)?;
        s -= &self.latent_mean;
        s /= &self.latent_std;
        Ok(s)
    }

    /// Inverse of [`encode_z`] followed by decoding.
    pub fn decode_z(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut s = y.to_owned();
        s *= &self.latent_std;
        s += &self.latent_mean;
        self.decode_batch(&s.view())
    }
}
