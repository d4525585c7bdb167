//! The causal flow model: a stack of affine layers whose conditioners are
//! masked to a DAG. Forward maps data to latent noise; the per-layer update is
//! `m_t = exp(s) * m_{t-1} + b` with `(s, b)` emitted by the conditioner, so
//! the Jacobian is triangular in any topological order and the log-determinant
//! is just the sum of the `s` values.

use crate::conditioner::{CMade, CMadeCache, CMadeGrads, CondOpts};
use crate::error::{Error, Result};
use crate::graph::CausalDag;
use crate::prior::Prior;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Structure of a flow: layer count plus conditioner shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOpts {
    /// Number of stacked affine layers.
    pub layers: usize,
    /// Hidden width in raw units; 0 picks the smallest multiple of the
    /// variable count that is at least 15.
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub s_cap: f64,
    pub learn_source_affine: bool,
}

impl Default for FlowOpts {
    fn default() -> Self {
        Self {
            layers: 10,
            hidden_width: 0,
            hidden_layers: 3,
            s_cap: 5.0,
            learn_source_affine: false,
        }
    }
}

impl FlowOpts {
    pub fn resolve_width(&self, d: usize) -> usize {
        if self.hidden_width != 0 {
            self.hidden_width
        } else {
            d * 15usize.div_ceil(d)
        }
    }

    pub fn cond_opts(&self, d: usize) -> CondOpts {
        CondOpts {
            hidden_width: self.resolve_width(d),
            hidden_layers: self.hidden_layers,
            s_cap: self.s_cap,
            learn_source_affine: self.learn_source_affine,
        }
    }
}

/// A value a coordinate is pinned to during inversion: one scalar for every
/// row, or one value per row.
pub enum Clamp<'a> {
    Scalar(f64),
    Column(ArrayView1<'a, f64>),
}

#[derive(Debug, Clone)]
pub struct MacawModel {
    dag: CausalDag,
    priors: Vec<Prior>,
    opts: FlowOpts,
    pub(crate) layers: Vec<CMade>,
    /// Per-variable location/scale applied to conditioner inputs only; the
    /// affine coordinate update always runs on raw values, so normalization
    /// never affects invertibility.
    pub(crate) norm_mean: Array1<f64>,
    pub(crate) norm_std: Array1<f64>,
    /// Free-form run metadata carried through saves (training configuration,
    /// data seeds).
    pub config_echo: String,
}

/// Everything the training backward pass needs from one forward sweep.
pub struct FlowTrace {
    pub z: Array2<f64>,
    pub logdet: Array1<f64>,
    m: Vec<Array2<f64>>,
    s: Vec<Array2<f64>>,
    caches: Vec<CMadeCache>,
}

impl MacawModel {
    pub fn init(dag: CausalDag, priors: Vec<Prior>, opts: FlowOpts, seed: u64) -> Result<Self> {
        let d = dag.len();
        if d == 0 {
            return Err(Error::Config("model needs at least one variable".into()));
        }
        if priors.len() != d {
            return Err(Error::Shape(format!(
                "{} priors for {d} variables",
                priors.len()
            )));
        }
        if opts.layers == 0 {
            return Err(Error::Config("flow needs at least one layer".into()));
        }
        for (i, p) in priors.iter().enumerate() {
            p.validate()?;
            if !dag.is_source(i) && *p != Prior::StandardNormal {
                return Err(Error::Config(format!(
                    "variable {} has parents and must keep a standard normal prior",
                    dag.names()[i]
                )));
            }
        }
        let cond = opts.cond_opts(d);
        let mut layers = Vec::with_capacity(opts.layers);
        for t in 0..opts.layers {
            layers.push(CMade::init(&dag, cond, crate::rng::derive_seed(seed, t as u64))?);
        }
        Ok(Self {
            dag,
            priors,
            opts,
            layers,
            norm_mean: Array1::zeros(d),
            norm_std: Array1::ones(d),
            config_echo: String::new(),
        })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.dag.len()
    }

    #[inline]
    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    #[inline]
    pub fn priors(&self) -> &[Prior] {
        &self.priors
    }

    #[inline]
    pub fn opts(&self) -> &FlowOpts {
        &self.opts
    }

    #[inline]
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn norm_stats(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.norm_mean, &self.norm_std)
    }

    pub fn set_norm_stats(&mut self, mean: Array1<f64>, std: Array1<f64>) -> Result<()> {
        if mean.len() != self.d() || std.len() != self.d() {
            return Err(Error::Shape("normalization stats must match variable count".into()));
        }
        if std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    fn normalize(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut v = m.clone();
        v -= &self.norm_mean;
        v /= &self.norm_std;
        v
    }

    fn check_cols(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.d() {
            return Err(Error::Shape(format!(
                "input has {} columns, model has {} variables",
                x.ncols(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Copies frozen source columns so they pass through bit-for-bit.
    fn restore_source_columns(&self, from: &Array2<f64>, to: &mut Array2<f64>) {
        if self.opts.learn_source_affine {
            return;
        }
        for i in 0..self.d() {
            if self.dag.is_source(i) {
                to.column_mut(i).assign(&from.column(i));
            }
        }
    }

    /// Data to latent, with per-row log |det J|.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let trace = self.forward_trace(x)?;
        Ok((trace.z, trace.logdet))
    }

    pub fn forward_one(&self, x: &ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
        let m = x.view().insert_axis(Axis(0));
        let (z, ld) = self.forward_batch(&m.view())?;
        Ok((z.row(0).to_owned(), ld[0]))
    }

    /// Forward pass retaining all intermediates for the backward pass.
    pub fn forward_trace(&self, x: &ArrayView2<f64>) -> Result<FlowTrace> {
        self.check_cols(x)?;
        let n = x.nrows();
        let mut m_all = Vec::with_capacity(self.layers.len() + 1);
        let mut s_all = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut logdet = Array1::zeros(n);
        m_all.push(x.to_owned());
        for layer in &self.layers {
            let m = m_all.last().unwrap();
            let v = self.normalize(m);
            let (s, b, cache) = layer.forward_batch_cached(&v.view())?;
            logdet += &s.sum_axis(Axis(1));
            let mut next = s.mapv(f64::exp);
            next *= m;
            next += &b;
            self.restore_source_columns(m, &mut next);
            caches.push(cache);
            s_all.push(s);
            m_all.push(next);
        }
        let z = m_all.last().unwrap().clone();
        Ok(FlowTrace {
            z,
            logdet,
            m: m_all,
            s: s_all,
            caches,
        })
    }

    /// Joint log-density of each row: prior log-density of the latent plus
    /// the flow log-determinant. Rows whose discrete sources fall outside
    /// their support come back as `-inf`.
    pub fn log_prob_batch(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, logdet) = self.forward_batch(x)?;
        let mut out = logdet;
        for (r, lp) in out.iter_mut().enumerate() {
            let row = z.row(r);
            for (i, prior) in self.priors.iter().enumerate() {
                *lp += prior.log_density(row[i]);
            }
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log-probability".into()));
        }
        Ok(out)
    }

    pub fn log_prob_one(&self, x: &ArrayView1<f64>) -> Result<f64> {
        let m = x.view().insert_axis(Axis(0));
        Ok(self.log_prob_batch(&m.view())?[0])
    }

    /// Exact marginal log-density of a coordinate subset. Valid only when the
    /// subset is ancestrally closed (every parent of a member is a member):
    /// then those coordinates' latents depend on the subset alone, and the
    /// remaining coordinates integrate out through the change of variables.
    pub fn log_prob_restricted(&self, x: &ArrayView2<f64>, coords: &[usize]) -> Result<Array1<f64>> {
        let mut seen = vec![false; self.d()];
        for &i in coords {
            if i >= self.d() {
                return Err(Error::Index(format!("coordinate {i}")));
            }
            if seen[i] {
                return Err(Error::Config(format!("coordinate {i} listed twice")));
            }
            seen[i] = true;
        }
        for &i in coords {
            for p in self.dag.parents(i) {
                if !seen[p] {
                    return Err(Error::Config(format!(
                        "coordinate set is not ancestrally closed: {} has parent {}",
                        self.dag.names()[i],
                        self.dag.names()[p]
                    )));
                }
            }
        }
        let trace = self.forward_trace(x)?;
        let mut out = Array1::zeros(x.nrows());
        for r in 0..x.nrows() {
            let mut lp = 0.0;
            for &i in coords {
                for s in &trace.s {
                    lp += s[[r, i]];
                }
                lp += self.priors[i].log_density(trace.z[[r, i]]);
            }
            out[r] = lp;
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("restricted log-probability".into()));
        }
        Ok(out)
    }

    /// Latent to data.
    pub fn inverse_batch(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inverse_clamped(z, &[])
    }

    pub fn inverse_one(&self, z: &ArrayView1<f64>) -> Result<Array1<f64>> {
        let m = z.view().insert_axis(Axis(0));
        Ok(self.inverse_clamped(&m.view(), &[])?.row(0).to_owned())
    }

    /// Inversion with some coordinates pinned in data space.
    ///
    /// Variables are visited in topological order. A pinned coordinate is
    /// propagated forward through the layer stack from its assigned data
    /// value; a free coordinate is recovered backward from its latent. Both
    /// directions only ever read already-finalized coordinates, because a
    /// conditioner output for `i` depends on ancestors of `i` alone. This is
    /// exactly the mechanism-replacement semantics of an intervention, and
    /// pinned coordinates land on their assigned values by construction.
    pub fn inverse_clamped(
        &self,
        z: &ArrayView2<f64>,
        clamps: &[(usize, Clamp)],
    ) -> Result<Array2<f64>> {
        self.check_cols(z)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent input".into()));
        }
        let n = z.nrows();
        let k = self.layers.len();
        let mut pinned: Vec<Option<Array1<f64>>> = vec![None; self.d()];
        for (i, clamp) in clamps {
            if *i >= self.d() {
                return Err(Error::Index(format!("clamp on variable {i}")));
            }
            let col = match clamp {
                Clamp::Scalar(v) => {
                    if !v.is_finite() {
                        return Err(Error::NonFinite("clamp value".into()));
                    }
                    Array1::from_elem(n, *v)
                }
                Clamp::Column(c) => {
                    if c.len() != n {
                        return Err(Error::Shape(format!(
                            "clamp column has {} rows, batch has {n}",
                            c.len()
                        )));
                    }
                    if c.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("clamp value".into()));
                    }
                    c.to_owned()
                }
            };
            if pinned[*i].replace(col).is_some() {
                return Err(Error::Config(format!("variable {i} clamped twice")));
            }
        }

        // Layer trajectories; only finalized columns are ever read.
        let mut m: Vec<Array2<f64>> = vec![z.to_owned(); k + 1];
        for &i in self.dag.topo_order() {
            let frozen_source = self.dag.is_source(i) && !self.opts.learn_source_affine;
            if let Some(vals) = &pinned[i] {
                m[0].column_mut(i).assign(vals);
                for t in 1..=k {
                    if frozen_source {
                        let col = m[t - 1].column(i).to_owned();
                        m[t].column_mut(i).assign(&col);
                        continue;
                    }
                    let v = self.normalize(&m[t - 1]);
                    let (s, b) = self.layers[t - 1].forward_batch(&v.view())?;
                    let prev = m[t - 1].column(i).to_owned();
                    let mut col = m[t].column_mut(i);
                    for r in 0..n {
                        col[r] = s[[r, i]].exp() * prev[r] + b[[r, i]];
                    }
                }
            } else {
                for t in (1..=k).rev() {
                    if frozen_source {
                        let col = m[t].column(i).to_owned();
                        m[t - 1].column_mut(i).assign(&col);
                        continue;
                    }
                    let v = self.normalize(&m[t - 1]);
                    let (s, b) = self.layers[t - 1].forward_batch(&v.view())?;
                    let cur = m[t].column(i).to_owned();
                    let mut col = m[t - 1].column_mut(i);
                    for r in 0..n {
                        col[r] = (cur[r] - b[[r, i]]) * (-s[[r, i]]).exp();
                    }
                }
            }
        }
        Ok(m.swap_remove(0))
    }

    /// Mean negative log-likelihood of a batch together with parameter
    /// gradients, both averaged over rows.
    pub fn nll_backward(&self, x: &ArrayView2<f64>) -> Result<(f64, Vec<CMadeGrads>)> {
        let trace = self.forward_trace(x)?;
        let n = x.nrows();
        let inv_n = 1.0 / n as f64;

        let mut loss = 0.0;
        for r in 0..n {
            let mut lp = trace.logdet[r];
            for (i, prior) in self.priors.iter().enumerate() {
                lp += prior.log_density(trace.z[[r, i]]);
            }
            loss -= lp;
        }
        loss *= inv_n;

        // dL/dz from the prior terms.
        let mut grad_m = Array2::zeros((n, self.d()));
        for r in 0..n {
            for (i, prior) in self.priors.iter().enumerate() {
                let z = trace.z[[r, i]];
                let dlogp = match prior {
                    Prior::StandardNormal => -z,
                    Prior::Normal { mean, std } => -(z - mean) / (std * std),
                    Prior::Uniform { .. } => 0.0,
                    // Discrete sources ride the identity; nothing to push back.
                    Prior::Bernoulli { .. } | Prior::Categorical { .. } => 0.0,
                };
                grad_m[[r, i]] = -inv_n * dlogp;
            }
        }

        let mut all_grads: Vec<CMadeGrads> = Vec::with_capacity(self.layers.len());
        for (t, layer) in self.layers.iter().enumerate().rev() {
            let exp_s = trace.s[t].mapv(f64::exp);
            // gS = gM_next * exp(s) * m + logdet term; gB = gM_next.
            let mut gs = &grad_m * &exp_s;
            gs *= &trace.m[t];
            gs -= inv_n;
            let gb = grad_m.clone();
            let (grads, ginput) = layer.backward(&trace.caches[t], &gs.view(), &gb.view());
            grad_m *= &exp_s;
            // Conditioner saw normalized inputs; undo the scaling.
            grad_m += &(&ginput / &self.norm_std);
            all_grads.push(grads);
        }
        all_grads.reverse();
        Ok((loss, all_grads))
    }

    /// Total number of trainable parameters across layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.flatten_params(&mut out);
        }
        out
    }

    pub fn assign_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            l.assign_params(params, &mut pos);
        }
        Ok(())
    }

    pub fn flatten_grads(&self, grads: &[CMadeGrads]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, g) in self.layers.iter().zip(grads) {
            l.flatten_grads(g, &mut out);
        }
        out
    }

    /// Adds seeded uniform noise to every trainable parameter. Useful for
    /// exercising gradient checks on a non-trivial network.
    pub fn perturb_params(&mut self, seed: u64, scale: f64) {
        use rand::Rng;
        let mut params = self.flatten_params();
        let mut rng = crate::rng::subrng(seed, 0x9E17);
        for p in params.iter_mut() {
            let u: f64 = rng.random();
            *p += (2.0 * u - 1.0) * scale;
        }
        self.assign_params(&params).unwrap();
    }
}
