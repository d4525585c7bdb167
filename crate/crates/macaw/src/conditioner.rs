//! Masked conditioner network: a MADE-style MLP whose connectivity encodes a
//! causal DAG. For input vector `m` it emits per-variable log-scales `s` and
//! shifts `b`; masking guarantees `(s_i, b_i)` never sees a coordinate that is
//! not an ancestor of `i`, and source rows are frozen to the identity.

use crate::error::{Error, Result};
use crate::graph::{build_masks, CausalDag, MaskSet};
use crate::rng::subrng;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Structural options shared by all conditioner layers of one flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondOpts {
    /// Hidden layer width in raw units; must be a multiple of the variable
    /// count.
    pub hidden_width: usize,
    /// Number of hidden layers (>= 1).
    pub hidden_layers: usize,
    /// Saturation bound: emitted log-scales are `s_cap * tanh(raw / s_cap)`.
    pub s_cap: f64,
    /// When set, source rows emit a learned constant affine transform instead
    /// of being frozen to the identity.
    pub learn_source_affine: bool,
}

impl Default for CondOpts {
    fn default() -> Self {
        Self {
            hidden_width: 0,
            hidden_layers: 3,
            s_cap: 5.0,
            learn_source_affine: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CMade {
    masks: MaskSet,
    d: usize,
    opts: CondOpts,
    sources: Vec<bool>,
    /// weights[0] is (w x d); deeper entries are (w x w). Masked entries are
    /// exactly zero and stay zero for the life of the network.
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
    pub(crate) scale_w: Array2<f64>,
    pub(crate) scale_b: Array1<f64>,
    pub(crate) shift_w: Array2<f64>,
    pub(crate) shift_b: Array1<f64>,
}

/// Per-batch activations cached by the forward pass for use by `backward`.
pub struct CMadeCache {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    raw_s: Array2<f64>,
}

/// Parameter gradients, same shapes as the corresponding fields of `CMade`.
#[derive(Debug, Clone)]
pub struct CMadeGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub scale_w: Array2<f64>,
    pub scale_b: Array1<f64>,
    pub shift_w: Array2<f64>,
    pub shift_b: Array1<f64>,
}

impl CMade {
    /// Fresh conditioner wired for `dag`. Interior weights are uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per receiving unit (masked fan-in);
    /// both output heads start at zero so the layer begins as the identity.
    pub fn init(dag: &CausalDag, opts: CondOpts, seed: u64) -> Result<Self> {
        if opts.hidden_layers == 0 {
            return Err(Error::Config("conditioner needs at least one hidden layer".into()));
        }
        if !(opts.s_cap.is_finite() && opts.s_cap > 0.0) {
            return Err(Error::Config(format!("s_cap must be positive, got {}", opts.s_cap)));
        }
        let masks = build_masks(dag, opts.hidden_width)?;
        let d = dag.len();
        let w = opts.hidden_width;
        let sources: Vec<bool> = (0..d).map(|i| dag.is_source(i)).collect();

        let mut weights = Vec::with_capacity(opts.hidden_layers);
        let mut biases = Vec::with_capacity(opts.hidden_layers);
        for l in 0..opts.hidden_layers {
            let mask = if l == 0 { &masks.input_to_hidden } else { &masks.hidden_to_hidden };
            let mut rng = subrng(seed, l as u64);
            weights.push(init_masked(mask, &mut rng));
            biases.push(Array1::zeros(w));
        }

        Ok(Self {
            masks,
            d,
            opts,
            sources,
            weights,
            biases,
            scale_w: Array2::zeros((d, w)),
            scale_b: Array1::zeros(d),
            shift_w: Array2::zeros((d, w)),
            shift_b: Array1::zeros(d),
        })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn opts(&self) -> &CondOpts {
        &self.opts
    }

    #[inline]
    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    #[inline]
    pub fn is_source(&self, i: usize) -> bool {
        self.sources[i]
    }

    /// Forward pass over a batch laid out rows-per-sample. Returns `(s, b)`,
    /// each of shape `(n, d)`.
    pub fn forward_batch(&self, input: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (s, b, _) = self.forward_batch_cached(input)?;
        Ok((s, b))
    }

    /// Forward pass that also returns the activation cache for `backward`.
    pub fn forward_batch_cached(
        &self,
        input: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, CMadeCache)> {
        if input.ncols() != self.d {
            return Err(Error::Shape(format!(
                "conditioner input has {} columns, expected {}",
                input.ncols(),
                self.d
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditioner input".into()));
        }

        let mut hidden = Vec::with_capacity(self.opts.hidden_layers);
        let mut act = input.dot(&self.weights[0].t());
        act += &self.biases[0];
        act.mapv_inplace(f64::tanh);
        hidden.push(act);
        for l in 1..self.opts.hidden_layers {
            let mut next = hidden[l - 1].dot(&self.weights[l].t());
            next += &self.biases[l];
            next.mapv_inplace(f64::tanh);
            hidden.push(next);
        }

        let top = hidden.last().unwrap();
        let mut raw_s = top.dot(&self.scale_w.t());
        raw_s += &self.scale_b;
        let mut b = top.dot(&self.shift_w.t());
        b += &self.shift_b;

        let cap = self.opts.s_cap;
        let mut s = raw_s.mapv(|r| cap * (r / cap).tanh());

        if !self.opts.learn_source_affine {
            for (i, &src) in self.sources.iter().enumerate() {
                if src {
                    s.column_mut(i).fill(0.0);
                    b.column_mut(i).fill(0.0);
                }
            }
        }

        Ok((
            s,
            b,
            CMadeCache {
                input: input.to_owned(),
                hidden,
                raw_s,
            },
        ))
    }

    /// Single-sample forward.
    pub fn forward_one(&self, input: &ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let two_d = input.view().insert_axis(Axis(0));
        let (s, b) = self.forward_batch(&two_d.view())?;
        Ok((s.row(0).to_owned(), b.row(0).to_owned()))
    }

    /// Reverse-mode pass. `grad_s` and `grad_b` are the loss gradients with
    /// respect to the emitted `s` and `b`; returns parameter gradients summed
    /// over the batch and the gradient with respect to the input matrix.
    pub fn backward(
        &self,
        cache: &CMadeCache,
        grad_s: &ArrayView2<f64>,
        grad_b: &ArrayView2<f64>,
    ) -> (CMadeGrads, Array2<f64>) {
        let cap = self.opts.s_cap;
        // d/draw of cap*tanh(raw/cap) is tanh'(raw/cap).
        let mut g_raw_s = grad_s.to_owned();
        ndarray::Zip::from(&mut g_raw_s)
            .and(&cache.raw_s)
            .for_each(|g, &r| {
                let t = (r / cap).tanh();
                *g *= 1.0 - t * t;
            });
        let mut g_raw_b = grad_b.to_owned();

        if !self.opts.learn_source_affine {
            for (i, &src) in self.sources.iter().enumerate() {
                if src {
                    g_raw_s.column_mut(i).fill(0.0);
                    g_raw_b.column_mut(i).fill(0.0);
                }
            }
        }

        let top = cache.hidden.last().unwrap();
        let mut gw_scale = g_raw_s.t().dot(top);
        gw_scale *= &self.masks.hidden_to_output;
        let gb_scale = g_raw_s.sum_axis(Axis(0));
        let mut gw_shift = g_raw_b.t().dot(top);
        gw_shift *= &self.masks.hidden_to_output;
        let gb_shift = g_raw_b.sum_axis(Axis(0));

        let mut g_hidden = g_raw_s.dot(&self.scale_w) + g_raw_b.dot(&self.shift_w);

        let mut gws = vec![Array2::zeros((0, 0)); self.opts.hidden_layers];
        let mut gbs = vec![Array1::zeros(0); self.opts.hidden_layers];
        for l in (0..self.opts.hidden_layers).rev() {
            // tanh'(pre) in terms of the cached activation.
            ndarray::Zip::from(&mut g_hidden)
                .and(&cache.hidden[l])
                .for_each(|g, &h| *g *= 1.0 - h * h);
            let below: ArrayView2<f64> = if l == 0 {
                cache.input.view()
            } else {
                cache.hidden[l - 1].view()
            };
            let mask = if l == 0 {
                &self.masks.input_to_hidden
            } else {
                &self.masks.hidden_to_hidden
            };
            let mut gw = g_hidden.t().dot(&below);
            gw *= mask;
            gws[l] = gw;
            gbs[l] = g_hidden.sum_axis(Axis(0));
            g_hidden = g_hidden.dot(&self.weights[l]);
        }

        (
            CMadeGrads {
                weights: gws,
                biases: gbs,
                scale_w: gw_scale,
                scale_b: gb_scale,
                shift_w: gw_shift,
                shift_b: gb_shift,
            },
            g_hidden,
        )
    }

    /// Number of trainable parameters (masked weight slots excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_masks(|mask| n += mask.iter().filter(|&&m| m != 0.0).count());
        for b in &self.biases {
            n += b.len();
        }
        n + 2 * self.d
    }

    fn visit_masks(&self, mut f: impl FnMut(&Array2<f64>)) {
        for l in 0..self.opts.hidden_layers {
            f(if l == 0 { &self.masks.input_to_hidden } else { &self.masks.hidden_to_hidden });
        }
        f(&self.masks.hidden_to_output);
        f(&self.masks.hidden_to_output);
    }

    /// Appends trainable parameters in a fixed order: per hidden layer the
    /// unmasked weights (row-major) then the bias, then scale head, then
    /// shift head.
    pub fn flatten_params(&self, out: &mut Vec<f64>) {
        for l in 0..self.opts.hidden_layers {
            let mask = if l == 0 { &self.masks.input_to_hidden } else { &self.masks.hidden_to_hidden };
            push_masked(&self.weights[l], mask, out);
            out.extend(self.biases[l].iter());
        }
        push_masked(&self.scale_w, &self.masks.hidden_to_output, out);
        out.extend(self.scale_b.iter());
        push_masked(&self.shift_w, &self.masks.hidden_to_output, out);
        out.extend(self.shift_b.iter());
    }

    /// Same order as `flatten_params`, reading gradients out of `grads`.
    pub fn flatten_grads(&self, grads: &CMadeGrads, out: &mut Vec<f64>) {
        for l in 0..self.opts.hidden_layers {
            let mask = if l == 0 { &self.masks.input_to_hidden } else { &self.masks.hidden_to_hidden };
            push_masked(&grads.weights[l], mask, out);
            out.extend(grads.biases[l].iter());
        }
        push_masked(&grads.scale_w, &self.masks.hidden_to_output, out);
        out.extend(grads.scale_b.iter());
        push_masked(&grads.shift_w, &self.masks.hidden_to_output, out);
        out.extend(grads.shift_b.iter());
    }

    /// Writes parameters back in `flatten_params` order, consuming from
    /// `src[*pos..]`.
    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        for l in 0..self.opts.hidden_layers {
            let mask = if l == 0 {
                self.masks.input_to_hidden.clone()
            } else {
                self.masks.hidden_to_hidden.clone()
            };
            pull_masked(&mut self.weights[l], &mask, src, pos);
            for b in self.biases[l].iter_mut() {
                *b = src[*pos];
                *pos += 1;
            }
        }
        let out_mask = self.masks.hidden_to_output.clone();
        pull_masked(&mut self.scale_w, &out_mask, src, pos);
        for b in self.scale_b.iter_mut() {
            *b = src[*pos];
            *pos += 1;
        }
        pull_masked(&mut self.shift_w, &out_mask, src, pos);
        for b in self.shift_b.iter_mut() {
            *b = src[*pos];
            *pos += 1;
        }
    }
}

fn init_masked(mask: &Array2<f64>, rng: &mut impl Rng) -> Array2<f64> {
    let mut w = Array2::zeros(mask.raw_dim());
    for r in 0..mask.nrows() {
        let fan_in = mask.row(r).iter().filter(|&&m| m != 0.0).count().max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for c in 0..mask.ncols() {
            let u: f64 = rng.random();
            w[[r, c]] = mask[[r, c]] * (2.0 * u - 1.0) * bound;
        }
    }
    w
}

fn push_masked(w: &Array2<f64>, mask: &Array2<f64>, out: &mut Vec<f64>) {
    for (v, m) in w.iter().zip(mask.iter()) {
        if *m != 0.0 {
            out.push(*v);
        }
    }
}

fn pull_masked(w: &mut Array2<f64>, mask: &Array2<f64>, src: &[f64], pos: &mut usize) {
    for (v, m) in w.iter_mut().zip(mask.iter()) {
        if *m != 0.0 {
            *v = src[*pos];
            *pos += 1;
        }
    }
}
