//! Compact decoder-only transformer with deterministic initialization and
//! hook points where interventions apply.
//!
//! Base weights are always frozen: the backward pass propagates activation
//! gradients down the stack and accumulates parameter gradients only into
//! edit vectors and gate values at the hook sites. Per-head hooks sit on the
//! attention-weighted value aggregate of each head, before concatenation and
//! the output projection; the MLP hook sits on the MLP sublayer output,
//! before the residual add.

use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::interventions::{FrozenMap, GateDraw, InterventionMap, Site};
use crate::numerics::RngStream;

const LN_EPS: f64 = 1e-5;
const CKPT_MAGIC: &[u8; 8] = b"HGMODEL1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub init_seed: u64,
    /// Tokens 1..=n_favored carry a fixed unembedding bias, concentrating
    /// the base model's output mass on a small reserved set the way a
    /// trained LM concentrates mass on plausible answer tokens. Tasks draw
    /// their choice tokens from this set; without it, answer tokens sit at
    /// ~1/vocab probability and cross-entropy barely responds to choice
    /// ordering.
    pub n_favored: usize,
    pub favored_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_ff: 512,
            vocab: 512,
            max_seq: 64,
            init_seed: 0xBA5E,
            n_favored: 4,
            favored_bias: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab, max_seq, d_ff must be positive".into()));
        }
        if self.n_favored + 1 >= self.vocab {
            return Err(Error::Config(format!(
                "n_favored {} leaves no room in vocab {}",
                self.n_favored, self.vocab
            )));
        }
        Ok(())
    }

    /// Vector width edited at a site.
    pub fn edit_dim(&self, site: Site) -> usize {
        match site {
            Site::AttentionHead => self.d_head(),
            Site::MlpOutput => self.d_model,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w_in: Array2<f64>,
    w_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: ModelConfig,
    wte: Array2<f64>,
    wpe: Array2<f64>,
    layers: Vec<LayerWeights>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_un: Array2<f64>,
    b_un: Array1<f64>,
}

/// Token batch with a mask marking answer positions.
///
/// The model predicts next tokens, so a masked position t is scored from the
/// logits at t - 1; position 0 can never be a target.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Array2<usize>,
    pub target_mask: Array2<bool>,
}

impl Batch {
    pub fn new(tokens: Array2<usize>, target_mask: Array2<bool>, vocab: usize) -> Result<Batch> {
        if tokens.dim() != target_mask.dim() {
            return Err(Error::Dimension(format!(
                "tokens {:?} vs mask {:?}",
                tokens.dim(),
                target_mask.dim()
            )));
        }
        for &t in tokens.iter() {
            if t >= vocab {
                return Err(Error::Invalid(format!("token id {t} >= vocab {vocab}")));
            }
        }
        for (b, row) in target_mask.outer_iter().enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::Invalid(format!("example {b} has no target positions")));
            }
            if row[0] {
                return Err(Error::Invalid(format!(
                    "example {b} marks position 0 as a target; targets need a preceding position"
                )));
            }
        }
        Ok(Batch {
            tokens,
            target_mask,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// One resolved edit with effective gate values (mode masking applied).
#[derive(Debug, Clone, Copy)]
pub struct PlanEntry<'a> {
    pub m: &'a [f64],
    pub a: &'a [f64],
    pub g_a: f64,
    pub g_m: f64,
    /// Position of this edit in its source map, for gradient routing.
    pub map_idx: usize,
    pub entry_idx: usize,
}

/// Edits resolved against a model: dense (layer, head) lookup grids.
pub struct EditPlan<'a> {
    att: Vec<Vec<Option<PlanEntry<'a>>>>,
    mlp: Vec<Option<PlanEntry<'a>>>,
}

impl<'a> EditPlan<'a> {
    pub fn empty(cfg: &ModelConfig) -> EditPlan<'a> {
        EditPlan {
            att: vec![vec![None; cfg.n_heads]; cfg.n_layers],
            mlp: vec![None; cfg.n_layers],
        }
    }

    /// Resolve trainable maps with sampled gate values. At most one map per
    /// site; gate draws must align with map entries.
    pub fn from_maps(
        cfg: &ModelConfig,
        maps: &[&'a InterventionMap],
        gates: &[Vec<GateDraw>],
    ) -> Result<EditPlan<'a>> {
        if maps.len() != gates.len() {
            return Err(Error::Dimension(format!(
                "{} maps but {} gate draw sets",
                maps.len(),
                gates.len()
            )));
        }
        let mut plan = EditPlan::empty(cfg);
        for (map_idx, (map, draws)) in maps.iter().zip(gates.iter()).enumerate() {
            if draws.len() != map.len() {
                return Err(Error::Dimension(format!(
                    "map {map_idx}: {} entries but {} gate draws",
                    map.len(),
                    draws.len()
                )));
            }
            check_map_dims(cfg, map.site, map.d_head)?;
            for (entry_idx, (e, d)) in map.entries.iter().zip(draws.iter()).enumerate() {
                let entry = PlanEntry {
                    m: &e.m,
                    a: &e.a,
                    g_a: if map.mode.uses_additive() { d.g_a } else { 0.0 },
                    g_m: if map.mode.uses_multiplicative() { d.g_m } else { 0.0 },
                    map_idx,
                    entry_idx,
                };
                plan.place(cfg, map.site, e.layer, e.head, entry)?;
            }
        }
        Ok(plan)
    }

    /// Resolve frozen maps: gates are already deterministic values.
    pub fn from_frozen(cfg: &ModelConfig, maps: &[&'a FrozenMap]) -> Result<EditPlan<'a>> {
        let mut plan = EditPlan::empty(cfg);
        for (map_idx, map) in maps.iter().enumerate() {
            check_map_dims(cfg, map.site, map.d_head)?;
            for (entry_idx, e) in map.entries.iter().enumerate() {
                let entry = PlanEntry {
                    m: &e.m,
                    a: &e.a,
                    g_a: e.g_a,
                    g_m: e.g_m,
                    map_idx,
                    entry_idx,
                };
                plan.place(cfg, map.site, e.layer, e.head, entry)?;
            }
        }
        Ok(plan)
    }

    fn place(
        &mut self,
        cfg: &ModelConfig,
        site: Site,
        layer: usize,
        head: usize,
        entry: PlanEntry<'a>,
    ) -> Result<()> {
        if layer >= cfg.n_layers {
            return Err(Error::Dimension(format!(
                "edit layer {layer} out of range (model has {} layers)",
                cfg.n_layers
            )));
        }
        match site {
            Site::AttentionHead => {
                if head >= cfg.n_heads {
                    return Err(Error::Dimension(format!(
                        "edit head {head} out of range (model has {} heads)",
                        cfg.n_heads
                    )));
                }
                if self.att[layer][head].is_some() {
                    return Err(Error::Invalid(format!(
                        "two edits target attention layer {layer} head {head}"
                    )));
                }
                self.att[layer][head] = Some(entry);
            }
            Site::MlpOutput => {
                if self.mlp[layer].is_some() {
                    return Err(Error::Invalid(format!("two edits target mlp layer {layer}")));
                }
                self.mlp[layer] = Some(entry);
            }
        }
        Ok(())
    }
}

fn check_map_dims(cfg: &ModelConfig, site: Site, d_head: usize) -> Result<()> {
    let want = cfg.edit_dim(site);
    if d_head != want {
        return Err(Error::Dimension(format!(
            "map edits width-{d_head} vectors but the model's {site} site is width {want}"
        )));
    }
    Ok(())
}

/// Gradients accumulated into one map entry's parameters.
#[derive(Debug, Clone)]
pub struct EntryGrads {
    pub dm: Vec<f64>,
    pub da: Vec<f64>,
    pub dg_a: f64,
    pub dg_m: f64,
}

/// Per-map, per-entry gradient buffers filled by the backward pass.
pub type MapGrads = Vec<Vec<EntryGrads>>;

pub fn zero_grads(maps: &[&InterventionMap]) -> MapGrads {
    maps.iter()
        .map(|m| {
            m.entries
                .iter()
                .map(|e| EntryGrads {
                    dm: vec![0.0; e.m.len()],
                    da: vec![0.0; e.a.len()],
                    dg_a: 0.0,
                    dg_m: 0.0,
                })
                .collect()
        })
        .collect()
}

/// Activations cached by a training forward pass.
pub struct ForwardCache {
    b: usize,
    t: usize,
    xhat1: Vec<Array2<f64>>,
    istd1: Vec<Array1<f64>>,
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    att: Vec<Array3<f64>>,
    z_pre: Vec<Array2<f64>>,
    z_post: Vec<Array2<f64>>,
    xhat2: Vec<Array2<f64>>,
    istd2: Vec<Array1<f64>>,
    hpre: Vec<Array2<f64>>,
    mlp_pre: Vec<Array2<f64>>,
    xhatf: Array2<f64>,
    istdf: Array1<f64>,
}

fn layernorm(
    x: &Array2<f64>,
    g: &Array1<f64>,
    b: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut istd = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.outer_iter_mut().zip(istd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let mut y = xhat.clone();
    for mut row in y.outer_iter_mut() {
        row.zip_mut_with(&g.view(), |v, &gi| *v *= gi);
        row += b;
    }
    (y, xhat, istd)
}

fn layernorm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, ((dy_row, xh_row), mut dx_row)) in dy
        .outer_iter()
        .zip(xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..dy_row.len() {
            let dxh = dy_row[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh_row[j];
        }
        let mean_dxhat = sum_dxhat / d;
        let mean_dxhat_xhat = sum_dxhat_xhat / d;
        let inv = istd[i];
        for j in 0..dy_row.len() {
            let dxh = dy_row[j] * g[j];
            dx_row[j] = (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat) * inv;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Apply one gated edit in place over the rows of a [rows, dim] block.
fn edit_forward_block(mut block: ndarray::ArrayViewMut2<f64>, e: &PlanEntry) {
    for mut row in block.outer_iter_mut() {
        for (j, val) in row.iter_mut().enumerate() {
            *val = (1.0 + e.g_m * e.m[j]) * *val + e.g_a * e.a[j];
        }
    }
}

/// Backward through one gated edit: converts d(z') to d(z) in place and
/// accumulates gradients for the edit's parameters. `z_pre` is the pre-edit
/// activation block.
fn edit_backward_block(
    mut dz: ndarray::ArrayViewMut2<f64>,
    z_pre: ndarray::ArrayView2<f64>,
    e: &PlanEntry,
    grads: &mut EntryGrads,
) {
    for (mut dz_row, z_row) in dz.outer_iter_mut().zip(z_pre.outer_iter()) {
        for j in 0..dz_row.len() {
            let dzp = dz_row[j];
            grads.dm[j] += dzp * e.g_m * z_row[j];
            grads.da[j] += dzp * e.g_a;
            grads.dg_m += dzp * e.m[j] * z_row[j];
            grads.dg_a += dzp * e.a[j];
            dz_row[j] = dzp * (1.0 + e.g_m * e.m[j]);
        }
    }
}

impl Transformer {
    /// Deterministic seeded-Gaussian initialization from the config.
    pub fn init(cfg: &ModelConfig) -> Result<Transformer> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.init_seed).split("base-weights");
        let d = cfg.d_model;
        let mut tensor = |rows: usize, cols: usize, scale: f64| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| 0.0).mapv(|_| rng.normal() * scale)
        };
        let wte = tensor(cfg.vocab, d, 0.1);
        let wpe = tensor(cfg.max_seq, d, 0.1);
        let proj_scale = 1.0 / (d as f64).sqrt();
        let ff_scale = 1.0 / (cfg.d_ff as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: tensor(d, d, proj_scale),
                wk: tensor(d, d, proj_scale),
                wv: tensor(d, d, proj_scale),
                wo: tensor(d, d, proj_scale),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_in: tensor(d, cfg.d_ff, proj_scale),
                w_out: tensor(cfg.d_ff, d, ff_scale),
            })
            .collect();
        let lnf_g = Array1::ones(d);
        let lnf_b = Array1::zeros(d);
        let w_un = tensor(d, cfg.vocab, proj_scale);
        let mut b_un = Array1::zeros(cfg.vocab);
        for tok in 1..=cfg.n_favored.min(cfg.vocab - 1) {
            b_un[tok] = cfg.favored_bias;
        }
        Ok(Transformer {
            cfg: *cfg,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_un,
            b_un,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_base_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Base forward pass: logits [batch, seq, vocab].
    pub fn forward_base(&self, batch: &Batch) -> Result<Array3<f64>> {
        let plan = EditPlan::empty(&self.cfg);
        Ok(self.forward_inner(batch, &plan, false)?.0)
    }

    /// Forward with a trainable map and sampled gates.
    pub fn forward(
        &self,
        batch: &Batch,
        maps: &[&InterventionMap],
        gates: &[Vec<GateDraw>],
    ) -> Result<Array3<f64>> {
        let plan = EditPlan::from_maps(&self.cfg, maps, gates)?;
        Ok(self.forward_inner(batch, &plan, false)?.0)
    }

    /// Forward with frozen, deterministic maps.
    pub fn forward_frozen(&self, batch: &Batch, maps: &[&FrozenMap]) -> Result<Array3<f64>> {
        let plan = EditPlan::from_frozen(&self.cfg, maps)?;
        Ok(self.forward_inner(batch, &plan, false)?.0)
    }

    /// Forward pass that caches activations for [`Transformer::backward`].
    pub fn forward_train(
        &self,
        batch: &Batch,
        plan: &EditPlan,
    ) -> Result<(Array3<f64>, ForwardCache)> {
        let (logits, cache) = self.forward_inner(batch, plan, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn forward_inner(
        &self,
        batch: &Batch,
        plan: &EditPlan,
        with_cache: bool,
    ) -> Result<(Array3<f64>, Option<ForwardCache>)> {
        let (bsz, t) = batch.tokens.dim();
        if t > self.cfg.max_seq {
            return Err(Error::Dimension(format!(
                "sequence length {t} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let rows = bsz * t;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut cache = with_cache.then(|| ForwardCache {
            b: bsz,
            t,
            xhat1: Vec::new(),
            istd1: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            att: Vec::new(),
            z_pre: Vec::new(),
            z_post: Vec::new(),
            xhat2: Vec::new(),
            istd2: Vec::new(),
            hpre: Vec::new(),
            mlp_pre: Vec::new(),
            xhatf: Array2::zeros((0, 0)),
            istdf: Array1::zeros(0),
        });

        // Token + position embeddings.
        let mut x = Array2::<f64>::zeros((rows, d));
        for b in 0..bsz {
            for ti in 0..t {
                let tok = batch.tokens[(b, ti)];
                if tok >= self.cfg.vocab {
                    return Err(Error::Invalid(format!("token id {tok} out of vocab")));
                }
                let mut row = x.row_mut(b * t + ti);
                row.assign(&self.wte.row(tok));
                row += &self.wpe.row(ti);
            }
        }

        for (l, lw) in self.layers.iter().enumerate() {
            // Attention sublayer.
            let (n1, xhat1, istd1) = layernorm(&x, &lw.ln1_g, &lw.ln1_b);
            let q = n1.dot(&lw.wq);
            let k = n1.dot(&lw.wk);
            let v = n1.dot(&lw.wv);

            let mut att = Array3::<f64>::zeros((bsz * h, t, t));
            let mut z = Array2::<f64>::zeros((rows, d));
            for b in 0..bsz {
                let row0 = b * t;
                for hi in 0..h {
                    let cs = hi * dh;
                    let qb = q.slice(s![row0..row0 + t, cs..cs + dh]);
                    let kb = k.slice(s![row0..row0 + t, cs..cs + dh]);
                    let vb = v.slice(s![row0..row0 + t, cs..cs + dh]);
                    let mut ab = att.slice_mut(s![b * h + hi, .., ..]);
                    // Causal scores + row softmax over the valid prefix.
                    for ti in 0..t {
                        let qrow = qb.row(ti);
                        let mut maxv = f64::NEG_INFINITY;
                        for si in 0..=ti {
                            let sc = qrow.dot(&kb.row(si)) * scale;
                            ab[(ti, si)] = sc;
                            if sc > maxv {
                                maxv = sc;
                            }
                        }
                        let mut denom = 0.0;
                        for si in 0..=ti {
                            let e = (ab[(ti, si)] - maxv).exp();
                            ab[(ti, si)] = e;
                            denom += e;
                        }
                        for si in 0..=ti {
                            ab[(ti, si)] /= denom;
                        }
                    }
                    // Per-head context: the attention hook site.
                    let zb = ab.dot(&vb);
                    z.slice_mut(s![row0..row0 + t, cs..cs + dh]).assign(&zb);
                }
            }

            if let Some(c) = cache.as_mut() {
                c.xhat1.push(xhat1);
                c.istd1.push(istd1);
                c.q.push(q);
                c.k.push(k);
                c.v.push(v);
                c.att.push(att);
                c.z_pre.push(z.clone());
            }

            // Attention-site edits.
            for hi in 0..h {
                if let Some(e) = &plan.att[l][hi] {
                    let cs = hi * dh;
                    edit_forward_block(z.slice_mut(s![.., cs..cs + dh]), e);
                }
            }
            if let Some(c) = cache.as_mut() {
                c.z_post.push(z.clone());
            }

            x = x + z.dot(&lw.wo);

            // MLP sublayer.
            let (n2, xhat2, istd2) = layernorm(&x, &lw.ln2_g, &lw.ln2_b);
            let hpre = n2.dot(&lw.w_in);
            let hact = hpre.mapv(gelu);
            let mut mlp_out = hact.dot(&lw.w_out);

            if let Some(c) = cache.as_mut() {
                c.xhat2.push(xhat2);
                c.istd2.push(istd2);
                c.hpre.push(hpre);
                c.mlp_pre.push(mlp_out.clone());
            }
            if let Some(e) = &plan.mlp[l] {
                edit_forward_block(mlp_out.view_mut(), e);
            }

            x = x + mlp_out;
        }

        let (nf, xhatf, istdf) = layernorm(&x, &self.lnf_g, &self.lnf_b);
        let mut logits = nf.dot(&self.w_un);
        for mut row in logits.outer_iter_mut() {
            row += &self.b_un;
        }
        if let Some(c) = cache.as_mut() {
            c.xhatf = xhatf;
            c.istdf = istdf;
        }
        let logits3 = logits
            .into_shape_with_order((bsz, t, self.cfg.vocab))
            .expect("logits reshape");
        Ok((logits3, cache))
    }

    /// Backpropagate d(loss)/d(logits) to the edit parameters in the plan.
    ///
    /// Base weights receive no gradient. `grads` must be shaped by
    /// [`zero_grads`] over the same maps the plan was built from.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        plan: &EditPlan,
        dlogits: &Array3<f64>,
        grads: &mut MapGrads,
    ) {
        let (bsz, t) = (cache.b, cache.t);
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let rows = bsz * t;
        let scale = 1.0 / (dh as f64).sqrt();

        let dlogits2 = dlogits
            .view()
            .into_shape_with_order((rows, self.cfg.vocab))
            .expect("dlogits reshape");
        let dnf = dlogits2.dot(&self.w_un.t());
        let mut dx = layernorm_backward(&dnf, &self.lnf_g, &cache.xhatf, &cache.istdf);

        for l in (0..self.cfg.n_layers).rev() {
            let lw = &self.layers[l];

            // MLP sublayer backward: x_out = x_mid + mlp_post(x_mid).
            let mut dmlp = dx.clone();
            if let Some(e) = &plan.mlp[l] {
                let g = &mut grads[e.map_idx][e.entry_idx];
                edit_backward_block(dmlp.view_mut(), cache.mlp_pre[l].view(), e, g);
            }
            let dhact = dmlp.dot(&lw.w_out.t());
            let mut dhpre = dhact;
            dhpre.zip_mut_with(&cache.hpre[l], |dv, &hp| *dv *= gelu_grad(hp));
            let dn2 = dhpre.dot(&lw.w_in.t());
            dx += &layernorm_backward(&dn2, &lw.ln2_g, &cache.xhat2[l], &cache.istd2[l]);

            // Attention sublayer backward: x_mid = x_in + z_post . Wo.
            let mut dz = dx.dot(&lw.wo.t());
            for hi in 0..h {
                if let Some(e) = &plan.att[l][hi] {
                    let cs = hi * dh;
                    let g = &mut grads[e.map_idx][e.entry_idx];
                    edit_backward_block(
                        dz.slice_mut(s![.., cs..cs + dh]),
                        cache.z_pre[l].slice(s![.., cs..cs + dh]),
                        e,
                        g,
                    );
                }
            }

            let q = &cache.q[l];
            let k = &cache.k[l];
            let v = &cache.v[l];
            let att = &cache.att[l];
            let mut dq = Array2::<f64>::zeros((rows, d));
            let mut dk = Array2::<f64>::zeros((rows, d));
            let mut dv = Array2::<f64>::zeros((rows, d));
            for b in 0..bsz {
                let row0 = b * t;
                for hi in 0..h {
                    let cs = hi * dh;
                    let dzb = dz.slice(s![row0..row0 + t, cs..cs + dh]);
                    let vb = v.slice(s![row0..row0 + t, cs..cs + dh]);
                    let ab = att.slice(s![b * h + hi, .., ..]);

                    // dv += att^T . dz
                    let dvb = ab.t().dot(&dzb);
                    dv.slice_mut(s![row0..row0 + t, cs..cs + dh])
                        .zip_mut_with(&dvb, |o, &n| *o += n);

                    // datt = dz . v^T, then softmax Jacobian per causal row.
                    let datt = dzb.dot(&vb.t());
                    let mut dscores = Array2::<f64>::zeros((t, t));
                    for ti in 0..t {
                        let mut dot = 0.0;
                        for si in 0..=ti {
                            dot += ab[(ti, si)] * datt[(ti, si)];
                        }
                        for si in 0..=ti {
                            dscores[(ti, si)] = ab[(ti, si)] * (datt[(ti, si)] - dot);
                        }
                    }

                    let kb = k.slice(s![row0..row0 + t, cs..cs + dh]);
                    let qb = q.slice(s![row0..row0 + t, cs..cs + dh]);
                    let dqb = dscores.dot(&kb);
                    let dkb = dscores.t().dot(&qb);
                    dq.slice_mut(s![row0..row0 + t, cs..cs + dh])
                        .zip_mut_with(&dqb, |o, &n| *o += n * scale);
                    dk.slice_mut(s![row0..row0 + t, cs..cs + dh])
                        .zip_mut_with(&dkb, |o, &n| *o += n * scale);
                }
            }

            let dn1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
            dx += &layernorm_backward(&dn1, &lw.ln1_g, &cache.xhat1[l], &cache.istd1[l]);
        }
    }

    /// Hook-site vector of one attention head, post-edit when a plan is
    /// given: [batch, seq, d_head].
    pub fn head_activation(
        &self,
        batch: &Batch,
        layer: usize,
        head: usize,
        plan: &EditPlan,
    ) -> Result<Array3<f64>> {
        if layer >= self.cfg.n_layers || head >= self.cfg.n_heads {
            return Err(Error::Dimension(format!(
                "head activation ({layer}, {head}) out of range"
            )));
        }
        let (_, cache) = self.forward_inner(batch, plan, true)?;
        let cache = cache.expect("cache requested");
        let dh = self.cfg.d_head();
        let cs = head * dh;
        let z = cache.z_post[layer].slice(s![.., cs..cs + dh]).to_owned();
        Ok(z.into_shape_with_order((cache.b, cache.t, dh))
            .expect("activation reshape"))
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        // 1-D tensors are viewed as [1, n] when serialized; order is fixed.
        let mut out: Vec<(String, &Array2<f64>)> = Vec::new();
        out.push(("wte".into(), &self.wte));
        out.push(("wpe".into(), &self.wpe));
        out.push(("w_un".into(), &self.w_un));
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), &lw.wq));
            out.push((format!("layer{l}.wk"), &lw.wk));
            out.push((format!("layer{l}.wv"), &lw.wv));
            out.push((format!("layer{l}.wo"), &lw.wo));
            out.push((format!("layer{l}.w_in"), &lw.w_in));
            out.push((format!("layer{l}.w_out"), &lw.w_out));
        }
        out
    }

    fn vectors(&self) -> Vec<(String, &Array1<f64>)> {
        let mut out: Vec<(String, &Array1<f64>)> = Vec::new();
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("b_un".into(), &self.b_un));
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_g"), &lw.ln1_g));
            out.push((format!("layer{l}.ln1_b"), &lw.ln1_b));
            out.push((format!("layer{l}.ln2_g"), &lw.ln2_g));
            out.push((format!("layer{l}.ln2_b"), &lw.ln2_b));
        }
        out
    }

    fn checkpoint_body(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(CKPT_MAGIC);
        let cfg_json = serde_json::to_vec(&self.cfg).expect("config serialization");
        body.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
        body.extend_from_slice(&cfg_json);
        for (_, tensor) in self.tensors() {
            body.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
            for &v in tensor.iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, vec) in self.vectors() {
            body.extend_from_slice(&(vec.len() as u64).to_le_bytes());
            for &v in vec.iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        body
    }

    /// Hex SHA-256 over the checkpoint body; identifies base weights exactly.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.checkpoint_body());
        hex_string(&hasher.finalize())
    }

    /// Write a checkpoint: magic, config JSON, flat weight tensors, trailing
    /// SHA-256 of everything before it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.checkpoint_body();
        let mut hasher = Sha256::new();
        hasher.update(&body);
        let digest = hasher.finalize();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&body)
            .and_then(|_| f.write_all(&digest))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Transformer> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < CKPT_MAGIC.len() + 32 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(Error::Parse(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let body = &bytes[..bytes.len() - 32];
        let stored = &bytes[bytes.len() - 32..];
        let mut hasher = Sha256::new();
        hasher.update(body);
        let digest = hasher.finalize();
        if digest.as_slice() != stored {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: hex_string(stored),
                found: hex_string(&digest),
            });
        }
        let mut pos = CKPT_MAGIC.len();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::Parse(format!("{}: truncated checkpoint", path.display())));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)
            .map_err(|e| Error::Parse(format!("{}: bad config: {e}", path.display())))?;
        let mut model = Transformer::init(&cfg)?;
        // Overwrite initialized weights with stored values, same fixed order.
        let read_into = |pos: &mut usize, len: usize, out: &mut [f64]| -> Result<()> {
            let count = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
            if count != len {
                return Err(Error::Dimension(format!(
                    "{}: tensor has {count} values, expected {len}",
                    path.display()
                )));
            }
            let raw = take(pos, count * 8)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            Ok(())
        };
        macro_rules! load_tensor {
            ($t:expr) => {{
                let len = $t.len();
                read_into(&mut pos, len, $t.as_slice_mut().expect("contiguous"))?;
            }};
        }
        load_tensor!(model.wte);
        load_tensor!(model.wpe);
        load_tensor!(model.w_un);
        for l in 0..model.cfg.n_layers {
            load_tensor!(model.layers[l].wq);
            load_tensor!(model.layers[l].wk);
            load_tensor!(model.layers[l].wv);
            load_tensor!(model.layers[l].wo);
            load_tensor!(model.layers[l].w_in);
            load_tensor!(model.layers[l].w_out);
        }
        load_tensor!(model.lnf_g);
        load_tensor!(model.lnf_b);
        load_tensor!(model.b_un);
        for l in 0..model.cfg.n_layers {
            load_tensor!(model.layers[l].ln1_g);
            load_tensor!(model.layers[l].ln1_b);
            load_tensor!(model.layers[l].ln2_g);
            load_tensor!(model.layers[l].ln2_b);
        }
        if pos != body.len() {
            return Err(Error::Parse(format!(
                "{}: {} trailing bytes in checkpoint",
                path.display(),
                body.len() - pos
            )));
        }
        Ok(model)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean negative log-likelihood over masked target positions.
///
/// A target at position t is scored from the logits at t - 1.
pub fn xent_loss(logits: &Array3<f64>, batch: &Batch) -> Result<f64> {
    Ok(xent_loss_impl(logits, batch, false)?.0)
}

/// Loss plus d(loss)/d(logits) for training.
pub fn xent_loss_and_grad(logits: &Array3<f64>, batch: &Batch) -> Result<(f64, Array3<f64>)> {
    let (loss, grad) = xent_loss_impl(logits, batch, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn xent_loss_impl(
    logits: &Array3<f64>,
    batch: &Batch,
    with_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    let (bsz, t, vocab) = logits.dim();
    if (bsz, t) != batch.tokens.dim() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs tokens {:?}",
            logits.dim(),
            batch.tokens.dim()
        )));
    }
    let n = batch.n_targets();
    if n == 0 {
        return Err(Error::Invalid("batch has no target positions".into()));
    }
    let mut grad = with_grad.then(|| Array3::<f64>::zeros((bsz, t, vocab)));
    let mut total = 0.0;
    for b in 0..bsz {
        for ti in 0..t {
            if !batch.target_mask[(b, ti)] {
                continue;
            }
            debug_assert!(ti > 0);
            let row = logits.slice(s![b, ti - 1, ..]);
            let label = batch.tokens[(b, ti)];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - maxv).exp()).sum();
            total += -(row[label] - maxv - denom.ln());
            if let Some(g) = grad.as_mut() {
                let inv_n = 1.0 / n as f64;
                for vi in 0..vocab {
                    let p = (row[vi] - maxv).exp() / denom;
                    g[(b, ti - 1, vi)] += (p - if vi == label { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
    }
    Ok((total / n as f64, grad))
}
