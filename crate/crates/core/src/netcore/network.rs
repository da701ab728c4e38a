//! Modulated residual dense trunk with AdaLN-Single conditioning and its
//! hand-derived reverse pass.
//!
//! Per sample:
//!
//! ```text
//! τ   = W_t2 · silu(W_t1 · sinusoid(round(999 t)) + b_t1) + b_t2
//! e   = τ + cond_table[cond]            (null vector when unconditioned)
//! c   = W_g · silu(e) + b_g             (6d, shared by every block)
//! h   = W_in · x + b_in
//! for each block b, with [γ1 β1 α1 γ2 β2 α2] = c + E_b:
//!     h1 = h  + α1 ⊙ Attn(LN(h)  ⊙ (1 + γ1) + β1)
//!     h  = h1 + α2 ⊙ Mlp (LN(h1) ⊙ (1 + γ2) + β2)
//! out = W_head · h + b_head
//! ```
//!
//! `Attn` is a single dense map (attention over one token reduces to its value
//! and output projections) and `Mlp` is dense → SiLU → dense.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedules::to_discrete_index;

use super::layout::Layout;
use super::optim::GradientTape;

const LN_EPS: f64 = 1e-6;
const MAX_PERIOD: f64 = 10_000.0;

/// Shape of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Number of blocks `L`.
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Number of condition labels; the null embedding is always present.
    pub cond_count: usize,
}

impl ArchConfig {
    pub fn expert(data_dim: usize, hidden: usize, blocks: usize, cond_count: usize) -> Self {
        Self { input_dim: data_dim, output_dim: data_dim, hidden, blocks, mlp_hidden: 2 * hidden, cond_count }
    }

    pub fn router(data_dim: usize, experts: usize, hidden: usize, blocks: usize) -> Self {
        Self { input_dim: data_dim, output_dim: experts, hidden, blocks, mlp_hidden: 2 * hidden, cond_count: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::Shape(format!("all architecture dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    attn: Dense,
    mlp1: Dense,
    mlp2: Dense,
}

#[derive(Debug, Clone)]
struct Slots {
    t1: Dense,
    t2: Dense,
    cond_table: usize,
    cond_null: usize,
    input: Dense,
    adaln: Dense,
    embed: usize,
    blocks: Vec<BlockSlots>,
    head: Dense,
}

fn dense(layout: &mut Layout, name: &str, rows: usize, cols: usize) -> Dense {
    let w = layout.push(format!("{name}.w"), &[rows, cols]);
    let b = layout.push(format!("{name}.b"), &[rows]);
    Dense { w, b, rows, cols }
}

fn build_layout(arch: &ArchConfig) -> (Layout, Slots) {
    let d = arch.hidden;
    let mut layout = Layout::default();
    let t1 = dense(&mut layout, "t_embed.fc1", d, d);
    let t2 = dense(&mut layout, "t_embed.fc2", d, d);
    let cond_table = layout.push("cond.table", &[arch.cond_count, d]);
    let cond_null = layout.push("cond.null", &[d]);
    let input = dense(&mut layout, "input", d, arch.input_dim);
    let adaln = dense(&mut layout, "adaln.global", 6 * d, d);
    let embed = layout.push("adaln.block_embed", &[arch.blocks, 6, d]);
    let blocks = (0..arch.blocks)
        .map(|b| BlockSlots {
            attn: dense(&mut layout, &format!("blocks.{b}.attn"), d, d),
            mlp1: dense(&mut layout, &format!("blocks.{b}.mlp.fc1"), arch.mlp_hidden, d),
            mlp2: dense(&mut layout, &format!("blocks.{b}.mlp.fc2"), d, arch.mlp_hidden),
        })
        .collect();
    let head = dense(&mut layout, "head", arch.output_dim, d);
    let slots = Slots { t1, t2, cond_table, cond_null, input, adaln, embed, blocks, head };
    (layout, slots)
}

/// Tensors whose initial value is exactly zero.
pub const ZERO_INIT_TENSORS: &[&str] = &["adaln.global.w", "adaln.global.b", "head.w", "head.b", "cond.table", "cond.null"];

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn affine(p: &[f64], l: &Dense, x: &[f64], out: &mut [f64]) {
    let w = &p[l.w..l.w + l.rows * l.cols];
    let b = &p[l.b..l.b + l.rows];
    for r in 0..l.rows {
        let row = &w[r * l.cols..(r + 1) * l.cols];
        out[r] = b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and optionally writes `dx = Wᵀ dy`.
fn affine_back(p: &[f64], g: &mut [f64], l: &Dense, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    {
        let gw = &mut g[l.w..l.w + l.rows * l.cols];
        for r in 0..l.rows {
            let d = dy[r];
            if d != 0.0 {
                let row = &mut gw[r * l.cols..(r + 1) * l.cols];
                for (gr, xv) in row.iter_mut().zip(x) {
                    *gr += d * xv;
                }
            }
        }
    }
    for r in 0..l.rows {
        g[l.b + r] += dy[r];
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        let w = &p[l.w..l.w + l.rows * l.cols];
        for r in 0..l.rows {
            let d = dy[r];
            if d != 0.0 {
                for (dv, wv) in dx.iter_mut().zip(&w[r * l.cols..(r + 1) * l.cols]) {
                    *dv += d * wv;
                }
            }
        }
    }
}

/// Returns `1/std` and writes the normalized vector.
fn layer_norm(h: &[f64], out: &mut [f64]) -> f64 {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(h) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Adds the input gradient of a layer norm to `dh`.
fn layer_norm_back(normed: &[f64], inv: f64, dn: &[f64], dh: &mut [f64]) {
    let n = normed.len() as f64;
    let mean_dn = dn.iter().sum::<f64>() / n;
    let mean_dn_n = dn.iter().zip(normed).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..normed.len() {
        dh[i] += inv * (dn[i] - mean_dn - normed[i] * mean_dn_n);
    }
}

/// Sinusoidal features of the discrete timestep index.
pub fn timestep_features(index: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * j as f64 / half as f64).exp();
        let arg = index as f64 * freq;
        out[j] = arg.cos();
        out[half + j] = arg.sin();
    }
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    h_in: Vec<f64>,
    n1: Vec<f64>,
    inv1: f64,
    u1: Vec<f64>,
    s1: Vec<f64>,
    h1: Vec<f64>,
    n2: Vec<f64>,
    inv2: f64,
    u2: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
    s2: Vec<f64>,
}

/// Forward intermediates for one sample, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    x: Vec<f64>,
    cond: Option<usize>,
    feats: Vec<f64>,
    a1: Vec<f64>,
    s_t: Vec<f64>,
    e: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    blocks: Vec<BlockCache>,
    h_out: Vec<f64>,
    pub out: Vec<f64>,
}

impl ForwardCache {
    pub fn new(arch: &ArchConfig) -> Self {
        let d = arch.hidden;
        let block = BlockCache {
            h_in: vec![0.0; d],
            n1: vec![0.0; d],
            inv1: 0.0,
            u1: vec![0.0; d],
            s1: vec![0.0; d],
            h1: vec![0.0; d],
            n2: vec![0.0; d],
            inv2: 0.0,
            u2: vec![0.0; d],
            z: vec![0.0; arch.mlp_hidden],
            q: vec![0.0; arch.mlp_hidden],
            s2: vec![0.0; d],
        };
        Self {
            x: vec![0.0; arch.input_dim],
            cond: None,
            feats: vec![0.0; d],
            a1: vec![0.0; d],
            s_t: vec![0.0; d],
            e: vec![0.0; d],
            g: vec![0.0; d],
            c: vec![0.0; 6 * d],
            blocks: vec![block; arch.blocks],
            h_out: vec![0.0; d],
            out: vec![0.0; arch.output_dim],
        }
    }
}

/// Scratch buffers for the reverse pass.
#[derive(Debug, Clone)]
pub struct BackwardScratch {
    dh: Vec<f64>,
    dh1: Vec<f64>,
    dv: Vec<f64>,
    du: Vec<f64>,
    dn: Vec<f64>,
    dz: Vec<f64>,
    dmod: Vec<f64>,
    dc: Vec<f64>,
    dg: Vec<f64>,
    de: Vec<f64>,
    ds_t: Vec<f64>,
    da1: Vec<f64>,
}

impl BackwardScratch {
    pub fn new(arch: &ArchConfig) -> Self {
        let d = arch.hidden;
        Self {
            dh: vec![0.0; d],
            dh1: vec![0.0; d],
            dv: vec![0.0; d],
            du: vec![0.0; d],
            dn: vec![0.0; d],
            dz: vec![0.0; arch.mlp_hidden],
            dmod: vec![0.0; 6 * d],
            dc: vec![0.0; 6 * d],
            dg: vec![0.0; d],
            de: vec![0.0; d],
            ds_t: vec![0.0; d],
            da1: vec![0.0; d],
        }
    }
}

/// A parameterized network with live and EMA weights.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchConfig,
    layout: Layout,
    slots: Slots,
    pub(crate) params: Vec<f64>,
    pub(crate) ema: Vec<f64>,
    pub(crate) step_count: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.ema == other.ema && self.step_count == other.step_count
    }
}

impl Network {
    /// Freshly initialized network. Every tensor draws from its own named
    /// stream `init/<tensor name>` under `seed`.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, slots) = build_layout(&arch);
        let mut params = vec![0.0; layout.len()];
        let d = arch.hidden;
        for spec in layout.tensors() {
            let name = spec.name.as_str();
            if ZERO_INIT_TENSORS.contains(&name) {
                continue;
            }
            let mut r = rng::stream(seed, &format!("init/{name}"), 0);
            let dst = &mut params[spec.range()];
            if name == "adaln.block_embed" {
                // γ and β slots ~ N(0, 1/√d); the α gate slots start at zero.
                let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                for (i, v) in dst.iter_mut().enumerate() {
                    let slot = (i / d) % 6;
                    *v = if slot == 2 || slot == 5 { 0.0 } else { normal.sample(&mut r) };
                }
            } else {
                let fan_in = fan_in_of(&layout, name);
                let bound = 1.0 / (fan_in as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = r.random_range(-bound..bound));
            }
        }
        let ema = params.clone();
        Ok(Self { arch, layout, slots, params, ema, step_count: 0 })
    }

    /// Rebuilds a network from stored parameter vectors.
    pub fn from_parts(arch: ArchConfig, params: Vec<f64>, ema: Vec<f64>, step_count: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, slots) = build_layout(&arch);
        if params.len() != layout.len() || ema.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector length {} / ema {} does not match layout {}",
                params.len(),
                ema.len(),
                layout.len()
            )));
        }
        Ok(Self { arch, layout, slots, params, ema, step_count })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.params[range])
    }

    pub fn ema_tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.ema[s.range()])
    }

    pub(crate) fn reset_ema(&mut self) {
        self.ema.copy_from_slice(&self.params);
    }

    fn check_inputs(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Shape(format!("input has dimension {}, network expects {}", x.len(), self.arch.input_dim)));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        if let Some(c) = cond {
            if c >= self.arch.cond_count {
                return Err(Error::Shape(format!("condition {c} out of range (have {})", self.arch.cond_count)));
            }
        }
        Ok(())
    }

    /// Forward pass with a fresh cache. `cond = None` selects the null embedding.
    pub fn forward(&self, x: &[f64], t: f64, cond: Option<usize>, use_ema: bool) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::new(&self.arch);
        self.forward_into(x, t, cond, use_ema, &mut cache)?;
        Ok(cache.out)
    }

    /// Forward pass writing all intermediates into `cache`.
    pub fn forward_into(&self, x: &[f64], t: f64, cond: Option<usize>, use_ema: bool, cache: &mut ForwardCache) -> Result<()> {
        self.check_inputs(x, t, cond)?;
        let p: &[f64] = if use_ema { &self.ema } else { &self.params };
        self.forward_raw(p, x, t, cond, cache);
        Ok(())
    }

    pub(crate) fn forward_raw(&self, p: &[f64], x: &[f64], t: f64, cond: Option<usize>, cache: &mut ForwardCache) {
        let s = &self.slots;
        let d = self.arch.hidden;
        cache.x.copy_from_slice(x);
        cache.cond = cond;
        timestep_features(to_discrete_index(t), d, &mut cache.feats);
        affine(p, &s.t1, &cache.feats, &mut cache.a1);
        for (o, a) in cache.s_t.iter_mut().zip(&cache.a1) {
            *o = silu(*a);
        }
        affine(p, &s.t2, &cache.s_t, &mut cache.e);
        let cond_off = match cond {
            Some(c) => s.cond_table + c * d,
            None => s.cond_null,
        };
        for (e, cv) in cache.e.iter_mut().zip(&p[cond_off..cond_off + d]) {
            *e += cv;
        }
        for (g, e) in cache.g.iter_mut().zip(&cache.e) {
            *g = silu(*e);
        }
        affine(p, &s.adaln, &cache.g, &mut cache.c);

        let mut h = vec![0.0; d];
        affine(p, &s.input, x, &mut h);
        for (b, bs) in s.blocks.iter().enumerate() {
            let emb = &p[s.embed + b * 6 * d..s.embed + (b + 1) * 6 * d];
            let m = |slot: usize, i: usize| cache.c[slot * d + i] + emb[slot * d + i];
            let bc = &mut cache.blocks[b];
            bc.h_in.copy_from_slice(&h);
            bc.inv1 = layer_norm(&bc.h_in, &mut bc.n1);
            for i in 0..d {
                bc.u1[i] = bc.n1[i] * (1.0 + m(0, i)) + m(1, i);
            }
            affine(p, &bs.attn, &bc.u1, &mut bc.s1);
            for i in 0..d {
                bc.h1[i] = bc.h_in[i] + m(2, i) * bc.s1[i];
            }
            bc.inv2 = layer_norm(&bc.h1, &mut bc.n2);
            for i in 0..d {
                bc.u2[i] = bc.n2[i] * (1.0 + m(3, i)) + m(4, i);
            }
            affine(p, &bs.mlp1, &bc.u2, &mut bc.z);
            for (q, z) in bc.q.iter_mut().zip(&bc.z) {
                *q = silu(*z);
            }
            affine(p, &bs.mlp2, &bc.q, &mut bc.s2);
            for (i, hi) in h.iter_mut().enumerate() {
                *hi = bc.h1[i] + m(5, i) * bc.s2[i];
            }
        }
        cache.h_out.copy_from_slice(&h);
        affine(p, &s.head, &h, &mut cache.out);
    }

    /// Accumulates `∂L/∂θ` into `tape` given `dout = ∂L/∂out` for the sample
    /// whose intermediates are in `cache` (computed with live parameters).
    pub fn backward_into(&self, cache: &ForwardCache, dout: &[f64], tape: &mut GradientTape, scratch: &mut BackwardScratch) {
        let p = &self.params;
        let g = &mut tape.grads;
        let s = &self.slots;
        let d = self.arch.hidden;
        let sc = scratch;

        affine_back(p, g, &s.head, &cache.h_out, dout, Some(&mut sc.dh));
        sc.dc.iter_mut().for_each(|v| *v = 0.0);

        for (b, bs) in s.blocks.iter().enumerate().rev() {
            let emb_off = s.embed + b * 6 * d;
            let m = |slot: usize, i: usize| cache.c[slot * d + i] + p[emb_off + slot * d + i];
            let bc = &cache.blocks[b];

            // h_out = h1 + α2 ⊙ s2
            for i in 0..d {
                sc.dmod[5 * d + i] = sc.dh[i] * bc.s2[i];
                sc.dv[i] = sc.dh[i] * m(5, i);
            }
            sc.dh1.copy_from_slice(&sc.dh);
            affine_back(p, g, &bs.mlp2, &bc.q, &sc.dv, Some(&mut sc.dz));
            for (dz, z) in sc.dz.iter_mut().zip(&bc.z) {
                *dz *= silu_grad(*z);
            }
            affine_back(p, g, &bs.mlp1, &bc.u2, &sc.dz, Some(&mut sc.du));
            for i in 0..d {
                sc.dmod[3 * d + i] = sc.du[i] * bc.n2[i];
                sc.dmod[4 * d + i] = sc.du[i];
                sc.dn[i] = sc.du[i] * (1.0 + m(3, i));
            }
            layer_norm_back(&bc.n2, bc.inv2, &sc.dn, &mut sc.dh1);

            // h1 = h_in + α1 ⊙ s1
            for i in 0..d {
                sc.dmod[2 * d + i] = sc.dh1[i] * bc.s1[i];
                sc.dv[i] = sc.dh1[i] * m(2, i);
            }
            sc.dh.copy_from_slice(&sc.dh1);
            affine_back(p, g, &bs.attn, &bc.u1, &sc.dv, Some(&mut sc.du));
            for i in 0..d {
                sc.dmod[i] = sc.du[i] * bc.n1[i];
                sc.dmod[d + i] = sc.du[i];
                sc.dn[i] = sc.du[i] * (1.0 + m(0, i));
            }
            layer_norm_back(&bc.n1, bc.inv1, &sc.dn, &mut sc.dh);

            for j in 0..6 * d {
                g[emb_off + j] += sc.dmod[j];
                sc.dc[j] += sc.dmod[j];
            }
        }

        affine_back(p, g, &s.input, &cache.x, &sc.dh, None);
        affine_back(p, g, &s.adaln, &cache.g, &sc.dc, Some(&mut sc.dg));
        for i in 0..d {
            sc.de[i] = sc.dg[i] * silu_grad(cache.e[i]);
        }
        let cond_off = match cache.cond {
            Some(c) => s.cond_table + c * d,
            None => s.cond_null,
        };
        for i in 0..d {
            g[cond_off + i] += sc.de[i];
        }
        affine_back(p, g, &s.t2, &cache.s_t, &sc.de, Some(&mut sc.ds_t));
        for i in 0..d {
            sc.da1[i] = sc.ds_t[i] * silu_grad(cache.a1[i]);
        }
        affine_back(p, g, &s.t1, &cache.feats, &sc.da1, None);
    }

    /// α-gate modulation vectors `(α_msa, α_mlp)` of every block at `(t, cond)`.
    pub fn gate_values(&self, t: f64, cond: Option<usize>) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let x = vec![0.0; self.arch.input_dim];
        let mut cache = ForwardCache::new(&self.arch);
        self.forward_into(&x, t, cond, false, &mut cache)?;
        let d = self.arch.hidden;
        let s = &self.slots;
        Ok((0..self.arch.blocks)
            .map(|b| {
                let emb = &self.params[s.embed + b * 6 * d..s.embed + (b + 1) * 6 * d];
                let gate = |slot: usize| (0..d).map(|i| cache.c[slot * d + i] + emb[slot * d + i]).collect();
                (gate(2), gate(5))
            })
            .collect())
    }
}

fn fan_in_of(layout: &Layout, name: &str) -> usize {
    let weight_name = match name.strip_suffix(".b") {
        Some(stem) => format!("{stem}.w"),
        None => name.to_string(),
    };
    layout.get(&weight_name).and_then(|s| s.dims.get(1).copied()).unwrap_or(1).max(1)
}
