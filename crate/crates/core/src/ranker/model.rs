//! Set encoder: ReLU input projection, post-norm transformer encoder layers
//! without positional information, mean pooling and a sigmoid head.
//!
//! All parameters live in one flat `Vec<f64>`; gradients use the same layout.

use std::io::{self, Read, Write};

use rand::Rng;

use super::RankerError;
use crate::util::{expect_magic, read_f64s, read_u32, read_u64, write_f64s, write_u32, write_u64};

const MAGIC: &[u8; 8] = b"RANKMDL\x01";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn paper(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 512,
            ff_dim: 1024,
            heads: 8,
            layers: 4,
            dropout: 0.1,
        }
    }

    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 32,
            ff_dim: 64,
            heads: 4,
            layers: 4,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), RankerError> {
        if self.input_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.heads == 0 {
            return Err(RankerError::Config("dimensions and head count must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(RankerError::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RankerError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Linear {
    fn count(&self) -> usize {
        self.inp * self.out + self.out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    g: usize,
    b: usize,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerLayout {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    proj: Linear,
    layers: Vec<LayerLayout>,
    head: Linear,
    total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn linear(&mut self, inp: usize, out: usize) -> Linear {
        let l = Linear {
            w: self.0,
            b: self.0 + inp * out,
            inp,
            out,
        };
        self.0 += l.count();
        l
    }

    fn norm(&mut self, dim: usize) -> Norm {
        let n = Norm {
            g: self.0,
            b: self.0 + dim,
            dim,
        };
        self.0 += 2 * dim;
        n
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut at = Cursor(0);
        let proj = at.linear(c.input_dim, c.model_dim);
        let layers = (0..c.layers)
            .map(|_| LayerLayout {
                q: at.linear(c.model_dim, c.model_dim),
                k: at.linear(c.model_dim, c.model_dim),
                v: at.linear(c.model_dim, c.model_dim),
                o: at.linear(c.model_dim, c.model_dim),
                ln1: at.norm(c.model_dim),
                ff1: at.linear(c.model_dim, c.ff_dim),
                ff2: at.linear(c.ff_dim, c.model_dim),
                ln2: at.norm(c.model_dim),
            })
            .collect();
        let head = at.linear(c.model_dim, 1);
        Self {
            proj,
            layers,
            head,
            total: at.0,
        }
    }
}

/// Parameter counts per component, as a model summary table would list them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub input_projection: usize,
    pub attention: usize,
    pub layer_norm: usize,
    pub ff_in: usize,
    pub ff_out: usize,
    pub encoder_layer: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    concat: Vec<f64>,
    mask_att: Option<Vec<f64>>,
    ln1: NormCache,
    alpha: Vec<f64>,
    f1_pre: Vec<f64>,
    mask_f1: Option<Vec<f64>>,
    f1_drop: Vec<f64>,
    mask_f2: Option<Vec<f64>>,
    ln2: NormCache,
}

/// Intermediate values of one forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    input: Vec<f64>,
    proj_pre: Vec<f64>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    score: f64,
}

impl ForwardCache {
    pub fn score(&self) -> f64 {
        self.score
    }
}

/// y = x W + b for `rows` row vectors.
fn affine(params: &[f64], l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let w = &params[l.w..l.w + l.inp * l.out];
    let b = &params[l.b..l.b + l.out];
    let mut y = Vec::with_capacity(rows * l.out);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * l.out..(r + 1) * l.out];
        for (i, xi) in x[r * l.inp..(r + 1) * l.inp].iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (yj, wij) in yr.iter_mut().zip(&w[i * l.out..(i + 1) * l.out]) {
                *yj += xi * wij;
            }
        }
    }
    y
}

/// Accumulates dW, db into `grad` and returns dx.
fn affine_backward(params: &[f64], grad: &mut [f64], l: &Linear, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * l.inp];
    for r in 0..rows {
        let dyr = &dy[r * l.out..(r + 1) * l.out];
        for (gb, d) in grad[l.b..l.b + l.out].iter_mut().zip(dyr) {
            *gb += d;
        }
        let xr = &x[r * l.inp..(r + 1) * l.inp];
        for i in 0..l.inp {
            let row = l.w + i * l.out;
            let w = &params[row..row + l.out];
            let mut acc = 0.0;
            for (wij, d) in w.iter().zip(dyr) {
                acc += wij * d;
            }
            dx[r * l.inp + i] = acc;
            let xi = xr[i];
            if xi != 0.0 {
                for (g, d) in grad[row..row + l.out].iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
        }
    }
    dx
}

fn layer_norm(params: &[f64], n: &Norm, x: &[f64], rows: usize) -> (Vec<f64>, NormCache) {
    let d = n.dim;
    let g = &params[n.g..n.g + d];
    let b = &params[n.b..n.b + d];
    let mut y = Vec::with_capacity(rows * d);
    let mut xhat = Vec::with_capacity(rows * d);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat.push(h);
            y.push(g[j] * h + b[j]);
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(params: &[f64], grad: &mut [f64], n: &Norm, cache: &NormCache, dy: &[f64], rows: usize) -> Vec<f64> {
    let d = n.dim;
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum = 0.0;
        let mut dot = 0.0;
        for j in 0..d {
            grad[n.g + j] += dyr[j] * xh[j];
            grad[n.b + j] += dyr[j];
            dxhat[j] = dyr[j] * params[n.g + j];
            sum += dxhat[j];
            dot += dxhat[j] * xh[j];
        }
        let inv = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = inv / d as f64 * (d as f64 * dxhat[j] - sum - xh[j] * dot);
        }
    }
    dx
}

fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng.as_mut()?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl RankingModel {
    /// Weights uniform in +-1/sqrt(fan_in), biases zero, LayerNorm gain one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, RankerError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = crate::util::seeded_rng(seed, "ranker-init");
        let mut init = |l: &Linear, params: &mut [f64]| {
            let bound = 1.0 / (l.inp as f64).sqrt();
            for w in &mut params[l.w..l.w + l.inp * l.out] {
                *w = rng.gen_range(-bound..bound);
            }
        };
        init(&layout.proj, &mut params);
        for layer in &layout.layers {
            for l in [&layer.q, &layer.k, &layer.v, &layer.o, &layer.ff1, &layer.ff2] {
                init(l, &mut params);
            }
            for n in [&layer.ln1, &layer.ln2] {
                params[n.g..n.g + n.dim].fill(1.0);
            }
        }
        init(&layout.head, &mut params);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let l = &self.layout;
        let (attention, layer_norm, ff_in, ff_out, encoder_layer) = match l.layers.first() {
            Some(e) => {
                let att = e.q.count() + e.k.count() + e.v.count() + e.o.count();
                let ln = 2 * e.ln1.dim;
                (att, ln, e.ff1.count(), e.ff2.count(), att + 2 * ln + e.ff1.count() + e.ff2.count())
            }
            None => (0, 0, 0, 0, 0),
        };
        ParamCounts {
            input_projection: l.proj.count(),
            attention,
            layer_norm,
            ff_in,
            ff_out,
            encoder_layer,
            head: l.head.count(),
            total: l.total,
        }
    }

    /// Forward pass over `rows` input vectors (row-major). Passing a generator
    /// enables dropout.
    pub fn forward<R: Rng>(&self, input: &[f64], rows: usize, mut dropout: Option<&mut R>) -> ForwardCache {
        let c = &self.config;
        let p = &self.params;
        assert_eq!(input.len(), rows * c.input_dim, "input shape");
        assert!(rows > 0, "empty input set");
        let d = c.model_dim;
        let dk = c.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let proj_pre = affine(p, &self.layout.proj, input, rows);
        let mut h: Vec<f64> = proj_pre.iter().map(|v| v.max(0.0)).collect();
        let mut layers = Vec::with_capacity(c.layers);
        for lay in &self.layout.layers {
            let q = affine(p, &lay.q, &h, rows);
            let k = affine(p, &lay.k, &h, rows);
            let v = affine(p, &lay.v, &h, rows);
            let mut probs = vec![0.0; c.heads * rows * rows];
            let mut concat = vec![0.0; rows * d];
            for hd in 0..c.heads {
                let off = hd * dk;
                let pr = &mut probs[hd * rows * rows..(hd + 1) * rows * rows];
                for i in 0..rows {
                    let qi = &q[i * d + off..i * d + off + dk];
                    let row = &mut pr[i * rows..(i + 1) * rows];
                    for j in 0..rows {
                        let kj = &k[j * d + off..j * d + off + dk];
                        row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                    let out = &mut concat[i * d + off..i * d + off + dk];
                    for j in 0..rows {
                        let a = row[j];
                        for (o, vj) in out.iter_mut().zip(&v[j * d + off..j * d + off + dk]) {
                            *o += a * vj;
                        }
                    }
                }
            }
            let mut att = affine(p, &lay.o, &concat, rows);
            let mask_att = dropout_mask(att.len(), c.dropout, &mut dropout);
            apply_mask(&mut att, &mask_att);
            let r1: Vec<f64> = h.iter().zip(&att).map(|(a, b)| a + b).collect();
            let (alpha, ln1) = layer_norm(p, &lay.ln1, &r1, rows);
            let f1_pre = affine(p, &lay.ff1, &alpha, rows);
            let mut f1_drop: Vec<f64> = f1_pre.iter().map(|v| v.max(0.0)).collect();
            let mask_f1 = dropout_mask(f1_drop.len(), c.dropout, &mut dropout);
            apply_mask(&mut f1_drop, &mask_f1);
            let mut f2 = affine(p, &lay.ff2, &f1_drop, rows);
            let mask_f2 = dropout_mask(f2.len(), c.dropout, &mut dropout);
            apply_mask(&mut f2, &mask_f2);
            let r2: Vec<f64> = alpha.iter().zip(&f2).map(|(a, b)| a + b).collect();
            let (out, ln2) = layer_norm(p, &lay.ln2, &r2, rows);
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                q,
                k,
                v,
                probs,
                concat,
                mask_att,
                ln1,
                alpha,
                f1_pre,
                mask_f1,
                f1_drop,
                mask_f2,
                ln2,
            });
        }
        let mut pooled = vec![0.0; d];
        for r in 0..rows {
            for (m, x) in pooled.iter_mut().zip(&h[r * d..(r + 1) * d]) {
                *m += x;
            }
        }
        pooled.iter_mut().for_each(|m| *m /= rows as f64);
        let z = affine(p, &self.layout.head, &pooled, 1)[0];
        ForwardCache {
            rows,
            input: input.to_vec(),
            proj_pre,
            layers,
            pooled,
            score: sigmoid(z),
        }
    }

    /// Inference score in (0, 1), dropout off.
    pub fn score(&self, input: &[f64], rows: usize) -> f64 {
        self.forward::<rand_chacha::ChaCha8Rng>(input, rows, None).score
    }

    /// Adds `dscore * d(score)/d(params)` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dscore: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let c = &self.config;
        let p = &self.params;
        let rows = cache.rows;
        let d = c.model_dim;
        let dk = c.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let y = cache.score;
        let dz = dscore * y * (1.0 - y);
        let dpooled = affine_backward(p, grad, &self.layout.head, &cache.pooled, &[dz], 1);
        let mut dh: Vec<f64> = (0..rows)
            .flat_map(|_| dpooled.iter().map(|v| v / rows as f64))
            .collect();

        for (lay, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            let dr2 = layer_norm_backward(p, grad, &lay.ln2, &lc.ln2, &dh, rows);
            let mut dalpha = dr2.clone();
            let mut df2 = dr2;
            apply_mask(&mut df2, &lc.mask_f2);
            let mut df1 = affine_backward(p, grad, &lay.ff2, &lc.f1_drop, &df2, rows);
            apply_mask(&mut df1, &lc.mask_f1);
            for (g, pre) in df1.iter_mut().zip(&lc.f1_pre) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let da = affine_backward(p, grad, &lay.ff1, &lc.alpha, &df1, rows);
            dalpha.iter_mut().zip(da).for_each(|(a, b)| *a += b);
            let dr1 = layer_norm_backward(p, grad, &lay.ln1, &lc.ln1, &dalpha, rows);
            let mut dinput = dr1.clone();
            let mut datt = dr1;
            apply_mask(&mut datt, &lc.mask_att);
            let dconcat = affine_backward(p, grad, &lay.o, &lc.concat, &datt, rows);

            let mut dq = vec![0.0; rows * d];
            let mut dkm = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dprob = vec![0.0; rows];
            for hd in 0..c.heads {
                let off = hd * dk;
                let pr = &lc.probs[hd * rows * rows..(hd + 1) * rows * rows];
                for i in 0..rows {
                    let dout = &dconcat[i * d + off..i * d + off + dk];
                    let row = &pr[i * rows..(i + 1) * rows];
                    let mut dot = 0.0;
                    for j in 0..rows {
                        let vj = &lc.v[j * d + off..j * d + off + dk];
                        dprob[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += dprob[j] * row[j];
                        for (g, o) in dv[j * d + off..j * d + off + dk].iter_mut().zip(dout) {
                            *g += row[j] * o;
                        }
                    }
                    for j in 0..rows {
                        let ds = row[j] * (dprob[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dk {
                            dq[i * d + off + t] += ds * lc.k[j * d + off + t];
                            dkm[j * d + off + t] += ds * lc.q[i * d + off + t];
                        }
                    }
                }
            }
            for (l, dy) in [(&lay.q, &dq), (&lay.k, &dkm), (&lay.v, &dv)] {
                let dx = affine_backward(p, grad, l, &lc.input, dy, rows);
                dinput.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
            dh = dinput;
        }
        for (g, pre) in dh.iter_mut().zip(&cache.proj_pre) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        affine_backward(p, grad, &self.layout.proj, &cache.input, &dh, rows);
    }

    pub fn write(&self, w: &mut dyn Write) -> io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        for v in [c.input_dim, c.model_dim, c.ff_dim, c.heads, c.layers] {
            write_u32(w, v as u32)?;
        }
        write_u64(w, c.dropout.to_bits())?;
        write_u64(w, self.params.len() as u64)?;
        write_f64s(w, self.params.iter().copied())
    }

    pub fn read(r: &mut dyn Read) -> Result<Self, RankerError> {
        expect_magic(r, MAGIC)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let config = ModelConfig {
            input_dim: dims[0],
            model_dim: dims[1],
            ff_dim: dims[2],
            heads: dims[3],
            layers: dims[4],
            dropout: f64::from_bits(read_u64(r)?),
        };
        let mut model = Self::new(config, 0)?;
        let n = read_u64(r)? as usize;
        if n != model.params.len() {
            return Err(RankerError::Format(format!(
                "checkpoint has {n} parameters, configuration implies {}",
                model.params.len()
            )));
        }
        model.params = read_f64s(r, n)?;
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(RankerError::Format("non-finite parameters".into()));
        }
        Ok(model)
    }
}
