//! Per-frame bone/gap/entrance/exit classifier: 1D convolutions, GRU layers
//! and a fully connected softmax head, with analytic gradients and training.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tactile_pc::runs;
use crate::tactsim::{label_transitions, SignalWindow, TraceLabel};

pub const N_CLASSES: usize = 4;
pub const BONE_THRESHOLD: f64 = 0.9;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Layout `[k][in][out]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kernel,
            in_ch,
            out_ch,
            weight: vec![0.0; kernel * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn weight_at(&self, k: usize, i: usize, o: usize) -> f64 {
        self.weight[(k * self.in_ch + i) * self.out_ch + o]
    }
}

/// Gate order everywhere: update (z), reset (r), candidate (n).
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub input: usize,
    pub hidden: usize,
    /// Input weights, `[hidden][input]` each.
    pub w: [Vec<f64>; 3],
    /// Recurrent weights, `[hidden][hidden]` each.
    pub u: [Vec<f64>; 3],
    pub b: [Vec<f64>; 3],
}

impl GruLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wi = || vec![0.0; hidden * input];
        let wh = || vec![0.0; hidden * hidden];
        let bb = || vec![0.0; hidden];
        Self {
            input,
            hidden,
            w: [wi(), wi(), wi()],
            u: [wh(), wh(), wh()],
            b: [bb(), bb(), bb()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub input: usize,
    pub output: usize,
    /// `[output][input]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            weight: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }
}

/// Layer sizes of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_ch: usize,
    /// (kernel, output channels) per conv layer.
    pub conv: Vec<(usize, usize)>,
    /// Hidden size per GRU layer.
    pub gru: Vec<usize>,
    pub classes: usize,
    pub padding: Padding,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_ch: 1,
            conv: vec![(7, 8), (7, 16)],
            gru: vec![32],
            classes: N_CLASSES,
            padding: Padding::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub conv: Vec<ConvLayer>,
    pub gru: Vec<GruLayer>,
    pub fc: FcLayer,
    pub padding: Padding,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let mut ch = arch.in_ch;
        let conv = arch
            .conv
            .iter()
            .map(|&(k, o)| {
                let l = ConvLayer::zeros(k, ch, o);
                ch = o;
                l
            })
            .collect();
        let gru = arch
            .gru
            .iter()
            .map(|&h| {
                let l = GruLayer::zeros(ch, h);
                ch = h;
                l
            })
            .collect();
        Self {
            conv,
            gru,
            fc: FcLayer::zeros(ch, arch.classes),
            padding: arch.padding,
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in v {
                *x = rng.random_range(-a..a);
            }
        };
        for l in &mut p.conv {
            fill(&mut l.weight, l.kernel * l.in_ch, l.kernel * l.out_ch);
        }
        for l in &mut p.gru {
            for g in 0..3 {
                fill(&mut l.w[g], l.input, l.hidden);
                fill(&mut l.u[g], l.hidden, l.hidden);
            }
        }
        fill(&mut p.fc.weight, p.fc.input, p.fc.output);
        p
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_ch: self.conv.first().map_or(
                self.gru.first().map_or(self.fc.input, |g| g.input),
                |c| c.in_ch,
            ),
            conv: self.conv.iter().map(|c| (c.kernel, c.out_ch)).collect(),
            gru: self.gru.iter().map(|g| g.hidden).collect(),
            classes: self.fc.output,
            padding: self.padding,
        }
    }

    /// Named tensors with their dimensions, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c.kernel, c.in_ch, c.out_ch], &c.weight));
            out.push((format!("conv{i}.bias"), vec![c.out_ch], &c.bias));
        }
        for (i, g) in self.gru.iter().enumerate() {
            for (k, gate) in ["z", "r", "n"].iter().enumerate() {
                out.push((format!("gru{i}.w_{gate}"), vec![g.hidden, g.input], &g.w[k]));
                out.push((format!("gru{i}.u_{gate}"), vec![g.hidden, g.hidden], &g.u[k]));
                out.push((format!("gru{i}.b_{gate}"), vec![g.hidden], &g.b[k]));
            }
        }
        out.push(("fc.weight".into(), vec![self.fc.output, self.fc.input], &self.fc.weight));
        out.push(("fc.bias".into(), vec![self.fc.output], &self.fc.bias));
        out
    }

    /// Mutable views in the order of [`tensors`](Self::tensors), tagged
    /// with their layer name.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}"), &mut c.weight));
            out.push((format!("conv{i}"), &mut c.bias));
        }
        for (i, g) in self.gru.iter_mut().enumerate() {
            let GruLayer { w, u, b, .. } = g;
            for ((wk, uk), bk) in w.iter_mut().zip(u.iter_mut()).zip(b.iter_mut()) {
                out.push((format!("gru{i}"), wk));
                out.push((format!("gru{i}"), uk));
                out.push((format!("gru{i}"), bk));
            }
        }
        out.push(("fc".into(), &mut self.fc.weight));
        out.push(("fc".into(), &mut self.fc.bias));
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.conv.len()).map(|i| format!("conv{i}")).collect();
        v.extend((0..self.gru.len()).map(|i| format!("gru{i}")));
        v.push("fc".into());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::validation("values", "length differs from parameter count"));
        }
        let mut k = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |layer: String, reason: String| Error::Shape { layer, reason };
        let mut ch = self.conv.first().map(|c| c.in_ch);
        for (i, c) in self.conv.iter().enumerate() {
            let name = format!("conv{i}");
            if c.kernel == 0 || c.kernel % 2 == 0 {
                return Err(shape(name, format!("kernel {} must be odd", c.kernel)));
            }
            if Some(c.in_ch) != ch {
                return Err(shape(name, format!("expects {} input channels, got {:?}", c.in_ch, ch)));
            }
            if c.weight.len() != c.kernel * c.in_ch * c.out_ch || c.bias.len() != c.out_ch {
                return Err(shape(name, "weight/bias size mismatch".into()));
            }
            ch = Some(c.out_ch);
        }
        for (i, g) in self.gru.iter().enumerate() {
            let name = format!("gru{i}");
            if let Some(c) = ch {
                if g.input != c {
                    return Err(shape(name, format!("expects input {}, got {c}", g.input)));
                }
            }
            for k in 0..3 {
                if g.w[k].len() != g.hidden * g.input
                    || g.u[k].len() != g.hidden * g.hidden
                    || g.b[k].len() != g.hidden
                {
                    return Err(shape(name, "gate matrix size mismatch".into()));
                }
            }
            ch = Some(g.hidden);
        }
        if let Some(c) = ch {
            if self.fc.input != c {
                return Err(shape("fc".into(), format!("expects input {}, got {c}", self.fc.input)));
            }
        }
        if self.fc.weight.len() != self.fc.input * self.fc.output || self.fc.bias.len() != self.fc.output {
            return Err(shape("fc".into(), "weight/bias size mismatch".into()));
        }
        if self.fc.output != N_CLASSES {
            return Err(shape("fc".into(), format!("must output {N_CLASSES} classes")));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        self.architecture().in_ch
    }
}

/// Row-major frames × classes probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl ClassProbs {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * N_CLASSES..(t + 1) * N_CLASSES]
    }

    pub fn bone(&self) -> Vec<f64> {
        (0..self.frames).map(|t| self.row(t)[0]).collect()
    }

    pub fn argmax(&self) -> Vec<u8> {
        (0..self.frames)
            .map(|t| {
                let r = self.row(t);
                (0..N_CLASSES).fold(0, |b, c| if r[c] > r[b] { c } else { b }) as u8
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn src_index(t: usize, k: usize, half: usize, len: usize, padding: Padding) -> Option<usize> {
    let s = t as isize + k as isize - half as isize;
    match padding {
        Padding::Zero => (0..len as isize).contains(&s).then_some(s as usize),
        Padding::Circular => Some(s.rem_euclid(len as isize) as usize),
    }
}

fn conv_forward(l: &ConvLayer, x: &[f64], frames: usize, padding: Padding) -> Vec<f64> {
    let half = l.kernel / 2;
    let mut out = vec![0.0; frames * l.out_ch];
    for t in 0..frames {
        let acc = &mut out[t * l.out_ch..(t + 1) * l.out_ch];
        acc.copy_from_slice(&l.bias);
        for k in 0..l.kernel {
            let Some(s) = src_index(t, k, half, frames, padding) else {
                continue;
            };
            for i in 0..l.in_ch {
                let xv = x[s * l.in_ch + i];
                let wrow = &l.weight[(k * l.in_ch + i) * l.out_ch..(k * l.in_ch + i + 1) * l.out_ch];
                for (a, &w) in acc.iter_mut().zip(wrow) {
                    *a += xv * w;
                }
            }
        }
    }
    out
}

fn matvec_add(w: &[f64], x: &[f64], rows: usize, out: &mut [f64]) {
    let cols = x.len();
    for j in 0..rows {
        let row = &w[j * cols..(j + 1) * cols];
        out[j] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Transposed product accumulated into `out` (length = columns of `w`).
fn matvec_t_add(w: &[f64], d: &[f64], cols: usize, out: &mut [f64]) {
    for (j, &dj) in d.iter().enumerate() {
        if dj == 0.0 {
            continue;
        }
        let row = &w[j * cols..(j + 1) * cols];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * dj;
        }
    }
}

fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (j, &dj) in d.iter().enumerate() {
        if dj == 0.0 {
            continue;
        }
        let row = &mut g[j * cols..(j + 1) * cols];
        for (r, &xv) in row.iter_mut().zip(x) {
            *r += dj * xv;
        }
    }
}

struct GruCache {
    x: Vec<f64>,
    /// Hidden states h_0..h_T, (T+1) x H.
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

struct ForwardCache {
    conv_in: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    gru: Vec<GruCache>,
    top: Vec<f64>,
    probs: ClassProbs,
}

fn gru_forward(l: &GruLayer, x: &[f64], frames: usize) -> GruCache {
    let (hs, is) = (l.hidden, l.input);
    let mut h = vec![0.0; (frames + 1) * hs];
    let mut z = vec![0.0; frames * hs];
    let mut r = vec![0.0; frames * hs];
    let mut n = vec![0.0; frames * hs];
    let mut az = vec![0.0; hs];
    let mut ar = vec![0.0; hs];
    let mut an = vec![0.0; hs];
    let mut rh = vec![0.0; hs];
    for t in 0..frames {
        let xt = &x[t * is..(t + 1) * is];
        let (prev, rest) = h.split_at_mut((t + 1) * hs);
        let hp = &prev[t * hs..];
        az.copy_from_slice(&l.b[0]);
        ar.copy_from_slice(&l.b[1]);
        an.copy_from_slice(&l.b[2]);
        matvec_add(&l.w[0], xt, hs, &mut az);
        matvec_add(&l.u[0], hp, hs, &mut az);
        matvec_add(&l.w[1], xt, hs, &mut ar);
        matvec_add(&l.u[1], hp, hs, &mut ar);
        let zt = &mut z[t * hs..(t + 1) * hs];
        let rt = &mut r[t * hs..(t + 1) * hs];
        for j in 0..hs {
            zt[j] = sigmoid(az[j]);
            rt[j] = sigmoid(ar[j]);
            rh[j] = rt[j] * hp[j];
        }
        matvec_add(&l.w[2], xt, hs, &mut an);
        matvec_add(&l.u[2], &rh, hs, &mut an);
        let nt = &mut n[t * hs..(t + 1) * hs];
        let hn = &mut rest[..hs];
        for j in 0..hs {
            nt[j] = an[j].tanh();
            hn[j] = (1.0 - zt[j]) * nt[j] + zt[j] * hp[j];
        }
    }
    GruCache {
        x: x.to_vec(),
        h,
        z,
        r,
        n,
    }
}

fn check_input(params: &NetworkParams, input: &[f64]) -> Result<usize> {
    params.validate()?;
    let ch = params.input_channels();
    if input.is_empty() || input.len() % ch != 0 {
        return Err(Error::Shape {
            layer: "input".into(),
            reason: format!("length {} is not a multiple of {ch} channels", input.len()),
        });
    }
    Ok(input.len() / ch)
}

fn forward_cached(params: &NetworkParams, input: &[f64]) -> Result<ForwardCache> {
    let frames = check_input(params, input)?;
    let mut x = input.to_vec();
    let mut conv_in = Vec::new();
    let mut conv_pre = Vec::new();
    for l in &params.conv {
        let pre = conv_forward(l, &x, frames, params.padding);
        conv_in.push(std::mem::take(&mut x));
        x = pre.iter().map(|&v| v.max(0.0)).collect();
        conv_pre.push(pre);
    }
    let mut gru = Vec::new();
    for l in &params.gru {
        let c = gru_forward(l, &x, frames);
        x = c.h[l.hidden..].to_vec();
        gru.push(c);
    }
    let fc = &params.fc;
    let mut data = vec![0.0; frames * N_CLASSES];
    let mut logits = vec![0.0; N_CLASSES];
    for t in 0..frames {
        logits.copy_from_slice(&fc.bias);
        matvec_add(&fc.weight, &x[t * fc.input..(t + 1) * fc.input], N_CLASSES, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: "fc".into() });
        }
        softmax_into(&logits, &mut data[t * N_CLASSES..(t + 1) * N_CLASSES]);
    }
    Ok(ForwardCache {
        conv_in,
        conv_pre,
        gru,
        top: x,
        probs: ClassProbs { frames, data },
    })
}

/// Class probabilities per frame for a single-channel signal.
pub fn forward(window: &SignalWindow, params: &NetworkParams) -> Result<ClassProbs> {
    forward_signal(&window.values, params)
}

/// Class probabilities for a frames × channels row-major input.
pub fn forward_signal(input: &[f64], params: &NetworkParams) -> Result<ClassProbs> {
    Ok(forward_cached(params, input)?.probs)
}

/// Output of the conv stack (after ReLU), frames × channels.
pub fn conv_features(input: &[f64], params: &NetworkParams) -> Result<Vec<f64>> {
    let frames = check_input(params, input)?;
    let mut x = input.to_vec();
    for l in &params.conv {
        x = conv_forward(l, &x, frames, params.padding)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// A labelled probability fell below the clamp floor.
    pub clamped: bool,
}

fn check_labels(probs: &ClassProbs, labels: &[u8]) -> Result<()> {
    if labels.len() != probs.frames {
        return Err(Error::validation("labels", "length differs from frame count"));
    }
    if labels.iter().any(|&l| l as usize >= N_CLASSES) {
        return Err(Error::validation("labels", "class id out of range"));
    }
    Ok(())
}

/// Mean cross-entropy over frames.
pub fn loss(probs: &ClassProbs, labels: &[u8]) -> Result<LossValue> {
    weighted_loss(probs, labels, &[1.0; N_CLASSES])
}

/// Cross-entropy averaged with per-class frame weights.
pub fn weighted_loss(probs: &ClassProbs, labels: &[u8], weights: &[f64; N_CLASSES]) -> Result<LossValue> {
    check_labels(probs, labels)?;
    let mut clamped = false;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        let mut p = probs.row(t)[l as usize];
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped = true;
        }
        let w = weights[l as usize];
        num -= w * p.ln();
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::validation("weights", "labelled frames carry no weight"));
    }
    Ok(LossValue {
        value: num / den,
        clamped,
    })
}

/// Layers excluded from updates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMask {
    pub frozen: Vec<String>,
}

impl LayerMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn freeze(names: &[&str]) -> Self {
        Self {
            frozen: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn is_frozen(&self, layer: &str) -> bool {
        self.frozen.iter().any(|f| f == layer)
    }
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: LossValue,
    pub grads: NetworkParams,
    pub probs: ClassProbs,
}

/// Loss and analytic gradient (backpropagation through time) for one
/// sequence, with unit class weights.
pub fn gradients(
    params: &NetworkParams,
    window: &SignalWindow,
    mask: &LayerMask,
) -> Result<GradientResult> {
    gradients_weighted(params, &window.values, &window.labels, &[1.0; N_CLASSES], mask)
}

pub fn gradients_weighted(
    params: &NetworkParams,
    input: &[f64],
    labels: &[u8],
    weights: &[f64; N_CLASSES],
    mask: &LayerMask,
) -> Result<GradientResult> {
    let cache = forward_cached(params, input)?;
    let probs = cache.probs;
    let lv = weighted_loss(&probs, labels, weights)?;
    let frames = probs.frames;
    let den: f64 = labels.iter().map(|&l| weights[l as usize]).sum();
    let mut g = NetworkParams::zeros(&params.architecture());

    // head
    let fc = &params.fc;
    let mut dx = vec![0.0; frames * fc.input];
    let mut dl = [0.0; N_CLASSES];
    for t in 0..frames {
        let l = labels[t] as usize;
        let w = weights[l] / den;
        let p = probs.row(t);
        for c in 0..N_CLASSES {
            dl[c] = w * (p[c] - if c == l { 1.0 } else { 0.0 });
        }
        let xt = &cache.top[t * fc.input..(t + 1) * fc.input];
        outer_add(&mut g.fc.weight, &dl, xt);
        for c in 0..N_CLASSES {
            g.fc.bias[c] += dl[c];
        }
        matvec_t_add(&fc.weight, &dl, fc.input, &mut dx[t * fc.input..(t + 1) * fc.input]);
    }

    // recurrent stack, top to bottom
    for (li, (l, c)) in params.gru.iter().zip(&cache.gru).enumerate().rev() {
        let gl = &mut g.gru[li];
        let (hs, is) = (l.hidden, l.input);
        let mut dxin = vec![0.0; frames * is];
        let mut dh_next = vec![0.0; hs];
        let mut dan = vec![0.0; hs];
        let mut daz = vec![0.0; hs];
        let mut dar = vec![0.0; hs];
        let mut drh = vec![0.0; hs];
        let mut rh = vec![0.0; hs];
        for t in (0..frames).rev() {
            let hp = &c.h[t * hs..(t + 1) * hs];
            let zt = &c.z[t * hs..(t + 1) * hs];
            let rt = &c.r[t * hs..(t + 1) * hs];
            let nt = &c.n[t * hs..(t + 1) * hs];
            let xt = &c.x[t * is..(t + 1) * is];
            let mut dh_prev = vec![0.0; hs];
            for j in 0..hs {
                let dh = dx[t * hs + j] + dh_next[j];
                let dn = dh * (1.0 - zt[j]);
                let dz = dh * (hp[j] - nt[j]);
                dh_prev[j] = dh * zt[j];
                dan[j] = dn * (1.0 - nt[j] * nt[j]);
                daz[j] = dz * zt[j] * (1.0 - zt[j]);
                rh[j] = rt[j] * hp[j];
            }
            drh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&l.u[2], &dan, hs, &mut drh);
            for j in 0..hs {
                dar[j] = drh[j] * hp[j] * rt[j] * (1.0 - rt[j]);
                dh_prev[j] += drh[j] * rt[j];
            }
            outer_add(&mut gl.w[0], &daz, xt);
            outer_add(&mut gl.w[1], &dar, xt);
            outer_add(&mut gl.w[2], &dan, xt);
            outer_add(&mut gl.u[0], &daz, hp);
            outer_add(&mut gl.u[1], &dar, hp);
            outer_add(&mut gl.u[2], &dan, &rh);
            for j in 0..hs {
                gl.b[0][j] += daz[j];
                gl.b[1][j] += dar[j];
                gl.b[2][j] += dan[j];
            }
            matvec_t_add(&l.u[0], &daz, hs, &mut dh_prev);
            matvec_t_add(&l.u[1], &dar, hs, &mut dh_prev);
            let dxt = &mut dxin[t * is..(t + 1) * is];
            matvec_t_add(&l.w[0], &daz, is, dxt);
            matvec_t_add(&l.w[1], &dar, is, dxt);
            matvec_t_add(&l.w[2], &dan, is, dxt);
            dh_next = dh_prev;
        }
        dx = dxin;
    }

    // conv stack, top to bottom
    for (li, l) in params.conv.iter().enumerate().rev() {
        let gl = &mut g.conv[li];
        let pre = &cache.conv_pre[li];
        let xin = &cache.conv_in[li];
        let half = l.kernel / 2;
        let mut dxin = vec![0.0; frames * l.in_ch];
        for t in 0..frames {
            let dpre: Vec<f64> = (0..l.out_ch)
                .map(|o| if pre[t * l.out_ch + o] > 0.0 { dx[t * l.out_ch + o] } else { 0.0 })
                .collect();
            for o in 0..l.out_ch {
                gl.bias[o] += dpre[o];
            }
            for k in 0..l.kernel {
                let Some(s) = src_index(t, k, half, frames, params.padding) else {
                    continue;
                };
                for i in 0..l.in_ch {
                    let base = (k * l.in_ch + i) * l.out_ch;
                    let xv = xin[s * l.in_ch + i];
                    let mut acc = 0.0;
                    for o in 0..l.out_ch {
                        gl.weight[base + o] += dpre[o] * xv;
                        acc += l.weight[base + o] * dpre[o];
                    }
                    dxin[s * l.in_ch + i] += acc;
                }
            }
        }
        dx = dxin;
    }

    for (name, t) in g.tensors_mut() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: name });
        }
        if mask.is_frozen(&name) {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(GradientResult {
        loss: lv,
        grads: g,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum { .. } => "sgd_momentum",
            Optimizer::Adam { .. } => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => Optimizer::Sgd,
            "sgd_momentum" | "momentum" => Optimizer::Momentum { beta: 0.9 },
            "adam" => Optimizer::adam(),
            _ => return Err(Error::validation("optimizer", format!("unknown optimizer {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub class_weights: [f64; N_CLASSES],
    pub mask: LayerMask,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            optimizer: Optimizer::adam(),
            class_weights: [1.0, 1.0, 4.0, 4.0],
            mask: LayerMask::none(),
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be >= 1"));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::validation("class_weights", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's forward passes.
    pub loss: f64,
    /// Frame-wise argmax accuracy over the same passes.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: NetworkParams,
    pub log: Vec<EpochLog>,
}

impl TrainOutput {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy\n");
        for e in &self.log {
            let _ = writeln!(s, "{},{:.9},{:.6}", e.epoch, e.loss, e.accuracy);
        }
        s
    }
}

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

fn apply_update(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut OptState,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let g_all = grads.tensors();
    let lr = cfg.learning_rate;
    for (k, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        if cfg.mask.is_frozen(&name) {
            continue;
        }
        let g = g_all[k].2;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * gi;
                }
            }
            Optimizer::Momentum { beta } => {
                let m = &mut state.m[k];
                for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                    *mi = beta * *mi + gi;
                    *pi -= lr * *mi;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(state.step);
                let c2 = 1.0 - beta2.powi(state.step);
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Mini-batch training from `init`. Sample order is shuffled every epoch
/// from `cfg.seed`; batch gradients are summed in sample order.
pub fn train_from(init: NetworkParams, dataset: &[SignalWindow], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Insufficient("training set is empty".into()));
    }
    init.validate()?;
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.2.len()).collect();
    let mut state = OptState {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        step: 0,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut frames = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<NetworkParams> = None;
            for &i in batch {
                let w = &dataset[i];
                let r = gradients_weighted(&params, &w.values, &w.labels, &cfg.class_weights, &cfg.mask)
                    .map_err(|e| match e {
                        Error::Numeric { .. } => Error::Diverged { epoch },
                        other => other,
                    })?;
                if !r.loss.value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += r.loss.value;
                correct += r
                    .probs
                    .argmax()
                    .iter()
                    .zip(&w.labels)
                    .filter(|(a, b)| a == b)
                    .count();
                frames += w.labels.len();
                match &mut acc {
                    None => acc = Some(r.grads),
                    Some(a) => {
                        let src = r.grads.flat();
                        let mut k = 0;
                        for (_, t) in a.tensors_mut() {
                            for v in t.iter_mut() {
                                *v += src[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for (_, t) in grads.tensors_mut() {
                for v in t.iter_mut() {
                    *v *= scale;
                    norm2 += *v * *v;
                }
            }
            if let Some(c) = cfg.clip_norm {
                let norm = norm2.sqrt();
                if norm > c {
                    for (_, t) in grads.tensors_mut() {
                        t.iter_mut().for_each(|v| *v *= c / norm);
                    }
                }
            }
            apply_update(&mut params, &grads, &mut state, cfg);
        }
        let mean = loss_sum / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        log.push(EpochLog {
            epoch,
            loss: mean,
            accuracy: correct as f64 / frames as f64,
        });
    }
    Ok(TrainOutput { params, log })
}

/// Trains the default architecture from a seeded initialization.
pub fn train(dataset: &[SignalWindow], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_from(NetworkParams::init(&Architecture::default(), cfg.seed), dataset, cfg)
}

/// Bone where the bone probability strictly exceeds 0.9; transitions are
/// re-derived from the thresholded sequence.
pub fn segment(probs: &ClassProbs) -> Vec<TraceLabel> {
    let bone: Vec<bool> = probs.bone().iter().map(|&p| p > BONE_THRESHOLD).collect();
    label_transitions(&bone)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    /// Percent of predicted bone frames inside labelled bone; `None` when
    /// nothing was predicted as bone.
    pub accuracy: Option<f64>,
    /// Mean centroid distance (mm) of predicted bone sections to the nearest
    /// labelled section; NaN when undefined.
    pub centroid_shift: f64,
    pub predicted_sections: usize,
}

pub fn detection_metrics(pred: &[TraceLabel], gt: &[TraceLabel], spacing: f64) -> Result<DetectionMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::validation("pred", "length differs from ground truth"));
    }
    let pb: Vec<bool> = pred.iter().map(|l| l.is_bone()).collect();
    let gb: Vec<bool> = gt.iter().map(|l| l.is_bone()).collect();
    let n_pred = pb.iter().filter(|&&b| b).count();
    let hits = pb.iter().zip(&gb).filter(|(p, g)| **p && **g).count();
    let accuracy = (n_pred > 0).then(|| 100.0 * hits as f64 / n_pred as f64);
    let centroid = |(a, b): (usize, usize)| 0.5 * (a + b) as f64 * spacing;
    let gt_c: Vec<f64> = runs(&gb).into_iter().map(centroid).collect();
    let pr_c: Vec<f64> = runs(&pb).into_iter().map(centroid).collect();
    let centroid_shift = if pr_c.is_empty() || gt_c.is_empty() {
        f64::NAN
    } else {
        pr_c.iter()
            .map(|p| gt_c.iter().map(|g| (p - g).abs()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / pr_c.len() as f64
    };
    Ok(DetectionMetrics {
        accuracy,
        centroid_shift,
        predicted_sections: pr_c.len(),
    })
}

const TNET_MAGIC: &[u8; 4] = b"TNET";
const TNET_VERSION: u16 = 1;
const PADDING_TENSOR: &str = "meta.padding";

pub fn write_model(mut w: impl Write, params: &NetworkParams) -> Result<()> {
    let pad = [match params.padding {
        Padding::Zero => 0.0,
        Padding::Circular => 1.0,
    }];
    let mut tensors = params.tensors();
    tensors.push((PADDING_TENSOR.into(), vec![1], &pad));
    w.write_all(TNET_MAGIC)?;
    w.write_all(&TNET_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, dims, data) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dims.len() as u8])?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("TNET", "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_model(mut r: impl Read) -> Result<NetworkParams> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != TNET_MAGIC {
        return Err(Error::format("TNET", "bad magic"));
    }
    let version = c.u16()?;
    if version != TNET_VERSION {
        return Err(Error::format("TNET", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::format("TNET", "tensor name is not UTF-8"))?;
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let data = c
            .take(n * 8)?
            .chunks(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, dims, data));
    }
    let find = |name: &str| tensors.iter().find(|t| t.0 == name);
    let get = |name: &str, rank: usize| -> Result<(&Vec<usize>, &Vec<f64>)> {
        let t = find(name).ok_or_else(|| Error::format("TNET", format!("missing tensor {name}")))?;
        if t.1.len() != rank {
            return Err(Error::format("TNET", format!("tensor {name} has rank {}", t.1.len())));
        }
        Ok((&t.1, &t.2))
    };
    let mut conv = Vec::new();
    while find(&format!("conv{}.weight", conv.len())).is_some() {
        let i = conv.len();
        let (d, w) = get(&format!("conv{i}.weight"), 3)?;
        let (_, b) = get(&format!("conv{i}.bias"), 1)?;
        conv.push(ConvLayer {
            kernel: d[0],
            in_ch: d[1],
            out_ch: d[2],
            weight: w.clone(),
            bias: b.clone(),
        });
    }
    let mut gru = Vec::new();
    while find(&format!("gru{}.w_z", gru.len())).is_some() {
        let i = gru.len();
        let mut l = GruLayer::zeros(0, 0);
        for (k, gate) in ["z", "r", "n"].iter().enumerate() {
            let (d, w) = get(&format!("gru{i}.w_{gate}"), 2)?;
            l.hidden = d[0];
            l.input = d[1];
            l.w[k] = w.clone();
            l.u[k] = get(&format!("gru{i}.u_{gate}"), 2)?.1.clone();
            l.b[k] = get(&format!("gru{i}.b_{gate}"), 1)?.1.clone();
        }
        gru.push(l);
    }
    let (d, w) = get("fc.weight", 2)?;
    let fc = FcLayer {
        output: d[0],
        input: d[1],
        weight: w.clone(),
        bias: get("fc.bias", 1)?.1.clone(),
    };
    let padding = match find(PADDING_TENSOR).map(|t| t.2.first().copied()) {
        Some(Some(v)) if v == 1.0 => Padding::Circular,
        _ => Padding::Zero,
    };
    let p = NetworkParams {
        conv,
        gru,
        fc,
        padding,
    };
    p.validate()?;
    Ok(p)
}

pub fn save_model(path: impl AsRef<Path>, params: &NetworkParams) -> Result<()> {
    write_model(std::io::BufWriter::new(std::fs::File::create(path)?), params)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkParams> {
    read_model(std::fs::File::open(path)?)
}
