//! Bidirectional LSTM gap filling.
//!
//! The prediction at window position `p` reads the forward state after
//! `x[0..p]` and the backward state after `x[p+1..]` (right to left). The
//! input at `p` itself is never seen, so the network has to learn the series
//! from its neighbours rather than copy the cell it is asked to fill.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ObservationMatrix;

/// Positive floor applied to denormalized predictions.
pub const VALUE_FLOOR: f64 = 1e-6;
const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GapfillError {
    #[error("series of length {len} with {observed} observed cells cannot fill a window of {window}")]
    InsufficientData { len: usize, observed: usize, window: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("matrix has no observed cells")]
    NoObservations,
    #[error("model text: {0}")]
    Parse(String),
}

/// Weights of one LSTM cell with scalar input. Gates are stacked in the
/// order forget, input, output, candidate; `wh` is row-major `4H × H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub hidden: usize,
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            wx: vec![0.0; 4 * hidden],
            wh: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    fn random<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-k..k)).collect::<Vec<_>>();
        let wx = draw(4 * hidden);
        let wh = draw(4 * hidden * hidden);
        let mut b = draw(4 * hidden);
        for v in &mut b[..hidden] {
            *v += 1.0;
        }
        Self { hidden, wx, wh, b }
    }

    pub fn is_consistent(&self) -> bool {
        let h = self.hidden;
        h >= 1
            && self.wx.len() == 4 * h
            && self.wh.len() == 4 * h * h
            && self.b.len() == 4 * h
            && self.wx.iter().chain(&self.wh).chain(&self.b).all(|v| v.is_finite())
    }

    fn n_params(&self) -> usize {
        self.wx.len() + self.wh.len() + self.b.len()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct StepCache {
    x: f64,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
}

fn step_cached(p: &LstmCellParams, x: f64, h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let h = p.hidden;
    let mut gates = vec![0.0; 4 * h];
    for (r, z) in gates.iter_mut().enumerate() {
        let row = &p.wh[r * h..(r + 1) * h];
        *z = p.wx[r] * x + p.b[r] + row.iter().zip(h_prev).map(|(w, v)| w * v).sum::<f64>();
    }
    for (r, z) in gates.iter_mut().enumerate() {
        *z = if r < 3 * h { sigmoid(*z) } else { z.tanh() };
    }
    let c = (0..h)
        .map(|k| gates[k] * c_prev[k] + gates[h + k] * gates[3 * h + k])
        .collect();
    StepCache {
        x,
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c,
    }
}

impl StepCache {
    fn h(&self) -> Vec<f64> {
        let n = self.c.len();
        (0..n).map(|k| self.gates[2 * n + k] * self.c[k].tanh()).collect()
    }
}

/// One LSTM recurrence step.
pub fn lstm_step(params: &LstmCellParams, x: f64, h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = step_cached(params, x, h_prev, c_prev);
    (s.h(), s.c)
}

/// Gradient accumulator with the same shape as a cell.
fn backprop_step(p: &LstmCellParams, s: &StepCache, dh: &[f64], dc: &[f64], g: &mut LstmCellParams) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden;
    let (f, i, o, cand) = (&s.gates[..h], &s.gates[h..2 * h], &s.gates[2 * h..3 * h], &s.gates[3 * h..]);
    let mut dz = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for k in 0..h {
        let tc = s.c[k].tanh();
        let dct = dc[k] + dh[k] * o[k] * (1.0 - tc * tc);
        dz[k] = dct * s.c_prev[k] * f[k] * (1.0 - f[k]);
        dz[h + k] = dct * cand[k] * i[k] * (1.0 - i[k]);
        dz[2 * h + k] = dh[k] * tc * o[k] * (1.0 - o[k]);
        dz[3 * h + k] = dct * i[k] * (1.0 - cand[k] * cand[k]);
        dc_prev[k] = dct * f[k];
    }
    let mut dh_prev = vec![0.0; h];
    for (r, &d) in dz.iter().enumerate() {
        g.wx[r] += d * s.x;
        g.b[r] += d;
        let row = &p.wh[r * h..(r + 1) * h];
        let grow = &mut g.wh[r * h..(r + 1) * h];
        for k in 0..h {
            grow[k] += d * s.h_prev[k];
            dh_prev[k] += d * row[k];
        }
    }
    (dh_prev, dc_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlstmModel {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
    pub w_out: Vec<f64>,
    pub b_out: f64,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl BlstmModel {
    /// Zero weights with identity normalization.
    pub fn zeros(hidden: usize) -> Self {
        Self {
            forward: LstmCellParams::zeros(hidden),
            backward: LstmCellParams::zeros(hidden),
            w_out: vec![0.0; 2 * hidden],
            b_out: 0.0,
            mean: 0.0,
            std: 1.0,
            seed: 0,
        }
    }

    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forward = LstmCellParams::random(hidden, &mut rng);
        let backward = LstmCellParams::random(hidden, &mut rng);
        let k = 1.0 / (2.0 * hidden as f64).sqrt();
        let w_out = (0..2 * hidden).map(|_| rng.gen_range(-k..k)).collect();
        Self {
            forward,
            backward,
            w_out,
            b_out: 0.0,
            mean: 0.0,
            std: 1.0,
            seed,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn is_consistent(&self) -> bool {
        self.forward.is_consistent()
            && self.backward.is_consistent()
            && self.forward.hidden == self.backward.hidden
            && self.w_out.len() == 2 * self.hidden()
            && self.b_out.is_finite()
            && self.std > 0.0
            && self.mean.is_finite()
    }

    pub fn n_params(&self) -> usize {
        self.forward.n_params() + self.backward.n_params() + self.w_out.len() + 1
    }

    /// Trainable parameters in a fixed order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for c in [&self.forward, &self.backward] {
            v.extend_from_slice(&c.wx);
            v.extend_from_slice(&c.wh);
            v.extend_from_slice(&c.b);
        }
        v.extend_from_slice(&self.w_out);
        v.push(self.b_out);
        v
    }

    pub fn set_flat_params(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params());
        let mut it = v.iter().copied();
        for c in [&mut self.forward, &mut self.backward] {
            for slot in c.wx.iter_mut().chain(c.wh.iter_mut()).chain(c.b.iter_mut()) {
                *slot = it.next().unwrap();
            }
        }
        for slot in &mut self.w_out {
            *slot = it.next().unwrap();
        }
        self.b_out = it.next().unwrap();
    }

    fn zero_grad(&self) -> BlstmModel {
        let mut g = BlstmModel::zeros(self.hidden());
        g.std = self.std;
        g
    }

    /// Text dump: one `name len` header per array followed by its values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "blstm 1");
        let _ = writeln!(s, "hidden {}", self.hidden());
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "mean {:?}", self.mean);
        let _ = writeln!(s, "std {:?}", self.std);
        let mut array = |name: &str, v: &[f64]| {
            let _ = writeln!(s, "{name} {}", v.len());
            let body: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", body.join(" "));
        };
        for (tag, c) in [("forward", &self.forward), ("backward", &self.backward)] {
            array(&format!("{tag}.wx"), &c.wx);
            array(&format!("{tag}.wh"), &c.wh);
            array(&format!("{tag}.b"), &c.b);
        }
        array("out.w", &self.w_out);
        array("out.b", &[self.b_out]);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GapfillError> {
        fn bad(m: &str) -> GapfillError {
            GapfillError::Parse(m.to_string())
        }
        fn field<'a>(lines: &mut std::str::Lines<'a>, key: &str) -> Result<&'a str, GapfillError> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim()),
                _ => Err(bad(&format!("expected {key}, found {line}"))),
            }
        }
        fn parse<T: std::str::FromStr>(s: &str) -> Result<T, GapfillError> {
            s.parse().map_err(|_| bad(s))
        }

        let mut lines = text.lines();
        if field(&mut lines, "blstm")? != "1" {
            return Err(bad("unsupported version"));
        }
        let mut model = BlstmModel::zeros(parse(field(&mut lines, "hidden")?)?);
        model.seed = parse(field(&mut lines, "seed")?)?;
        model.mean = parse(field(&mut lines, "mean")?)?;
        model.std = parse(field(&mut lines, "std")?)?;
        let names = [
            "forward.wx", "forward.wh", "forward.b", "backward.wx", "backward.wh", "backward.b", "out.w", "out.b",
        ];
        let mut flat = Vec::with_capacity(model.n_params());
        for name in names {
            let n: usize = parse(field(&mut lines, name)?)?;
            let vals = lines
                .next()
                .ok_or_else(|| bad("truncated"))?
                .split_whitespace()
                .map(parse::<f64>)
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != n {
                return Err(bad(&format!("{name}: expected {n} values, found {}", vals.len())));
            }
            flat.extend(vals);
        }
        if flat.len() != model.n_params() {
            return Err(bad("array sizes do not match hidden size"));
        }
        model.set_flat_params(&flat);
        if !model.is_consistent() {
            return Err(bad("inconsistent model"));
        }
        Ok(model)
    }
}

struct Pass {
    fwd: Vec<StepCache>,
    bwd: Vec<StepCache>,
    preds: Vec<f64>,
}

/// Hidden context for each position: forward state after `x[..p]`, backward after `x[p+1..]`.
fn run(model: &BlstmModel, x: &[f64]) -> Pass {
    let h = model.hidden();
    let w = x.len();
    let zero = vec![0.0; h];
    let mut fwd: Vec<StepCache> = Vec::with_capacity(w.saturating_sub(1));
    for t in 0..w.saturating_sub(1) {
        let (hp, cp) = match fwd.last() {
            Some(s) => (s.h(), s.c.clone()),
            None => (zero.clone(), zero.clone()),
        };
        fwd.push(step_cached(&model.forward, x[t], &hp, &cp));
    }
    let mut bwd: Vec<StepCache> = Vec::with_capacity(w.saturating_sub(1));
    for k in 0..w.saturating_sub(1) {
        let (hp, cp) = match bwd.last() {
            Some(s) => (s.h(), s.c.clone()),
            None => (zero.clone(), zero.clone()),
        };
        bwd.push(step_cached(&model.backward, x[w - 1 - k], &hp, &cp));
    }
    let preds = (0..w)
        .map(|p| {
            let hf = if p == 0 { zero.clone() } else { fwd[p - 1].h() };
            let hb = if p == w - 1 { zero.clone() } else { bwd[w - 2 - p].h() };
            let dot: f64 = model.w_out[..h].iter().zip(&hf).map(|(a, b)| a * b).sum::<f64>()
                + model.w_out[h..].iter().zip(&hb).map(|(a, b)| a * b).sum::<f64>();
            dot + model.b_out
        })
        .collect();
    Pass { fwd, bwd, preds }
}

/// Predictions for a raw-valued window, denormalized. Gaps should carry the series mean.
pub fn blstm_forward(model: &BlstmModel, window: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = window.iter().map(|v| (v - model.mean) / model.std).collect();
    run(model, &x)
        .preds
        .into_iter()
        .map(|p| p * model.std + model.mean)
        .collect()
}

/// Mean squared error over masked positions, in normalized units.
pub fn window_loss(model: &BlstmModel, inputs: &[f64], targets: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return 0.0;
    }
    let preds = run(model, inputs).preds;
    preds
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, t), _)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64
}

/// BPTT gradient of [`window_loss`] with respect to [`BlstmModel::flat_params`].
pub fn analytic_gradient(model: &BlstmModel, inputs: &[f64], targets: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let h = model.hidden();
    let w = inputs.len();
    let mut grad = model.zero_grad();
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return (0.0, grad.flat_params());
    }
    let pass = run(model, inputs);
    let mut loss = 0.0;
    // dL/dh for each forward step output and each backward step output.
    let mut dhf = vec![vec![0.0; h]; w.saturating_sub(1)];
    let mut dhb = vec![vec![0.0; h]; w.saturating_sub(1)];
    for p in 0..w {
        if !mask[p] {
            continue;
        }
        let r = pass.preds[p] - targets[p];
        loss += r * r;
        let e = 2.0 * r / n as f64;
        grad.b_out += e;
        if p > 0 {
            let hf = pass.fwd[p - 1].h();
            for k in 0..h {
                grad.w_out[k] += e * hf[k];
                dhf[p - 1][k] += e * model.w_out[k];
            }
        }
        if p < w - 1 {
            let hb = pass.bwd[w - 2 - p].h();
            for k in 0..h {
                grad.w_out[h + k] += e * hb[k];
                dhb[w - 2 - p][k] += e * model.w_out[h + k];
            }
        }
    }
    for (cell, caches, dstates, gcell) in [
        (&model.forward, &pass.fwd, &dhf, &mut grad.forward),
        (&model.backward, &pass.bwd, &dhb, &mut grad.backward),
    ] {
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..caches.len()).rev() {
            let dh: Vec<f64> = dstates[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dhp, dcp) = backprop_step(cell, &caches[t], &dh, &dc_next, gcell);
            dh_next = dhp;
            dc_next = dcp;
        }
    }
    (loss / n as f64, grad.flat_params())
}

/// Central finite differences of [`window_loss`] over every parameter.
pub fn numeric_gradient(model: &BlstmModel, inputs: &[f64], targets: &[f64], mask: &[bool], eps: f64) -> Vec<f64> {
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut theta = base.clone();
    for k in 0..base.len() {
        theta[k] = base[k] + eps;
        probe.set_flat_params(&theta);
        let up = window_loss(&probe, inputs, targets, mask);
        theta[k] = base[k] - eps;
        probe.set_flat_params(&theta);
        let down = window_loss(&probe, inputs, targets, mask);
        theta[k] = base[k];
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// Largest elementwise relative error; near-zero pairs are compared against a small floor.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let d = (a - n).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(n.abs()).max(1e-7)
            }
        })
        .fold(0.0, f64::max)
}

/// Max relative error between BPTT and central-difference gradients (ε = 1e-5).
pub fn gradient_check(model: &BlstmModel, inputs: &[f64], targets: &[f64], mask: &[bool]) -> f64 {
    let (_, a) = analytic_gradient(model, inputs, targets, mask);
    let n = numeric_gradient(model, inputs, targets, mask, GRAD_EPS);
    max_relative_error(&a, &n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            window: 12,
            learning_rate: 1e-2,
            epochs: 200,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GapfillError> {
        let bad = |m: &str| Err(GapfillError::InvalidConfig(m.to_string()));
        if self.hidden < 1 {
            return bad("hidden size must be >= 1");
        }
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: BlstmModel,
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Windows {
    inputs: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

fn normalize(series: &[Option<f64>]) -> Option<(f64, f64, Vec<f64>)> {
    let obs: Vec<f64> = series.iter().flatten().copied().collect();
    if obs.is_empty() {
        return None;
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64;
    let std = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
    let x = series.iter().map(|v| v.map_or(0.0, |v| (v - mean) / std)).collect();
    Some((mean, std, x))
}

fn windows(x: &[f64], series: &[Option<f64>], w: usize) -> Windows {
    let mut inputs = Vec::new();
    let mut masks = Vec::new();
    for s in 0..=x.len() - w {
        let mask: Vec<bool> = series[s..s + w].iter().map(Option::is_some).collect();
        if mask.iter().any(|m| *m) {
            inputs.push(x[s..s + w].to_vec());
            masks.push(mask);
        }
    }
    Windows { inputs, masks }
}

fn mean_loss(model: &BlstmModel, win: &Windows) -> f64 {
    win.inputs
        .iter()
        .zip(&win.masks)
        .map(|(x, m)| window_loss(model, x, x, m))
        .sum::<f64>()
        / win.inputs.len() as f64
}

/// Trains on one series with per-window gradient steps; returns the best epoch's model.
pub fn train_with_outcome(series: &[Option<f64>], cfg: &TrainConfig) -> Result<TrainOutcome, GapfillError> {
    cfg.validate()?;
    let observed = series.iter().filter(|v| v.is_some()).count();
    if series.len() < cfg.window || observed < 2 {
        return Err(GapfillError::InsufficientData {
            len: series.len(),
            observed,
            window: cfg.window,
        });
    }
    let (mean, std, x) = normalize(series).expect("observed cells checked above");
    let win = windows(&x, series, cfg.window);
    let mut model = BlstmModel::random(cfg.hidden, cfg.seed);
    // A zero output layer starts training at the series mean.
    model.w_out.iter_mut().for_each(|w| *w = 0.0);
    model.mean = mean;
    model.std = std;

    let initial_loss = mean_loss(&model, &win);
    let mut best = (initial_loss, model.flat_params());
    let mut theta = model.flat_params();
    for _ in 0..cfg.epochs {
        for (xw, mw) in win.inputs.iter().zip(&win.masks) {
            let (_, mut g) = analytic_gradient(&model, xw, xw, mw);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
            for (t, d) in theta.iter_mut().zip(&g) {
                *t -= cfg.learning_rate * d;
            }
            model.set_flat_params(&theta);
        }
        let loss = mean_loss(&model, &win);
        if loss < best.0 {
            best = (loss, theta.clone());
        }
    }
    model.set_flat_params(&best.1);
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss: best.0,
    })
}

pub fn train(series: &[Option<f64>], cfg: &TrainConfig) -> Result<BlstmModel, GapfillError> {
    train_with_outcome(series, cfg).map(|o| o.model)
}

/// Model predictions for every missing cell, from a window centred on the gap.
pub fn predict_gaps(model: &BlstmModel, series: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let t = series.len();
    let w = window.min(t);
    let raw: Vec<f64> = series.iter().map(|v| v.unwrap_or(model.mean)).collect();
    series
        .iter()
        .enumerate()
        .map(|(j, v)| match v {
            Some(v) => Some(*v),
            None => {
                let start = j.saturating_sub(w / 2).min(t - w);
                let preds = blstm_forward(model, &raw[start..start + w]);
                let p = preds[j - start];
                Some(if p.is_finite() { p.max(VALUE_FLOOR) } else { model.mean.max(VALUE_FLOOR) })
            }
        })
        .collect()
}

/// Linear interpolation between observed neighbours, flat beyond the ends.
pub fn linear_fill(series: &[Option<f64>]) -> Option<Vec<f64>> {
    let obs: Vec<(usize, f64)> = series.iter().enumerate().filter_map(|(j, v)| v.map(|v| (j, v))).collect();
    if obs.is_empty() {
        return None;
    }
    let filled = (0..series.len())
        .map(|j| {
            let k = obs.partition_point(|o| o.0 <= j);
            match (k.checked_sub(1).map(|k| obs[k]), obs.get(k)) {
                (Some((j0, v0)), _) if j0 == j => v0,
                (Some((j0, v0)), Some(&(j1, v1))) => v0 + (v1 - v0) * (j - j0) as f64 / (j1 - j0) as f64,
                (Some((_, v0)), None) => v0,
                (None, Some(&(_, v1))) => v1,
                (None, None) => unreachable!(),
            }
        })
        .collect();
    Some(filled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    Linear,
    GlobalMean,
}

impl Fallback {
    pub fn label(self) -> &'static str {
        match self {
            Fallback::None => "none",
            Fallback::Linear => "linear",
            Fallback::GlobalMean => "global_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationImputation {
    pub station_id: String,
    pub n_imputed: usize,
    pub fallback: Fallback,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImputationReport {
    pub stations: Vec<StationImputation>,
}

impl ImputationReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["station_id", "n_imputed", "fallback_used"])?;
        for s in &self.stations {
            w.write_record([s.station_id.as_str(), &s.n_imputed.to_string(), s.fallback.label()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fills every missing cell. Station `i` trains with seed `cfg.seed + i`.
pub fn impute(matrix: &ObservationMatrix, cfg: &TrainConfig) -> Result<(ObservationMatrix, ImputationReport), GapfillError> {
    impute_with_models(matrix, cfg).map(|(m, r, _)| (m, r))
}

/// As [`impute`], also returning the trained model of each station that got one.
pub fn impute_with_models(
    matrix: &ObservationMatrix,
    cfg: &TrainConfig,
) -> Result<(ObservationMatrix, ImputationReport, Vec<Option<BlstmModel>>), GapfillError> {
    cfg.validate()?;
    let all: Vec<f64> = (0..matrix.n_stations())
        .flat_map(|i| matrix.series(i).into_iter().flatten())
        .collect();
    if all.is_empty() {
        return Err(GapfillError::NoObservations);
    }
    let global_mean = all.iter().sum::<f64>() / all.len() as f64;

    let results: Vec<(Vec<Option<f64>>, StationImputation, Option<BlstmModel>)> = (0..matrix.n_stations())
        .into_par_iter()
        .map(|i| {
            let series = matrix.series(i);
            let n_imputed = series.iter().filter(|v| v.is_none()).count();
            let id = matrix.stations()[i].id.clone();
            let entry = |fallback| StationImputation {
                station_id: id.clone(),
                n_imputed,
                fallback,
            };
            if n_imputed == 0 {
                return (series, entry(Fallback::None), None);
            }
            let station_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            };
            match train(&series, &station_cfg) {
                Ok(model) => {
                    let filled = predict_gaps(&model, &series, cfg.window);
                    (filled, entry(Fallback::None), Some(model))
                }
                Err(_) => match linear_fill(&series) {
                    Some(v) => {
                        log::warn!("station {id}: too little data for the BLSTM, using linear interpolation");
                        let v = v.into_iter().map(|x| Some(x.max(VALUE_FLOOR))).collect();
                        (v, entry(Fallback::Linear), None)
                    }
                    None => {
                        log::warn!("station {id}: no observations, using the global mean");
                        (vec![Some(global_mean); series.len()], entry(Fallback::GlobalMean), None)
                    }
                },
            }
        })
        .collect();

    let mut out = matrix.clone();
    let mut report = ImputationReport::default();
    let mut models = Vec::with_capacity(results.len());
    for (i, (series, entry, model)) in results.into_iter().enumerate() {
        if entry.n_imputed > 0 {
            // Keep observed cells bit-identical.
            let merged: Vec<Option<f64>> = matrix
                .series(i)
                .into_iter()
                .zip(series)
                .map(|(o, f)| o.or(f))
                .collect();
            out = out.with_series(i, &merged);
        }
        report.stations.push(entry);
        models.push(model);
    }
    Ok((out, report, models))
}
