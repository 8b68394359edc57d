//! Fully connected tanh surrogate `ψ̂(x, y, z, t)` with input-derivative jets.
//!
//! A forward pass carries, per unit, the value together with the first
//! derivatives along all four inputs and the pure second derivatives along
//! x, y and z. The reverse pass runs back through that jet propagation, so a
//! loss built from any jet component (including Laplacian terms) has exact
//! parameter gradients.
//!
//! Points are processed in chunks; inside a chunk activations are laid out
//! `[unit][channel][point]` so the inner loops run over points.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{read_header, FieldError};
use crate::hydro::VanGenuchten;
use crate::seed;

pub const INPUTS: usize = 4;
/// Jet channel layout: value, ∂x, ∂y, ∂z, ∂t, ∂xx, ∂yy, ∂zz.
pub const CHANNELS: usize = 8;
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss expression at column {pos}: {msg}")]
    Expression { pos: usize, msg: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<FieldError> for NetError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Io(e) => NetError::Io(e),
            other => NetError::Format(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        "tanh"
    }
}

/// How many jet channels a pass carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetOrder {
    Value,
    First,
    Second,
}

impl JetOrder {
    pub fn channels(self) -> usize {
        match self {
            JetOrder::Value => 1,
            JetOrder::First => 5,
            JetOrder::Second => CHANNELS,
        }
    }
}

/// Per-dimension affine map of `(x, y, z, t)` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: [f64; INPUTS],
    pub hi: [f64; INPUTS],
}

impl InputScaling {
    pub fn new(lo: [f64; INPUTS], hi: [f64; INPUTS]) -> Result<Self, NetError> {
        for k in 0..INPUTS {
            if !(hi[k] > lo[k]) || !(hi[k] - lo[k]).is_finite() {
                return Err(NetError::Shape(format!("input scaling axis {k} needs lo < hi, got [{}, {}]", lo[k], hi[k])));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn identity() -> Self {
        Self { lo: [-1.0; INPUTS], hi: [1.0; INPUTS] }
    }

    /// `dξ_k / dx_k`.
    #[inline]
    pub fn gain(&self, k: usize) -> f64 {
        2.0 / (self.hi[k] - self.lo[k])
    }

    #[inline]
    pub fn apply(&self, k: usize, x: f64) -> f64 {
        (x - self.lo[k]) * self.gain(k) - 1.0
    }

    pub fn contains(&self, p: &[f64; INPUTS]) -> bool {
        (0..INPUTS).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }
}

/// `ψ̂ = center + half_range · raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub center: f64,
    pub half_range: f64,
}

impl OutputScaling {
    pub fn new(center: f64, half_range: f64) -> Result<Self, NetError> {
        if !center.is_finite() || !(half_range.is_finite() && half_range != 0.0) {
            return Err(NetError::Shape("output scaling needs a finite centre and non-zero half range".into()));
        }
        Ok(Self { center, half_range })
    }

    pub fn identity() -> Self {
        Self { center: 0.0, half_range: 1.0 }
    }

    /// Maps the head interval `[lo, hi]` onto raw outputs in `[-1, 1]`.
    pub fn spanning(lo: f64, hi: f64) -> Result<Self, NetError> {
        Self::new(0.5 * (lo + hi), 0.5 * (hi - lo))
    }
}

/// One point's jet in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JetEvaluation {
    /// ψ̂, cm.
    pub value: f64,
    /// ∂ψ̂/∂t, cm/s.
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Pure second derivatives, 1/cm.
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
}

impl JetEvaluation {
    pub fn channels(&self) -> [f64; CHANNELS] {
        [self.value, self.dx, self.dy, self.dz, self.dt, self.dxx, self.dyy, self.dzz]
    }

    pub fn from_channels(c: [f64; CHANNELS]) -> Self {
        Self { value: c[0], dx: c[1], dy: c[2], dz: c[3], dt: c[4], dxx: c[5], dyy: c[6], dzz: c[7] }
    }

    /// Gradient along axis `k` (0 = x, 1 = y, 2 = z).
    pub fn gradient(&self, k: usize) -> f64 {
        [self.dx, self.dy, self.dz][k]
    }

    pub fn is_finite(&self) -> bool {
        self.channels().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    sizes: Vec<usize>,
    pub activation: Activation,
    pub input: InputScaling,
    pub output: OutputScaling,
    params: Vec<f64>,
    /// Seed the weights were drawn from.
    pub seed: u64,
    /// Optimizer steps applied so far.
    pub steps: u64,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    nin: usize,
    nout: usize,
}

fn layers_of(sizes: &[usize]) -> Vec<Layer> {
    let mut off = 0;
    sizes
        .windows(2)
        .map(|s| {
            let l = Layer { w: off, b: off + s[0] * s[1], nin: s[0], nout: s[1] };
            off += s[0] * s[1] + s[1];
            l
        })
        .collect()
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|s| s[0] * s[1] + s[1]).sum()
}

/// Layer widths `4 → hidden... → 1`.
pub fn architecture(hidden_layers: usize, width: usize) -> Vec<usize> {
    let mut sizes = vec![INPUTS];
    sizes.extend(std::iter::repeat(width).take(hidden_layers));
    sizes.push(1);
    sizes
}

fn check_sizes(sizes: &[usize]) -> Result<(), NetError> {
    if sizes.len() < 2 || sizes[0] != INPUTS || *sizes.last().unwrap() != 1 || sizes.contains(&0) {
        return Err(NetError::Shape(format!("architecture must run 4 -> ... -> 1 with non-empty layers, got {sizes:?}")));
    }
    Ok(())
}

/// Draws weights uniformly on `±√(3 / fan_in)` (variance `1 / fan_in`); biases start at zero.
pub fn init_network(
    seed_value: u64,
    sizes: &[usize],
    input: InputScaling,
    output: OutputScaling,
) -> Result<NetworkParams, NetError> {
    check_sizes(sizes)?;
    let mut rng = seed::rng(seed_value);
    let mut params = vec![0.0; param_count(sizes)];
    for l in layers_of(sizes) {
        let bound = (3.0 / l.nin as f64).sqrt();
        for w in &mut params[l.w..l.b] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    Ok(NetworkParams { sizes: sizes.to_vec(), activation: Activation::Tanh, input, output, params, seed: seed_value, steps: 0 })
}

impl NetworkParams {
    /// Builds a network from an explicit flat parameter vector (weights row-major per layer, then biases).
    pub fn from_parts(
        sizes: &[usize],
        input: InputScaling,
        output: OutputScaling,
        params: Vec<f64>,
    ) -> Result<Self, NetError> {
        check_sizes(sizes)?;
        if params.len() != param_count(sizes) {
            return Err(NetError::Shape(format!("expected {} parameters, got {}", param_count(sizes), params.len())));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(format!("parameter {i}")));
        }
        Ok(Self { sizes: sizes.to_vec(), activation: Activation::Tanh, input, output, params, seed: 0, steps: 0 })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        match self.params.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NetError::NonFinite(format!("parameter {i}"))),
            None => Ok(()),
        }
    }

    /// Jet at one point. The flag is true when the point lies outside the scaled domain.
    pub fn forward_jet(&self, point: [f64; INPUTS]) -> Result<(JetEvaluation, bool), NetError> {
        self.check_finite()?;
        if point.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(format!("input point {point:?}")));
        }
        let mut ws = Workspace::new(self);
        let mut out = [JetEvaluation::default()];
        ws.forward(self, &[point], JetOrder::Second, &mut out);
        Ok((out[0], !self.input.contains(&point)))
    }

    /// Jets for many points at the requested order; unused channels are zero.
    pub fn forward_batch(&self, points: &[[f64; INPUTS]], order: JetOrder) -> Vec<JetEvaluation> {
        let mut ws = Workspace::new(self);
        let mut out = vec![JetEvaluation::default(); points.len()];
        for (p, o) in points.chunks(CHUNK).zip(out.chunks_mut(CHUNK)) {
            ws.forward(self, p, order, o);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), NetError> {
        let mut out = BufWriter::new(File::create(path)?);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        writeln!(out, "# rootzone net v1")?;
        writeln!(out, "sizes = {}", self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))?;
        writeln!(out, "activation = {}", self.activation.tag())?;
        writeln!(out, "input_lo = {}", join(&self.input.lo))?;
        writeln!(out, "input_hi = {}", join(&self.input.hi))?;
        writeln!(out, "output_center = {:?}", self.output.center)?;
        writeln!(out, "output_half_range = {:?}", self.output.half_range)?;
        writeln!(out, "seed = {}", self.seed)?;
        writeln!(out, "steps = {}", self.steps)?;
        writeln!(out, "---")?;
        for v in &self.params {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NetError> {
        let mut reader = BufReader::new(File::open(path)?);
        let header = read_header(&mut reader)?;
        let get = |k: &str| header.get(k).ok_or_else(|| NetError::Format(format!("missing header key `{k}`")));
        let floats = |k: &str| -> Result<Vec<f64>, NetError> {
            get(k)?.split(',').map(|s| s.trim().parse().map_err(|_| NetError::Format(format!("bad number in `{k}`")))).collect()
        };
        let four = |k: &str| -> Result<[f64; INPUTS], NetError> {
            floats(k)?.try_into().map_err(|_| NetError::Format(format!("`{k}` needs 4 entries")))
        };
        let sizes: Vec<usize> = get("sizes")?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| NetError::Format("bad layer size".into())))
            .collect::<Result<_, _>>()?;
        if get("activation")? != "tanh" {
            return Err(NetError::Format("unknown activation".into()));
        }
        let input = InputScaling::new(four("input_lo")?, four("input_hi")?)?;
        let one = |k: &str| -> Result<f64, NetError> { get(k)?.parse().map_err(|_| NetError::Format(format!("bad `{k}`"))) };
        let output = OutputScaling::new(one("output_center")?, one("output_half_range")?)?;
        let int = |k: &str| -> Result<u64, NetError> { get(k)?.parse().map_err(|_| NetError::Format(format!("bad `{k}`"))) };
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(NetError::Format("parameter blob is not a whole number of f64".into()));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut net = Self::from_parts(&sizes, input, output, params)?;
        net.seed = int("seed")?;
        net.steps = int("steps")?;
        Ok(net)
    }
}

/// Dot product with eight independent partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + r.iter().sum::<f64>()
}

/// Scratch buffers for chunked jet passes over one network shape.
#[derive(Debug, Clone)]
pub struct Workspace {
    layers: Vec<Layer>,
    nc: usize,
    np: usize,
    xi: Vec<f64>,
    /// Pre-activations per layer, `[unit][channel][point]`.
    z: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    h: Vec<Vec<f64>>,
    zbar: Vec<f64>,
    hbar: Vec<f64>,
    jets: Vec<JetEvaluation>,
}

impl Workspace {
    pub fn new(net: &NetworkParams) -> Self {
        let layers = layers_of(&net.sizes);
        let z = layers.iter().map(|l| vec![0.0; l.nout * CHANNELS * CHUNK]).collect();
        let h = layers[..layers.len() - 1].iter().map(|l| vec![0.0; l.nout * CHANNELS * CHUNK]).collect();
        let widest = net.sizes.iter().copied().max().unwrap_or(1);
        Self {
            layers,
            nc: 1,
            np: 0,
            xi: vec![0.0; INPUTS * CHUNK],
            z,
            h,
            zbar: vec![0.0; widest * CHANNELS * CHUNK],
            hbar: vec![0.0; widest * CHANNELS * CHUNK],
            jets: vec![JetEvaluation::default(); CHUNK],
        }
    }

    fn forward(&mut self, net: &NetworkParams, points: &[[f64; INPUTS]], order: JetOrder, out: &mut [JetEvaluation]) {
        let nc = order.channels();
        let np = points.len();
        debug_assert!(np <= CHUNK);
        self.nc = nc;
        self.np = np;
        let p = &net.params;
        for (j, pt) in points.iter().enumerate() {
            for k in 0..INPUTS {
                self.xi[k * np + j] = net.input.apply(k, pt[k]);
            }
        }
        let nl = self.layers.len();
        for li in 0..nl {
            let l = self.layers[li];
            let (nout, nin) = (l.nout, l.nin);
            let mut z = std::mem::take(&mut self.z[li]);
            if li == 0 {
                for i in 0..nout {
                    let row = &p[l.w + i * nin..l.w + (i + 1) * nin];
                    let zi = &mut z[i * nc * np..i * nc * np + np];
                    zi.fill(p[l.b + i]);
                    for (k, &w) in row.iter().enumerate() {
                        let xk = &self.xi[k * np..(k + 1) * np];
                        for (a, &x) in zi.iter_mut().zip(xk) {
                            *a += w * x;
                        }
                    }
                    for c in 1..nc {
                        let v = if c <= INPUTS { row[c - 1] * net.input.gain(c - 1) } else { 0.0 };
                        z[(i * nc + c) * np..(i * nc + c + 1) * np].fill(v);
                    }
                }
            } else {
                let hin = &self.h[li - 1];
                for i in 0..nout {
                    let row = &p[l.w + i * nin..l.w + (i + 1) * nin];
                    let zi = &mut z[i * nc * np..(i + 1) * nc * np];
                    zi.fill(0.0);
                    zi[..np].fill(p[l.b + i]);
                    for (j, &w) in row.iter().enumerate() {
                        let hj = &hin[j * nc * np..(j + 1) * nc * np];
                        for (a, &x) in zi.iter_mut().zip(hj) {
                            *a += w * x;
                        }
                    }
                }
            }
            if li + 1 < nl {
                let h = &mut self.h[li];
                let (mut s1, mut s2) = ([0.0; CHUNK], [0.0; CHUNK]);
                for i in 0..nout {
                    let base = i * nc * np;
                    for q in 0..np {
                        let s = z[base + q].tanh();
                        h[base + q] = s;
                        s1[q] = 1.0 - s * s;
                        s2[q] = -2.0 * s * s1[q];
                    }
                    for c in 1..nc.min(INPUTS + 1) {
                        let (hc, zc) = (&mut h[base + c * np..base + (c + 1) * np], &z[base + c * np..base + (c + 1) * np]);
                        for q in 0..np {
                            hc[q] = s1[q] * zc[q];
                        }
                    }
                    for c in (INPUTS + 1)..nc {
                        let d = &z[base + (c - INPUTS) * np..base + (c - INPUTS + 1) * np];
                        let (hc, zc) = (&mut h[base + c * np..base + (c + 1) * np], &z[base + c * np..base + (c + 1) * np]);
                        for q in 0..np {
                            hc[q] = s1[q] * zc[q] + s2[q] * d[q] * d[q];
                        }
                    }
                }
            }
            self.z[li] = z;
        }
        let zo = &self.z[nl - 1];
        let (c0, s) = (net.output.center, net.output.half_range);
        for (q, o) in out.iter_mut().enumerate().take(np) {
            let mut ch = [0.0; CHANNELS];
            for (c, v) in ch.iter_mut().enumerate().take(nc) {
                *v = s * zo[c * np + q];
            }
            ch[0] += c0;
            *o = JetEvaluation::from_channels(ch);
        }
    }

    /// Reverse pass for the chunk left by the last `forward`. `adj` holds
    /// `∂loss/∂jet` per point, `[point][channel]` in physical units.
    fn backward(&mut self, net: &NetworkParams, adj: &[[f64; CHANNELS]], grad: &mut [f64]) {
        let (nc, np) = (self.nc, self.np);
        let p = &net.params;
        let nl = self.layers.len();
        for (q, a) in adj.iter().enumerate().take(np) {
            for c in 0..nc {
                self.zbar[c * np + q] = net.output.half_range * a[c];
            }
        }
        for li in (0..nl).rev() {
            let l = self.layers[li];
            let (nout, nin) = (l.nout, l.nin);
            let zbar = &self.zbar;
            for i in 0..nout {
                let zi = &zbar[i * nc * np..(i + 1) * nc * np];
                grad[l.b + i] += sum(&zi[..np]);
            }
            if li == 0 {
                for i in 0..nout {
                    let zi = &zbar[i * nc * np..(i + 1) * nc * np];
                    for k in 0..nin {
                        let xk = &self.xi[k * np..(k + 1) * np];
                        let mut g = dot(&zi[..np], xk);
                        if nc > 1 {
                            g += net.input.gain(k) * sum(&zi[(1 + k) * np..(2 + k) * np]);
                        }
                        grad[l.w + i * nin + k] += g;
                    }
                }
                break;
            }
            let hin = &self.h[li - 1];
            let hbar = &mut self.hbar;
            hbar[..nin * nc * np].fill(0.0);
            for i in 0..nout {
                let zi = &zbar[i * nc * np..(i + 1) * nc * np];
                for j in 0..nin {
                    let hj = &hin[j * nc * np..(j + 1) * nc * np];
                    grad[l.w + i * nin + j] += dot(zi, hj);
                    let w = p[l.w + i * nin + j];
                    for (hb, &zb) in hbar[j * nc * np..(j + 1) * nc * np].iter_mut().zip(zi) {
                        *hb += w * zb;
                    }
                }
            }
            // through tanh of layer li-1
            let z = &self.z[li - 1];
            let zbar = &mut self.zbar;
            let (mut s1, mut s2, mut s3, mut zv) = ([0.0; CHUNK], [0.0; CHUNK], [0.0; CHUNK], [0.0; CHUNK]);
            for j in 0..nin {
                let base = j * nc * np;
                let at = |c: usize| base + c * np..base + (c + 1) * np;
                for q in 0..np {
                    let s = hin[base + q];
                    s1[q] = 1.0 - s * s;
                    s2[q] = -2.0 * s * s1[q];
                    s3[q] = s1[q] * (6.0 * s * s - 2.0);
                    zv[q] = hbar[base + q] * s1[q];
                }
                for c in 1..nc.min(INPUTS + 1) {
                    let (hd, dz) = (&hbar[at(c)], &z[at(c)]);
                    let zc = &mut zbar[at(c)];
                    for q in 0..np {
                        zv[q] += hd[q] * s2[q] * dz[q];
                        zc[q] = hd[q] * s1[q];
                    }
                }
                for c in (INPUTS + 1)..nc {
                    let (hs, dz, sz) = (&hbar[at(c)], &z[at(c - INPUTS)], &z[at(c)]);
                    for q in 0..np {
                        zv[q] += hs[q] * (s3[q] * dz[q] * dz[q] + s2[q] * sz[q]);
                    }
                    let zd = &mut zbar[at(c - INPUTS)];
                    for q in 0..np {
                        zd[q] += hs[q] * 2.0 * s2[q] * dz[q];
                    }
                    let zc = &mut zbar[at(c)];
                    for q in 0..np {
                        zc[q] = hs[q] * s1[q];
                    }
                }
                zbar[at(0)].copy_from_slice(&zv[..np]);
            }
        }
    }

    /// Evaluates `f` on every point's jet and accumulates the parameter
    /// gradient of `Σ loss_i` into `grad`. `f(i, jet)` returns the point's
    /// loss contribution and its derivative with respect to each jet channel.
    /// Returns the summed loss; the reduction order is fixed.
    pub fn accumulate<F>(
        &mut self,
        net: &NetworkParams,
        points: &[[f64; INPUTS]],
        order: JetOrder,
        grad: &mut [f64],
        mut f: F,
    ) -> f64
    where
        F: FnMut(usize, &JetEvaluation) -> (f64, [f64; CHANNELS]),
    {
        assert_eq!(grad.len(), net.params.len(), "gradient buffer shape");
        let mut total = 0.0;
        let mut adj = [[0.0; CHANNELS]; CHUNK];
        let mut jets = std::mem::take(&mut self.jets);
        for (ci, chunk) in points.chunks(CHUNK).enumerate() {
            self.forward(net, chunk, order, &mut jets);
            for q in 0..chunk.len() {
                let (l, a) = f(ci * CHUNK + q, &jets[q]);
                total += l;
                adj[q] = a;
            }
            self.backward(net, &adj, grad);
        }
        self.jets = jets;
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Theta,
    K,
    C,
    DK,
    Sq,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Powi(usize, i32),
    Call(Func, usize),
}

/// Per-point loss term over jet components, e.g.
/// `sq(C(psi)*psi_t - dK(psi)*(psi_x^2 + psi_y^2 + psi_z^2 + psi_z) - K(psi)*(psi_xx + psi_yy + psi_zz))`.
///
/// Variables: `psi psi_x psi_y psi_z psi_t psi_xx psi_yy psi_zz`.
/// Functions: `theta K C dK sq`. Operators: `+ - * /` and `^` with an integer exponent.
#[derive(Debug, Clone)]
pub struct LossExpr {
    nodes: Vec<Node>,
    needs: JetOrder,
}

const VARS: [&str; CHANNELS] = ["psi", "psi_x", "psi_y", "psi_z", "psi_t", "psi_xx", "psi_yy", "psi_zz"];

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nodes: Vec<Node>,
}

impl Parser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, NetError> {
        Err(NetError::Expression { pos: self.pos + 1, msg: msg.into() })
    }

    fn skip(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip();
        self.src.get(self.pos).copied()
    }

    fn push(&mut self, n: Node) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn expr(&mut self) -> Result<usize, NetError> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = self.push(if op == b'+' { Node::Add(lhs, rhs) } else { Node::Sub(lhs, rhs) });
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<usize, NetError> {
        let mut lhs = self.power()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.power()?;
            lhs = self.push(if op == b'*' { Node::Mul(lhs, rhs) } else { Node::Div(lhs, rhs) });
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<usize, NetError> {
        let base = self.unary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip();
            let start = self.pos;
            if self.src.get(self.pos) == Some(&b'-') {
                self.pos += 1;
            }
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            let Ok(e) = text.parse::<i32>() else {
                self.pos = start;
                return self.err("exponent must be an integer literal");
            };
            return Ok(self.push(Node::Powi(base, e)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<usize, NetError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let a = self.unary()?;
            return Ok(self.push(Node::Neg(a)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<usize, NetError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_digit()
                        || matches!(self.src[self.pos], b'.' | b'e' | b'E')
                        || (matches!(self.src[self.pos], b'+' | b'-') && matches!(self.src[self.pos - 1], b'e' | b'E')))
                {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                match text.parse::<f64>() {
                    Ok(v) => Ok(self.push(Node::Const(v))),
                    Err(_) => {
                        self.pos = start;
                        self.err(format!("bad number `{text}`"))
                    }
                }
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("").to_string();
                if self.peek() == Some(b'(') {
                    let func = match name.as_str() {
                        "theta" => Func::Theta,
                        "K" => Func::K,
                        "C" => Func::C,
                        "dK" => Func::DK,
                        "sq" => Func::Sq,
                        _ => {
                            self.pos = start;
                            return self.err(format!("unsupported function `{name}`"));
                        }
                    };
                    self.pos += 1;
                    let a = self.expr()?;
                    if self.peek() != Some(b')') {
                        return self.err("expected `)`");
                    }
                    self.pos += 1;
                    return Ok(self.push(Node::Call(func, a)));
                }
                match VARS.iter().position(|v| *v == name) {
                    Some(i) => Ok(self.push(Node::Var(i))),
                    None => {
                        self.pos = start;
                        self.err(format!("unknown variable `{name}`"))
                    }
                }
            }
            Some(c) => self.err(format!("unexpected `{}`", c as char)),
            None => self.err("unexpected end of expression"),
        }
    }
}

impl LossExpr {
    pub fn parse(src: &str) -> Result<Self, NetError> {
        let mut p = Parser { src: src.as_bytes(), pos: 0, nodes: Vec::new() };
        p.expr()?;
        if p.peek().is_some() {
            return p.err("trailing input");
        }
        let mut needs = JetOrder::Value;
        for n in &p.nodes {
            if let Node::Var(i) = n {
                if *i >= 5 {
                    needs = JetOrder::Second;
                } else if *i >= 1 && needs == JetOrder::Value {
                    needs = JetOrder::First;
                }
            }
        }
        Ok(Self { nodes: p.nodes, needs })
    }

    /// Jet order the expression reads.
    pub fn order(&self) -> JetOrder {
        self.needs
    }

    /// Value of the expression and its derivative with respect to each jet channel.
    pub fn eval(&self, jet: &JetEvaluation, soil: &VanGenuchten) -> (f64, [f64; CHANNELS]) {
        let ch = jet.channels();
        let n = self.nodes.len();
        let mut val = vec![0.0; n];
        // local derivative of each function node, reused in the sweep back
        let mut dfun = vec![0.0; n];
        for (i, node) in self.nodes.iter().enumerate() {
            val[i] = match *node {
                Node::Const(c) => c,
                Node::Var(k) => ch[k],
                Node::Neg(a) => -val[a],
                Node::Add(a, b) => val[a] + val[b],
                Node::Sub(a, b) => val[a] - val[b],
                Node::Mul(a, b) => val[a] * val[b],
                Node::Div(a, b) => val[a] / val[b],
                Node::Powi(a, e) => val[a].powi(e),
                Node::Call(f, a) => {
                    let x = val[a];
                    if f == Func::Sq {
                        dfun[i] = 2.0 * x;
                        x * x
                    } else {
                        let c = soil.eval(x);
                        let (v, d) = match f {
                            Func::Theta => (c.theta, c.capacity),
                            Func::K => (c.k, c.dk),
                            Func::C => (c.capacity, c.dcapacity),
                            Func::DK => (c.dk, c.d2k),
                            Func::Sq => unreachable!(),
                        };
                        dfun[i] = d;
                        v
                    }
                }
            };
        }
        let mut bar = vec![0.0; n];
        let mut out = [0.0; CHANNELS];
        bar[n - 1] = 1.0;
        for i in (0..n).rev() {
            let g = bar[i];
            if g == 0.0 {
                continue;
            }
            match self.nodes[i] {
                Node::Const(_) => {}
                Node::Var(k) => out[k] += g,
                Node::Neg(a) => bar[a] -= g,
                Node::Add(a, b) => {
                    bar[a] += g;
                    bar[b] += g;
                }
                Node::Sub(a, b) => {
                    bar[a] += g;
                    bar[b] -= g;
                }
                Node::Mul(a, b) => {
                    bar[a] += g * val[b];
                    bar[b] += g * val[a];
                }
                Node::Div(a, b) => {
                    bar[a] += g / val[b];
                    bar[b] -= g * val[a] / (val[b] * val[b]);
                }
                Node::Powi(a, e) => bar[a] += g * e as f64 * val[a].powi(e - 1),
                Node::Call(_, a) => bar[a] += g * dfun[i],
            }
        }
        (val[n - 1], out)
    }
}

/// Mean of `loss` over `points` and its gradient over every network parameter.
pub fn loss_gradient(
    loss: &LossExpr,
    net: &NetworkParams,
    points: &[[f64; INPUTS]],
    soil: &VanGenuchten,
) -> Result<(f64, Vec<f64>), NetError> {
    if points.is_empty() {
        return Err(NetError::Shape("loss needs at least one point".into()));
    }
    net.check_finite()?;
    let scale = 1.0 / points.len() as f64;
    let mut grad = vec![0.0; net.n_params()];
    let mut ws = Workspace::new(net);
    let total = ws.accumulate(net, points, loss.order(), &mut grad, |_, jet| {
        let (v, mut d) = loss.eval(jet, soil);
        d.iter_mut().for_each(|x| *x *= scale);
        (v * scale, d)
    });
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NonFinite("loss or gradient".into()));
    }
    Ok((total, grad))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn optimizer_step(state: &mut OptimizerState, net: &mut NetworkParams, grad: &[f64]) -> Result<(), NetError> {
    if grad.len() != net.params.len() || state.m.len() != grad.len() {
        return Err(NetError::Shape(format!(
            "gradient has {} entries, network {}, optimizer {}",
            grad.len(),
            net.params.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        net.params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    net.steps += 1;
    Ok(())
}
