//! Volumetric U-Net with hand-written forward and reverse passes.
//!
//! Layout for `depth = L` and `base_channels = c`:
//!
//! * encoder level `l` (`0..L`): two 3x3x3 convolutions to `c * 2^l` channels,
//!   then 2x2x2 max pooling;
//! * bottleneck: three 3x3x3 convolutions to `c * 2^L` channels;
//! * decoder level `l` (`L-1..=0`): 2x2x2 transposed convolution to `c * 2^l`
//!   channels, concatenation with the encoder skip, two 3x3x3 convolutions;
//! * a final 1x1x1 convolution to one channel.
//!
//! Every 3x3x3 convolution is followed by a leaky rectifier (slope 0.1).
//! Dropout, when enabled, follows the last activation of every level.

pub mod checkpoint;
pub(crate) mod layers;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Shape3, Volume};
use layers::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            depth: 3,
            dropout_p: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(base_channels: usize, depth: usize, dropout_p: f64) -> Self {
        Self {
            base_channels,
            depth,
            dropout_p,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("base_channels and depth must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Required divisor of every input side.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, s: Shape3) -> Result<()> {
        let m = self.size_multiple();
        if s.d % m != 0 || s.h % m != 0 || s.w % m != 0 || s.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "input shape {:?} must be divisible by 2^depth = {m}",
                s.as_array()
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerDesc> {
        let c = self.base_channels;
        let ch = |l: usize| c << l;
        let mut out = Vec::new();
        let mut off = 0;
        let mut push = |kind: LayerKind, cin: usize, cout: usize| {
            let w_len = match kind {
                LayerKind::Conv3 => cout * cin * 27,
                LayerKind::Conv1 => cout * cin,
                LayerKind::Up => cout * 8 * cin,
            };
            out.push(LayerDesc {
                kind,
                cin,
                cout,
                w_off: off,
                b_off: off + w_len,
            });
            off += w_len + cout;
        };
        let mut cin = 1;
        for l in 0..self.depth {
            push(LayerKind::Conv3, cin, ch(l));
            push(LayerKind::Conv3, ch(l), ch(l));
            cin = ch(l);
        }
        let cb = ch(self.depth);
        push(LayerKind::Conv3, cin, cb);
        push(LayerKind::Conv3, cb, cb);
        push(LayerKind::Conv3, cb, cb);
        let mut cin = cb;
        for l in (0..self.depth).rev() {
            push(LayerKind::Up, cin, ch(l));
            push(LayerKind::Conv3, 2 * ch(l), ch(l));
            push(LayerKind::Conv3, ch(l), ch(l));
            cin = ch(l);
        }
        push(LayerKind::Conv1, cin, 1);
        out
    }

    /// Number of trainable parameters, a pure function of the configuration.
    pub fn parameter_count(&self) -> usize {
        self.layers().last().map(|l| l.b_off + l.cout).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum LayerKind {
    Conv3,
    Conv1,
    Up,
}

#[derive(Clone, Copy, Debug)]
struct LayerDesc {
    kind: LayerKind,
    cin: usize,
    cout: usize,
    w_off: usize,
    b_off: usize,
}

impl LayerDesc {
    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.cin * 27,
            LayerKind::Conv1 | LayerKind::Up => self.cin,
        }
    }
}

/// The trainable network: configuration plus a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<LayerDesc>,
    params: Vec<T>,
}

/// Builds a model with He-normal weights and zero biases drawn from `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let layers = cfg.layers();
    let mut params = vec![T::zero(); cfg.parameter_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &layers {
        let std = (2.0 / l.fan_in() as f64).sqrt();
        for p in &mut params[l.w_off..l.b_off] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = T::of(z * std);
        }
    }
    let mut config = cfg.clone();
    config.seed = seed;
    Ok(Model { config, layers, params })
}

/// Runs the model; `train_mode` enables dropout (drawn from `rng`).
pub fn forward<T: Real>(m: &Model<T>, cube: &Volume<T>, train_mode: Option<&mut dyn RngCore>) -> Result<Volume<T>> {
    m.run(cube, train_mode, false).map(|(v, _)| v)
}

/// Intermediate values of one forward pass, consumed by [`Model::backward`].
pub struct Tape<T> {
    input: Vec<T>,
    shape: Shape3,
    enc: Vec<LevelRecord<T>>,
    bottleneck: Vec<Vec<T>>,
    bottleneck_mask: Option<Vec<T>>,
    dec: Vec<DecRecord<T>>,
    last: Vec<T>,
}

struct LevelRecord<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    mask: Option<Vec<T>>,
    skip: Vec<T>,
    pooled: Vec<T>,
    arg: Vec<u8>,
    shape: Shape3,
}

struct DecRecord<T> {
    up_in: Vec<T>,
    cat: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    mask: Option<Vec<T>>,
    shape: Shape3,
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.parameter_count() {
            return Err(Error::Format(format!(
                "parameter vector has {} entries, configuration needs {}",
                params.len(),
                config.parameter_count()
            )));
        }
        Ok(Self {
            layers: config.layers(),
            config,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }

    /// Eval-mode forward pass (no dropout).
    pub fn predict(&self, cube: &Volume<T>) -> Result<Volume<T>> {
        self.run(cube, None, false).map(|(v, _)| v)
    }

    /// Training forward pass that records the tape for [`Model::backward`].
    pub fn forward_train(&self, cube: &Volume<T>, rng: &mut dyn RngCore) -> Result<(Volume<T>, Tape<T>)> {
        let (v, tape) = self.run(cube, Some(rng), true)?;
        Ok((v, tape.expect("tape recorded")))
    }

    fn w(&self, l: &LayerDesc) -> &[T] {
        &self.params[l.w_off..l.b_off]
    }

    fn b(&self, l: &LayerDesc) -> &[T] {
        &self.params[l.b_off..l.b_off + l.cout]
    }

    fn conv_act(&self, li: usize, x: &[T], s: Shape3) -> Vec<T> {
        let l = &self.layers[li];
        let mut y = conv_forward(x, l.cin, s, self.w(l), self.b(l), l.cout, 3);
        leaky_forward(&mut y);
        y
    }

    fn dropout(&self, x: &[T], rng: &mut Option<&mut dyn RngCore>) -> (Vec<T>, Option<Vec<T>>) {
        let p = self.config.dropout_p;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if r.random::<f64>() < p { T::zero() } else { keep })
                    .collect();
                (x.iter().zip(&mask).map(|(&a, &m)| a * m).collect(), Some(mask))
            }
            _ => (x.to_vec(), None),
        }
    }

    fn run(
        &self,
        cube: &Volume<T>,
        mut rng: Option<&mut dyn RngCore>,
        record: bool,
    ) -> Result<(Volume<T>, Option<Tape<T>>)> {
        let s0 = cube.shape();
        self.config.check_input(s0)?;
        let depth = self.config.depth;
        let mut li = 0;
        let mut s = s0;
        let mut x = cube.data().to_vec();
        let mut enc = Vec::with_capacity(depth);
        for _ in 0..depth {
            let a1 = self.conv_act(li, &x, s);
            let a2 = self.conv_act(li + 1, &a1, s);
            let ch = self.layers[li + 1].cout;
            li += 2;
            let (skip, mask) = self.dropout(&a2, &mut rng);
            let (pooled, arg) = maxpool_forward(&skip, ch, s);
            enc.push(LevelRecord {
                a1: if record { a1 } else { Vec::new() },
                a2: if record { a2 } else { Vec::new() },
                mask,
                skip,
                pooled: if record { pooled.clone() } else { Vec::new() },
                arg: if record { arg } else { Vec::new() },
                shape: s,
            });
            x = pooled;
            s = Shape3::new(s.d / 2, s.h / 2, s.w / 2);
        }
        let mut bottleneck = vec![x];
        for _ in 0..3 {
            let y = self.conv_act(li, bottleneck.last().unwrap(), s);
            li += 1;
            bottleneck.push(y);
        }
        let (mut h, bottleneck_mask) = self.dropout(bottleneck.last().unwrap(), &mut rng);
        let mut dec = Vec::with_capacity(depth);
        for level in (0..depth).rev() {
            let up = &self.layers[li];
            let u = upconv_forward(&h, up.cin, s, self.w(up), self.b(up), up.cout);
            s = Shape3::new(2 * s.d, 2 * s.h, 2 * s.w);
            let mut cat = u;
            cat.extend_from_slice(&enc[level].skip);
            let a1 = self.conv_act(li + 1, &cat, s);
            let a2 = self.conv_act(li + 2, &a1, s);
            li += 3;
            let (out, mask) = self.dropout(&a2, &mut rng);
            let up_in = std::mem::replace(&mut h, out);
            if record {
                dec.push(DecRecord {
                    up_in,
                    cat,
                    a1,
                    a2,
                    mask,
                    shape: s,
                });
            }
        }
        let fl = &self.layers[li];
        let y = conv_forward(&h, fl.cin, s, self.w(fl), self.b(fl), 1, 1);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        let out = Volume::from_vec(s0, y, cube.voxel_size())?;
        let tape = record.then(|| Tape {
            input: cube.data().to_vec(),
            shape: s0,
            enc,
            bottleneck,
            bottleneck_mask,
            dec,
            last: h,
        });
        Ok((out, tape))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Volume<T>, grads: &mut [T]) -> Result<()> {
        tape.shape.ensure_same(grad_out.shape())?;
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let depth = self.config.depth;
        let n_layers = self.layers.len();
        let mut li = n_layers - 1;
        let s0 = tape.shape;

        let fl = self.layers[li];
        let (dw, db) = split_grads(grads, &fl);
        let mut dh = conv_backward(&tape.last, fl.cin, s0, self.w(&fl), 1, 1, grad_out.data(), dw, db, true).unwrap();

        let mut dskips: Vec<Vec<T>> = vec![Vec::new(); depth];
        // decoder levels were recorded deepest first; undo them shallowest first
        for di in (0..depth).rev() {
            let level = depth - 1 - di;
            let rec = &tape.dec[di];
            let s = rec.shape;
            let (l_up, l_a, l_b) = (li - 3, li - 2, li - 1);
            li -= 3;
            if let Some(mask) = &rec.mask {
                mul_in_place(&mut dh, mask);
            }
            let lb = self.layers[l_b];
            leaky_backward(&rec.a2, &mut dh);
            let (dw, db) = split_grads(grads, &lb);
            let mut da1 = conv_backward(&rec.a1, lb.cin, s, self.w(&lb), lb.cout, 3, &dh, dw, db, true).unwrap();
            let la = self.layers[l_a];
            leaky_backward(&rec.a1, &mut da1);
            let (dw, db) = split_grads(grads, &la);
            let dcat = conv_backward(&rec.cat, la.cin, s, self.w(&la), la.cout, 3, &da1, dw, db, true).unwrap();
            let half = dcat.len() / 2;
            dskips[level] = dcat[half..].to_vec();
            let lu = self.layers[l_up];
            let sin = Shape3::new(s.d / 2, s.h / 2, s.w / 2);
            let (dw, db) = split_grads(grads, &lu);
            dh = upconv_backward(&rec.up_in, lu.cin, sin, self.w(&lu), lu.cout, &dcat[..half], dw, db);
        }

        let sb = Shape3::new(s0.d >> depth, s0.h >> depth, s0.w >> depth);
        if let Some(mask) = &tape.bottleneck_mask {
            mul_in_place(&mut dh, mask);
        }
        for k in (0..3).rev() {
            li -= 1;
            let l = self.layers[li];
            leaky_backward(&tape.bottleneck[k + 1], &mut dh);
            let (dw, db) = split_grads(grads, &l);
            dh = conv_backward(&tape.bottleneck[k], l.cin, sb, self.w(&l), l.cout, 3, &dh, dw, db, true).unwrap();
        }

        for level in (0..depth).rev() {
            let rec = &tape.enc[level];
            let s = rec.shape;
            let (l_a, l_b) = (li - 2, li - 1);
            li -= 2;
            let lb = self.layers[l_b];
            let mut dskip = maxpool_backward(&dh, &rec.arg, lb.cout, s);
            for (a, b) in dskip.iter_mut().zip(&dskips[level]) {
                *a = *a + *b;
            }
            if let Some(mask) = &rec.mask {
                mul_in_place(&mut dskip, mask);
            }
            leaky_backward(&rec.a2, &mut dskip);
            let (dw, db) = split_grads(grads, &lb);
            let mut da1 = conv_backward(&rec.a1, lb.cin, s, self.w(&lb), lb.cout, 3, &dskip, dw, db, true).unwrap();
            let la = self.layers[l_a];
            leaky_backward(&rec.a1, &mut da1);
            let x_in: &[T] = if level == 0 { &tape.input } else { &tape.enc[level - 1].pooled };
            let (dw, db) = split_grads(grads, &la);
            dh = conv_backward(x_in, la.cin, s, self.w(&la), la.cout, 3, &da1, dw, db, level > 0).unwrap_or_default();
        }
        debug_assert_eq!(li, 0);
        Ok(())
    }
}

fn split_grads<'a, T>(grads: &'a mut [T], l: &LayerDesc) -> (&'a mut [T], &'a mut [T]) {
    let (w, rest) = grads[l.w_off..l.b_off + l.cout].split_at_mut(l.b_off - l.w_off);
    (w, rest)
}

fn mul_in_place<T: Real>(x: &mut [T], m: &[T]) {
    for (a, &b) in x.iter_mut().zip(m) {
        *a = *a * b;
    }
}
