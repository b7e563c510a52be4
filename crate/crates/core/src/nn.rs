//! Encoder-decoder segmentation networks built on the autodiff tape.
//!
//! Both architectures share a residual encoder (conv3x3, ReLU, conv3x3,
//! 1x1 shortcut when widths differ, ReLU, then 2x2 max-pool) and a
//! bottleneck block. Decoders upsample with 2x2 stride-2 transposed convs.
//! U-Net concatenates the skip and applies a residual block; LinkNet adds
//! the skip and applies a single conv, which makes it lighter.
//!
//! Layers are named `enc0..`, `bottleneck`, `dec{stages-1}..dec0` and
//! `logits`. The representation used for robustification is `dec0`, the
//! input of the final 1x1 classifier.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;
use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng;
use crate::tensor::Tensor;

/// Layer whose activations serve as the learned representation.
pub const REPRESENTATION_LAYER: &str = "dec0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    UNet,
    LinkNet,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::UNet => "unet",
            Architecture::LinkNet => "linknet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Architecture::UNet),
            "linknet" => Ok(Architecture::LinkNet),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            in_channels: 3,
            num_classes: crate::data::NUM_CLASSES,
            base_channels: 16,
            stages: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.base_channels < 4 {
            return Err(Error::invalid(format!("base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !(1..=6).contains(&self.stages) {
            return Err(Error::invalid(format!("stages must be in 1..=6, got {}", self.stages)));
        }
        Ok(())
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
enum DecoderBlock {
    Concat { up: Conv, block: ResBlock },
    Sum { up: Conv, conv: Conv },
}

#[derive(Debug, Clone)]
struct Plan {
    encoders: Vec<ResBlock>,
    bottleneck: ResBlock,
    /// Indexed by level; applied from the deepest level up.
    decoders: Vec<DecoderBlock>,
    head: Conv,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: rng::Rng,
}

impl Builder {
    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Conv {
        let w = self.he_uniform(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b, stride: 1, pad }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.he_uniform(format!("{name}.weight"), &[cin, cout, 2, 2], cin);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b, stride: 2, pad: 0 }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            c1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            c2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            shortcut: (cin != cout).then(|| self.conv(&format!("{name}.shortcut"), cin, cout, 1, 0)),
        }
    }
}

/// Output of [`SegModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `None` when the pass stopped before the classifier.
    pub logits: Option<Var>,
    pub activations: Vec<(String, Var)>,
}

impl Forward {
    pub fn activation(&self, layer: &str) -> Option<Var> {
        self.activations.iter().find(|(n, _)| n == layer).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    plan: Plan,
}

/// Builds a freshly initialised model; weights are a pure function of the config.
pub fn build_model(config: &ModelConfig) -> Result<SegModel> {
    SegModel::new(config)
}

impl SegModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: rng::stream(rng::derive(config.seed, "init", 0), 0),
        };
        let width = |level: usize| config.base_channels << level;
        let mut encoders = Vec::new();
        let mut cin = config.in_channels;
        for level in 0..config.stages {
            encoders.push(b.res_block(&format!("enc{level}"), cin, width(level)));
            cin = width(level);
        }
        let bottleneck = b.res_block("bottleneck", cin, width(config.stages));
        let mut decoders = Vec::with_capacity(config.stages);
        let mut cin = width(config.stages);
        for level in (0..config.stages).rev() {
            let name = format!("dec{level}");
            let c = width(level);
            let up = b.up(&format!("{name}.up"), cin, c);
            decoders.push(match config.architecture {
                Architecture::UNet => DecoderBlock::Concat {
                    up,
                    block: b.res_block(&name, 2 * c, c),
                },
                Architecture::LinkNet => DecoderBlock::Sum {
                    up,
                    conv: b.conv(&format!("{name}.conv"), c, c, 3, 1),
                },
            });
            cin = c;
        }
        decoders.reverse();
        let head = b.conv("head", width(0), config.num_classes, 1, 0);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            params: b.params,
            plan: Plan {
                encoders,
                bottleneck,
                decoders,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn layer_names(&self) -> Vec<String> {
        let s = self.config.stages;
        (0..s)
            .map(|i| format!("enc{i}"))
            .chain(std::iter::once("bottleneck".to_string()))
            .chain((0..s).rev().map(|i| format!("dec{i}")))
            .chain(std::iter::once("logits".to_string()))
            .collect()
    }

    /// SHA-256 of the parameter buffers, in order.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend(p.to_le_bytes());
        }
        fsutil::sha256_hex(&bytes)
    }

    /// Places all parameters on `tape` as leaves.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected [N, {}, H, W] with H, W multiples of {m}, got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network on `x` (`[N, C, H, W]`), stopping after `stop_at` if given.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, stop_at: Option<&str>) -> Result<Forward> {
        self.check_input(tape.value(x).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", format!("{} param vars for {} params", params.len(), self.params.len())));
        }
        if let Some(layer) = stop_at {
            if !self.layer_names().iter().any(|n| n == layer) {
                return Err(Error::UnknownLayer(layer.to_string()));
            }
        }
        let mut acts: Vec<(String, Var)> = Vec::new();
        let done = |acts: &Vec<(String, Var)>| stop_at.is_some_and(|l| acts.last().is_some_and(|(n, _)| n == l));
        let stopped = |acts: Vec<(String, Var)>| Forward {
            logits: None,
            activations: acts,
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.stages);
        for (level, block) in self.plan.encoders.iter().enumerate() {
            h = res_block(tape, params, block, h)?;
            acts.push((format!("enc{level}"), h));
            if done(&acts) {
                return Ok(stopped(acts));
            }
            skips.push(h);
            h = tape.maxpool2d(h, 2, 2)?;
        }
        h = res_block(tape, params, &self.plan.bottleneck, h)?;
        acts.push(("bottleneck".into(), h));
        if done(&acts) {
            return Ok(stopped(acts));
        }
        for level in (0..self.config.stages).rev() {
            h = match &self.plan.decoders[level] {
                DecoderBlock::Concat { up, block } => {
                    let u = conv_t(tape, params, up, h)?;
                    let c = tape.concat_channels(u, skips[level])?;
                    res_block(tape, params, block, c)?
                }
                DecoderBlock::Sum { up, conv: c } => {
                    let u = conv_t(tape, params, up, h)?;
                    let s = tape.add(u, skips[level])?;
                    let y = conv(tape, params, c, s)?;
                    tape.relu(y)?
                }
            };
            acts.push((format!("dec{level}"), h));
            if done(&acts) {
                return Ok(stopped(acts));
            }
        }
        let logits = conv(tape, params, &self.plan.head, h)?;
        acts.push(("logits".into(), logits));
        Ok(Forward {
            logits: Some(logits),
            activations: acts,
        })
    }

    fn batched(&self, images: &Tensor) -> Result<Tensor> {
        match images.ndim() {
            3 => Ok(images.clone().unsqueeze0()),
            4 => Ok(images.clone()),
            _ => Err(Error::shape("model input", format!("{:?}", images.shape()))),
        }
    }

    /// Logits `[N, K, H, W]` for `[C, H, W]` or `[N, C, H, W]` input.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, false)?;
        let x = tape.constant(self.batched(images)?)?;
        let out = self.forward(&mut tape, &params, x, None)?;
        Ok(tape.value(out.logits.expect("full pass")).clone())
    }

    /// Per-pixel argmax of the logits of a single `[C, H, W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<Mask> {
        let logits = self.logits(image)?;
        Ok(argmax_mask(&logits))
    }

    /// Mean cross-entropy on one image and its gradient w.r.t. the image.
    pub fn loss_and_input_grad(&self, image: &Tensor, mask: &Mask) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, false)?;
        let x = tape.leaf(self.batched(image)?, true)?;
        let out = self.forward(&mut tape, &params, x, None)?;
        let loss = tape.softmax_cross_entropy(out.logits.expect("full pass"), &mask.labels_usize())?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(x).expect("input requires grad");
        Ok((tape.value(loss).data()[0], g.reshape(image.shape())?))
    }

    /// Mean cross-entropy on one image, parameter gradients and the logits.
    pub fn loss_and_param_grads(&self, image: &Tensor, mask: &Mask) -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, true)?;
        let x = tape.constant(self.batched(image)?)?;
        let out = self.forward(&mut tape, &params, x, None)?;
        let logits = out.logits.expect("full pass");
        let loss = tape.softmax_cross_entropy(logits, &mask.labels_usize())?;
        let mut grads = tape.backward(loss)?;
        let g = params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((tape.value(loss).data()[0], g, tape.value(logits).clone()))
    }

    /// Activations of `layer` for a single image, without the batch axis.
    pub fn representation(&self, image: &Tensor, layer: &str) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, false)?;
        let x = tape.constant(self.batched(image)?)?;
        let out = self.forward(&mut tape, &params, x, Some(layer))?;
        let v = out.activation(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let t = tape.value(v).clone();
        let shape = t.shape()[1..].to_vec();
        t.reshape(&shape)
    }

    /// `||rep(x) - target||_2` and its gradient w.r.t. `x`.
    pub fn representation_distance_and_grad(&self, x: &Tensor, target: &Tensor, layer: &str) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record(&mut tape, false)?;
        let xv = tape.leaf(self.batched(x)?, true)?;
        let out = self.forward(&mut tape, &params, xv, Some(layer))?;
        let rep = out.activation(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        if tape.value(rep).len() != target.len() {
            return Err(Error::shape(
                "representation",
                format!("{:?} vs target {:?}", tape.value(rep).shape(), target.shape()),
            ));
        }
        let t = tape.constant(target.clone().reshape(tape.value(rep).shape())?)?;
        let diff = tape.sub(rep, t)?;
        let d = tape.l2_norm(diff)?;
        let mut grads = tape.backward(d)?;
        let g = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((tape.value(d).data()[0], g.reshape(x.shape())?))
    }
}

fn conv(tape: &mut Tape, p: &[Var], c: &Conv, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, p[c.w], c.stride, c.pad)?;
    tape.bias_add(y, p[c.b])
}

fn conv_t(tape: &mut Tape, p: &[Var], c: &Conv, x: Var) -> Result<Var> {
    let y = tape.conv_transpose2d(x, p[c.w], c.stride, c.pad)?;
    tape.bias_add(y, p[c.b])
}

fn res_block(tape: &mut Tape, p: &[Var], b: &ResBlock, x: Var) -> Result<Var> {
    let h = conv(tape, p, &b.c1, x)?;
    let h = tape.relu(h)?;
    let h = conv(tape, p, &b.c2, h)?;
    let s = match &b.shortcut {
        Some(c) => conv(tape, p, c, x)?,
        None => x,
    };
    let y = tape.add(h, s)?;
    tape.relu(y)
}

/// Argmax over classes of `[1, K, H, W]` logits; ties go to the lower class.
pub fn argmax_mask(logits: &Tensor) -> Mask {
    let s = logits.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let d = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels).expect("mask shape")
}

/// Tiles the first `n_maps` channels of `layer` for `image` into a square-ish
/// grayscale grid, each channel min-max normalised on its own.
pub fn dump_activations(model: &SegModel, image: &Tensor, layer: &str, n_maps: usize) -> Result<GrayImage> {
    let act = model.representation(image, layer)?;
    if act.ndim() != 3 {
        return Err(Error::shape("dump_activations", format!("{:?}", act.shape())));
    }
    let (c, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    if n_maps == 0 || n_maps > c {
        return Err(Error::invalid(format!("n_maps {n_maps} not in 1..={c} for layer `{layer}`")));
    }
    let cols = (n_maps as f64).sqrt().ceil() as usize;
    let rows = n_maps.div_ceil(cols);
    let mut img = GrayImage::new((cols * w) as u32, (rows * h) as u32);
    for ch in 0..n_maps {
        let plane = &act.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let (ox, oy) = ((ch % cols) * w, (ch / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let v = ((plane[y * w + x] - lo) / span * 255.0).round() as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([v]));
            }
        }
    }
    Ok(img)
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ADVSEGW\0";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Side information stored next to the weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Attack the model was adversarially trained with, if any.
    pub trained_attack: Option<String>,
}

/// Writes `weights.bin` and `manifest.txt` into `dir`.
pub fn save_checkpoint(model: &SegModel, trained_attack: Option<&str>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.names.iter().zip(&model.params) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend(p.to_le_bytes());
    }
    fsutil::atomic_write(&dir.join(WEIGHTS_FILE), &buf)?;
    let c = &model.config;
    let manifest = format!(
        "format_version={CHECKPOINT_FORMAT_VERSION}\narchitecture={}\nin_channels={}\nnum_classes={}\nbase_channels={}\nstages={}\nseed={}\ntrained_attack={}\nfingerprint={}\n",
        c.architecture,
        c.in_channels,
        c.num_classes,
        c.base_channels,
        c.stages,
        c.seed,
        trained_attack.unwrap_or("none"),
        model.fingerprint(),
    );
    fsutil::atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated weights"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint, rebuilding the architecture from the manifest and
/// checking every parameter's name and shape.
pub fn load_checkpoint(dir: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let kv = fsutil::parse_key_values(&text, &mpath)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(&mpath, format!("missing `{k}`")));
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(&mpath, format!("`{k}` is not an integer")))
    };
    let version = num("format_version")? as u32;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let config = ModelConfig {
        architecture: get("architecture")?.parse()?,
        in_channels: num("in_channels")? as usize,
        num_classes: num("num_classes")? as usize,
        base_channels: num("base_channels")? as usize,
        stages: num("stages")? as usize,
        seed: num("seed")?,
    };
    let trained_attack = match get("trained_attack")?.as_str() {
        "none" => None,
        a => Some(a.to_string()),
    };
    let mut model = SegModel::new(&config)?;

    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &wpath,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(&wpath, "bad magic"));
    }
    let v = r.u32()?;
    if v != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            found: v,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::format(&wpath, format!("{count} tensors, architecture has {}", model.params.len())));
    }
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(&wpath, "non-utf8 name"))?;
        if name != model.names[i] {
            return Err(Error::format(&wpath, format!("tensor {i} is `{name}`, expected `{}`", model.names[i])));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.params[i].shape() {
            return Err(Error::format(&wpath, format!("`{name}` has shape {shape:?}, expected {:?}", model.params[i].shape())));
        }
        let n = model.params[i].len();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.params[i] = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(&wpath, "trailing bytes"));
    }
    Ok((model, CheckpointMeta { config, trained_attack }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            stages: 2,
            seed: 3,
            ..ModelConfig::new(arch)
        }
    }

    /// Independent count of the parameters implied by the block structure.
    fn expected_params(c: &ModelConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let res = |cin: usize, cout: usize| conv(cin, cout, 3) + conv(cout, cout, 3) + if cin != cout { conv(cin, cout, 1) } else { 0 };
        let wd = |l: usize| c.base_channels << l;
        let mut n = 0;
        let mut cin = c.in_channels;
        for l in 0..c.stages {
            n += res(cin, wd(l));
            cin = wd(l);
        }
        n += res(cin, wd(c.stages));
        for l in 0..c.stages {
            n += conv(wd(l + 1), wd(l), 2);
            n += match c.architecture {
                Architecture::UNet => res(2 * wd(l), wd(l)),
                Architecture::LinkNet => conv(wd(l), wd(l), 3),
            };
        }
        n + conv(wd(0), c.num_classes, 1)
    }

    #[test]
    fn parameter_counts() {
        for arch in [Architecture::UNet, Architecture::LinkNet] {
            let c = tiny(arch);
            assert_eq!(SegModel::new(&c).unwrap().num_parameters(), expected_params(&c));
        }
        let u = SegModel::new(&tiny(Architecture::UNet)).unwrap();
        let l = SegModel::new(&tiny(Architecture::LinkNet)).unwrap();
        assert!(l.num_parameters() < u.num_parameters());
    }

    #[test]
    fn init_is_seeded() {
        let a = SegModel::new(&tiny(Architecture::UNet)).unwrap();
        let b = SegModel::new(&tiny(Architecture::UNet)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = SegModel::new(&ModelConfig { seed: 4, ..tiny(Architecture::UNet) }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn output_shape_and_input_checks() {
        let m = SegModel::new(&tiny(Architecture::LinkNet)).unwrap();
        let x = Tensor::full(&[3, 8, 12], 0.5);
        assert_eq!(m.logits(&x).unwrap().shape(), &[1, 10, 8, 12]);
        assert!(m.logits(&Tensor::full(&[3, 6, 8], 0.5)).is_err());
        assert!(m.logits(&Tensor::full(&[2, 8, 8], 0.5)).is_err());
        assert_eq!(m.representation(&x, REPRESENTATION_LAYER).unwrap().shape(), &[4, 8, 12]);
        assert_eq!(m.representation(&x, "bottleneck").unwrap().shape(), &[16, 2, 3]);
        assert!(matches!(m.representation(&x, "nope"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn argmax_ties_take_lower_class() {
        let logits = Tensor::from_slice(&[1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_mask(&logits).labels(), &[0, 1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::new(&tiny(Architecture::UNet)).unwrap();
        save_checkpoint(&m, Some("pgd_linf"), dir.path()).unwrap();
        let (back, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(meta.trained_attack.as_deref(), Some("pgd_linf"));
        let x = Tensor::full(&[3, 8, 8], 0.3);
        assert_eq!(back.logits(&x).unwrap().to_le_bytes(), m.logits(&x).unwrap().to_le_bytes());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::new(&tiny(Architecture::UNet)).unwrap();
        save_checkpoint(&m, None, dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), manifest.replace("format_version=1", "format_version=9")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn activation_grid_size() {
        let m = SegModel::new(&ModelConfig { base_channels: 16, ..tiny(Architecture::UNet) }).unwrap();
        let g = dump_activations(&m, &Tensor::full(&[3, 8, 8], 0.2), REPRESENTATION_LAYER, 16).unwrap();
        assert_eq!((g.width(), g.height()), (4 * 8, 4 * 8));
        assert!(dump_activations(&m, &Tensor::full(&[3, 8, 8], 0.2), REPRESENTATION_LAYER, 17).is_err());
    }
}
