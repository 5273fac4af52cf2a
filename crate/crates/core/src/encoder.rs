//! Patch encoder: patchify, linear projection, a learnable CLS token and a
//! stack of pre-norm self-attention blocks.
//!
//! Parameters live in [`Params`], generic over what each slot holds, so the
//! same layout serves as stored weights ([`ModelState`]), gradients, and graph
//! handles during a forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng;

/// Hidden width of each block's MLP relative to the embedding width.
pub const MLP_RATIO: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.num_patches() == 0 || self.channels == 0 {
            return Err(Error::config("encoder needs at least one patch and channel"));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// `M = H·W / p²`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size.max(1)) * (self.image_width / self.patch_size.max(1))
    }

    /// `p²·C`, the length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }

    /// Exact number of scalar parameters, τ included:
    /// `P·D + 2D + 1`, plus `M·D + 2D` for positions and the final norm when
    /// `depth ≥ 1`, plus `12D² + 13D` per block.
    pub fn param_count(&self) -> usize {
        let (p, d, m) = (self.patch_dim(), self.embed_dim, self.num_patches());
        let mut n = p * d + 2 * d + 1;
        if self.depth > 0 {
            n += m * d + 2 * d;
        }
        n + self.depth * (12 * d * d + 13 * d)
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub qkv_weight: P,
    pub qkv_bias: P,
    pub out_weight: P,
    pub out_bias: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub fc1_weight: P,
    pub fc1_bias: P,
    pub fc2_weight: P,
    pub fc2_bias: P,
}

/// The encoder's full parameter set, including the raw temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub patch_weight: P,
    pub patch_bias: P,
    pub cls: P,
    /// Present iff `depth ≥ 1`.
    pub pos: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    /// Final layer norm, present iff `depth ≥ 1`.
    pub final_norm: Option<(P, P)>,
    /// `τ = softplus(tau_raw)`.
    pub tau_raw: P,
}

/// Stored encoder weights (θ_H or θ_N).
pub type ModelState<T = f32> = Params<Tensor<T>>;

/// Graph handles for one forward pass.
pub type ModelVars = Params<Var>;

impl<P> BlockParams<P> {
    fn slots(&self) -> [(&'static str, &P); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("qkv_weight", &self.qkv_weight),
            ("qkv_bias", &self.qkv_bias),
            ("out_weight", &self.out_weight),
            ("out_bias", &self.out_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("fc1_weight", &self.fc1_weight),
            ("fc1_bias", &self.fc1_bias),
            ("fc2_weight", &self.fc2_weight),
            ("fc2_bias", &self.fc2_bias),
        ]
    }

    fn slots_mut(&mut self) -> [&mut P; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            qkv_weight: it.next()?,
            qkv_bias: it.next()?,
            out_weight: it.next()?,
            out_bias: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            fc1_weight: it.next()?,
            fc1_bias: it.next()?,
            fc2_weight: it.next()?,
            fc2_bias: it.next()?,
        })
    }
}

impl<P> Params<P> {
    /// Every slot with its stable name, in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("patch_weight".to_string(), &self.patch_weight),
            ("patch_bias".to_string(), &self.patch_bias),
            ("cls".to_string(), &self.cls),
        ];
        if let Some(pos) = &self.pos {
            out.push(("pos".to_string(), pos));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.slots().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        if let Some((g, b)) = &self.final_norm {
            out.push(("final_gain".to_string(), g));
            out.push(("final_bias".to_string(), b));
        }
        out.push(("tau_raw".to_string(), &self.tau_raw));
        out
    }

    /// Mutable slots in the same order as [`Params::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.cls];
        if let Some(pos) = &mut self.pos {
            out.push(pos);
        }
        for b in &mut self.blocks {
            out.extend(b.slots_mut());
        }
        if let Some((g, b)) = &mut self.final_norm {
            out.push(g);
            out.push(b);
        }
        out.push(&mut self.tau_raw);
        out
    }

    pub fn slots(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Rebuilds a parameter set for `config` from slots in canonical order.
    pub fn from_slots(config: &EncoderConfig, slots: Vec<P>) -> Result<Self> {
        let expected = layout(config).len();
        if slots.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} parameter tensors, got {}",
                slots.len()
            )));
        }
        let mut it = slots.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_weight = next();
        let patch_bias = next();
        let cls = next();
        let pos = (config.depth > 0).then(&mut next);
        let mut rest: Vec<P> = Vec::new();
        for _ in 0..config.depth * 12 {
            rest.push(next());
        }
        let final_norm = (config.depth > 0).then(|| (next(), next()));
        let tau_raw = next();
        let mut rest = rest.into_iter();
        let blocks = (0..config.depth)
            .map(|_| BlockParams::from_iter(&mut rest).expect("block count checked"))
            .collect();
        Ok(Self {
            patch_weight,
            patch_bias,
            cls,
            pos,
            blocks,
            final_norm,
            tau_raw,
        })
    }

    pub fn map<Q>(&self, config: &EncoderConfig, mut f: impl FnMut(&P) -> Q) -> Params<Q> {
        Params::from_slots(config, self.slots().into_iter().map(&mut f).collect())
            .expect("same layout")
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Tau,
}

/// Canonical `(name, shape, init)` list for a config.
fn layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (p, d, m) = (config.patch_dim(), config.embed_dim, config.num_patches());
    let h = MLP_RATIO * d;
    let mut out = vec![
        ("patch_weight".into(), vec![p, d], Init::Normal),
        ("patch_bias".into(), vec![1, d], Init::Zeros),
        ("cls".into(), vec![1, d], Init::Normal),
    ];
    if config.depth > 0 {
        out.push(("pos".into(), vec![m, d], Init::Normal));
    }
    for i in 0..config.depth {
        let block: [(&str, Vec<usize>, Init); 12] = [
            ("ln1_gain", vec![1, d], Init::Ones),
            ("ln1_bias", vec![1, d], Init::Zeros),
            ("qkv_weight", vec![d, 3 * d], Init::Normal),
            ("qkv_bias", vec![1, 3 * d], Init::Zeros),
            ("out_weight", vec![d, d], Init::Normal),
            ("out_bias", vec![1, d], Init::Zeros),
            ("ln2_gain", vec![1, d], Init::Ones),
            ("ln2_bias", vec![1, d], Init::Zeros),
            ("fc1_weight", vec![d, h], Init::Normal),
            ("fc1_bias", vec![1, h], Init::Zeros),
            ("fc2_weight", vec![h, d], Init::Normal),
            ("fc2_bias", vec![1, d], Init::Zeros),
        ];
        out.extend(block.into_iter().map(|(n, s, k)| (format!("blocks.{i}.{n}"), s, k)));
    }
    if config.depth > 0 {
        out.push(("final_gain".into(), vec![1, d], Init::Ones));
        out.push(("final_bias".into(), vec![1, d], Init::Zeros));
    }
    out.push(("tau_raw".into(), vec![1, 1], Init::Tau));
    out
}

/// `softplus⁻¹(τ) = ln(e^τ − 1)`.
pub fn tau_to_raw(tau: f64) -> f64 {
    tau.exp_m1().ln()
}

pub fn raw_to_tau(raw: f64) -> f64 {
    raw.max(0.0) + (-raw.abs()).exp().ln_1p()
}

impl<T: Real> ModelState<T> {
    /// Seeded initialization: truncated normal (σ = 0.02, cut at 2σ) for
    /// weight matrices, CLS and positions; zeros for biases; ones for norm
    /// gains; `tau_raw` such that `τ = tau_init`.
    pub fn init(config: &EncoderConfig, tau_init: f64) -> Result<Self> {
        config.validate()?;
        if !(tau_init > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {tau_init}")));
        }
        let mut rng = rng::seeded(config.seed);
        let slots = layout(config)
            .into_iter()
            .map(|(_, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n)
                        .map(|_| T::of(rng::truncated_normal(&mut rng, INIT_STD)))
                        .collect(),
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Tau => vec![T::of(tau_to_raw(tau_init))],
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_slots(config, slots)
    }

    pub fn zeros_like(&self, config: &EncoderConfig) -> Self {
        self.map(config, |t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn cast<U: Real>(&self, config: &EncoderConfig) -> ModelState<U> {
        self.map(config, |t| t.cast())
    }

    /// Checks every tensor against the layout `config` implies.
    pub fn check_layout(&self, config: &EncoderConfig) -> Result<()> {
        let expected = layout(config);
        let named = self.named();
        if named.len() != expected.len() {
            return Err(Error::contract("parameter count does not match config"));
        }
        for ((name, t), (_, shape, _)) in named.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> T {
        T::of(raw_to_tau(self.tau_raw.item().as_f64()))
    }

    pub fn num_scalars(&self) -> usize {
        self.slots().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|t| t.is_finite())
    }

    /// Order-sensitive combination of every tensor's checksum.
    pub fn checksum(&self) -> u64 {
        self.slots()
            .iter()
            .fold(0u64, |h, t| rng::mix64(h ^ t.checksum()))
    }

    /// Largest elementwise absolute difference across all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.slots()
            .iter()
            .zip(other.slots())
            .fold(T::zero(), |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    /// Registers every tensor as a differentiable graph input.
    pub fn to_graph(&self, config: &EncoderConfig, g: &mut Graph<T>) -> ModelVars {
        self.map(config, |t| g.param(t.clone()))
    }

    /// Registers every tensor as a constant (no gradient).
    pub fn to_graph_constant(&self, config: &EncoderConfig, g: &mut Graph<T>) -> ModelVars {
        self.map(config, |t| g.constant(t.clone()))
    }
}

/// Splits an `H×W×C` image into `M` row-major flattened patches, ordered
/// row-major over the patch grid.
pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::config(format!(
            "expected an H×W×C image, got shape {:?}",
            image.shape()
        )));
    };
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let y = pr * p + r;
                let start = (y * w + pc * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, p * p * c, out)
}

/// Output of [`forward`]: `B·(M+1)` token rows, image-major, each image's
/// CLS row first.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    pub tokens: Var,
    pub images: usize,
    pub patches: usize,
}

impl EncodedBatch {
    fn tokens_per_image(&self) -> usize {
        self.patches + 1
    }

    /// Token-row index of each listed image's CLS embedding.
    pub fn cls_rows(&self, images: &[usize]) -> Vec<usize> {
        images.iter().map(|&b| b * self.tokens_per_image()).collect()
    }

    /// Token-row indices of the listed images' patch embeddings, image-major.
    pub fn patch_rows(&self, images: &[usize]) -> Vec<usize> {
        let t = self.tokens_per_image();
        images
            .iter()
            .flat_map(|&b| (1..t).map(move |i| b * t + i))
            .collect()
    }
}

/// Encodes a batch of pre-patchified images (`[M, p²C]` each) on `g`.
///
/// Images never interact, and every row-wise kernel sums in a fixed order,
/// so each image's embedding is bit-identical whatever batch it is in.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &EncoderConfig,
    patches: &[Tensor<T>],
) -> Result<EncodedBatch> {
    let (m, d) = (config.num_patches(), config.embed_dim);
    let b = patches.len();
    if b == 0 {
        return Err(Error::contract("encoder forward on an empty batch"));
    }
    let mut stacked = Vec::with_capacity(b * m * config.patch_dim());
    for p in patches {
        if p.rows() != m || p.cols() != config.patch_dim() {
            return Err(Error::config(format!(
                "patch matrix {:?} does not match config [{m}, {}]",
                p.shape(),
                config.patch_dim()
            )));
        }
        stacked.extend_from_slice(p.data());
    }
    let x = g.constant(Tensor::matrix(b * m, config.patch_dim(), stacked)?);
    let proj = g.matmul(x, vars.patch_weight)?;
    let mut proj = g.add_row(proj, vars.patch_bias)?;
    if let Some(pos) = vars.pos {
        let tiled = g.gather_rows(pos, (0..b).flat_map(|_| 0..m).collect())?;
        proj = g.add(proj, tiled)?;
    }
    // Interleave one CLS row ahead of each image's patch rows.
    let with_cls = g.concat_rows(&[proj, vars.cls])?;
    let order = (0..b)
        .flat_map(|i| std::iter::once(b * m).chain(i * m..(i + 1) * m))
        .collect();
    let mut h = g.gather_rows(with_cls, order)?;

    let t = m + 1;
    let heads = config.heads;
    let dh = d / heads;
    let attn_scale = T::one() / T::of(dh as f64).sqrt();
    let eps = T::of(LAYER_NORM_EPS);
    for blk in &vars.blocks {
        let normed = g.layer_norm(h, blk.ln1_gain, blk.ln1_bias, eps)?;
        let qkv = g.matmul(normed, blk.qkv_weight)?;
        let qkv = g.add_row(qkv, blk.qkv_bias)?;
        let mut per_image = Vec::with_capacity(b);
        for i in 0..b {
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice(qkv, i * t, t, hd * dh, dh)?;
                let k = g.slice(qkv, i * t, t, d + hd * dh, dh)?;
                let v = g.slice(qkv, i * t, t, 2 * d + hd * dh, dh)?;
                let scores = g.matmul_bt(q, k)?;
                let scores = g.scale(scores, attn_scale);
                let att = g.softmax_rows(scores)?;
                per_head.push(g.matmul(att, v)?);
            }
            per_image.push(g.concat_cols(&per_head)?);
        }
        let attended = g.concat_rows(&per_image)?;
        let out = g.matmul(attended, blk.out_weight)?;
        let out = g.add_row(out, blk.out_bias)?;
        h = g.add(h, out)?;

        let normed = g.layer_norm(h, blk.ln2_gain, blk.ln2_bias, eps)?;
        let hidden = g.matmul(normed, blk.fc1_weight)?;
        let hidden = g.add_row(hidden, blk.fc1_bias)?;
        let hidden = g.gelu(hidden);
        let out = g.matmul(hidden, blk.fc2_weight)?;
        let out = g.add_row(out, blk.fc2_bias)?;
        h = g.add(h, out)?;
    }
    if let Some((gain, bias)) = vars.final_norm {
        h = g.layer_norm(h, gain, bias, eps)?;
    }
    Ok(EncodedBatch {
        tokens: h,
        images: b,
        patches: m,
    })
}

/// CLS and patch embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<T = f32> {
    /// `[1, D]`.
    pub cls: Tensor<T>,
    /// `[M, D]`.
    pub patches: Tensor<T>,
    pub image_id: u64,
}

/// Checks an image against the config and patchifies it.
pub fn prepare<T: Real>(image: &Tensor<T>, config: &EncoderConfig) -> Result<Tensor<T>> {
    if image.shape() != config.image_shape() {
        return Err(Error::config(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            config.image_shape()
        )));
    }
    patchify(image, config.patch_size)
}

/// Encodes a batch of images without recording gradients.
pub fn encode_many<T: Real>(
    images: &[(&Tensor<T>, u64)],
    state: &ModelState<T>,
    config: &EncoderConfig,
) -> Result<Vec<EncodedImage<T>>> {
    let patches = images
        .iter()
        .map(|(img, _)| prepare(img, config))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let vars = state.to_graph_constant(config, &mut g);
    let batch = forward(&mut g, &vars, config, &patches)?;
    let tokens = g.value(batch.tokens);
    let (t, d) = (batch.patches + 1, config.embed_dim);
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, &(_, image_id))| {
            let rows = &tokens.data()[i * t * d..(i + 1) * t * d];
            EncodedImage {
                cls: Tensor::matrix(1, d, rows[..d].to_vec()).expect("row"),
                patches: Tensor::matrix(t - 1, d, rows[d..].to_vec()).expect("rows"),
                image_id,
            }
        })
        .collect())
}

pub fn encode<T: Real>(
    image: &Tensor<T>,
    image_id: u64,
    state: &ModelState<T>,
    config: &EncoderConfig,
) -> Result<EncodedImage<T>> {
    Ok(encode_many(&[(image, image_id)], state, config)?.remove(0))
}
