//! A desk-scale differentiable stand-in for a vision-language model.
//!
//! The image encoder is `v = normalize(W_img x)`. The text encoder mean-pools
//! the shared context tokens with one class token and projects:
//! `u_k = normalize(W_txt · mean(p_1, ..., p_M, c_k))`. Neither projection has
//! a bias. All frozen parameters are rounded to f32 at construction so a model
//! saved to the tensor container reloads bit-identically.
//!
//! [`prompt_gradient`] differentiates the few-shot cross-entropy and the
//! entropy of the noise-averaged prediction with respect to the context
//! tokens, by hand.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, matvec_t, norm};
use crate::seed;
use crate::stats::{phi, Probability};
use crate::vlmhead::{ClassPromptSet, Embedding, ImageEncoder, Temperature, ZeroShotClassifier};

/// Standard deviation of randomly initialized context tokens.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Per-pixel standard deviation of synthetic samples around their class mean.
pub const SAMPLE_NOISE_STD: f64 = 0.05;

const PUSH_SWEEPS: usize = 1000;

// Stream tags under `init_seed`.
const TAG_W_IMG: u64 = 1;
const TAG_W_TXT: u64 = 2;
const TAG_CLASS_TOKENS: u64 = 3;
const TAG_TEMPLATE: u64 = 4;

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn gaussian(rng: &mut impl Rng, count: usize, scale: f64) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

/// Shapes of a [`ToyVlm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    /// Flattened image length `D`.
    pub input_dim: usize,
    /// Joint embedding size `d`.
    pub embed_dim: usize,
    /// Token embedding size `e`.
    pub token_dim: usize,
    /// `K`.
    pub num_classes: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            input_dim: 64,
            embed_dim: 16,
            token_dim: 16,
            num_classes: 4,
        }
    }
}

impl ToyDims {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.token_dim == 0 {
            return Err(Error::dim("input_dim and token_dim must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::dim("embed_dim must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::domain("need at least two classes"));
        }
        Ok(())
    }
}

/// Frozen encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    dims: ToyDims,
    /// Row-major `d x D`.
    w_img: Vec<f64>,
    /// Row-major `d x e`.
    w_txt: Vec<f64>,
    /// Row-major `K x e`.
    class_tokens: Vec<f64>,
    /// The token the hand-crafted template repeats in every context slot.
    template_token: Vec<f64>,
    init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct VlmMeta {
    dims: ToyDims,
    init_seed: u64,
}

/// Rows of a `rows x cols` matrix with orthonormal rows (when `rows <= cols`)
/// or orthonormal columns (otherwise), by Gram-Schmidt on a Gaussian draw.
fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, len, 1.0);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}

impl ToyVlm {
    /// Random frozen parameters: `W_img` Gaussian with variance `1/D`,
    /// `W_txt` with orthonormal rows (or columns when `e < d`), unit-length
    /// random class tokens and a template token drawn like a context token.
    pub fn random(dims: ToyDims, init_seed: u64) -> Result<Self> {
        dims.validate()?;
        let ToyDims {
            input_dim,
            embed_dim,
            token_dim,
            num_classes,
        } = dims;
        let mut w_img = gaussian(
            &mut seed::stream(init_seed, TAG_W_IMG, 0),
            embed_dim * input_dim,
            1.0 / (input_dim as f64).sqrt(),
        );
        let mut w_txt = orthonormal(embed_dim, token_dim, &mut seed::stream(init_seed, TAG_W_TXT, 0));
        let mut class_tokens = gaussian(
            &mut seed::stream(init_seed, TAG_CLASS_TOKENS, 0),
            num_classes * token_dim,
            1.0,
        );
        for row in class_tokens.chunks_exact_mut(token_dim) {
            let n = norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let mut template_token = gaussian(
            &mut seed::stream(init_seed, TAG_TEMPLATE, 0),
            token_dim,
            CONTEXT_INIT_STD,
        );
        round_f32(&mut w_img);
        round_f32(&mut w_txt);
        round_f32(&mut class_tokens);
        round_f32(&mut template_token);
        Ok(ToyVlm {
            dims,
            w_img,
            w_txt,
            class_tokens,
            template_token,
            init_seed,
        })
    }

    /// Like [`ToyVlm::random`], but with class tokens "pretrained" on images
    /// whose every pixel was offset by `domain_shift`: class token `k` is
    /// `W_txt^T normalize(W_img (mu_k + domain_shift))`.
    ///
    /// With `e >= d` and no context, class `k`'s text feature is exactly the
    /// shifted prototype. A nonzero shift leaves the prompt-free head
    /// misaligned with the unshifted data by a shared offset that context
    /// tokens can learn to cancel.
    pub fn aligned(dims: ToyDims, class_means: &[f64], domain_shift: f64, init_seed: u64) -> Result<Self> {
        let mut vlm = ToyVlm::random(dims, init_seed)?;
        let ToyDims {
            input_dim,
            embed_dim,
            token_dim,
            num_classes,
        } = dims;
        if class_means.len() != num_classes * input_dim {
            return Err(Error::dim(format!(
                "{} class-mean values for {num_classes} x {input_dim}",
                class_means.len()
            )));
        }
        if !domain_shift.is_finite() {
            return Err(Error::domain("domain_shift must be finite"));
        }
        let mut z = vec![0.0; embed_dim];
        for (k, mu) in class_means.chunks_exact(input_dim).enumerate() {
            let shifted: Vec<f64> = mu.iter().map(|m| m + domain_shift).collect();
            matvec(&vlm.w_img, &shifted, &mut z);
            let target = Embedding::normalize(z.clone())
                .map_err(|e| Error::domain(format!("class {k} prototype: {e}")))?;
            let token = &mut vlm.class_tokens[k * token_dim..(k + 1) * token_dim];
            matvec_t(&vlm.w_txt, target.as_slice(), token);
        }
        round_f32(&mut vlm.class_tokens);
        Ok(vlm)
    }

    pub fn dims(&self) -> ToyDims {
        self.dims
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn w_img(&self) -> &[f64] {
        &self.w_img
    }

    pub fn w_txt(&self) -> &[f64] {
        &self.w_txt
    }

    pub fn class_tokens(&self) -> &[f64] {
        &self.class_tokens
    }

    pub fn class_token(&self, k: usize) -> &[f64] {
        let e = self.dims.token_dim;
        &self.class_tokens[k * e..(k + 1) * e]
    }

    pub fn template_token(&self) -> &[f64] {
        &self.template_token
    }

    /// `W_img x`, before normalization.
    pub fn project_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.dims.input_dim {
            return Err(Error::dim(format!(
                "image has {} values, model expects {}",
                image.len(),
                self.dims.input_dim
            )));
        }
        let mut z = vec![0.0; self.dims.embed_dim];
        matvec(&self.w_img, image, &mut z);
        Ok(z)
    }

    /// `normalize(W_img x)`.
    pub fn encode_image(&self, image: &[f64]) -> Result<Embedding> {
        Embedding::normalize(self.project_image(image)?)
            .map_err(|e| Error::domain(format!("image projection: {e}")))
    }

    fn check_prompts(&self, prompts: &PromptState) -> Result<()> {
        if prompts.token_dim != self.dims.token_dim {
            return Err(Error::dim(format!(
                "context tokens have e={}, model expects e={}",
                prompts.token_dim, self.dims.token_dim
            )));
        }
        if let Some(i) = prompts.context.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "context token {} coordinate {} is {}",
                i / prompts.token_dim,
                i % prompts.token_dim,
                prompts.context[i]
            )));
        }
        Ok(())
    }

    /// Unnormalized `W_txt · mean(p_1..p_M, c_k)` for every class.
    fn text_projections(&self, prompts: &PromptState) -> Result<Vec<Vec<f64>>> {
        self.check_prompts(prompts)?;
        let e = self.dims.token_dim;
        let pool = (prompts.num_tokens() + 1) as f64;
        let psum = prompts.token_sum();
        (0..self.dims.num_classes)
            .map(|k| {
                let m: Vec<f64> = psum
                    .iter()
                    .zip(self.class_token(k))
                    .map(|(p, c)| (p + c) / pool)
                    .collect();
                debug_assert_eq!(m.len(), e);
                let mut y = vec![0.0; self.dims.embed_dim];
                matvec(&self.w_txt, &m, &mut y);
                Ok(y)
            })
            .collect()
    }

    pub fn encode_text(&self, prompts: &PromptState, class_index: usize) -> Result<Embedding> {
        if class_index >= self.dims.num_classes {
            return Err(Error::domain(format!(
                "class {class_index} outside {} classes",
                self.dims.num_classes
            )));
        }
        let y = self.text_projections(prompts)?.swap_remove(class_index);
        Embedding::normalize(y).map_err(|e| Error::domain(format!("text projection of class {class_index}: {e}")))
    }

    /// Text features for every class, as a prompt set.
    pub fn text_features(&self, prompts: &PromptState) -> Result<ClassPromptSet> {
        let embeddings = self
            .text_projections(prompts)?
            .into_iter()
            .enumerate()
            .map(|(k, y)| {
                Embedding::normalize(y)
                    .map_err(|e| Error::domain(format!("text projection of class {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ClassPromptSet::unnamed(embeddings)
    }

    /// The zero-shot base classifier for a fixed prompt state.
    pub fn classifier(&self, prompts: &PromptState, tau: Temperature) -> Result<ZeroShotClassifier<&ToyVlm>> {
        ZeroShotClassifier::new(self, self.text_features(prompts)?, tau)
    }

    /// Writes `toyvlm.json` and one container per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ToyDims {
            input_dim: big_d,
            embed_dim: d,
            token_dim: e,
            num_classes: k,
        } = self.dims;
        let meta = serde_json::to_string_pretty(&VlmMeta {
            dims: self.dims,
            init_seed: self.init_seed,
        })
        .expect("metadata serializes");
        let meta_path = dir.join("toyvlm.json");
        std::fs::write(&meta_path, meta + "\n").map_err(|err| Error::io(&meta_path, err))?;
        let u = |x: usize| x as u32;
        Tensor::f32_from_f64(vec![u(d), u(big_d)], &self.w_img)?.write(&dir.join("w_img.csmt"))?;
        Tensor::f32_from_f64(vec![u(d), u(e)], &self.w_txt)?.write(&dir.join("w_txt.csmt"))?;
        Tensor::f32_from_f64(vec![u(k), u(e)], &self.class_tokens)?.write(&dir.join("class_tokens.csmt"))?;
        Tensor::f32_from_f64(vec![u(e)], &self.template_token)?.write(&dir.join("template_token.csmt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("toyvlm.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: VlmMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        meta.dims.validate()?;
        let ToyDims {
            input_dim: big_d,
            embed_dim: d,
            token_dim: e,
            num_classes: k,
        } = meta.dims;
        let u = |x: usize| x as u32;
        let read = |name: &str, dims: Vec<u32>| -> Result<Vec<f64>> {
            let t = Tensor::read(&dir.join(name))?;
            t.expect_dims(&dims, name)?;
            Ok(t.to_f64())
        };
        Ok(ToyVlm {
            dims: meta.dims,
            w_img: read("w_img.csmt", vec![u(d), u(big_d)])?,
            w_txt: read("w_txt.csmt", vec![u(d), u(e)])?,
            class_tokens: read("class_tokens.csmt", vec![u(k), u(e)])?,
            template_token: read("template_token.csmt", vec![u(e)])?,
            init_seed: meta.init_seed,
        })
    }
}

impl ImageEncoder for ToyVlm {
    fn input_dim(&self) -> usize {
        self.dims.input_dim
    }
    fn embed_dim(&self) -> usize {
        self.dims.embed_dim
    }
    fn encode(&self, image: &[f64]) -> Result<Embedding> {
        self.encode_image(image)
    }
}

/// How context tokens start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContextInit {
    /// Independent `N(0, 0.02^2)` coordinates.
    Random,
    /// The hand-crafted template plus `N(0, 0.02^2)` jitter.
    Template,
    /// The hand-crafted template itself.
    HandCrafted,
}

impl std::fmt::Display for ContextInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextInit::Random => "RANDOM",
            ContextInit::Template => "TEMPLATE",
            ContextInit::HandCrafted => "HAND_CRAFTED",
        })
    }
}

/// The learnable context tokens `p_1..p_M`, shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// Row-major `M x e`.
    context: Vec<f64>,
    token_dim: usize,
}

impl PromptState {
    pub fn from_tokens(context: Vec<f64>, token_dim: usize) -> Result<Self> {
        if token_dim == 0 || context.is_empty() || !context.len().is_multiple_of(token_dim) {
            return Err(Error::dim(format!(
                "{} context values do not form whole tokens of size {token_dim}",
                context.len()
            )));
        }
        Ok(PromptState { context, token_dim })
    }

    pub fn random(num_tokens: usize, token_dim: usize, seed: u64) -> Result<Self> {
        let context = gaussian(&mut seed::rng(seed), num_tokens * token_dim, CONTEXT_INIT_STD);
        PromptState::from_tokens(context, token_dim)
    }

    /// The hand-crafted prompt: the template token in every slot.
    pub fn hand_crafted(vlm: &ToyVlm, num_tokens: usize) -> Result<Self> {
        PromptState::from_tokens(vlm.template_token().repeat(num_tokens), vlm.dims().token_dim)
    }

    /// The hand-crafted prompt plus `N(0, 0.02^2)` jitter.
    pub fn template(vlm: &ToyVlm, num_tokens: usize, seed: u64) -> Result<Self> {
        let mut state = PromptState::hand_crafted(vlm, num_tokens)?;
        let jitter = PromptState::random(num_tokens, state.token_dim, seed)?;
        state.axpy(1.0, &jitter.context);
        Ok(state)
    }

    pub fn init(kind: ContextInit, vlm: &ToyVlm, num_tokens: usize, seed: u64) -> Result<Self> {
        match kind {
            ContextInit::Random => PromptState::random(num_tokens, vlm.dims().token_dim, seed),
            ContextInit::Template => PromptState::template(vlm, num_tokens, seed),
            ContextInit::HandCrafted => PromptState::hand_crafted(vlm, num_tokens),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.context.len() / self.token_dim
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.context
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.context[j * self.token_dim..(j + 1) * self.token_dim]
    }

    fn token_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.token_dim];
        for row in self.context.chunks_exact(self.token_dim) {
            sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        sum
    }

    /// `self += a * direction`, with `direction` shaped like the context.
    pub(crate) fn axpy(&mut self, a: f64, direction: &[f64]) {
        debug_assert_eq!(direction.len(), self.context.len());
        self.context.iter_mut().zip(direction).for_each(|(p, g)| *p += a * g);
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::f64(
            vec![self.num_tokens() as u32, self.token_dim as u32],
            self.context.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims().len() != 2 {
            return Err(Error::dim(format!("prompt tensor must be 2-D, got {:?}", t.dims())));
        }
        PromptState::from_tokens(t.to_f64(), t.dims()[1] as usize)
    }
}

/// The loss differentiated by [`prompt_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    /// Mean over images and noise draws of `-ln p_label(x + delta)`.
    CrossEntropy,
    /// `H(q_bar)` for `q_bar` the mean prediction over noisy copies of one image.
    MeanProbEntropy,
}

/// A loss value with its gradient, shaped like the context (`M x e`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// `x + sigma * z` with `z ~ N(0, I)` read from the stream keyed
/// `(seed, image_index, draw)`.
pub fn noisy_copy(x: &[f64], sigma: f64, seed: u64, image_index: u64, draw: u64) -> Vec<f64> {
    let mut rng = seed::stream(seed, image_index, draw);
    x.iter()
        .map(|&xi| {
            let z: f64 = StandardNormal.sample(&mut rng);
            xi + sigma * z
        })
        .collect()
}

fn check_sigmas(sigma_draws: &[f64]) -> Result<()> {
    if sigma_draws.is_empty() {
        return Err(Error::domain("need at least one noise draw"));
    }
    if let Some(s) = sigma_draws.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::domain(format!("noise level {s} must be finite and non-negative")));
    }
    Ok(())
}

struct Head {
    /// `u_k`, unit rows.
    u: Vec<Vec<f64>>,
    /// `|y_k|` before normalization.
    y_norm: Vec<f64>,
}

impl Head {
    fn new(vlm: &ToyVlm, prompts: &PromptState) -> Result<Head> {
        let ys = vlm.text_projections(prompts)?;
        let mut u = Vec::with_capacity(ys.len());
        let mut y_norm = Vec::with_capacity(ys.len());
        for (k, mut y) in ys.into_iter().enumerate() {
            let n = norm(&y);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::NonFinite(format!("text projection of class {k} has norm {n}")));
            }
            y.iter_mut().for_each(|x| *x /= n);
            u.push(y);
            y_norm.push(n);
        }
        Ok(Head { u, y_norm })
    }

    /// Image embedding and class probabilities of one input.
    fn forward(&self, vlm: &ToyVlm, x: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let mut v = vlm.project_image(x)?;
        let n = norm(&v);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NonFinite(format!("image projection has norm {n}")));
        }
        v.iter_mut().for_each(|a| *a /= n);
        let logits: Vec<f64> = self.u.iter().map(|u| tau * dot(u, &v)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut q: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = q.iter().sum();
        q.iter_mut().for_each(|p| *p /= z);
        // log-partition, for a stable cross-entropy
        let lse = max + z.ln();
        Ok((v, q, lse))
    }

    /// Chain rule from `G_k = dL/du_k` (unconstrained) to the context tokens.
    fn backward(&self, vlm: &ToyVlm, prompts: &PromptState, g_u: &[Vec<f64>]) -> Vec<f64> {
        let e = vlm.dims().token_dim;
        let pool = (prompts.num_tokens() + 1) as f64;
        let mut g_pool = vec![0.0; e];
        let mut g_m = vec![0.0; e];
        for ((u, g), &yn) in self.u.iter().zip(g_u).zip(&self.y_norm) {
            let radial = dot(g, u);
            let g_y: Vec<f64> = g.iter().zip(u).map(|(gi, ui)| (gi - radial * ui) / yn).collect();
            matvec_t(vlm.w_txt(), &g_y, &mut g_m);
            g_pool.iter_mut().zip(&g_m).for_each(|(a, b)| *a += b / pool);
        }
        g_pool.repeat(prompts.num_tokens())
    }
}

/// The loss and its exact gradient with respect to the context tokens.
///
/// `images` is a row-major `B x D` batch. For draw `t` of image `i`, the noisy
/// input is [`noisy_copy`]`(x_i, sigma_draws[t], seed, i, t)`, so the same
/// `seed` reproduces the same noise. [`LossKind::CrossEntropy`] needs one label
/// per image; [`LossKind::MeanProbEntropy`] takes exactly one image and no
/// labels.
#[allow(clippy::too_many_arguments)]
pub fn prompt_gradient(
    vlm: &ToyVlm,
    prompts: &PromptState,
    images: &[f64],
    labels: Option<&[usize]>,
    sigma_draws: &[f64],
    tau: Temperature,
    loss_kind: LossKind,
    seed: u64,
) -> Result<LossGradient> {
    let dims = vlm.dims();
    if images.is_empty() || !images.len().is_multiple_of(dims.input_dim) {
        return Err(Error::dim(format!(
            "{} image values do not form whole images of size {}",
            images.len(),
            dims.input_dim
        )));
    }
    check_sigmas(sigma_draws)?;
    let batch = images.len() / dims.input_dim;
    let head = Head::new(vlm, prompts)?;
    let tau = tau.get();
    let k = dims.num_classes;
    let mut g_u = vec![vec![0.0; dims.embed_dim]; k];
    let mut accumulate = |v: &[f64], ds: &[f64]| {
        for (g, &w) in g_u.iter_mut().zip(ds) {
            g.iter_mut().zip(v).for_each(|(a, b)| *a += w * b);
        }
    };

    let loss = match loss_kind {
        LossKind::CrossEntropy => {
            let labels = labels.ok_or_else(|| Error::domain("cross-entropy needs labels"))?;
            if labels.len() != batch {
                return Err(Error::dim(format!("{} labels for {batch} images", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::domain(format!("label {bad} outside {k} classes")));
            }
            let total = (batch * sigma_draws.len()) as f64;
            let mut loss = 0.0;
            for (i, (x, &y)) in images.chunks_exact(dims.input_dim).zip(labels).enumerate() {
                for (t, &sigma) in sigma_draws.iter().enumerate() {
                    let noisy = noisy_copy(x, sigma, seed, i as u64, t as u64);
                    let (v, q, lse) = head.forward(vlm, &noisy, tau)?;
                    loss += lse - tau * dot(&head.u[y], &v);
                    let ds: Vec<f64> = q
                        .iter()
                        .enumerate()
                        .map(|(c, &p)| tau * (p - if c == y { 1.0 } else { 0.0 }) / total)
                        .collect();
                    accumulate(&v, &ds);
                }
            }
            loss / total
        }
        LossKind::MeanProbEntropy => {
            if labels.is_some() {
                return Err(Error::domain("entropy loss takes no labels"));
            }
            if batch != 1 {
                return Err(Error::dim(format!("entropy loss takes one image, got {batch}")));
            }
            let t_count = sigma_draws.len() as f64;
            let mut copies = Vec::with_capacity(sigma_draws.len());
            let mut q_bar = vec![0.0; k];
            for (t, &sigma) in sigma_draws.iter().enumerate() {
                let noisy = noisy_copy(images, sigma, seed, 0, t as u64);
                let (v, q, _) = head.forward(vlm, &noisy, tau)?;
                q_bar.iter_mut().zip(&q).for_each(|(a, b)| *a += b / t_count);
                copies.push((v, q));
            }
            let ln_q_bar: Vec<f64> = q_bar.iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
            let entropy = -q_bar.iter().zip(&ln_q_bar).map(|(p, l)| p * l).sum::<f64>();
            for (v, q) in &copies {
                let mean_ln = dot(q, &ln_q_bar);
                let ds: Vec<f64> = q
                    .iter()
                    .zip(&ln_q_bar)
                    .map(|(&p, &l)| tau * p * (mean_ln - l) / t_count)
                    .collect();
                accumulate(v, &ds);
            }
            entropy
        }
    };

    let gradient = head.backward(vlm, prompts, &g_u);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{loss_kind:?} loss is {loss}")));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of context token {} coordinate {} is {}",
            i / dims.token_dim,
            i % dims.token_dim,
            gradient[i]
        )));
    }
    Ok(LossGradient { loss, gradient })
}

/// Labeled synthetic images in `[0, 1]^D`, stored class by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Row-major `N x D`.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major `K x D`.
    pub class_means: Vec<f64>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_mean(&self, k: usize) -> &[f64] {
        &self.class_means[k * self.input_dim..(k + 1) * self.input_dim]
    }

    fn subset(&self, indices: &[usize]) -> SynthDataset {
        SynthDataset {
            images: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_means: self.class_means.clone(),
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            seed: self.seed,
        }
    }

    /// Splits into the first `per_class` samples of each class and the rest.
    pub fn split_per_class(&self, per_class: usize) -> Result<(SynthDataset, SynthDataset)> {
        let mut seen = vec![0usize; self.num_classes];
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for (i, &y) in self.labels.iter().enumerate() {
            if seen[y] < per_class {
                head.push(i);
            } else {
                tail.push(i);
            }
            seen[y] += 1;
        }
        if let Some(k) = seen.iter().position(|&c| c < per_class) {
            return Err(Error::domain(format!(
                "class {k} has {} samples, {per_class} requested",
                seen[k]
            )));
        }
        Ok((self.subset(&head), self.subset(&tail)))
    }
}

fn min_pairwise_distance(means: &[f64], dim: usize) -> f64 {
    let rows: Vec<&[f64]> = means.chunks_exact(dim).collect();
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Generates `num_classes * per_class` labeled images.
///
/// Class means are drawn uniformly from `[0,1]^D`, then pairs closer than
/// `separation` are pushed apart (and clamped back into the cube) until every
/// pair is at least `separation` apart. Samples are
/// `clamp(mean + N(0, 0.05^2), 0, 1)`, rounded to f32, class by class.
pub fn synth_dataset(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if num_classes < 2 || per_class == 0 || input_dim == 0 {
        return Err(Error::domain("need K >= 2, D >= 1 and per_class >= 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::domain(format!("separation must be positive, got {separation}")));
    }
    if separation > (input_dim as f64).sqrt() {
        return Err(Error::domain(format!(
            "separation {separation} exceeds the diameter sqrt({input_dim}) of the unit cube"
        )));
    }
    let mut rng = seed::stream(seed, 0, 0);
    let mut means: Vec<f64> = (0..num_classes * input_dim).map(|_| rng.random::<f64>()).collect();
    let mut converged = false;
    for _ in 0..PUSH_SWEEPS {
        let mut moved = false;
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                let diff: Vec<f64> = (0..input_dim)
                    .map(|c| means[i * input_dim + c] - means[j * input_dim + c])
                    .collect();
                let dist = norm(&diff);
                if dist < separation {
                    moved = true;
                    let scale = if dist > 0.0 { (separation - dist) / 2.0 * 1.01 / dist } else { 0.0 };
                    for (c, d) in diff.iter().enumerate() {
                        let step = if dist > 0.0 { scale * d } else if c == 0 { separation } else { 0.0 };
                        let a = &mut means[i * input_dim + c];
                        *a = (*a + step).clamp(0.0, 1.0);
                        let b = &mut means[j * input_dim + c];
                        *b = (*b - step).clamp(0.0, 1.0);
                    }
                }
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }
    let achieved = min_pairwise_distance(&means, input_dim);
    if !converged || achieved < separation {
        return Err(Error::domain(format!(
            "could not separate {num_classes} means by {separation} in [0,1]^{input_dim} (reached {achieved})"
        )));
    }

    let mut rng = seed::stream(seed, 1, 0);
    let mut images = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let mean = &means[k * input_dim..(k + 1) * input_dim];
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                images.push((m + SAMPLE_NOISE_STD * z).clamp(0.0, 1.0) as f32 as f64);
            }
            labels.push(k);
        }
    }
    Ok(SynthDataset {
        images,
        labels,
        class_means: means,
        num_classes,
        input_dim,
        seed,
    })
}

/// Exact smoothing quantities of the binary rule `f(x) = 1[w.x + b > 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearOracle {
    /// Probability that `f(x + delta)` returns the majority class.
    pub p_a: Probability,
    /// Distance from `x` to the decision hyperplane.
    pub true_radius: f64,
    pub majority_class: usize,
}

/// `p_a = Phi(|w.x + b| / (sigma |w|))`, `true_radius = |w.x + b| / |w|`.
/// Points on the hyperplane report class 0.
pub fn linear_oracle(w: &[f64], b: f64, x: &[f64], sigma: f64) -> Result<LinearOracle> {
    if w.len() != x.len() {
        return Err(Error::dim(format!("w has {} coordinates, x has {}", w.len(), x.len())));
    }
    let wn = norm(w);
    if wn == 0.0 {
        return Err(Error::domain("w must be nonzero"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let margin = dot(w, x) + b;
    let distance = margin.abs() / wn;
    Ok(LinearOracle {
        p_a: Probability::new(phi(distance / sigma))?,
        true_radius: distance,
        majority_class: usize::from(margin > 0.0),
    })
}

/// A random binary linear rule and a point at a known distance from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCase {
    pub w: Vec<f64>,
    pub b: f64,
    pub x: Vec<f64>,
}

/// `count` cases in `dim` dimensions with `w, b` uniform in `[-1, 1)` and
/// `[-0.5, 0.5)`, and `x` at a distance uniform in `[0, max_distance)` on a
/// random side of the hyperplane.
pub fn linear_cases(count: usize, dim: usize, max_distance: f64, seed: u64) -> Vec<LinearCase> {
    let mut rng = seed::stream(seed, 0, 0);
    (0..count)
        .map(|_| {
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = rng.random_range(-0.5..0.5);
            let wn2 = dot(&w, &w);
            let distance = rng.random_range(0.0..max_distance);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let x = w
                .iter()
                .map(|wj| -b * wj / wn2 + side * distance * wj / wn2.sqrt())
                .collect();
            LinearCase { w, b, x }
        })
        .collect()
}
