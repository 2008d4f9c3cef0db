//! Convolutional encoder/decoder with a split latent.
//!
//! The encoder is a stack of stride-2 convolutions feeding four linear heads:
//! `(mu_l, logvar_l)` for the labeled block and `(mu_u, logvar_u)` for the
//! unlabeled block. The decoder mirrors it with transposed convolutions and
//! emits logits; reconstructions are the element-wise sigmoid. Parameters live
//! in one flat vector addressed through [`Layout`], which keeps optimizer
//! state, serialization, and finite-difference sweeps trivial.

use ndarray::{Array2, Array4};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvTranspose2d, Linear, Real};
use crate::seeds;
use crate::wire;

/// Log-variance heads are clamped to this range before any exponentiation.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Shape hyperparameters; everything else about the network is derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dim_l: usize,
    pub dim_u: usize,
}

impl ArchitectureConfig {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_pad(&self) -> usize {
        self.stride - 1
    }

    pub fn n_layers(&self) -> usize {
        self.conv_channels.len()
    }

    /// Spatial size entering each conv stage; index 0 is the input image,
    /// index `n_layers()` the final feature map.
    pub fn stage_hw(&self) -> Vec<(usize, usize)> {
        let (p, k, s) = (self.pad(), self.kernel, self.stride);
        let mut out = Vec::with_capacity(self.n_layers() + 1);
        let (mut h, mut w) = (self.in_height, self.in_width);
        out.push((h, w));
        for _ in 0..self.n_layers() {
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
            out.push((h, w));
        }
        out
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        *self.stage_hw().last().expect("at least the input stage")
    }

    /// Flattened trunk width: channels x spatial of the last feature map.
    pub fn feat_len(&self) -> usize {
        let (h, w) = self.feature_hw();
        self.conv_channels.last().copied().unwrap_or(0) * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_height == 0 || self.in_width == 0 {
            return Err(Error::InvalidDimension(
                "input shape must be non-zero".into(),
            ));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::InvalidDimension(
                "conv_channels must be non-empty and positive".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidDimension(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidDimension("stride must be positive".into()));
        }
        if self.dim_l == 0 || self.dim_u == 0 {
            return Err(Error::InvalidDimension(
                "latent dimensions must be at least 1".into(),
            ));
        }
        // Each stage must shrink-then-restore exactly, or the decoder cannot
        // mirror the encoder shape for shape.
        let (p, k, s, op) = (self.pad(), self.kernel, self.stride, self.out_pad());
        let (mut h, mut w) = (self.in_height, self.in_width);
        for (i, _) in self.conv_channels.iter().enumerate() {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::InvalidDimension(format!(
                    "stage {i}: feature map {h}x{w} smaller than kernel {k}"
                )));
            }
            let ho = (h + 2 * p - k) / s + 1;
            let wo = (w + 2 * p - k) / s + 1;
            let back_h = (ho - 1) * s + k + op - 2 * p;
            let back_w = (wo - 1) * s + k + op - 2 * p;
            if back_h != h || back_w != w {
                return Err(Error::InvalidDimension(format!(
                    "stage {i}: {h}x{w} is not exactly invertible at stride {s} \
                     (down to {ho}x{wo}, back to {back_h}x{back_w})"
                )));
            }
            h = ho;
            w = wo;
        }
        Ok(())
    }

    pub fn encoder_convs(&self) -> Vec<Conv2d> {
        let mut convs = Vec::with_capacity(self.n_layers());
        let mut c_in = self.in_channels;
        for &c_out in &self.conv_channels {
            convs.push(Conv2d {
                c_in,
                c_out,
                k: self.kernel,
                stride: self.stride,
                pad: self.pad(),
            });
            c_in = c_out;
        }
        convs
    }

    pub fn decoder_deconvs(&self) -> Vec<ConvTranspose2d> {
        let mut chain: Vec<usize> = self.conv_channels.iter().rev().copied().collect();
        chain.push(self.in_channels);
        chain
            .windows(2)
            .map(|pair| ConvTranspose2d {
                c_in: pair[0],
                c_out: pair[1],
                k: self.kernel,
                stride: self.stride,
                pad: self.pad(),
                out_pad: self.out_pad(),
            })
            .collect()
    }

    pub fn head(&self, dim: usize) -> Linear {
        Linear {
            d_in: self.feat_len(),
            d_out: dim,
        }
    }

    pub fn decoder_fc(&self) -> Linear {
        Linear {
            d_in: self.dim_l + self.dim_u,
            d_out: self.feat_len(),
        }
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.in_height as u32).to_le_bytes());
        out.extend_from_slice(&(self.in_width as u32).to_le_bytes());
        out.extend_from_slice(&(self.conv_channels.len() as u32).to_le_bytes());
        for &c in &self.conv_channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.kernel as u32).to_le_bytes());
        out.extend_from_slice(&(self.stride as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_l as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_u as u32).to_le_bytes());
    }

    pub(crate) fn read_bytes(r: &mut wire::Reader<'_>) -> Result<Self> {
        let in_channels = r.read_u32()? as usize;
        let in_height = r.read_u32()? as usize;
        let in_width = r.read_u32()? as usize;
        let n = r.read_u32()? as usize;
        if n > 64 {
            return Err(r.format_err("implausible conv layer count", r.offset as u64));
        }
        let mut conv_channels = Vec::with_capacity(n);
        for _ in 0..n {
            conv_channels.push(r.read_u32()? as usize);
        }
        let arch = ArchitectureConfig {
            in_channels,
            in_height,
            in_width,
            conv_channels,
            kernel: r.read_u32()? as usize,
            stride: r.read_u32()? as usize,
            dim_l: r.read_u32()? as usize,
            dim_u: r.read_u32()? as usize,
        };
        arch.validate()?;
        Ok(arch)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Deterministic map from tensor names to slices of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn of(arch: &ArchitectureConfig) -> Layout {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            specs.push(TensorSpec {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };

        for (i, conv) in arch.encoder_convs().iter().enumerate() {
            push(
                format!("enc.conv{i}.weight"),
                vec![conv.c_out, conv.c_in, conv.k, conv.k],
            );
            push(format!("enc.conv{i}.bias"), vec![conv.c_out]);
        }
        for (name, dim) in [
            ("mu_l", arch.dim_l),
            ("logvar_l", arch.dim_l),
            ("mu_u", arch.dim_u),
            ("logvar_u", arch.dim_u),
        ] {
            push(format!("enc.{name}.weight"), vec![dim, arch.feat_len()]);
            push(format!("enc.{name}.bias"), vec![dim]);
        }
        push(
            "dec.fc.weight".into(),
            vec![arch.feat_len(), arch.dim_l + arch.dim_u],
        );
        push("dec.fc.bias".into(), vec![arch.feat_len()]);
        for (i, dc) in arch.decoder_deconvs().iter().enumerate() {
            push(
                format!("dec.deconv{i}.weight"),
                vec![dc.c_in, dc.c_out, dc.k, dc.k],
            );
            push(format!("dec.deconv{i}.bias"), vec![dc.c_out]);
        }

        let total = offset;
        Layout { specs, total }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let s = self.spec(name);
        s.offset..s.offset + s.len
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    arch: ArchitectureConfig,
    layout: Layout,
    values: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    /// Fan-in scaled uniform weights, zero biases, one RNG stream per tensor
    /// so the draw for each tensor depends only on `(seed, name)`.
    pub fn init(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::of(&arch);
        let mut values = vec![F::zero(); layout.total_len()];
        let fan_ins = fan_in_table(&arch);
        for spec in layout.specs() {
            if spec.name.ends_with(".bias") {
                continue;
            }
            let fan_in = *fan_ins
                .iter()
                .find(|(n, _)| *n == spec.name)
                .map(|(_, f)| f)
                .expect("every weight tensor has a fan-in");
            let mut rng = seeds::stream(seed, &format!("init/{}", spec.name), 0);
            nn::uniform_init(
                &mut values[spec.offset..spec.offset + spec.len],
                fan_in,
                &mut rng,
            );
        }
        Ok(ModelParams {
            arch,
            layout,
            values,
        })
    }

    pub fn from_values(arch: ArchitectureConfig, values: Vec<F>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::of(&arch);
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "parameter vector length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ModelParams {
            arch,
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> &[F] {
        &self.values[self.layout.range(name)]
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| G::c(v.to64())).collect(),
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: parameter {i} is {v}"
                )));
            }
        }
        Ok(())
    }
}

fn fan_in_table(arch: &ArchitectureConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, conv) in arch.encoder_convs().iter().enumerate() {
        out.push((format!("enc.conv{i}.weight"), conv.fan_in()));
    }
    for name in ["mu_l", "logvar_l", "mu_u", "logvar_u"] {
        out.push((format!("enc.{name}.weight"), arch.feat_len()));
    }
    out.push(("dec.fc.weight".into(), arch.dim_l + arch.dim_u));
    for (i, dc) in arch.decoder_deconvs().iter().enumerate() {
        out.push((format!("dec.deconv{i}.weight"), dc.fan_in()));
    }
    out
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Per-image Gaussian posterior over both latent blocks. Log-variances are
/// already clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
#[derive(Debug, Clone)]
pub struct LatentPosterior<F: Real> {
    pub mu_l: Array2<F>,
    pub logvar_l: Array2<F>,
    pub mu_u: Array2<F>,
    pub logvar_u: Array2<F>,
}

impl<F: Real> LatentPosterior<F> {
    pub fn batch_len(&self) -> usize {
        self.mu_l.nrows()
    }
}

/// Upstream gradients w.r.t. the four posterior heads.
#[derive(Debug, Clone)]
pub struct LatentGrads<F: Real> {
    pub dmu_l: Array2<F>,
    pub dlogvar_l: Array2<F>,
    pub dmu_u: Array2<F>,
    pub dlogvar_u: Array2<F>,
}

/// Intermediates the encoder backward pass needs.
pub struct EncoderCache<F: Real> {
    conv_cols: Vec<Array2<F>>,
    conv_acts: Vec<Array4<F>>,
    feat: Array2<F>,
    logvar_l_raw: Array2<F>,
    logvar_u_raw: Array2<F>,
}

/// Intermediates the decoder backward pass needs.
pub struct DecoderCache<F: Real> {
    z: Array2<F>,
    fc_act: Array2<F>,
    deconv_x_mats: Vec<Array2<F>>,
    deconv_acts: Vec<Array4<F>>,
}

pub fn encode<F: Real>(params: &ModelParams<F>, x: &Array4<F>) -> Result<LatentPosterior<F>> {
    encode_with_cache(params, x).map(|(post, _)| post)
}

pub fn encode_with_cache<F: Real>(
    params: &ModelParams<F>,
    x: &Array4<F>,
) -> Result<(LatentPosterior<F>, EncoderCache<F>)> {
    let arch = params.arch();
    let (n, c, h, w) = x.dim();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if (c, h, w) != (arch.in_channels, arch.in_height, arch.in_width) {
        return Err(Error::Shape(format!(
            "input {c}x{h}x{w} does not match architecture {}x{}x{}",
            arch.in_channels, arch.in_height, arch.in_width
        )));
    }

    let convs = arch.encoder_convs();
    let mut conv_cols = Vec::with_capacity(convs.len());
    let mut conv_acts: Vec<Array4<F>> = Vec::with_capacity(convs.len());
    for (i, conv) in convs.iter().enumerate() {
        let input = if i == 0 { x } else { &conv_acts[i - 1] };
        let (mut y, cols) = conv.forward(
            input,
            params.tensor(&format!("enc.conv{i}.weight")),
            params.tensor(&format!("enc.conv{i}.bias")),
        );
        nn::relu_inplace(y.as_slice_mut().expect("standard layout"));
        conv_cols.push(cols);
        conv_acts.push(y);
    }

    let last = conv_acts.last().expect("at least one conv layer");
    let feat = flatten(last, arch.feat_len());

    let head = |name: &str, dim: usize| -> Array2<F> {
        arch.head(dim).forward(
            &feat,
            params.tensor(&format!("enc.{name}.weight")),
            params.tensor(&format!("enc.{name}.bias")),
        )
    };
    let mu_l = head("mu_l", arch.dim_l);
    let logvar_l_raw = head("logvar_l", arch.dim_l);
    let mu_u = head("mu_u", arch.dim_u);
    let logvar_u_raw = head("logvar_u", arch.dim_u);

    let post = LatentPosterior {
        mu_l,
        logvar_l: clamp_logvar(&logvar_l_raw),
        mu_u,
        logvar_u: clamp_logvar(&logvar_u_raw),
    };
    let cache = EncoderCache {
        conv_cols,
        conv_acts,
        feat,
        logvar_l_raw,
        logvar_u_raw,
    };
    Ok((post, cache))
}

/// `z = mu + exp(logvar / 2) * eps`, element-wise per block.
pub fn reparameterize<F: Real>(
    post: &LatentPosterior<F>,
    eps_l: &Array2<F>,
    eps_u: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    if eps_l.dim() != post.mu_l.dim() || eps_u.dim() != post.mu_u.dim() {
        return Err(Error::Shape(format!(
            "noise shapes {:?}/{:?} do not match posterior {:?}/{:?}",
            eps_l.dim(),
            eps_u.dim(),
            post.mu_l.dim(),
            post.mu_u.dim()
        )));
    }
    let half = F::c(0.5);
    let z_l = &post.mu_l + &(eps_l * &post.logvar_l.mapv(|v| (v * half).exp()));
    let z_u = &post.mu_u + &(eps_u * &post.logvar_u.mapv(|v| (v * half).exp()));
    Ok((z_l, z_u))
}

/// Standard normal noise of shape `[n, dim]` from the given stream.
pub fn sample_noise<F: Real>(n: usize, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<F> {
    use rand::Rng;
    Array2::from_shape_fn((n, dim), |_| {
        F::c(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Decoder output as Bernoulli means in `(0, 1)`.
pub fn decode<F: Real>(
    params: &ModelParams<F>,
    z_l: &Array2<F>,
    z_u: &Array2<F>,
) -> Result<Array4<F>> {
    let (logits, _) = decode_with_cache(params, z_l, z_u)?;
    Ok(logits.mapv(nn::sigmoid))
}

pub fn decode_with_cache<F: Real>(
    params: &ModelParams<F>,
    z_l: &Array2<F>,
    z_u: &Array2<F>,
) -> Result<(Array4<F>, DecoderCache<F>)> {
    let arch = params.arch();
    let n = z_l.nrows();
    if n == 0 || z_u.nrows() != n {
        return Err(Error::Shape(format!(
            "latent batches disagree: {} vs {}",
            z_l.nrows(),
            z_u.nrows()
        )));
    }
    if z_l.ncols() != arch.dim_l || z_u.ncols() != arch.dim_u {
        return Err(Error::Shape(format!(
            "latent widths {}x{} do not match architecture {}x{}",
            z_l.ncols(),
            z_u.ncols(),
            arch.dim_l,
            arch.dim_u
        )));
    }

    let mut z = Array2::<F>::zeros((n, arch.dim_l + arch.dim_u));
    for i in 0..n {
        for j in 0..arch.dim_l {
            z[(i, j)] = z_l[(i, j)];
        }
        for j in 0..arch.dim_u {
            z[(i, arch.dim_l + j)] = z_u[(i, j)];
        }
    }

    let mut fc_act = arch.decoder_fc().forward(
        &z,
        params.tensor("dec.fc.weight"),
        params.tensor("dec.fc.bias"),
    );
    nn::relu_inplace(fc_act.as_slice_mut().expect("standard layout"));

    let (fh, fw) = arch.feature_hw();
    let c_last = *arch.conv_channels.last().expect("non-empty channels");
    let mut cur = unflatten(&fc_act, c_last, fh, fw);

    let deconvs = arch.decoder_deconvs();
    let last_idx = deconvs.len() - 1;
    let mut deconv_x_mats = Vec::with_capacity(deconvs.len());
    let mut deconv_acts = Vec::with_capacity(last_idx);
    let mut logits = None;
    for (i, dc) in deconvs.iter().enumerate() {
        let (mut y, x_mat) = dc.forward(
            &cur,
            params.tensor(&format!("dec.deconv{i}.weight")),
            params.tensor(&format!("dec.deconv{i}.bias")),
        );
        deconv_x_mats.push(x_mat);
        if i == last_idx {
            logits = Some(y);
        } else {
            nn::relu_inplace(y.as_slice_mut().expect("standard layout"));
            deconv_acts.push(y.clone());
            cur = y;
        }
    }

    let cache = DecoderCache {
        z,
        fc_act,
        deconv_x_mats,
        deconv_acts,
    };
    Ok((logits.expect("at least one deconv layer"), cache))
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

/// Backward through the decoder. Accumulates parameter gradients into `grads`
/// (flat, same layout as the parameters) and returns `(dz_l, dz_u)`.
pub fn decoder_backward<F: Real>(
    params: &ModelParams<F>,
    cache: &DecoderCache<F>,
    dlogits: &Array4<F>,
    grads: &mut [F],
) -> Result<(Array2<F>, Array2<F>)> {
    let arch = params.arch();
    let layout = params.layout();
    let deconvs = arch.decoder_deconvs();
    let stages = arch.stage_hw();
    let n_layers = deconvs.len();

    // Deconv i upsamples from the encoder's stage n_layers - i.
    let mut dcur = dlogits.clone();
    for i in (0..n_layers).rev() {
        if i < n_layers - 1 {
            nn::relu_backward_inplace(
                dcur.as_slice_mut().expect("standard layout"),
                cache.deconv_acts[i].as_slice().expect("standard layout"),
            );
        }
        let in_hw = stages[n_layers - i];
        let (wr, br) = (
            layout.range(&format!("dec.deconv{i}.weight")),
            layout.range(&format!("dec.deconv{i}.bias")),
        );
        let w = params.tensor(&format!("dec.deconv{i}.weight"));
        let (dw, db) = two_slices(grads, wr, br);
        dcur = deconvs[i].backward(&cache.deconv_x_mats[i], &dcur, w, dw, db, in_hw);
    }

    let mut dfeat = flatten(&dcur, arch.feat_len());
    nn::relu_backward_inplace(
        dfeat.as_slice_mut().expect("standard layout"),
        cache.fc_act.as_slice().expect("standard layout"),
    );
    let (wr, br) = (layout.range("dec.fc.weight"), layout.range("dec.fc.bias"));
    let w = params.tensor("dec.fc.weight");
    let (dw, db) = two_slices(grads, wr, br);
    let dz = arch.decoder_fc().backward(&cache.z, &dfeat, w, dw, db);

    let n = dz.nrows();
    let mut dz_l = Array2::<F>::zeros((n, arch.dim_l));
    let mut dz_u = Array2::<F>::zeros((n, arch.dim_u));
    for i in 0..n {
        for j in 0..arch.dim_l {
            dz_l[(i, j)] = dz[(i, j)];
        }
        for j in 0..arch.dim_u {
            dz_u[(i, j)] = dz[(i, arch.dim_l + j)];
        }
    }
    Ok((dz_l, dz_u))
}

/// Backward through the encoder given gradients w.r.t. the four heads
/// (in clamped log-variance terms). Accumulates into `grads`.
pub fn encoder_backward<F: Real>(
    params: &ModelParams<F>,
    cache: &EncoderCache<F>,
    d: &LatentGrads<F>,
    grads: &mut [F],
) -> Result<()> {
    let arch = params.arch();
    let layout = params.layout();

    // Clamp derivative: zero outside the open interval.
    let dlv_l = masked_by_clamp(&d.dlogvar_l, &cache.logvar_l_raw);
    let dlv_u = masked_by_clamp(&d.dlogvar_u, &cache.logvar_u_raw);

    let mut dfeat = Array2::<F>::zeros(cache.feat.dim());
    for (name, dim, dhead) in [
        ("mu_l", arch.dim_l, &d.dmu_l),
        ("logvar_l", arch.dim_l, &dlv_l),
        ("mu_u", arch.dim_u, &d.dmu_u),
        ("logvar_u", arch.dim_u, &dlv_u),
    ] {
        let (wr, br) = (
            layout.range(&format!("enc.{name}.weight")),
            layout.range(&format!("enc.{name}.bias")),
        );
        let w = params.tensor(&format!("enc.{name}.weight"));
        let (dw, db) = two_slices(grads, wr, br);
        let part = arch.head(dim).backward(&cache.feat, dhead, w, dw, db);
        dfeat = dfeat + part;
    }

    let convs = arch.encoder_convs();
    let stages = arch.stage_hw();
    let (fh, fw) = arch.feature_hw();
    let c_last = *arch.conv_channels.last().expect("non-empty channels");
    let mut dcur = unflatten(&dfeat, c_last, fh, fw);
    for i in (0..convs.len()).rev() {
        nn::relu_backward_inplace(
            dcur.as_slice_mut().expect("standard layout"),
            cache.conv_acts[i].as_slice().expect("standard layout"),
        );
        let (wr, br) = (
            layout.range(&format!("enc.conv{i}.weight")),
            layout.range(&format!("enc.conv{i}.bias")),
        );
        let w = params.tensor(&format!("enc.conv{i}.weight"));
        let (dw, db) = two_slices(grads, wr, br);
        dcur = convs[i].backward(&cache.conv_cols[i], &dcur, w, dw, db, stages[i]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn clamp_logvar<F: Real>(raw: &Array2<F>) -> Array2<F> {
    let lo = F::c(LOGVAR_MIN);
    let hi = F::c(LOGVAR_MAX);
    raw.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v })
}

fn masked_by_clamp<F: Real>(grad: &Array2<F>, raw: &Array2<F>) -> Array2<F> {
    let lo = F::c(LOGVAR_MIN);
    let hi = F::c(LOGVAR_MAX);
    let mut out = grad.clone();
    for (g, r) in out.iter_mut().zip(raw.iter()) {
        if *r < lo || *r > hi {
            *g = F::zero();
        }
    }
    out
}

fn flatten<F: Real>(x: &Array4<F>, width: usize) -> Array2<F> {
    let n = x.dim().0;
    Array2::from_shape_vec((n, width), x.as_slice().expect("standard layout").to_vec())
        .expect("flatten length")
}

fn unflatten<F: Real>(x: &Array2<F>, c: usize, h: usize, w: usize) -> Array4<F> {
    let n = x.nrows();
    Array4::from_shape_vec(
        (n, c, h, w),
        x.as_slice().expect("standard layout").to_vec(),
    )
    .expect("unflatten length")
}

/// Disjoint mutable views for a weight range and a bias range.
fn two_slices<F>(
    grads: &mut [F],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [F], &mut [F]) {
    assert!(a.end <= b.start || b.end <= a.start, "ranges overlap");
    if a.start < b.start {
        let (left, right) = grads.split_at_mut(b.start);
        (&mut left[a.start..a.end], &mut right[..b.end - b.start])
    } else {
        let (left, right) = grads.split_at_mut(a.start);
        let (bs, as_) = (&mut left[b.start..b.end], &mut right[..a.end - a.start]);
        (as_, bs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            in_channels: 1,
            in_height: 8,
            in_width: 8,
            conv_channels: vec![2, 3],
            kernel: 3,
            stride: 2,
            dim_l: 2,
            dim_u: 3,
        }
    }

    fn desk_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            in_channels: 1,
            in_height: 32,
            in_width: 32,
            conv_channels: vec![8, 16, 32, 64],
            kernel: 3,
            stride: 2,
            dim_l: 64,
            dim_u: 64,
        }
    }

    #[test]
    fn validate_accepts_desk_and_rejects_odd_sizes() {
        desk_arch().validate().unwrap();
        // 28x28 cannot be halved cleanly four times.
        let mut bad = desk_arch();
        bad.in_height = 28;
        bad.in_width = 28;
        assert!(matches!(
            bad.validate(),
            Err(Error::InvalidDimension(_))
        ));
        let mut even_kernel = desk_arch();
        even_kernel.kernel = 4;
        assert!(even_kernel.validate().is_err());
    }

    #[test]
    fn stage_shapes_halve() {
        let arch = desk_arch();
        assert_eq!(arch.stage_hw(), vec![(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(arch.feat_len(), 64 * 2 * 2);
    }

    #[test]
    fn layout_is_contiguous_with_expected_total() {
        let arch = desk_arch();
        let layout = Layout::of(&arch);
        let mut expect_offset = 0usize;
        for spec in layout.specs() {
            assert_eq!(spec.offset, expect_offset, "{}", spec.name);
            assert_eq!(spec.len, spec.shape.iter().product::<usize>());
            expect_offset += spec.len;
        }
        assert_eq!(layout.total_len(), expect_offset);
        // Hand tally: convs 24384, four heads 65792, fc 33024, deconvs 24321.
        assert_eq!(layout.total_len(), 147_521);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ModelParams::<f32>::init(tiny_arch(), 7).unwrap();
        let b = ModelParams::<f32>::init(tiny_arch(), 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c = ModelParams::<f32>::init(tiny_arch(), 8).unwrap();
        assert_ne!(a.values(), c.values());
        // Biases are zero at init.
        assert!(a.tensor("enc.conv0.bias").iter().all(|v| *v == 0.0));
        a.assert_finite("init").unwrap();
    }

    #[test]
    fn encode_decode_shapes_round_trip() {
        let params = ModelParams::<f32>::init(tiny_arch(), 3).unwrap();
        let mut rng = seeds::stream(5, "model-test", 0);
        use rand::Rng;
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random::<f32>());
        let (post, _) = encode_with_cache(&params, &x).unwrap();
        assert_eq!(post.mu_l.dim(), (2, 2));
        assert_eq!(post.logvar_u.dim(), (2, 3));

        let eps_l = sample_noise::<f32>(2, 2, &mut rng);
        let eps_u = sample_noise::<f32>(2, 3, &mut rng);
        let (z_l, z_u) = reparameterize(&post, &eps_l, &eps_u).unwrap();
        let probs = decode(&params, &z_l, &z_u).unwrap();
        assert_eq!(probs.dim(), x.dim());
        assert!(probs.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn reparameterize_zero_noise_returns_means() {
        let params = ModelParams::<f64>::init(tiny_arch(), 4).unwrap();
        let x = Array4::from_elem((1, 1, 8, 8), 0.5);
        let post = encode(&params, &x).unwrap();
        let z = reparameterize(
            &post,
            &Array2::zeros((1, 2)),
            &Array2::zeros((1, 3)),
        )
        .unwrap();
        assert_eq!(z.0, post.mu_l);
        assert_eq!(z.1, post.mu_u);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let params = ModelParams::<f32>::init(tiny_arch(), 1).unwrap();
        let x = Array4::<f32>::zeros((1, 1, 6, 6));
        assert!(matches!(encode(&params, &x), Err(Error::Shape(_))));
        let empty = Array4::<f32>::zeros((0, 1, 8, 8));
        assert!(matches!(encode(&params, &empty), Err(Error::Shape(_))));
    }

    #[test]
    fn logvar_clamp_bounds() {
        let raw = ndarray::array![[-50.0f64, -30.0, 0.0, 20.0, 50.0]];
        let clamped = clamp_logvar(&raw);
        assert_eq!(clamped, ndarray::array![[-30.0, -30.0, 0.0, 20.0, 20.0]]);
        let grad = Array2::from_elem((1, 5), 1.0);
        let masked = masked_by_clamp(&grad, &raw);
        assert_eq!(masked, ndarray::array![[0.0, 1.0, 1.0, 1.0, 0.0]]);
    }

    /// Shift every parameter by a nonzero random amount. Initialization zeroes
    /// the biases, which can park a pre-activation exactly on the ReLU corner
    /// (zero bias plus an all-zero receptive field); finite differences then
    /// straddle the kink while backward takes the `act > 0` subgradient. A
    /// generic point avoids the corner with probability one.
    fn jitter_params(params: &mut ModelParams<f64>, seed: u64) {
        let mut rng = seeds::stream(seed, "model-test-jitter", 0);
        use rand::Rng;
        for v in params.values_mut() {
            *v += rng.random::<f64>() * 0.2 - 0.1;
        }
    }

    /// Finite-difference check of the decoder backward pass alone, objective
    /// 0.5 * sum(logits^2).
    #[test]
    fn decoder_backward_matches_finite_differences() {
        let arch = tiny_arch();
        let mut params = ModelParams::<f64>::init(arch.clone(), 11).unwrap();
        jitter_params(&mut params, 13);
        let mut rng = seeds::stream(12, "model-test", 0);
        use rand::Rng;
        let z_l = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() - 0.5);
        let z_u = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);

        let loss = |p: &ModelParams<f64>| -> f64 {
            let (logits, _) = decode_with_cache(p, &z_l, &z_u).unwrap();
            logits.iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let (logits, cache) = decode_with_cache(&params, &z_l, &z_u).unwrap();
        let mut grads = vec![0.0; params.count()];
        decoder_backward(&params, &cache, &logits, &mut grads).unwrap();

        let h = 1e-6;
        let mut p = params.clone();
        for i in 0..p.count() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let up = loss(&p);
            p.values_mut()[i] = orig - h;
            let dn = loss(&p);
            p.values_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1.0);
            assert!(rel < 1e-6, "param {i}: fd {fd} vs analytic {}", grads[i]);
        }
    }

    /// Finite-difference check of the encoder backward pass alone, objective
    /// 0.5 * (sum(mu_l^2) + sum(logvar_u^2)) on clamped heads.
    #[test]
    fn encoder_backward_matches_finite_differences() {
        let arch = tiny_arch();
        let mut params = ModelParams::<f64>::init(arch.clone(), 21).unwrap();
        jitter_params(&mut params, 23);
        let mut rng = seeds::stream(22, "model-test", 0);
        use rand::Rng;
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random::<f64>());

        let loss = |p: &ModelParams<f64>| -> f64 {
            let post = encode(p, &x).unwrap();
            let a: f64 = post.mu_l.iter().map(|v| v * v).sum();
            let b: f64 = post.logvar_u.iter().map(|v| v * v).sum();
            (a + b) * 0.5
        };

        let (post, cache) = encode_with_cache(&params, &x).unwrap();
        let d = LatentGrads {
            dmu_l: post.mu_l.clone(),
            dlogvar_l: Array2::zeros(post.logvar_l.dim()),
            dmu_u: Array2::zeros(post.mu_u.dim()),
            dlogvar_u: post.logvar_u.clone(),
        };
        let mut grads = vec![0.0; params.count()];
        encoder_backward(&params, &cache, &d, &mut grads).unwrap();

        let h = 1e-6;
        let mut p = params.clone();
        for i in 0..p.count() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let up = loss(&p);
            p.values_mut()[i] = orig - h;
            let dn = loss(&p);
            p.values_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1.0);
            assert!(rel < 1e-6, "param {i}: fd {fd} vs analytic {}", grads[i]);
        }
    }

    #[test]
    fn cast_preserves_values_within_width() {
        let p32 = ModelParams::<f32>::init(tiny_arch(), 6).unwrap();
        let p64 = p32.cast::<f64>();
        for (a, b) in p32.values().iter().zip(p64.values()) {
            assert_eq!(f64::from(*a), *b);
        }
    }
}
