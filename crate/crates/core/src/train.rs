//! Adam training loop over the full objective, with checkpointing, JSONL
//! metrics, and bit-reproducible resume.
//!
//! Determinism contract: model init, per-epoch shuffles, and per-epoch noise
//! streams are all rederived from `(seed, purpose, epoch)`, never carried
//! across epochs, so resuming from an epoch checkpoint replays exactly what an
//! uninterrupted run would have done.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown};
use crate::model::{
    self, ArchitectureConfig, DecoderCache, EncoderCache, LatentGrads, LatentPosterior,
    ModelParams,
};
use crate::nn::Real;
use crate::prior::{build_prior_spec, PriorSpec};
use crate::seeds;
use crate::wire;

const CKPT_MAGIC: &[u8; 4] = b"RVCK";
const CKPT_VERSION: u32 = 1;

/// Consecutive non-finite-gradient steps tolerated before aborting.
pub const MAX_BAD_GRAD_STREAK: u32 = 5;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchitectureConfig,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global L2 gradient clip; `None` (the default) disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Flat key-value text of the originating run config, stored verbatim in
    /// checkpoints for provenance. May be empty for ad-hoc runs.
    pub provenance: String,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::Config(format!(
                    "grad_clip must be positive when set, got {c}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub bad_streak: u32,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            bad_streak: 0,
        }
    }
}

/// One Adam update with bias correction. Non-finite gradients skip the update
/// (returning `Ok(false)`) and abort once [`MAX_BAD_GRAD_STREAK`] consecutive
/// steps are bad.
pub fn adam_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam sizes disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.bad_streak += 1;
        if state.bad_streak >= MAX_BAD_GRAD_STREAK {
            return Err(Error::NonFinite(format!(
                "{} consecutive non-finite gradients",
                state.bad_streak
            )));
        }
        eprintln!(
            "train: skipping step with non-finite gradient ({} consecutive)",
            state.bad_streak
        );
        return Ok(false);
    }
    state.bad_streak = 0;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = F::c(1.0 - beta1.powi(t));
    let bc2 = F::c(1.0 - beta2.powi(t));
    let (b1, b2) = (F::c(beta1), F::c(beta2));
    let (one_b1, one_b2) = (F::c(1.0 - beta1), F::c(1.0 - beta2));
    let (lr, eps) = (F::c(lr), F::c(eps));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + one_b1 * g;
        state.v[i] = b2 * state.v[i] + one_b2 * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Full-objective forward and backward
// ---------------------------------------------------------------------------

/// Everything one optimization step needs from the forward pass.
pub struct ForwardPass<F: Real> {
    pub breakdown: LossBreakdown,
    pub post: LatentPosterior<F>,
    pub logits: Array4<F>,
    enc_cache: EncoderCache<F>,
    dec_cache: DecoderCache<F>,
    centers: Array2<F>,
    eps_l: Array2<F>,
    eps_u: Array2<F>,
}

/// Forward pass with sampled latents; loss uses the saturation-free logit
/// form of the reconstruction term plus the two closed-form KLs.
pub fn forward_loss<F: Real>(
    params: &ModelParams<F>,
    pixels: &Array4<F>,
    labels: &[u8],
    spec: &PriorSpec,
    beta: f64,
    eps_l: &Array2<F>,
    eps_u: &Array2<F>,
) -> Result<ForwardPass<F>> {
    if labels.len() != pixels.dim().0 {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            pixels.dim().0
        )));
    }
    let (post, enc_cache) = model::encode_with_cache(params, pixels)?;
    let (z_l, z_u) = model::reparameterize(&post, eps_l, eps_u)?;
    let (logits, dec_cache) = model::decode_with_cache(params, &z_l, &z_u)?;

    let centers = loss::class_centers::<F>(spec, labels)?;
    let recon = loss::reconstruction_nll_from_logits(pixels, &logits)?;
    let kl_l = loss::kl_to_shifted_identity(&post.mu_l, &post.logvar_l, &centers)?;
    let kl_u = loss::kl_to_standard_normal(&post.mu_u, &post.logvar_u)?;
    let breakdown = LossBreakdown::compose(recon, kl_l, kl_u, beta);

    Ok(ForwardPass {
        breakdown,
        post,
        logits,
        enc_cache,
        dec_cache,
        centers,
        eps_l: eps_l.clone(),
        eps_u: eps_u.clone(),
    })
}

/// Forward + full backward. Returns the loss terms and the gradient of the
/// total w.r.t. every parameter, flat in layout order.
pub fn loss_and_grads<F: Real>(
    params: &ModelParams<F>,
    pixels: &Array4<F>,
    labels: &[u8],
    spec: &PriorSpec,
    beta: f64,
    eps_l: &Array2<F>,
    eps_u: &Array2<F>,
) -> Result<(LossBreakdown, Vec<F>)> {
    let fwd = forward_loss(params, pixels, labels, spec, beta, eps_l, eps_u)?;
    let mut grads = vec![F::zero(); params.count()];

    // Reconstruction path: d total / d logits, then through the decoder.
    let dlogits = loss::reconstruction_logit_grad(pixels, &fwd.logits);
    let (dz_l, dz_u) = model::decoder_backward(params, &fwd.dec_cache, &dlogits, &mut grads)?;

    // KL path, gradients w.r.t. the clamped log-variances.
    let (kl_dmu_l, kl_dlv_l) =
        loss::kl_shifted_grads(&fwd.post.mu_l, &fwd.post.logvar_l, &fwd.centers);
    let zero_centers = Array2::<F>::zeros(fwd.post.mu_u.dim());
    let (kl_dmu_u, kl_dlv_u) =
        loss::kl_shifted_grads(&fwd.post.mu_u, &fwd.post.logvar_u, &zero_centers);

    // Reparameterization: z = mu + exp(lv/2) eps, so dz/dmu = 1 and
    // dz/dlv = z_sigma_term = 0.5 exp(lv/2) eps.
    let half = F::c(0.5);
    let beta_f = F::c(beta);
    let dmu_l = &dz_l + &kl_dmu_l.mapv(|v| v * beta_f);
    let dmu_u = &dz_u + &kl_dmu_u.mapv(|v| v * beta_f);
    let sig_l = fwd.post.logvar_l.mapv(|v| (v * half).exp());
    let sig_u = fwd.post.logvar_u.mapv(|v| (v * half).exp());
    let dlv_l = &(&dz_l * &sig_l * &fwd.eps_l).mapv(|v| v * half)
        + &kl_dlv_l.mapv(|v| v * beta_f);
    let dlv_u = &(&dz_u * &sig_u * &fwd.eps_u).mapv(|v| v * half)
        + &kl_dlv_u.mapv(|v| v * beta_f);

    let head_grads = LatentGrads {
        dmu_l,
        dlogvar_l: dlv_l,
        dmu_u,
        dlogvar_u: dlv_u,
    };
    model::encoder_backward(params, &fwd.enc_cache, &head_grads, &mut grads)?;
    Ok((fwd.breakdown, grads))
}

/// Deterministic mean-mode loss (no sampling): latents are the posterior
/// means. Used for the per-epoch held-out evaluation.
pub fn eval_loss<F: Real>(
    params: &ModelParams<F>,
    pixels: &Array4<F>,
    labels: &[u8],
    spec: &PriorSpec,
    beta: f64,
) -> Result<(LossBreakdown, f64)> {
    let post = model::encode(params, pixels)?;
    let (logits, _) = model::decode_with_cache(params, &post.mu_l, &post.mu_u)?;
    let centers = loss::class_centers::<F>(spec, labels)?;
    let recon = loss::reconstruction_nll_from_logits(pixels, &logits)?;
    let kl_l = loss::kl_to_shifted_identity(&post.mu_l, &post.logvar_l, &centers)?;
    let kl_u = loss::kl_to_standard_normal(&post.mu_u, &post.logvar_u)?;

    // Mean Euclidean distance from mu_l to the item's class center: a direct
    // view of how tightly the labeled block tracks its prior.
    let n = pixels.dim().0;
    let mut dist = 0.0f64;
    for i in 0..n {
        let mut acc = 0.0f64;
        for j in 0..post.mu_l.ncols() {
            let d = post.mu_l[(i, j)].to64() - centers[(i, j)].to64();
            acc += d * d;
        }
        dist += acc.sqrt();
    }
    Ok((
        LossBreakdown::compose(recon, kl_l, kl_u, beta),
        dist / n as f64,
    ))
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_params: usize,
}

/// Central-finite-difference check of [`loss_and_grads`] over every
/// parameter. Relative error uses `max(|fd|, |analytic|, 1)` as denominator,
/// the unit-floor convention, so tiny gradients are compared absolutely.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<F: Real>(
    params: &ModelParams<F>,
    pixels: &Array4<F>,
    labels: &[u8],
    spec: &PriorSpec,
    beta: f64,
    eps_l: &Array2<F>,
    eps_u: &Array2<F>,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(params, pixels, labels, spec, beta, eps_l, eps_u)?;
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..probe.count() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + F::c(h);
        let up = forward_loss(&probe, pixels, labels, spec, beta, eps_l, eps_u)?
            .breakdown
            .total;
        probe.values_mut()[i] = orig - F::c(h);
        let dn = forward_loss(&probe, pixels, labels, spec, beta, eps_l, eps_u)?
            .breakdown
            .total;
        probe.values_mut()[i] = orig;
        let fd = (up - dn) / (2.0 * h);
        let an = grads[i].to64();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        n_params: probe.count(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureConfig,
    pub params: Vec<f32>,
    pub adam: AdamState<f32>,
    pub epochs_completed: u32,
    pub seed: u64,
    pub prior_digest: [u8; 32],
    pub config_text: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        self.arch.write_bytes(&mut out);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.adam.bad_streak.to_le_bytes());
        for v in self.adam.m.iter().chain(self.adam.v.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.epochs_completed.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.prior_digest);
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = wire::Reader::new(bytes, origin);
        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(r.format_err("bad magic, not a checkpoint", 0));
        }
        let version = r.read_u32()?;
        if version != CKPT_VERSION {
            return Err(r.format_err(&format!("unsupported version {version}"), 4));
        }
        let arch = ArchitectureConfig::read_bytes(&mut r)?;
        let n = r.read_u64()? as usize;
        let expected = model::Layout::of(&arch).total_len();
        if n != expected {
            return Err(r.format_err(
                &format!("parameter count {n} does not match architecture ({expected})"),
                r.offset as u64,
            ));
        }
        let params = r.read_f32s(n)?;
        let step = r.read_u64()?;
        let bad_streak = r.read_u32()?;
        let m = r.read_f32s(n)?;
        let v = r.read_f32s(n)?;
        let epochs_completed = r.read_u32()?;
        let seed = r.read_u64()?;
        let prior_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let cfg_len = r.read_u64()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|e| r.format_err(&format!("config text not utf-8: {e}"), r.offset as u64))?;
        r.expect_end("checkpoint")?;

        let ckpt = Checkpoint {
            arch,
            params,
            adam: AdamState {
                step,
                m,
                v,
                bad_streak,
            },
            epochs_completed,
            seed,
            prior_digest,
            config_text,
        };
        ckpt.assert_finite()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.assert_finite()?;
        wire::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn assert_finite(&self) -> Result<()> {
        for (name, vs) in [
            ("params", &self.params),
            ("adam.m", &self.adam.m),
            ("adam.v", &self.adam.v),
        ] {
            if let Some(i) = vs.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint {name}[{i}]")));
            }
        }
        Ok(())
    }

    /// Refuse to pair this checkpoint with a prior it was not trained under.
    pub fn verify_prior(&self, spec: &PriorSpec) -> Result<()> {
        let actual = spec.content_digest();
        if actual != self.prior_digest {
            return Err(Error::HashMismatch {
                expected: wire::hex(&self.prior_digest),
                actual: wire::hex(&actual),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelParams<f32>> {
        ModelParams::from_values(self.arch.clone(), self.params.clone())
    }
}

// ---------------------------------------------------------------------------
// Metrics records
// ---------------------------------------------------------------------------

/// One line per optimization step in `metrics.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub recon: f64,
    pub kl_l: f64,
    pub kl_u: f64,
    pub total: f64,
    pub wall_time: f64,
}

/// One line per epoch in `eval.jsonl`: mean-mode loss on the held-out split
/// plus the mean distance from `mu_l` to the correct class center.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl_l: f64,
    pub kl_u: f64,
    pub total: f64,
    pub mu_center_dist: f64,
    pub wall_time: f64,
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub prior_path: PathBuf,
    pub prior: PriorSpec,
    /// Mean training total for each epoch run by this call, in order. On a
    /// resumed run this covers only the newly trained epochs.
    pub epoch_mean_totals: Vec<f64>,
}

/// Train (or resume) on `train_ds`, evaluating on `test_ds` each epoch.
///
/// Artifacts under `out_dir`: `prior.rvps`, `checkpoint.rvck` (rewritten
/// atomically every epoch), `metrics.jsonl`, `eval.jsonl`.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_ds.validate()?;
    if train_ds.num_classes < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    let (c, h, w) = train_ds.image_shape();
    if (c, h, w) != (cfg.arch.in_channels, cfg.arch.in_height, cfg.arch.in_width) {
        return Err(Error::Shape(format!(
            "dataset images {c}x{h}x{w} do not match architecture {}x{}x{}",
            cfg.arch.in_channels, cfg.arch.in_height, cfg.arch.in_width
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spec = build_prior_spec(cfg.arch.dim_l, train_ds.num_classes, cfg.seed)?;
    spec.validate()?;
    let prior_path = out_dir.join("prior.rvps");
    spec.save(&prior_path)?;
    let prior_digest = spec.content_digest();

    let (mut params, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.arch != cfg.arch {
                return Err(Error::Consistency(
                    "checkpoint architecture does not match config".into(),
                ));
            }
            if ckpt.seed != cfg.seed {
                return Err(Error::Consistency(format!(
                    "checkpoint seed {} does not match config seed {}",
                    ckpt.seed, cfg.seed
                )));
            }
            ckpt.verify_prior(&spec)?;
            if ckpt.epochs_completed as usize >= cfg.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already has {} epochs, config asks for {}",
                    ckpt.epochs_completed, cfg.epochs
                )));
            }
            let params = ckpt.model()?;
            (params, ckpt.adam, ckpt.epochs_completed as usize)
        }
        None => {
            let params =
                ModelParams::<f32>::init(cfg.arch.clone(), seeds::derive(cfg.seed, "model-init", 0))?;
            let n = params.count();
            (params, AdamState::new(n), 0)
        }
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let eval_path = out_dir.join("eval.jsonl");
    let mut metrics = open_log(&metrics_path, start_epoch > 0)?;
    let mut eval_log = open_log(&eval_path, start_epoch > 0)?;

    let started = Instant::now();
    let ckpt_path = out_dir.join("checkpoint.rvck");
    let mut epoch_mean_totals = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = None;

    for epoch in start_epoch..cfg.epochs {
        let shuffle_seed = seeds::derive(cfg.seed, "epoch-shuffle", epoch as u64);
        let mut noise_rng = seeds::stream(cfg.seed, "epoch-noise", epoch as u64);
        let mut epoch_total = 0.0f64;
        let mut epoch_batches = 0usize;

        for batch in train_ds.batches(cfg.batch_size, shuffle_seed)? {
            let n = batch.len();
            let eps_l = model::sample_noise::<f32>(n, cfg.arch.dim_l, &mut noise_rng);
            let eps_u = model::sample_noise::<f32>(n, cfg.arch.dim_u, &mut noise_rng);
            let (breakdown, mut grads) = loss_and_grads(
                &params,
                &batch.pixels,
                &batch.labels,
                &spec,
                cfg.beta,
                &eps_l,
                &eps_u,
            )?;
            if !breakdown.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {}: {breakdown:?} \
                     (last good checkpoint retained)",
                    adam.step
                )));
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            adam_step(
                params.values_mut(),
                &grads,
                &mut adam,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_epsilon,
            )?;
            epoch_total += breakdown.total;
            epoch_batches += 1;
            write_json_line(
                &mut metrics,
                &MetricsRecord {
                    epoch,
                    step: adam.step,
                    recon: breakdown.recon,
                    kl_l: breakdown.kl_l,
                    kl_u: breakdown.kl_u,
                    total: breakdown.total,
                    wall_time: started.elapsed().as_secs_f64(),
                },
                &metrics_path,
            )?;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        epoch_mean_totals.push(epoch_total / epoch_batches.max(1) as f64);

        if let Some(test) = test_ds {
            let record = evaluate_split(&params, test, &spec, cfg, epoch, &started)?;
            write_json_line(&mut eval_log, &record, &eval_path)?;
            eval_log.flush().map_err(|e| Error::io(&eval_path, e))?;
        }

        params.assert_finite("end of epoch")?;
        let ckpt = Checkpoint {
            arch: cfg.arch.clone(),
            params: params.values().to_vec(),
            adam: adam.clone(),
            epochs_completed: (epoch + 1) as u32,
            seed: cfg.seed,
            prior_digest,
            config_text: cfg.provenance.clone(),
        };
        ckpt.save(&ckpt_path)?;
        checkpoint = Some(ckpt);
    }

    Ok(TrainOutcome {
        checkpoint: checkpoint.expect("at least one epoch runs"),
        checkpoint_path: ckpt_path,
        metrics_path,
        eval_path,
        prior_path,
        prior: spec,
        epoch_mean_totals,
    })
}

fn evaluate_split(
    params: &ModelParams<f32>,
    test: &Dataset,
    spec: &PriorSpec,
    cfg: &TrainConfig,
    epoch: usize,
    started: &Instant,
) -> Result<EvalRecord> {
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut dist_sum = 0.0f64;
    let mut total_items = 0usize;
    for batch in test.batches_in_order(cfg.batch_size)? {
        let n = batch.len();
        let (b, dist) = eval_loss(params, &batch.pixels, &batch.labels, spec, cfg.beta)?;
        // Loss terms are batch means; reweight by batch size for a split mean.
        sums.0 += b.recon * n as f64;
        sums.1 += b.kl_l * n as f64;
        sums.2 += b.kl_u * n as f64;
        sums.3 += b.total * n as f64;
        dist_sum += dist * n as f64;
        total_items += n;
    }
    let n = total_items.max(1) as f64;
    Ok(EvalRecord {
        epoch,
        recon: sums.0 / n,
        kl_l: sums.1 / n,
        kl_u: sums.2 / n,
        total: sums.3 / n,
        mu_center_dist: dist_sum / n,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn clip_global_norm<F: Real>(grads: &mut [F], limit: f64) {
    let norm = grads
        .iter()
        .map(|g| {
            let g = g.to64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let scale = F::c(limit / norm);
        for g in grads.iter_mut() {
            *g = *g * scale;
        }
    }
}

fn open_log(path: &Path, append: bool) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_json_line<T: Serialize>(
    w: &mut impl Write,
    record: &T,
    path: &Path,
) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Consistency(format!("metrics serialization: {e}")))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;
    use crate::prior::build_prior_spec;
    use ndarray::Array4;

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            in_channels: 1,
            in_height: 4,
            in_width: 4,
            conv_channels: vec![2],
            kernel: 3,
            stride: 2,
            dim_l: 3,
            dim_u: 3,
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        // Bias correction at t=1 gives m_hat = v_hat = g, so the update is
        // lr * g / (|g| + eps) = lr for g = 1.
        let mut p = vec![1.0f64];
        let g = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &g, &mut st, 0.05, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn adam_matches_independent_trace() {
        // Reference trace computed with its own scalar arithmetic: ten steps
        // on f(theta) = theta^2 from theta = 1, gradient 2 theta.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut theta_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * theta_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(theta_ref);
        }

        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        for r in &reference {
            let g = vec![2.0 * p[0]];
            adam_step(&mut p, &g, &mut st, lr, b1, b2, eps).unwrap();
            assert!((p[0] - r).abs() < 1e-12, "{} vs {r}", p[0]);
        }
    }

    #[test]
    fn adam_skips_then_aborts_on_bad_gradients() {
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        for k in 1..MAX_BAD_GRAD_STREAK {
            let ok = adam_step(&mut p, &[f64::NAN], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
            assert!(!ok);
            assert_eq!(st.bad_streak, k);
            assert_eq!(st.step, 0);
            assert_eq!(p[0], 1.0);
        }
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut st, 0.1, 0.9, 0.999, 1e-8),
            Err(Error::NonFinite(_))
        ));
        // A good step in between resets the streak.
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[f64::INFINITY], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        adam_step(&mut p, &[0.5], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(st.bad_streak, 0);
    }

    #[test]
    fn adam_rejects_length_mismatch() {
        let mut p = vec![1.0f64; 2];
        let mut st = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8),
            Err(Error::Shape(_))
        ));
    }

    fn gradcheck_fixture<F: crate::nn::Real>(
        seed: u64,
    ) -> (
        ModelParams<F>,
        Array4<F>,
        Vec<u8>,
        crate::prior::PriorSpec,
        Array2<F>,
        Array2<F>,
    ) {
        use rand::Rng;
        let params = ModelParams::<F>::init(tiny_arch(), seed).unwrap();
        let mut rng = crate::seeds::stream(seed, "gradcheck-data", 0);
        let x = Array4::from_shape_fn((2, 1, 4, 4), |_| F::c(rng.random::<f64>()));
        let labels = vec![0u8, 1];
        let spec = build_prior_spec(3, 2, seed).unwrap();
        let eps_l = model::sample_noise::<F>(2, 3, &mut rng);
        let eps_u = model::sample_noise::<F>(2, 3, &mut rng);
        (params, x, labels, spec, eps_l, eps_u)
    }

    #[test]
    fn full_gradient_check_f64() {
        let (params, x, labels, spec, eps_l, eps_u) = gradcheck_fixture::<f64>(31);
        let report =
            gradient_check(&params, &x, &labels, &spec, 0.001, &eps_l, &eps_u, 1e-6).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_index
        );
    }

    #[test]
    fn full_gradient_check_f32() {
        let (params, x, labels, spec, eps_l, eps_u) = gradcheck_fixture::<f32>(32);
        let report =
            gradient_check(&params, &x, &labels, &spec, 0.001, &eps_l, &eps_u, 1e-3).unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_index
        );
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let params = ModelParams::<f32>::init(tiny_arch(), 5).unwrap();
        let n = params.count();
        let mut adam = AdamState::new(n);
        adam.step = 17;
        adam.m[0] = 0.25;
        adam.v[n - 1] = 1.5;
        let ckpt = Checkpoint {
            arch: tiny_arch(),
            params: params.values().to_vec(),
            adam,
            epochs_completed: 3,
            seed: 99,
            prior_digest: [7u8; 32],
            config_text: "beta = 0.001\n".into(),
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ckpt, back);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rvck");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_rejects_corruption_and_nan() {
        let params = ModelParams::<f32>::init(tiny_arch(), 5).unwrap();
        let n = params.count();
        let mut ckpt = Checkpoint {
            arch: tiny_arch(),
            params: params.values().to_vec(),
            adam: AdamState::new(n),
            epochs_completed: 1,
            seed: 0,
            prior_digest: [0u8; 32],
            config_text: String::new(),
        };
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'Z';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let bytes = ckpt.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")),
            Err(Error::Format { .. })
        ));

        ckpt.params[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ckpt.save(&dir.path().join("bad.rvck")),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_prior_hash_gate() {
        let spec = build_prior_spec(3, 2, 1).unwrap();
        let other = build_prior_spec(3, 2, 2).unwrap();
        let params = ModelParams::<f32>::init(tiny_arch(), 5).unwrap();
        let ckpt = Checkpoint {
            arch: tiny_arch(),
            params: params.values().to_vec(),
            adam: AdamState::new(params.count()),
            epochs_completed: 1,
            seed: 1,
            prior_digest: spec.content_digest(),
            config_text: String::new(),
        };
        ckpt.verify_prior(&spec).unwrap();
        assert!(matches!(
            ckpt.verify_prior(&other),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let good = TrainConfig {
            arch: tiny_arch(),
            beta: 0.001,
            learning_rate: 0.001,
            batch_size: 4,
            epochs: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: None,
            seed: 0,
            provenance: String::new(),
        };
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.beta = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.epochs = 0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.adam_beta1 = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.grad_clip = Some(0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clip_scales_only_large_gradients() {
        let mut g = vec![3.0f64, 4.0];
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((g[0] / g[1] - 0.75).abs() < 1e-12);
    }
}
