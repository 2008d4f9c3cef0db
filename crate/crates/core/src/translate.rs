//! Domain translation: encode, rotate the labeled latent from the source
//! class frame to the target class frame, decode.
//!
//! The unlabeled latent is never touched — that is the mechanism that carries
//! style across the translation. When source and target coincide the rotation
//! is skipped entirely, so a `t == c` translation is bit-for-bit the plain
//! reconstruction.

use ndarray::{Array1, Array2, Array4};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::nn::Real;
use crate::prior::{rotate_latent, PriorSpec};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationMode {
    /// Use posterior means; fully deterministic.
    Mean,
    /// Draw one reparameterized sample per image.
    Sample,
}

#[derive(Debug, Clone)]
pub struct TranslationRequest {
    /// Explicit source class; when `None` the per-item batch labels are used.
    pub source_class: Option<u8>,
    pub target_class: u8,
    pub mode: TranslationMode,
    /// Only consulted in sample mode.
    pub sample_seed: u64,
}

/// Translated images plus the latents involved, so callers can assert the
/// invariants (unlabeled latent untouched, labeled norm preserved).
#[derive(Debug, Clone)]
pub struct TranslationResult<F: Real> {
    pub images: Array4<F>,
    pub z_l_source: Array2<F>,
    pub z_l_rotated: Array2<F>,
    pub z_u: Array2<F>,
}

/// Check that a prior geometry and a model agree on the labeled width.
fn check_spec<F: Real>(params: &ModelParams<F>, spec: &PriorSpec) -> Result<()> {
    if spec.dim_l() != params.arch().dim_l {
        return Err(Error::Consistency(format!(
            "prior dim_l {} does not match model dim_l {}",
            spec.dim_l(),
            params.arch().dim_l
        )));
    }
    Ok(())
}

/// Rotate each row of `z_l` from its source class frame into `target`'s.
/// Rows whose source equals the target are copied bit-exactly.
pub fn rotate_rows<F: Real>(
    spec: &PriorSpec,
    z_l: &Array2<F>,
    sources: &[u8],
    target: u8,
) -> Result<Array2<F>> {
    if sources.len() != z_l.nrows() {
        return Err(Error::Shape(format!(
            "{} source classes for {} latents",
            sources.len(),
            z_l.nrows()
        )));
    }
    let mut out = z_l.clone();
    for (i, &c) in sources.iter().enumerate() {
        if c == target {
            continue; // identity, bit-exact
        }
        let row = Array1::from_iter(z_l.row(i).iter().map(|v| v.to64()));
        let rotated = rotate_latent(spec, &row, c as usize, target as usize)?;
        for (j, v) in rotated.iter().enumerate() {
            out[(i, j)] = F::c(*v);
        }
    }
    Ok(out)
}

/// Plain reconstruction through the posterior means; the reference point for
/// the `t == c` identity.
pub fn reconstruct<F: Real>(params: &ModelParams<F>, pixels: &Array4<F>) -> Result<Array4<F>> {
    let post = model::encode(params, pixels)?;
    model::decode(params, &post.mu_l, &post.mu_u)
}

/// Translate a batch to `req.target_class`.
pub fn translate<F: Real>(
    params: &ModelParams<F>,
    spec: &PriorSpec,
    batch: &ImageBatch,
    req: &TranslationRequest,
) -> Result<TranslationResult<F>> {
    check_spec(params, spec)?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let t = req.target_class as usize;
    if t >= spec.num_classes() {
        return Err(Error::ClassIndex {
            index: t,
            num_classes: spec.num_classes(),
        });
    }
    let sources: Vec<u8> = match req.source_class {
        Some(c) => {
            if c as usize >= spec.num_classes() {
                return Err(Error::ClassIndex {
                    index: c as usize,
                    num_classes: spec.num_classes(),
                });
            }
            vec![c; n]
        }
        None => {
            for &l in &batch.labels {
                if l as usize >= spec.num_classes() {
                    return Err(Error::ClassIndex {
                        index: l as usize,
                        num_classes: spec.num_classes(),
                    });
                }
            }
            batch.labels.clone()
        }
    };

    let pixels = batch.pixels.mapv(|v| F::c(v as f64));
    let post = model::encode(params, &pixels)?;
    let (z_l, z_u) = match req.mode {
        TranslationMode::Mean => (post.mu_l.clone(), post.mu_u.clone()),
        TranslationMode::Sample => {
            let mut rng = seeds::stream(req.sample_seed, "translate-noise", 0);
            let arch = params.arch();
            let eps_l = model::sample_noise::<F>(n, arch.dim_l, &mut rng);
            let eps_u = model::sample_noise::<F>(n, arch.dim_u, &mut rng);
            model::reparameterize(&post, &eps_l, &eps_u)?
        }
    };

    let z_l_rotated = rotate_rows(spec, &z_l, &sources, req.target_class)?;
    let images = model::decode(params, &z_l_rotated, &z_u)?;
    Ok(TranslationResult {
        images,
        z_l_source: z_l,
        z_l_rotated,
        z_u,
    })
}

/// A translation grid in mean mode: row `r` holds the class-`r` input image
/// followed by its translation to every class, so cells form a
/// `C x (C + 1)` table whose first column is the original and whose diagonal
/// (`t == c`) cells are plain reconstructions.
#[derive(Debug, Clone)]
pub struct TranslationGrid {
    pub rows: usize,
    pub cols: usize,
    /// `[rows * cols, channels, h, w]`, cells in row-major order.
    pub cells: Array4<f32>,
}

pub fn translation_grid(
    params: &ModelParams<f32>,
    spec: &PriorSpec,
    inputs: &ImageBatch,
) -> Result<TranslationGrid> {
    check_spec(params, spec)?;
    let c = spec.num_classes();
    if inputs.len() != c {
        return Err(Error::Consistency(format!(
            "grid needs exactly one input per class ({c}), got {}",
            inputs.len()
        )));
    }
    // Reorder inputs so row r is the class-r image.
    let mut row_of_class = vec![None; c];
    for (i, &l) in inputs.labels.iter().enumerate() {
        if l as usize >= c {
            return Err(Error::ClassIndex {
                index: l as usize,
                num_classes: c,
            });
        }
        if row_of_class[l as usize].replace(i).is_some() {
            return Err(Error::Consistency(format!("class {l} appears twice")));
        }
    }
    let order: Vec<usize> = row_of_class
        .into_iter()
        .map(|slot| slot.expect("every class present when counts match"))
        .collect();

    let (_, ch, h, w) = inputs.pixels.dim();
    let cols = c + 1;
    let mut cells = Array4::<f32>::zeros((c * cols, ch, h, w));

    // Encode all inputs once (mean mode), then decode one column per target.
    let mut ordered = Array4::<f32>::zeros((c, ch, h, w));
    for (r, &i) in order.iter().enumerate() {
        ordered
            .index_axis_mut(ndarray::Axis(0), r)
            .assign(&inputs.pixels.index_axis(ndarray::Axis(0), i));
        cells
            .index_axis_mut(ndarray::Axis(0), r * cols)
            .assign(&inputs.pixels.index_axis(ndarray::Axis(0), i));
    }
    let post = model::encode(params, &ordered)?;
    let sources: Vec<u8> = (0..c as u8).collect();
    for target in 0..c {
        let z_l = rotate_rows(spec, &post.mu_l, &sources, target as u8)?;
        let decoded = model::decode(params, &z_l, &post.mu_u)?;
        for r in 0..c {
            cells
                .index_axis_mut(ndarray::Axis(0), r * cols + 1 + target)
                .assign(&decoded.index_axis(ndarray::Axis(0), r));
        }
    }

    Ok(TranslationGrid {
        rows: c,
        cols,
        cells,
    })
}
