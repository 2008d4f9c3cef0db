//! Class-conditional prior geometry.
//!
//! A shared base mean `mu_0` with entries drawn from `U(0,1)` is rotated by a
//! fixed random proper rotation `T_c` per class, giving class means
//! `mu_c = T_c mu_0`. The labeled latent prior is `N(mu_c, I)`; the unlabeled
//! prior is `N(0, I)`. Because the `T_c` are orthogonal with determinant +1,
//! moving between any two class regions is the rotation `T_t T_c^T`, which is
//! what makes translation a pure latent-space operation.
//!
//! Everything is f64 and reconstructs bit-identically from
//! `(dim_l, num_classes, seed)`; each class rotation has its own derived RNG
//! stream so extending the class set never perturbs earlier classes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, QrFactors};
use crate::seeds;
use crate::wire;

/// Relative threshold on `|R[j][j]|` below which a random draw counts as
/// rank-deficient and is redrawn.
const DEGENERACY_TOL: f64 = 1e-12;
const MAX_ROTATION_RETRIES: u32 = 16;

const FILE_MAGIC: &[u8; 4] = b"RVPS";
const FILE_VERSION: u32 = 1;

/// The geometry of the labeled latent space: base mean, per-class rotations,
/// and the derived class means.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    dim_l: usize,
    num_classes: usize,
    seed: u64,
    base_mean: Array1<f64>,
    rotations: Vec<Array2<f64>>,
    class_means: Vec<Array1<f64>>,
}

impl PriorSpec {
    pub fn dim_l(&self) -> usize {
        self.dim_l
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_mean(&self) -> &Array1<f64> {
        &self.base_mean
    }

    pub fn rotation(&self, class: usize) -> Result<&Array2<f64>> {
        self.check_class(class)?;
        Ok(&self.rotations[class])
    }

    pub fn class_mean(&self, class: usize) -> Result<&Array1<f64>> {
        self.check_class(class)?;
        Ok(&self.class_means[class])
    }

    pub fn class_means(&self) -> &[Array1<f64>] {
        &self.class_means
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::ClassIndex {
                index: class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Check every structural invariant at the stated tolerances.
    pub fn validate(&self) -> Result<()> {
        let base_norm = linalg::l2_norm(&self.base_mean);
        for (c, t) in self.rotations.iter().enumerate() {
            let residual = linalg::orthogonality_residual(t);
            if residual > 1e-5 {
                return Err(Error::Numerical(format!(
                    "rotation {c}: orthogonality residual {residual:.3e} exceeds 1e-5"
                )));
            }
            let det = linalg::lu_det(t);
            if (det - 1.0).abs() > 1e-5 {
                return Err(Error::Numerical(format!(
                    "rotation {c}: determinant {det} is not +1"
                )));
            }
            let derived = linalg::matvec(t, &self.base_mean);
            for (a, b) in derived.iter().zip(self.class_means[c].iter()) {
                if (a - b).abs() > 1e-10 {
                    return Err(Error::Consistency(format!(
                        "class mean {c} does not equal T_c * base_mean"
                    )));
                }
            }
            let norm = linalg::l2_norm(&self.class_means[c]);
            if (norm - base_norm).abs() > 1e-8 {
                return Err(Error::Numerical(format!(
                    "class mean {c} norm {norm} drifted from base norm {base_norm}"
                )));
            }
        }
        Ok(())
    }

    /// Euclidean distances between all pairs of class means. Measured and
    /// reported, never enforced.
    pub fn pairwise_mean_distances(&self) -> Array2<f64> {
        let c = self.num_classes;
        let mut d = Array2::<f64>::zeros((c, c));
        for i in 0..c {
            for j in i + 1..c {
                let diff = &self.class_means[i] - &self.class_means[j];
                let dist = linalg::l2_norm(&diff);
                d[(i, j)] = dist;
                d[(j, i)] = dist;
            }
        }
        d
    }

    pub fn min_pairwise_mean_distance(&self) -> f64 {
        let d = self.pairwise_mean_distances();
        let mut best = f64::INFINITY;
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                best = best.min(d[(i, j)]);
            }
        }
        best
    }
}

/// Base mean with i.i.d. `U(0,1)` entries.
pub fn sample_base_mean(dim_l: usize, rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
    if dim_l == 0 {
        return Err(Error::InvalidDimension(
            "base mean dimension must be at least 1".into(),
        ));
    }
    Ok(Array1::from_iter((0..dim_l).map(|_| rng.random::<f64>())))
}

/// Q of a QR factorization of a matrix with i.i.d. `U(0,1)` entries,
/// sign-normalized to a unique proper rotation.
///
/// Column `j` of Q is negated whenever `R[j][j] < 0`, which pins the otherwise
/// arbitrary QR sign freedom; if the determinant is then -1 the last column is
/// negated once more so the result is a rotation, invertible by its transpose.
pub fn sample_rotation(dim_l: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    sample_rotation_counted(dim_l, rng).map(|(q, _)| q)
}

/// As [`sample_rotation`], also reporting how many degenerate draws were
/// discarded before success.
pub fn sample_rotation_counted(
    dim_l: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, u32)> {
    if dim_l == 0 {
        return Err(Error::InvalidDimension(
            "rotation dimension must be at least 1".into(),
        ));
    }
    let mut retries = 0u32;
    loop {
        let a = Array2::from_shape_fn((dim_l, dim_l), |_| rng.random::<f64>());
        match rotation_from_square(&a)? {
            Some(q) => return Ok((q, retries)),
            None => {
                retries += 1;
                if retries > MAX_ROTATION_RETRIES {
                    return Err(Error::Numerical(format!(
                        "rotation sampling failed {MAX_ROTATION_RETRIES} times at dim {dim_l}"
                    )));
                }
            }
        }
    }
}

/// Sign-normalized proper rotation from one square matrix, or `None` when the
/// draw is numerically rank-deficient.
fn rotation_from_square(a: &Array2<f64>) -> Result<Option<Array2<f64>>> {
    let n = a.nrows();
    let QrFactors {
        mut q,
        r,
        reflections,
    } = linalg::qr(a)?;

    let scale = r
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let mut sign_flips = 0usize;
    for j in 0..n {
        let diag = r[(j, j)];
        if diag.abs() < DEGENERACY_TOL * scale {
            return Ok(None);
        }
        if diag < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
            sign_flips += 1;
        }
    }

    // det(Q) tracked exactly: each Householder reflection contributes -1, each
    // column negation contributes -1.
    let det_negative = (reflections + sign_flips) % 2 == 1;
    if det_negative {
        let last = n - 1;
        for i in 0..n {
            q[(i, last)] = -q[(i, last)];
        }
    }
    Ok(Some(q))
}

/// Build the full prior geometry for `(dim_l, num_classes, seed)`.
pub fn build_prior_spec(dim_l: usize, num_classes: usize, seed: u64) -> Result<PriorSpec> {
    if dim_l == 0 {
        return Err(Error::InvalidDimension(
            "dim_l must be at least 1".into(),
        ));
    }
    if num_classes < 2 {
        return Err(Error::InvalidDimension(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }

    let mut base_rng = seeds::stream(seed, "prior/base-mean", 0);
    let base_mean = sample_base_mean(dim_l, &mut base_rng)?;

    let mut rotations = Vec::with_capacity(num_classes);
    let mut class_means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut rng = seeds::stream(seed, "prior/rotation", c as u64);
        let (t, retries) = sample_rotation_counted(dim_l, &mut rng)?;
        if retries > 0 {
            eprintln!("prior: rotation {c} needed {retries} redraws");
        }
        class_means.push(linalg::matvec(&t, &base_mean));
        rotations.push(t);
    }

    Ok(PriorSpec {
        dim_l,
        num_classes,
        seed,
        base_mean,
        rotations,
        class_means,
    })
}

/// The rotation `T_t T_c^T` carrying class-`c` latents onto class `t`.
pub fn translation_matrix(spec: &PriorSpec, c: usize, t: usize) -> Result<Array2<f64>> {
    spec.check_class(c)?;
    spec.check_class(t)?;
    Ok(spec.rotations[t].dot(&spec.rotations[c].t()))
}

/// Rotate one labeled latent from class `c` to class `t`: first back to the
/// base frame through `T_c^T`, then into the target frame through `T_t`.
pub fn rotate_latent(
    spec: &PriorSpec,
    z_l: &Array1<f64>,
    c: usize,
    t: usize,
) -> Result<Array1<f64>> {
    spec.check_class(c)?;
    spec.check_class(t)?;
    if z_l.len() != spec.dim_l {
        return Err(Error::Shape(format!(
            "latent length {} does not match dim_l {}",
            z_l.len(),
            spec.dim_l
        )));
    }
    let base_frame = spec.rotations[c].t().dot(z_l);
    Ok(spec.rotations[t].dot(&base_frame))
}

// ---------------------------------------------------------------------------
// Serialization: single binary artifact, bit-exact round trip.
// ---------------------------------------------------------------------------

impl PriorSpec {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim_l;
        let c = self.num_classes;
        let mut out =
            Vec::with_capacity(4 + 4 + 4 + 4 + 8 + 8 * (d + c * d * d + c * d));
        out.extend_from_slice(FILE_MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for x in self.base_mean.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for t in &self.rotations {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for m in &self.class_means {
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cursor = wire::Reader::new(bytes, origin);
        let magic = cursor.take(4)?;
        if magic != FILE_MAGIC {
            return Err(cursor.format_err("bad magic, not a prior spec file", 0));
        }
        let version = cursor.read_u32()?;
        if version != FILE_VERSION {
            return Err(cursor.format_err(&format!("unsupported version {version}"), 4));
        }
        let dim_l = cursor.read_u32()? as usize;
        let num_classes = cursor.read_u32()? as usize;
        let seed = cursor.read_u64()?;
        if dim_l == 0 || num_classes < 2 {
            return Err(cursor.format_err("invalid dimensions in header", 8));
        }

        let base_mean = Array1::from(cursor.read_f64s(dim_l)?);
        let mut rotations = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let values = cursor.read_f64s(dim_l * dim_l)?;
            let t = Array2::from_shape_vec((dim_l, dim_l), values)
                .expect("shape matches read length");
            rotations.push(t);
        }
        let mut class_means = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            class_means.push(Array1::from(cursor.read_f64s(dim_l)?));
        }
        cursor.expect_end("prior spec")?;

        Ok(PriorSpec {
            dim_l,
            num_classes,
            seed,
            base_mean,
            rotations,
            class_means,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        wire::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Raw digest of the serialized artifact; checkpoints store this to
    /// refuse translation with a mismatched geometry.
    pub fn content_digest(&self) -> [u8; 32] {
        wire::sha256_digest(&self.to_bytes())
    }

    /// Hex form of [`PriorSpec::content_digest`] for logs and reports.
    pub fn content_hash(&self) -> String {
        wire::hex(&self.content_digest())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    wire::hex(&wire::sha256_digest(bytes))
}

pub fn file_sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
