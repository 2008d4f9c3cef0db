//! Labeled image sources: MNIST from IDX files and a procedural multi-domain
//! synthetic set.
//!
//! The synthetic set exists to make one measurement sharp: its class label is
//! the global rotation angle of the rendered shape, while shape identity,
//! position, scale, and brightness are style nuisances drawn independently of
//! the class. Every style appears at every angle, so a probe reading class
//! from the style latent can only ever reach chance.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds;
use crate::wire;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 4] = b"RVDS";
const CACHE_VERSION: u32 = 1;

/// In-memory dataset: all pixels in `[0, 1]`, labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

/// One training batch, row-aligned pixels and labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.dim().0 != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                self.images.dim().0,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.num_classes)
        {
            return Err(Error::ClassIndex {
                index: bad as usize,
                num_classes: self.num_classes,
            });
        }
        if let Some(bad) = self.images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// First `n` items, in stored order.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((n, c, h, w));
        images.assign(&self.images.slice(ndarray::s![..n, .., .., ..]));
        Dataset {
            images,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Deterministically shuffled batches; the last partial batch is kept.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = seeds::stream(shuffle_seed, "batch-shuffle", 0);
        order.shuffle(&mut rng);
        Ok(Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        })
    }

    /// Batches in stored order, no shuffling; the last partial batch is kept.
    pub fn batches_in_order(&self, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Batches {
            data: self,
            order: (0..self.len()).collect(),
            batch_size,
            pos: 0,
        })
    }

    /// Gather specific rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let (_, c, h, w) = self.images.dim();
        let mut pixels = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            pixels
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), idx));
            labels.push(self.labels[idx]);
        }
        let batch = ImageBatch { pixels, labels };
        debug_assert!(batch.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        debug_assert!(batch
            .labels
            .iter()
            .all(|&l| (l as usize) < self.num_classes));
        batch
    }

    /// Index of the first item of each class, or an error when a class is
    /// absent.
    pub fn first_index_per_class(&self) -> Result<Vec<usize>> {
        let mut firsts = vec![None; self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            let slot = &mut firsts[l as usize];
            if slot.is_none() {
                *slot = Some(i);
            }
        }
        firsts
            .into_iter()
            .enumerate()
            .map(|(c, slot)| {
                slot.ok_or_else(|| Error::Consistency(format!("class {c} has no samples")))
            })
            .collect()
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

// ---------------------------------------------------------------------------
// IDX (MNIST container) loading
// ---------------------------------------------------------------------------

/// Pad amount applied to MNIST's 28x28 so stride-2 stacks divide evenly.
pub const MNIST_PAD: usize = 2;
pub const MNIST_SIDE: usize = 32;

/// Read a whole file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Load an MNIST-style IDX image/label pair. Pixels are scaled by 1/255 and
/// zero-padded from 28x28 to 32x32; label values must be 0-9.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lbl_bytes = read_maybe_gz(labels_path)?;

    let mut r = wire::Reader::new(&img_bytes, images_path);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.format_err(
            &format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
            0,
        ));
    }
    let n = read_u32_be(&mut r)? as usize;
    let h = read_u32_be(&mut r)? as usize;
    let w = read_u32_be(&mut r)? as usize;
    if (h, w) != (28, 28) {
        return Err(r.format_err(&format!("expected 28x28 images, got {h}x{w}"), 8));
    }
    let pixel_bytes = r.take(n * h * w)?;
    r.expect_end("image data")?;

    let mut r = wire::Reader::new(&lbl_bytes, labels_path);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.format_err(
            &format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
            0,
        ));
    }
    let n_labels = read_u32_be(&mut r)? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let labels = r.take(n)?.to_vec();
    r.expect_end("label data")?;
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Consistency(format!("label {bad} outside 0-9")));
    }

    let side = h + 2 * MNIST_PAD;
    let mut images = Array4::<f32>::zeros((n, 1, side, side));
    {
        let out = images.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let src = &pixel_bytes[i * h * w..(i + 1) * h * w];
            let img_base = i * side * side;
            for row in 0..h {
                let dst = img_base + (row + MNIST_PAD) * side + MNIST_PAD;
                for col in 0..w {
                    out[dst + col] = f32::from(src[row * w + col]) / 255.0;
                }
            }
        }
    }

    let ds = Dataset {
        images,
        labels,
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_u32_be(r: &mut wire::Reader<'_>) -> Result<u32> {
    let s = r.take(4)?;
    Ok(u32::from_be_bytes(s.try_into().unwrap()))
}

/// Locate and load the standard MNIST file pair (raw or `.gz`) in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<PathBuf> {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Config(format!(
            "missing {stem}[.gz] under {}",
            dir.display()
        )))
    };
    let train = load_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic multi-domain set
// ---------------------------------------------------------------------------

/// Parameters of the procedural set. The class label is the domain index,
/// realized as a global rotation by `360 * d / num_domains` degrees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_styles: usize,
    pub image_size: usize,
    pub samples_per_cell: usize,
    pub seed: u64,
}

/// Number of distinct shape styles available.
pub const NUM_SHAPE_STYLES: usize = 5;
const MIN_IMAGE_SIZE: usize = 16;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config("num_domains must be at least 2".into()));
        }
        if self.num_styles == 0 || self.num_styles > NUM_SHAPE_STYLES {
            return Err(Error::Config(format!(
                "num_styles must be in 1-{NUM_SHAPE_STYLES}"
            )));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size {} too small to render (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            )));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::Config("samples_per_cell must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset: `num_domains * num_styles *
/// samples_per_cell` images, label = domain.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let (train, _) = generate_synthetic_split(spec, 0)?;
    Ok(train)
}

/// Train/test pair from one spec. Every `(domain, style)` cell contributes
/// `samples_per_cell` train and `test_per_cell` test samples drawn from the
/// same per-cell stream, so both splits cover every cell.
pub fn generate_synthetic_split(
    spec: &SyntheticSpec,
    test_per_cell: usize,
) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let size = spec.image_size;
    let n_train = spec.num_domains * spec.num_styles * spec.samples_per_cell;
    let n_test = spec.num_domains * spec.num_styles * test_per_cell;
    let mut train = Array4::<f32>::zeros((n_train, 1, size, size));
    let mut test = Array4::<f32>::zeros((n_test, 1, size, size));
    let mut train_labels = Vec::with_capacity(n_train);
    let mut test_labels = Vec::with_capacity(n_test);

    let mut train_row = 0usize;
    let mut test_row = 0usize;
    for domain in 0..spec.num_domains {
        let angle = std::f64::consts::TAU * domain as f64 / spec.num_domains as f64;
        for style in 0..spec.num_styles {
            let cell = (domain * spec.num_styles + style) as u64;
            let mut rng = seeds::stream(spec.seed, "synthetic-cell", cell);
            for _ in 0..spec.samples_per_cell {
                render_sample(
                    train.index_axis_mut(ndarray::Axis(0), train_row),
                    style,
                    angle,
                    size,
                    &mut rng,
                );
                train_labels.push(domain as u8);
                train_row += 1;
            }
            for _ in 0..test_per_cell {
                render_sample(
                    test.index_axis_mut(ndarray::Axis(0), test_row),
                    style,
                    angle,
                    size,
                    &mut rng,
                );
                test_labels.push(domain as u8);
                test_row += 1;
            }
        }
    }

    let train = Dataset {
        images: train,
        labels: train_labels,
        num_classes: spec.num_domains,
    };
    let test = Dataset {
        images: test,
        labels: test_labels,
        num_classes: spec.num_domains,
    };
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// One anti-aliased rendering with randomized position/scale/brightness.
fn render_sample(
    mut out: ndarray::ArrayViewMut3<'_, f32>,
    style: usize,
    angle: f64,
    size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    use rand::Rng;
    let scale = 0.7 + 0.3 * rng.random::<f64>();
    let cx = 0.2 * (rng.random::<f64>() - 0.5);
    let cy = 0.2 * (rng.random::<f64>() - 0.5);
    let brightness = 0.6 + 0.4 * rng.random::<f64>();

    let (sin_a, cos_a) = angle.sin_cos();
    // One output pixel in local shape units; drives the soft-edge width.
    let px_local = 2.0 / (size as f64 * scale);
    let sub = 3; // 3x3 supersampling
    let sub_step = 1.0 / sub as f64;

    for row in 0..size {
        for col in 0..size {
            let mut acc = 0.0f64;
            for sr in 0..sub {
                for sc in 0..sub {
                    // Pixel center in [-1, 1] world coordinates.
                    let wx = ((col as f64 + (sc as f64 + 0.5) * sub_step) / size as f64) * 2.0
                        - 1.0;
                    let wy = ((row as f64 + (sr as f64 + 0.5) * sub_step) / size as f64) * 2.0
                        - 1.0;
                    // World -> local: undo translation, scale, rotation.
                    let tx = (wx - cx) / scale;
                    let ty = (wy - cy) / scale;
                    let lx = cos_a * tx + sin_a * ty;
                    let ly = -sin_a * tx + cos_a * ty;
                    let d = style_sdf(style, lx, ly);
                    acc += (0.5 - d / px_local).clamp(0.0, 1.0);
                }
            }
            out[(0, row, col)] = (brightness * acc / (sub * sub) as f64) as f32;
        }
    }
}

/// Signed distance to the style's shape in its local frame. Every shape is a
/// small union of boxes and discs arranged without rotational symmetry, so
/// the domain angle is always recoverable from pixels.
fn style_sdf(style: usize, x: f64, y: f64) -> f64 {
    match style {
        // Stem with an offset head.
        0 => sdf_box(x, y + 0.18, 0.09, 0.34).min(sdf_disc(x, y - 0.32, 0.2)),
        // L: long vertical bar, foot to the right.
        1 => sdf_box(x + 0.18, y, 0.1, 0.38).min(sdf_box(x - 0.1, y - 0.28, 0.22, 0.1)),
        // T: wide top bar, central stem.
        2 => sdf_box(x, y + 0.28, 0.36, 0.1).min(sdf_box(x, y - 0.05, 0.1, 0.28)),
        // Hook: bar plus a disc hanging off one end.
        3 => sdf_box(x + 0.08, y, 0.09, 0.36)
            .min(sdf_box(x - 0.18, y + 0.28, 0.18, 0.09))
            .min(sdf_disc(x - 0.26, y - 0.3, 0.13)),
        // Flag: thin pole with a block at the top right.
        4 => sdf_box(x + 0.25, y, 0.06, 0.4).min(sdf_box(x - 0.02, y + 0.22, 0.22, 0.15)),
        _ => unreachable!("style validated against NUM_SHAPE_STYLES"),
    }
}

fn sdf_box(x: f64, y: f64, half_w: f64, half_h: f64) -> f64 {
    let qx = x.abs() - half_w;
    let qy = y.abs() - half_h;
    let ox = qx.max(0.0);
    let oy = qy.max(0.0);
    (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0)
}

fn sdf_disc(x: f64, y: f64, r: f64) -> f64 {
    (x * x + y * y).sqrt() - r
}

// ---------------------------------------------------------------------------
// Synthetic cache file
// ---------------------------------------------------------------------------

/// Cache a generated train/test pair to one file: header, spec, both splits,
/// then a SHA-256 of everything before it.
pub fn save_synthetic_cache(
    path: &Path,
    spec: &SyntheticSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for v in [
        spec.num_domains,
        spec.num_styles,
        spec.image_size,
        spec.samples_per_cell,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.seed.to_le_bytes());
    for ds in [train, test] {
        let (n, c, h, w) = ds.images.dim();
        for v in [n, c, h, w, ds.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in ds.images.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ds.labels);
    }
    let digest = wire::sha256_digest(&out);
    out.extend_from_slice(&digest);
    wire::write_atomic(path, &out)
}

/// Load a cache written by [`save_synthetic_cache`], verifying the content
/// hash and that the stored spec matches the requested one.
pub fn load_synthetic_cache(path: &Path, expect: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "file shorter than its trailing hash".into(),
            offset: 0,
        });
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = wire::sha256_digest(body);
    if digest != stored_digest {
        return Err(Error::HashMismatch {
            expected: wire::hex(stored_digest),
            actual: wire::hex(&digest),
        });
    }

    let mut r = wire::Reader::new(body, path);
    let magic = r.take(4)?;
    if magic != CACHE_MAGIC {
        return Err(r.format_err("bad magic, not a dataset cache", 0));
    }
    let version = r.read_u32()?;
    if version != CACHE_VERSION {
        return Err(r.format_err(&format!("unsupported version {version}"), 4));
    }
    let spec = SyntheticSpec {
        num_domains: r.read_u32()? as usize,
        num_styles: r.read_u32()? as usize,
        image_size: r.read_u32()? as usize,
        samples_per_cell: r.read_u32()? as usize,
        seed: r.read_u64()?,
    };
    if spec != *expect {
        return Err(Error::Consistency(format!(
            "cache spec {spec:?} does not match requested {expect:?}"
        )));
    }

    let read_split = |r: &mut wire::Reader<'_>| -> Result<Dataset> {
        let n = r.read_u32()? as usize;
        let c = r.read_u32()? as usize;
        let h = r.read_u32()? as usize;
        let w = r.read_u32()? as usize;
        let num_classes = r.read_u32()? as usize;
        let pixels = r.read_f32s(n * c * h * w)?;
        let labels = r.take(n)?.to_vec();
        let images = Array4::from_shape_vec((n, c, h, w), pixels)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let ds = Dataset {
            images,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    };
    let train = read_split(&mut r)?;
    let test = read_split(&mut r)?;
    r.expect_end("dataset cache")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_domains: 4,
            num_styles: 3,
            image_size: 16,
            samples_per_cell: 2,
            seed: 9,
        }
    }

    /// Build a valid IDX pair in memory: `n` images of 28x28 with pixel value
    /// `i`, label `i % 10`.
    fn fake_idx(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut imgs = Vec::new();
        imgs.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        imgs.extend_from_slice(&(n as u32).to_be_bytes());
        imgs.extend_from_slice(&28u32.to_be_bytes());
        imgs.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n {
            imgs.extend(std::iter::repeat_n((i % 256) as u8, 28 * 28));
        }
        let mut lbls = Vec::new();
        lbls.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbls.extend_from_slice(&(n as u32).to_be_bytes());
        lbls.extend((0..n).map(|i| (i % 10) as u8));
        (imgs, lbls)
    }

    fn write_pair(dir: &Path, imgs: &[u8], lbls: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        fs::write(&ip, imgs).unwrap();
        fs::write(&lp, lbls).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_load_pads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = fake_idx(3);
        let (ip, lp) = write_pair(dir.path(), &imgs, &lbls);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (1, 32, 32));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        // Border stays zero, interior carries the scaled value.
        assert_eq!(ds.images[(1, 0, 0, 0)], 0.0);
        assert_eq!(ds.images[(1, 0, 1, 16)], 0.0);
        assert!((ds.images[(1, 0, 2, 2)] - 1.0 / 255.0).abs() < 1e-7);
        assert!((ds.images[(2, 0, 15, 15)] - 2.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn idx_rejects_bad_magic_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut imgs, lbls) = fake_idx(2);
        imgs[3] = 9; // wrong type byte in the magic
        let (ip, lp) = write_pair(dir.path(), &imgs, &lbls);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));

        let (imgs, lbls) = fake_idx(2);
        let truncated = &imgs[..imgs.len() - 10];
        let (ip, lp) = write_pair(dir.path(), truncated, &lbls);
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let (imgs, _) = fake_idx(2);
        let (_, lbls3) = fake_idx(3);
        let (ip, lp) = write_pair(dir.path(), &imgs, &lbls3);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));

        let (ip, lp) = write_pair(dir.path(), &[], &[]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_gzip_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = fake_idx(2);
        let gz = |bytes: &[u8]| {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap()
        };
        let (ip, lp) = write_pair(dir.path(), &gz(&imgs), &gz(&lbls));
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let (ds, _) = generate_synthetic_split(&tiny_spec(), 0).unwrap();
        assert_eq!(ds.len(), 24);
        let batches: Vec<_> = ds.batches(10, 5).unwrap().collect();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].len(), 10);
        assert_eq!(batches[2].len(), 4); // partial batch kept

        // The shuffle is a permutation: label multiset matches the dataset.
        let mut seen: BTreeMap<u8, usize> = BTreeMap::new();
        for b in &batches {
            for &l in &b.labels {
                *seen.entry(l).or_default() += 1;
            }
        }
        let mut expect: BTreeMap<u8, usize> = BTreeMap::new();
        for &l in &ds.labels {
            *expect.entry(l).or_default() += 1;
        }
        assert_eq!(seen, expect);
    }

    #[test]
    fn batches_deterministic_and_seed_sensitive() {
        let (ds, _) = generate_synthetic_split(&tiny_spec(), 0).unwrap();
        let a: Vec<Vec<u8>> = ds.batches(7, 1).unwrap().map(|b| b.labels).collect();
        let b: Vec<Vec<u8>> = ds.batches(7, 1).unwrap().map(|b| b.labels).collect();
        assert_eq!(a, b);
        let c: Vec<Vec<u8>> = ds.batches(7, 2).unwrap().map(|b| b.labels).collect();
        assert_ne!(a, c);
        assert!(matches!(ds.batches(0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let (a, _) = generate_synthetic_split(&tiny_spec(), 0).unwrap();
        let (b, _) = generate_synthetic_split(&tiny_spec(), 0).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.images.iter().any(|&v| v > 0.1), "renderings not blank");
    }

    #[test]
    fn synthetic_labels_balanced_and_cells_distinct() {
        let spec = tiny_spec();
        let (ds, _) = generate_synthetic_split(&spec, 0).unwrap();
        let mut counts = vec![0usize; spec.num_domains];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        assert!(counts
            .iter()
            .all(|&c| c == spec.num_styles * spec.samples_per_cell));

        // Different domains and different styles give different pixels.
        let img = |i: usize| ds.images.index_axis(ndarray::Axis(0), i).to_owned();
        let per_domain = spec.num_styles * spec.samples_per_cell;
        assert_ne!(img(0), img(per_domain)); // same style, next domain
        assert_ne!(img(0), img(spec.samples_per_cell)); // same domain, next style
    }

    #[test]
    fn synthetic_split_covers_all_cells() {
        let spec = tiny_spec();
        let (train, test) = generate_synthetic_split(&spec, 1).unwrap();
        assert_eq!(test.len(), spec.num_domains * spec.num_styles);
        for split in [&train, &test] {
            let mut classes: Vec<u8> = split.labels.clone();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), spec.num_domains);
        }
        // Train and test pixels differ (later draws from the same stream).
        assert_ne!(
            train.images.index_axis(ndarray::Axis(0), 0),
            test.images.index_axis(ndarray::Axis(0), 0)
        );
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut s = tiny_spec();
        s.image_size = 8;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let mut s = tiny_spec();
        s.num_styles = NUM_SHAPE_STYLES + 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let mut s = tiny_spec();
        s.num_domains = 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }

    #[test]
    fn cache_round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let spec = tiny_spec();
        let (train, test) = generate_synthetic_split(&spec, 1).unwrap();
        save_synthetic_cache(&path, &spec, &train, &test).unwrap();
        let (t2, e2) = load_synthetic_cache(&path, &spec).unwrap();
        assert_eq!(train, t2);
        assert_eq!(test, e2);

        // Flip one payload byte: hash verification must fail.
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_synthetic_cache(&path, &spec),
            Err(Error::HashMismatch { .. })
        ));

        // Honest file but different spec requested.
        save_synthetic_cache(&path, &spec, &train, &test).unwrap();
        let mut other = spec.clone();
        other.seed += 1;
        assert!(matches!(
            load_synthetic_cache(&path, &other),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn take_and_first_index_per_class() {
        let (ds, _) = generate_synthetic_split(&tiny_spec(), 0).unwrap();
        let sub = ds.take(7);
        assert_eq!(sub.len(), 7);
        assert_eq!(sub.labels, ds.labels[..7].to_vec());
        let firsts = ds.first_index_per_class().unwrap();
        assert_eq!(firsts.len(), 4);
        for (c, &i) in firsts.iter().enumerate() {
            assert_eq!(ds.labels[i] as usize, c);
        }
        // A subset missing some class reports it.
        let sub = ds.take(6); // only domain 0 present
        assert!(matches!(
            sub.first_index_per_class(),
            Err(Error::Consistency(_))
        ));
    }
}
