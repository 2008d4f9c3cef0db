//! Implementations of the five subcommands. Each one prints a short summary
//! to stdout and leaves every artifact under its output directory.

use std::path::{Path, PathBuf};

use rotvae::config::{
    self, builtin_preset, load_dataset, parse_override, RunConfig, PRESET_NAMES,
};
use rotvae::data::Dataset;
use rotvae::prior::{build_prior_spec, translation_matrix};
use rotvae::probe::{probe_report, probe_report_with_mode, LatentMode, ProbeProtocol};
use rotvae::train::{self, Checkpoint};
use rotvae::translate::{
    translate as translate_batch, translation_grid, TranslationMode, TranslationRequest,
};
use rotvae::{linalg, Error, PriorSpec, Result};

use crate::export::export_image_grid;
use crate::{ConfigArgs, GridArgs, Mode, PriorsArgs, ProbeArgs, TrainArgs, TranslateArgs};

/// How many held-out images the `translate` subcommand processes.
const TRANSLATE_COUNT: usize = 8;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn parsed_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter().map(|s| parse_override(s)).collect()
}

/// Resolve `--config`: an existing file path wins, then a preset name.
fn load_run_config(name: &str, overrides: &[String]) -> Result<RunConfig> {
    let ov = parsed_overrides(overrides)?;
    let path = Path::new(name);
    if path.exists() {
        RunConfig::load(path, &ov)
    } else if let Some(text) = builtin_preset(name) {
        RunConfig::from_text_with_overrides(text, &ov)
    } else {
        Err(Error::Config(format!(
            "config `{name}` is neither a file nor a preset (presets: {})",
            PRESET_NAMES.join(", ")
        )))
    }
}

/// Config for a checkpoint-based command: explicit `--config` wins, otherwise
/// the copy embedded in the checkpoint is used.
fn config_for_checkpoint(ckpt: &Checkpoint, args: &ConfigArgs) -> Result<RunConfig> {
    match &args.config {
        Some(name) => load_run_config(name, &args.overrides),
        None => {
            if ckpt.config_text.is_empty() {
                return Err(Error::Config(
                    "checkpoint carries no config text; pass --config".into(),
                ));
            }
            let ov = parsed_overrides(&args.overrides)?;
            RunConfig::from_text_with_overrides(&ckpt.config_text, &ov)
        }
    }
}

/// Prior geometry for a checkpoint: `--prior-spec` wins, then `prior.rvps`
/// next to the checkpoint, then a deterministic rebuild from the training
/// seed. Whatever the source, the checkpoint's stored digest must match.
fn prior_for_checkpoint(
    ckpt: &Checkpoint,
    ckpt_path: &Path,
    explicit: Option<&Path>,
    num_classes: usize,
) -> Result<PriorSpec> {
    let spec = match explicit {
        Some(p) => PriorSpec::load(p)?,
        None => {
            let sibling = ckpt_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("prior.rvps");
            if sibling.exists() {
                PriorSpec::load(&sibling)?
            } else {
                build_prior_spec(ckpt.arch.dim_l, num_classes, ckpt.seed)?
            }
        }
    };
    ckpt.verify_prior(&spec)?;
    Ok(spec)
}

fn default_sibling_dir(ckpt_path: &Path) -> PathBuf {
    ckpt_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn mode_of(m: Mode) -> TranslationMode {
    match m {
        Mode::Mean => TranslationMode::Mean,
        Mode::Sample => TranslationMode::Sample,
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(args: TrainArgs) -> Result<()> {
    let name = args
        .config
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("train needs --config <file-or-preset>".into()))?;
    let cfg = load_run_config(name, &args.config.overrides)?;

    let out_dir = args.out.unwrap_or_else(|| {
        let stem = Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name);
        PathBuf::from("runs").join(stem)
    });

    // Resume transparently when the output directory already holds a
    // checkpoint for this run.
    let ckpt_path = out_dir.join("checkpoint.rvck");
    let resume = if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.epochs_completed as usize >= cfg.train.epochs {
            println!(
                "training already complete: {} has {} epochs, config asks for {}",
                ckpt_path.display(),
                ckpt.epochs_completed,
                cfg.train.epochs
            );
            return Ok(());
        }
        println!(
            "resuming from {} at epoch {}",
            ckpt_path.display(),
            ckpt.epochs_completed
        );
        Some(ckpt)
    } else {
        None
    };

    let (train_ds, test_ds) = load_dataset(&cfg.dataset)?;
    println!(
        "training on {} images ({} classes), evaluating on {}",
        train_ds.len(),
        train_ds.num_classes,
        test_ds.len()
    );
    let outcome = train::train(&cfg.train, &train_ds, Some(&test_ds), &out_dir, resume)?;

    if let Some(last) = outcome.epoch_mean_totals.last() {
        println!("final mean training loss: {last:.4}");
    }
    println!(
        "trained {} epochs (seed {})",
        outcome.checkpoint.epochs_completed, cfg.train.seed
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("prior: {}", outcome.prior_path.display());
    println!("metrics: {}", outcome.metrics_path.display());
    println!("eval: {}", outcome.eval_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

/// Pick the held-out images to translate: the first `TRANSLATE_COUNT` test
/// images, restricted to `--source-class` when one is given.
fn pick_inputs(test: &Dataset, source_class: Option<u8>) -> Result<Vec<usize>> {
    let indices: Vec<usize> = match source_class {
        Some(c) => test
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .take(TRANSLATE_COUNT)
            .collect(),
        None => (0..test.len().min(TRANSLATE_COUNT)).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Consistency(match source_class {
            Some(c) => format!("test split has no images of class {c}"),
            None => "test split is empty".into(),
        }));
    }
    Ok(indices)
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = config_for_checkpoint(&ckpt, &args.config)?;
    let spec = prior_for_checkpoint(
        &ckpt,
        &args.checkpoint,
        args.prior_spec.as_deref(),
        config::num_classes(&cfg.dataset),
    )?;
    let params = ckpt.model()?;
    let (_, test_ds) = load_dataset(&cfg.dataset)?;

    let indices = pick_inputs(&test_ds, args.source_class)?;
    let batch = test_ds.gather(&indices);
    let req = TranslationRequest {
        source_class: args.source_class,
        target_class: args.target_class,
        mode: mode_of(args.mode),
        sample_seed: args.seed,
    };
    let result = translate_batch(&params, &spec, &batch, &req)?;

    let out_dir = args
        .out
        .unwrap_or_else(|| default_sibling_dir(&args.checkpoint));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let n = batch.len();
    let originals = out_dir.join("originals.png");
    let translated = out_dir.join(format!("translated-to-{}.png", args.target_class));
    export_image_grid(batch.pixels.view(), 1, n, &originals)?;
    export_image_grid(result.images.view(), 1, n, &translated)?;

    let mode_name = match args.mode {
        Mode::Mean => "mean",
        Mode::Sample => "sample",
    };
    println!(
        "translated {n} test images to class {} ({mode_name} mode)",
        args.target_class
    );
    println!("originals: {}", originals.display());
    println!("translated: {}", translated.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

pub fn grid(args: GridArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = config_for_checkpoint(&ckpt, &args.config)?;
    let spec = prior_for_checkpoint(
        &ckpt,
        &args.checkpoint,
        args.prior_spec.as_deref(),
        config::num_classes(&cfg.dataset),
    )?;
    let params = ckpt.model()?;
    let (_, test_ds) = load_dataset(&cfg.dataset)?;

    let firsts = test_ds.first_index_per_class()?;
    let inputs = test_ds.gather(&firsts);
    let g = translation_grid(&params, &spec, &inputs)?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    export_image_grid(g.cells.view(), g.rows, g.cols, &args.out)?;

    let (_, _, h, w) = g.cells.dim();
    let (ph, pw) = crate::export::grid_pixel_dims(g.rows, g.cols, h, w);
    println!(
        "grid: {} rows x {} cols ({} x {} pixels): {}",
        g.rows,
        g.cols,
        ph,
        pw,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

pub fn probe(args: ProbeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = config_for_checkpoint(&ckpt, &args.config)?;
    let params = ckpt.model()?;
    let (train_ds, test_ds) = load_dataset(&cfg.dataset)?;

    let protocol = ProbeProtocol::default();
    let report = probe_report(&params, &train_ds, &test_ds, &protocol)?;
    let mean_report =
        probe_report_with_mode(&params, &train_ds, &test_ds, &protocol, LatentMode::Mean)?;

    println!("probe        test accuracy   (mean-mode)");
    println!("labeled      {:6.2}%        {:6.2}%", report.acc_l, mean_report.acc_l);
    println!("unlabeled    {:6.2}%        {:6.2}%", report.acc_u, mean_report.acc_u);
    println!("chance       {:6.2}%", report.chance);
    let json = serde_json::to_string(&report).expect("plain struct serializes");
    println!("{json}");

    let out_dir = args
        .out
        .unwrap_or_else(|| default_sibling_dir(&args.checkpoint));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let probes_path = out_dir.join("probes.json");
    let mut line = json;
    line.push('\n');
    use std::io::Write;
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&probes_path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::io(&probes_path, e))?;
    println!("appended: {}", probes_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// priors
// ---------------------------------------------------------------------------

pub fn priors(args: PriorsArgs) -> Result<()> {
    let spec = match &args.prior_spec {
        Some(p) => PriorSpec::load(p)?,
        None => {
            // clap enforces presence of --dim/--classes when --prior-spec is
            // absent; the unwraps cannot fire through the binary.
            let dim = args.dim.ok_or_else(|| Error::Config("--dim needed".into()))?;
            let classes = args
                .classes
                .ok_or_else(|| Error::Config("--classes needed".into()))?;
            build_prior_spec(dim, classes, args.seed)?
        }
    };

    let c = spec.num_classes();
    println!(
        "prior geometry: dim_l = {}, classes = {}, seed = {}",
        spec.dim_l(),
        c,
        spec.seed()
    );
    println!("base mean norm: {:.6}", linalg::l2_norm(spec.base_mean()));
    println!("class  orthogonality  determinant  mean-norm");
    for k in 0..c {
        let t = spec.rotation(k)?;
        println!(
            "{k:<5}  {:<13.3e}  {:<11.6}  {:.6}",
            linalg::orthogonality_residual(t),
            linalg::lu_det(t),
            linalg::l2_norm(spec.class_mean(k)?),
        );
    }

    println!("pairwise mean distances:");
    let d = spec.pairwise_mean_distances();
    let mut header = String::from("      ");
    for k in 0..c {
        header.push_str(&format!("{k:>9}"));
    }
    println!("{header}");
    for i in 0..c {
        let mut row = format!("{i:<6}");
        for j in 0..c {
            row.push_str(&format!("{:>9.4}", d[[i, j]]));
        }
        println!("{row}");
    }
    println!(
        "min pairwise distance: {:.4}",
        spec.min_pairwise_mean_distance()
    );

    // Round-trip sanity on one off-diagonal pair: rotating a mean from class
    // 0 to class 1 must land on the class-1 mean.
    if c >= 2 {
        let m = translation_matrix(&spec, 0, 1)?;
        let moved = linalg::matvec(&m, spec.class_mean(0)?);
        let err = linalg::l2_norm(&(&moved - spec.class_mean(1)?));
        println!("transport residual (0 to 1): {err:.3e}");
    }

    if let Some(out) = &args.out {
        spec.save(out)?;
        println!("saved: {}", out.display());
    }
    Ok(())
}
