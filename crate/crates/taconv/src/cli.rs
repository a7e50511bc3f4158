//! Command line interface: `basis export`, `train`, `calibrate`, `perturb`,
//! `attack`, `eval`, `report`.
//!
//! Every subcommand accepts `--config <json>`, `--seed`, `--out` and
//! `--threads`; each run writes the resolved configuration to `run.json` in
//! the output directory. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calibrate::{build_profile, standardization_report, CalibrationOptions, SeverityProfile};
use crate::error::{Error, Result};
use crate::harness::data::{load_idx, synth_dataset, Dataset};
use crate::harness::eval::{evaluate_matrix, export_report, matrix_csv, matrix_text, RobustnessMatrix};
use crate::harness::images::{export_bank_grid, read_pnm, write_pnm};
use crate::harness::train::{train, TrainConfig};
use crate::layers::{desk_network, Model, ModelMeta};
use crate::perturb::{
    apply_perturbation, mse_pair, AttackContext, PerturbationKind, PerturbationSpec,
};
use crate::tensor::Tensor;
use crate::transforms::{build_transform_bank, default_branch_specs, TransformKind};
use crate::util::canonical_json;

// ---------------------------------------------------------------------------
// Configuration file

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synth {
        n_per_class_train: usize,
        n_per_class_test: usize,
        classes: usize,
        size: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            n_per_class_train: 250,
            n_per_class_test: 200,
            classes: 4,
            size: 16,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BasisConfig {
    pub k: usize,
    pub sigma: f64,
    pub n_basis: usize,
    pub branches: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { k: 5, sigma: 1.5, n_basis: 25, branches: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CalibConfig {
    pub target_drop: f64,
    pub tol: f64,
    pub kinds: Vec<PerturbationKind>,
    /// Fraction of the test split reserved for calibration (the rest is the
    /// reporting slice), capped at 1000 images.
    pub calib_fraction: f64,
    pub options: CalibrationOptions,
}

impl Default for CalibConfig {
    fn default() -> Self {
        let mut kinds: Vec<PerturbationKind> = PerturbationKind::natural().to_vec();
        kinds.push(PerturbationKind::Adversarial);
        CalibConfig {
            target_drop: 10.0,
            tol: 1.0,
            kinds,
            calib_fraction: 0.5,
            options: CalibrationOptions::default(),
        }
    }
}

/// Master configuration; every field has a default so a config file may
/// specify only what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub basis: BasisConfig,
    pub calibration: CalibConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Command line surface

#[derive(Parser)]
#[command(name = "taconv", version, about = "Transform-augmented convolutions: training, perturbation and robustness evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON configuration file; CLI flags override it.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (calibrate: may also be a .json file path).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the fixed basis and its transformed branches.
    Basis {
        #[command(subcommand)]
        cmd: BasisCommand,
    },
    /// Train a model on the configured dataset.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Build the first layer as a TAConv with this transform kind.
        #[arg(long)]
        taconv: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path (default <out>/model.ckpt).
        #[arg(long)]
        save: Option<PathBuf>,
        /// Initialize from a trained standard checkpoint by weight transfer.
        #[arg(long)]
        transfer_from: Option<PathBuf>,
    },
    /// Standardize perturbation severities against a model.
    Calibrate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        target_drop: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Apply one perturbation to a set of images.
    Perturb {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        severity: f64,
        /// Image source: "synth", an IDX images file, or a directory of
        /// PGM/PPM files.
        #[arg(long)]
        data: Option<String>,
        /// MSE pixel scale for the manifest: "byte" (255) or "unit".
        #[arg(long, default_value = "byte")]
        pixel_scale: String,
    },
    /// Generate BIM adversarial examples against a model.
    Attack {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value = "byte")]
        pixel_scale: String,
    },
    /// Evaluate a robustness matrix over models and calibrated conditions.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Model checkpoints, one column each.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        data: Option<String>,
    },
    /// Re-emit CSV and text reports from a matrix or profile JSON.
    Report {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum BasisCommand {
    /// Write each branch's basis as a tiled grayscale PGM grid.
    Export {
        #[command(flatten)]
        common: CommonOpts,
        /// Transform kind for the extra branches (omit for identity only).
        #[arg(long)]
        transform: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n_basis: Option<usize>,
        #[arg(long)]
        branches: Option<usize>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; --help/--version are success.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Basis { cmd: BasisCommand::Export { common, transform, k, sigma, n_basis, branches } } => {
            let (cfg, seed, out) = resolve(&common)?;
            let bc = &cfg.basis;
            let (k, sigma) = (k.unwrap_or(bc.k), sigma.unwrap_or(bc.sigma));
            let n_basis = n_basis.unwrap_or(bc.n_basis);
            let n_branches = branches.unwrap_or(bc.branches);
            let spec = crate::basis::BasisSpec::with_count(k, sigma, n_basis)?;
            let base = crate::basis::eval_basis(&spec, &crate::basis::make_grid(k)?)?;
            let (branch_specs, name) = match transform {
                Some(t) => {
                    let kind: TransformKind = t.parse()?;
                    (default_branch_specs(kind, n_branches, seed), kind.name().to_string())
                }
                None => (Vec::new(), "identity".to_string()),
            };
            let bank = build_transform_bank(&base, &branch_specs)?;
            let path = out.join(format!("basis_{}.pgm", name));
            let sidecar = export_bank_grid(&bank, &path)?;
            write_run_json(&out, "basis export", &cfg, seed, common.threads)?;
            println!(
                "wrote {} ({} branches x {} functions, value range [{:.4}, {:.4}])",
                path.display(),
                bank.branches(),
                bank.n_basis,
                sidecar.min,
                sidecar.max
            );
            Ok(())
        }
        Command::Train { common, taconv, epochs, save, transfer_from } => {
            let taconv_kind = match &taconv {
                Some(t) => Some(t.parse::<TransformKind>()?),
                None => None,
            };
            let (cfg, seed, out) = resolve(&common)?;
            let (train_ds, test_ds) = load_dataset(&cfg.dataset, None)?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let name = match taconv_kind {
                Some(kind) => format!("ta_{}", kind.name()),
                None => "standard".to_string(),
            };
            let net = desk_network(train_ds.images.shape[1], train_ds.n_classes, taconv_kind, seed);
            let mut model = Model::new(net, ModelMeta { name: name.clone(), taconv: taconv_kind }, seed)?;
            if let Some(src) = transfer_from {
                let standard = Model::load(&src)?;
                crate::layers::weight_transfer(&standard, &mut model)?;
            }
            let report = train(&mut model, &train_ds, Some(&test_ds), &tc)?;
            let ckpt = save.unwrap_or_else(|| out.join("model.ckpt"));
            if let Some(parent) = ckpt.parent() {
                std::fs::create_dir_all(parent)?;
            }
            model.save(&ckpt)?;
            std::fs::write(out.join("curve.json"), canonical_json(&report)?)?;
            write_run_json(&out, "train", &cfg, seed, common.threads)?;
            println!(
                "trained {} ({} params) for {} epochs: clean test accuracy {:.2}% -> {}",
                name,
                model.param_count(),
                tc.epochs,
                report.val_acc.last().copied().unwrap_or(f64::NAN),
                ckpt.display()
            );
            Ok(())
        }
        Command::Calibrate { common, model, data, target_drop, tol } => {
            let (mut cfg, seed, out_arg) = resolve(&common)?;
            if let Some(t) = target_drop {
                cfg.calibration.target_drop = t;
            }
            if let Some(t) = tol {
                cfg.calibration.tol = t;
            }
            let model = Model::load(&model)?;
            let (_, test_ds) = load_dataset(&cfg.dataset, data.as_deref())?;
            let calib_ds = calibration_slice(&test_ds, &cfg.calibration);
            let profile = build_profile(
                &model,
                &calib_ds,
                &cfg.calibration.kinds,
                cfg.calibration.target_drop,
                cfg.calibration.tol,
                &cfg.calibration.options,
            )?;
            // --out may name the profile file directly or a directory.
            let (profile_path, out_dir) = if out_arg.extension().map_or(false, |e| e == "json") {
                (out_arg.clone(), out_arg.parent().unwrap_or(Path::new(".")).to_path_buf())
            } else {
                (out_arg.join("profile.json"), out_arg.clone())
            };
            std::fs::create_dir_all(&out_dir)?;
            profile.save(&profile_path)?;
            let (csv, text) = standardization_report(&profile);
            std::fs::write(out_dir.join("standardization.csv"), csv)?;
            write_run_json(&out_dir, "calibrate", &cfg, seed, common.threads)?;
            print!("{}", text);
            println!("profile -> {}", profile_path.display());
            Ok(())
        }
        Command::Perturb { common, kind, severity, data, pixel_scale } => {
            let kind: PerturbationKind = kind.parse()?;
            if kind == PerturbationKind::Adversarial {
                return Err(Error::Usage("use the `attack` subcommand for adversarial perturbations".into()));
            }
            let (cfg, seed, out) = resolve(&common)?;
            let images = load_images(&cfg, data.as_deref())?;
            let spec = PerturbationSpec::new(kind, severity, seed);
            let mut perturbed = Vec::with_capacity(images.len());
            for (i, (img, _)) in images.iter().enumerate() {
                let s = spec.with_seed(crate::rng::derive_seed_n(seed, kind.name(), i as u64));
                perturbed.push(apply_perturbation(img, &s, None)?);
            }
            write_image_outputs(&out, &images, &perturbed, kind.name(), severity, seed, &pixel_scale)?;
            write_run_json(&out, "perturb", &cfg, seed, common.threads)?;
            Ok(())
        }
        Command::Attack { common, model, epsilon, steps, data, pixel_scale } => {
            let (cfg, seed, out) = resolve(&common)?;
            let model = Model::load(&model)?;
            let images = load_images(&cfg, data.as_deref())?;
            let mut spec = PerturbationSpec::new(PerturbationKind::Adversarial, epsilon, seed);
            spec.attack_steps = steps;
            let mut adv = Vec::with_capacity(images.len());
            for (img, label) in &images {
                let ctx = AttackContext { model: &model, label: *label };
                adv.push(apply_perturbation(img, &spec, Some(&ctx))?);
            }
            write_image_outputs(&out, &images, &adv, "adversarial", epsilon, seed, &pixel_scale)?;
            write_run_json(&out, "attack", &cfg, seed, common.threads)?;
            Ok(())
        }
        Command::Eval { common, models, profile, data } => {
            let (cfg, seed, out) = resolve(&common)?;
            let profile = SeverityProfile::load(&profile)?;
            let (_, test_ds) = load_dataset(&cfg.dataset, data.as_deref())?;
            // Report on the slice disjoint from the calibration images.
            let calib_n = calibration_slice_len(&test_ds, &cfg.calibration);
            let (_, eval_ds) = test_ds.split_at(calib_n);
            let mut loaded = Vec::with_capacity(models.len());
            for p in &models {
                let m = Model::load(p)?;
                loaded.push((m.meta.name.clone(), m));
            }
            let matrix = evaluate_matrix(&loaded, &eval_ds, &profile, None, common.threads)?;
            export_report(&matrix, &out)?;
            write_run_json(&out, "eval", &cfg, seed, common.threads)?;
            print!("{}", matrix_text(&matrix));
            println!("reports -> {}", out.display());
            Ok(())
        }
        Command::Report { common, input } => {
            let (cfg, seed, out) = resolve(&common)?;
            std::fs::create_dir_all(&out)?;
            let text = std::fs::read_to_string(&input)
                .map_err(|e| Error::Data(format!("cannot read {}: {}", input.display(), e)))?;
            if let Ok(matrix) = serde_json::from_str::<RobustnessMatrix>(&text) {
                std::fs::write(out.join("matrix.csv"), matrix_csv(&matrix))?;
                std::fs::write(out.join("matrix.txt"), matrix_text(&matrix))?;
                print!("{}", matrix_text(&matrix));
            } else if let Ok(profile) = serde_json::from_str::<SeverityProfile>(&text) {
                let (csv, txt) = standardization_report(&profile);
                std::fs::write(out.join("standardization.csv"), csv)?;
                print!("{}", txt);
            } else {
                return Err(Error::Data(format!(
                    "{} is neither a robustness matrix nor a severity profile",
                    input.display()
                )));
            }
            write_run_json(&out, "report", &cfg, seed, common.threads)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn resolve(common: &CommonOpts) -> Result<(RunConfig, u64, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    // calibrate may pass a profile .json file path as --out; everyone else
    // gets a directory.
    if common.out.extension().map_or(true, |e| e != "json") {
        std::fs::create_dir_all(&common.out)?;
    }
    Ok((cfg.clone(), cfg.seed, common.out.clone()))
}

fn write_run_json(out: &Path, command: &str, cfg: &RunConfig, seed: u64, threads: usize) -> Result<()> {
    #[derive(Serialize)]
    struct RunRecord<'a> {
        command: &'a str,
        seed: u64,
        threads: usize,
        config: &'a RunConfig,
    }
    std::fs::create_dir_all(out)?;
    let record = RunRecord { command, seed, threads, config: cfg };
    std::fs::write(out.join("run.json"), canonical_json(&record)?)?;
    Ok(())
}

/// Build (train, test) datasets from the config, with an optional CLI
/// override: "synth" or a directory holding
/// {train,test}-{images,labels}.idx.
fn load_dataset(cfg: &DatasetConfig, data: Option<&str>) -> Result<(Dataset, Dataset)> {
    let effective = match data {
        None | Some("synth") => cfg.clone(),
        Some(dir) => {
            let d = PathBuf::from(dir);
            if !d.is_dir() {
                return Err(Error::Usage(format!(
                    "--data must be 'synth' or a directory of IDX files, got {}",
                    dir
                )));
            }
            DatasetConfig::Idx {
                train_images: d.join("train-images.idx"),
                train_labels: d.join("train-labels.idx"),
                test_images: d.join("test-images.idx"),
                test_labels: d.join("test-labels.idx"),
            }
        }
    };
    match effective {
        DatasetConfig::Synth { n_per_class_train, n_per_class_test, classes, size, seed } => {
            let train = synth_dataset(n_per_class_train, classes, size, seed)?;
            let test = synth_dataset(n_per_class_test, classes, size, seed + 1000)?;
            Ok((train, test))
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(&train_images, &train_labels)?;
            let test = load_idx(&test_images, &test_labels)?;
            Ok((train, test))
        }
    }
}

fn calibration_slice_len(test: &Dataset, cc: &CalibConfig) -> usize {
    ((test.len() as f64 * cc.calib_fraction) as usize).min(1000).max(1)
}

fn calibration_slice(test: &Dataset, cc: &CalibConfig) -> Dataset {
    test.split_at(calibration_slice_len(test, cc)).0
}

/// Images (with optional labels) for perturb/attack: "synth" (test split),
/// an IDX images file (paired labels file looked up by name), or a
/// directory of .pgm/.ppm files.
fn load_images(cfg: &RunConfig, data: Option<&str>) -> Result<Vec<(Tensor, Option<usize>)>> {
    match data {
        None | Some("synth") => {
            let (_, test) = load_dataset(&cfg.dataset, None)?;
            Ok((0..test.len().min(64))
                .map(|i| (test.image(i), Some(test.labels[i])))
                .collect())
        }
        Some(path) => {
            let p = PathBuf::from(path);
            if p.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(&p)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| {
                        matches!(
                            f.extension().and_then(|e| e.to_str()),
                            Some("pgm") | Some("ppm")
                        )
                    })
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::Data(format!("no .pgm/.ppm files in {}", p.display())));
                }
                files
                    .iter()
                    .map(|f| Ok((read_pnm(f)?, None)))
                    .collect()
            } else {
                // IDX images file; labels file alongside if present.
                let labels_path = PathBuf::from(path.replace("images", "labels"));
                if labels_path != p && labels_path.exists() {
                    let ds = load_idx(&p, &labels_path)?;
                    Ok((0..ds.len()).map(|i| (ds.image(i), Some(ds.labels[i]))).collect())
                } else {
                    let (dims, bytes) = read_idx_images_only(&p)?;
                    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                    Ok((0..n)
                        .map(|i| {
                            let chw = c * h * w;
                            let data = bytes[i * chw..(i + 1) * chw]
                                .iter()
                                .map(|&b| f64::from(b) / 255.0)
                                .collect();
                            (
                                Tensor { shape: vec![c, h, w], data, requires_grad: false, grad: None },
                                None,
                            )
                        })
                        .collect())
                }
            }
        }
    }
}

fn read_idx_images_only(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    // Single-file IDX read for image sets that ship without labels.
    let mut bytes = Vec::new();
    use std::io::Read;
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Data(format!(
            "{}: bad magic for an IDX ubyte file",
            path.display()
        )));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    let mut dims = Vec::with_capacity(ndim.max(4));
    for d in 0..ndim {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    if ndim == 3 {
        dims = vec![dims[0], 1, dims[1], dims[2]];
    } else if ndim != 4 {
        return Err(Error::Data(format!("{}: image IDX must be rank 3 or 4", path.display())));
    }
    let numel: usize = dims.iter().product();
    if bytes.len() != header + numel {
        return Err(Error::Data(format!("{}: truncated IDX payload", path.display())));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn write_image_outputs(
    out: &Path,
    inputs: &[(Tensor, Option<usize>)],
    outputs: &[Tensor],
    kind: &str,
    severity: f64,
    seed: u64,
    pixel_scale: &str,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let scale = match pixel_scale {
        "byte" => 255.0,
        "unit" => 1.0,
        other => {
            return Err(Error::Usage(format!(
                "--pixel-scale must be 'byte' or 'unit', got '{}'",
                other
            )))
        }
    };
    let mut files = Vec::with_capacity(outputs.len());
    for (i, img) in outputs.iter().enumerate() {
        let ext = if img.shape[0] == 3 { "ppm" } else { "pgm" };
        let name = format!("{}_{:05}.{}", kind, i, ext);
        write_pnm(img, &out.join(&name))?;
        files.push(name);
    }
    let clean: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let mse = mse_pair(&clean, outputs, scale)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        kind: &'a str,
        severity: f64,
        seed: u64,
        mse: f64,
        pixel_scale: f64,
        files: Vec<String>,
    }
    let manifest = Manifest { kind, severity, seed, mse, pixel_scale: scale, files };
    std::fs::write(out.join("manifest.json"), canonical_json(&manifest)?)?;
    println!("wrote {} images + manifest.json (mse {:.4}) -> {}", outputs.len(), mse, out.display());
    Ok(())
}

/// Convenience used by tests and the determinism gate: run the whole
/// train -> calibrate -> eval -> report pipeline in-process.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, threads: usize) -> Result<()> {
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, None)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let mut models = Vec::new();
    for kind in [None, Some(TransformKind::Elastic), Some(TransformKind::RotationScaling)] {
        let name = match kind {
            Some(k) => format!("ta_{}", k.name()),
            None => "standard".to_string(),
        };
        let net = desk_network(train_ds.images.shape[1], train_ds.n_classes, kind, cfg.seed);
        let mut model = Model::new(net, ModelMeta { name: name.clone(), taconv: kind }, cfg.seed)?;
        train(&mut model, &train_ds, None, &tc)?;
        models.push((name, model));
    }
    let calib_n = calibration_slice_len(&test_ds, &cfg.calibration);
    let (calib_ds, eval_ds) = test_ds.split_at(calib_n);
    let profile = build_profile(
        &models[0].1,
        &calib_ds,
        &cfg.calibration.kinds,
        cfg.calibration.target_drop,
        cfg.calibration.tol,
        &cfg.calibration.options,
    )?;
    std::fs::create_dir_all(out)?;
    profile.save(&out.join("profile.json"))?;
    let (csv, _) = standardization_report(&profile);
    std::fs::write(out.join("standardization.csv"), csv)?;
    let matrix = evaluate_matrix(&models, &eval_ds, &profile, None, threads)?;
    export_report(&matrix, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = RunConfig::default();
        let json = canonical_json(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.calibration.target_drop, 10.0);
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["taconv", "no-such-command"]), 1);
        assert_eq!(run(["taconv", "perturb", "--kind", "nope", "--severity", "1"]), 1);
    }

    #[test]
    fn basis_export_writes_grid_and_run_json() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "taconv",
            "basis",
            "export",
            "--transform",
            "rotation-scaling",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("basis_rotation_scaling.pgm").exists());
        assert!(out.join("basis_rotation_scaling.json").exists());
        assert!(out.join("run.json").exists());
    }

    #[test]
    fn perturb_on_synth_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p");
        let code = run([
            "taconv",
            "perturb",
            "--kind",
            "gaussian_noise",
            "--severity",
            "0.1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["kind"], "gaussian_noise");
        assert!(manifest["mse"].as_f64().unwrap() > 0.0);
    }
}
