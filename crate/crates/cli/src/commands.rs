//! Subcommand implementations. Each returns the lines it would print.

use std::fs;
use std::path::{Path, PathBuf};

use lpnas::data::{generate_synthetic, Dataset};
use lpnas::device::measure;
use lpnas::genotype::{validate, Genotype, GenotypeError};
use lpnas::network::Network;
use lpnas::search::{
    history_csv, parse_history, run_search_from, state_from_history, Branch, SearchError, SearchSetup, SearchState,
};
use lpnas::trainer::{
    config_hash, evaluate, finetune_fp16_aware, load_checkpoint, save_checkpoint, train_fp32, EvalMode, TrainError,
};

use crate::config::RunConfig;
use crate::report::HISTORY_FILE;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOCK_FILE: &str = ".lock";
pub const BEST_CHECKPOINT: &str = "best.lpck";
pub const BEST_GENOTYPE: &str = "best_genotype.txt";
const STATE_DIR: &str = "state";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Input(format!(
                "{} is locked by another run (delete {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn manifest_text(command: &str, cfg: &RunConfig, data: Option<&Path>) -> String {
    let source = data.map_or("synthetic (generated from the data keys)".to_string(), |d| d.display().to_string());
    format!("# lpnas {command} manifest\n# data: {source}\n{}", cfg.to_text())
}

/// Train/eval datasets from `<dir>/train` and `<dir>/eval`, or generated
/// from the config when no directory is given.
pub fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    match dir {
        Some(d) => {
            let load = |sub: &str| Dataset::load_dir(&d.join(sub)).map_err(|e| CliError::Input(e.to_string()));
            Ok((load("train")?, load("eval")?))
        }
        None => generate_synthetic(&cfg.data).map_err(|e| CliError::Usage(e.to_string())),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let (train, eval) = generate_synthetic(&cfg.data).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out).map_err(io(out))?;
    for (name, d) in [("train", &train), ("eval", &eval)] {
        d.save_dir(&out.join(name)).map_err(|e| CliError::Input(e.to_string()))?;
    }
    write_atomic(&out.join(MANIFEST_FILE), manifest_text("gen-data", cfg, None).as_bytes())?;
    Ok(vec![format!(
        "wrote {} train and {} eval samples ({}x{}) to {}",
        train.len(),
        eval.len(),
        cfg.data.image_size,
        cfg.data.image_size,
        out.display()
    )])
}

fn slot_file(dir: &Path, slot: usize) -> PathBuf {
    dir.join(STATE_DIR).join(format!("slot_{slot:03}.lpck"))
}

/// Persists the history and the weights a resumed run needs.
fn save_state(dir: &Path, state: &SearchState, hash: &str) -> Result<(), CliError> {
    let sdir = dir.join(STATE_DIR);
    fs::create_dir_all(&sdir).map_err(io(&sdir))?;
    let keep: Vec<PathBuf> = state
        .population
        .iter()
        .filter_map(|c| c.network.as_ref().map(|n| (c.slot, n)))
        .map(|(slot, net)| {
            let p = slot_file(dir, slot);
            save_checkpoint(&p, net, hash).map_err(|e| CliError::Input(e.to_string()))?;
            Ok(p)
        })
        .collect::<Result<_, CliError>>()?;
    write_atomic(&dir.join(HISTORY_FILE), history_csv(&state.history).as_bytes())?;
    for entry in fs::read_dir(&sdir).map_err(io(&sdir))? {
        let p = entry.map_err(io(&sdir))?.path();
        if !keep.contains(&p) {
            fs::remove_file(&p).map_err(io(&p))?;
        }
    }
    Ok(())
}

fn resume_state(dir: &Path, cfg: &RunConfig) -> Result<Option<SearchState>, CliError> {
    let path = dir.join(HISTORY_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let bad = |e: SearchError| CliError::Input(format!("cannot resume from {}: {e}", path.display()));
    let history = parse_history(&text).map_err(bad)?;
    let state = state_from_history(history, &cfg.ga, |slot| {
        load_checkpoint(&slot_file(dir, slot)).ok().map(|(net, _)| net)
    })
    .map_err(bad)?;
    Ok(Some(state))
}

/// A run may be extended with more generations; nothing else may change.
fn without_generations(manifest: &str) -> String {
    manifest.lines().filter(|l| !l.starts_with("generations=")).collect::<Vec<_>>().join("\n")
}

/// Runs (or resumes) the configured branches into `out/<branch>/`.
pub fn search(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<String>, CliError> {
    let (train_data, eval_data) = load_data(cfg, data)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let _lock = RunLock::acquire(out)?;
    let manifest = manifest_text("search", cfg, data);
    let mpath = out.join(MANIFEST_FILE);
    if mpath.exists() {
        let old = fs::read_to_string(&mpath).map_err(io(&mpath))?;
        if without_generations(&old) != without_generations(&manifest) {
            return Err(CliError::Input(format!(
                "{} belongs to a run with a different configuration",
                out.display()
            )));
        }
    }
    write_atomic(&mpath, manifest.as_bytes())?;
    let hash = config_hash(&without_generations(&manifest));
    let mut lines = Vec::new();
    for branch in cfg.branch.branches() {
        let dir = out.join(branch.as_str());
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let setup = SearchSetup {
            ga: cfg.ga,
            fitness: cfg.fitness,
            train: cfg.train,
            precision: cfg.precision,
            space: cfg.space.clone(),
            profile: cfg.profile,
            branch,
            train_data: &train_data,
            eval_data: &eval_data,
            threads,
        };
        let resume = resume_state(&dir, cfg)?;
        let done = resume.as_ref().map_or(0, |s| s.completed());
        if done > cfg.ga.generations {
            return Err(CliError::Usage(format!(
                "{} already holds {done} generations, more than generations={}",
                dir.display(),
                cfg.ga.generations
            )));
        }
        let result = run_search_from(&setup, resume, |state| {
            save_state(&dir, state, &hash).map_err(|e| SearchError::Hook(e.to_string()))
        })
        .map_err(|e| match e {
            SearchError::Config(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        })?;
        let best = &result.best;
        if let Some(net) = &best.network {
            let p = dir.join(BEST_CHECKPOINT);
            save_checkpoint(&p, net, &hash).map_err(|e| CliError::Input(e.to_string()))?;
        }
        write_atomic(&dir.join(BEST_GENOTYPE), format!("{}\n", best.genotype).as_bytes())?;
        lines.push(format!(
            "{}: {} generations ({} resumed), best fitness={} genotype={}",
            branch.as_str(),
            result.history.len(),
            done,
            best.fitness,
            best.genotype
        ));
    }
    Ok(lines)
}

/// `message` plus the genotype with a caret under the failing byte.
fn genotype_error(code: &str, e: &GenotypeError) -> CliError {
    match e {
        GenotypeError::Syntax { pos, .. } => {
            CliError::Input(format!("{e}\n  {code}\n  {}^", " ".repeat((*pos).min(code.len()))))
        }
        GenotypeError::Invalid(_) => CliError::Input(e.to_string()),
    }
}

pub fn parse_genotype(code: &str, cfg: &RunConfig) -> Result<Genotype, CliError> {
    let g: Genotype = code.parse().map_err(|e| genotype_error(code, &e))?;
    let v = validate(&g, &cfg.space);
    if !v.is_empty() {
        return Err(genotype_error(code, &GenotypeError::Invalid(v)));
    }
    Ok(g)
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        TrainError::Config(m) => CliError::Usage(m),
        other => CliError::Input(other.to_string()),
    }
}

fn metrics_line(branch: Branch, net: &Network<f32>, gpu: f64, eval: &Dataset, cfg: &RunConfig) -> Result<String, CliError> {
    let m = measure(net, eval, &cfg.profile).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(format!(
        "{} params={} macs={} fps={:.3} latency_ms={:.4} gpu_miou={:.6} device_miou={:.6} gap={:.6}",
        branch.as_str(),
        m.param_count,
        m.macs,
        m.fps,
        m.latency_ms,
        gpu,
        m.miou_device,
        gpu - m.miou_device
    ))
}

/// Single-candidate protocol: FP32 training, device measurement, and
/// optionally FP16-aware fine-tuning with a second measurement.
pub fn train(
    cfg: &RunConfig,
    code: &str,
    data: Option<&Path>,
    finetune: bool,
    checkpoint: Option<&Path>,
) -> Result<Vec<String>, CliError> {
    let g = parse_genotype(code, cfg)?;
    let (train_data, eval_data) = load_data(cfg, data)?;
    let mut net = g
        .build_network::<f32>(cfg.space.in_channels, cfg.space.num_classes, cfg.train.seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    train_fp32(&mut net, &train_data, &cfg.train).map_err(train_err)?;
    let gpu = evaluate(&net, &eval_data, EvalMode::Fp32).map_err(train_err)?;
    let mut lines = vec![metrics_line(Branch::Ptq, &net, gpu, &eval_data, cfg)?];
    if finetune {
        finetune_fp16_aware(&mut net, &train_data, &cfg.train, &cfg.precision).map_err(train_err)?;
        lines.push(metrics_line(Branch::Aligned, &net, gpu, &eval_data, cfg)?);
    }
    if let Some(p) = checkpoint {
        let hash = config_hash(&manifest_text("train", cfg, data));
        save_checkpoint(p, &net, &hash).map_err(|e| CliError::Input(e.to_string()))?;
        lines.push(format!("checkpoint {}", p.display()));
    }
    Ok(lines)
}

/// FP32 and simulated-device metrics of a saved checkpoint.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<Vec<String>, CliError> {
    let (net, info) = load_checkpoint(checkpoint).map_err(|e| CliError::Input(format!("{}: {e}", checkpoint.display())))?;
    let (_, eval_data) = load_data(cfg, data)?;
    let gpu = evaluate(&net, &eval_data, EvalMode::Fp32).map_err(train_err)?;
    let m = measure(&net, &eval_data, &cfg.profile).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(vec![format!(
        "genotype={} params={} macs={} fps={:.3} latency_ms={:.4} fp32_miou={:.6} device_miou={:.6}",
        info.genotype, m.param_count, m.macs, m.fps, m.latency_ms, gpu, m.miou_device
    )])
}

/// Canonical genotype string of a checkpoint, or of a run's best candidate.
pub fn export_genotype(path: &Path, branch: Option<Branch>) -> Result<String, CliError> {
    let code = if path.is_dir() {
        let branches = branch.map_or(vec![Branch::Ptq, Branch::Aligned], |b| vec![b]);
        let file = branches
            .iter()
            .map(|b| path.join(b.as_str()).join(BEST_GENOTYPE))
            .find(|p| p.exists())
            .ok_or_else(|| CliError::Input(format!("{}: no {BEST_GENOTYPE} found", path.display())))?;
        fs::read_to_string(&file).map_err(io(&file))?.trim().to_string()
    } else {
        load_checkpoint(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            .1
            .genotype
    };
    let g: Genotype = code.parse().map_err(|e| genotype_error(&code, &e))?;
    Ok(g.to_string())
}
