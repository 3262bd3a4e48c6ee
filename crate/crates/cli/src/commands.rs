use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use simplefold_core::confidence::{predict_plddt, PlddtStepReport, PlddtTrainer};
use simplefold_core::embedding::Embedding;
use simplefold_core::features::{featurize, featurize_sequence, FeatureBundle};
use simplefold_core::flow::Phase;
use simplefold_core::metrics::{aggregate, evaluate_records, MetricReport, TargetMetrics};
use simplefold_core::model::{Conditioning, Model, ModelConfig, ModelInputs, PlddtHead};
use simplefold_core::residues::{parse_sequence, sequence_string, ConformerTable};
use simplefold_core::sampler::{sample, SamplerConfig};
use simplefold_core::structure::{parse_pdb, write_pdb, ProteinRecord};
use simplefold_core::train::{StepReport, Trainer};
use simplefold_tensor::{Checkpoint, ParamTree};

use crate::config::RunConfig;
use crate::error::input;

const PLDDT_KIND: &str = "plddt-head";

pub fn threads_from_env() -> usize {
    std::env::var("SIMPLEFOLD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

fn files_with_ext(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_structure(path: &Path) -> Result<ProteinRecord> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pdb(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_embedding(dir: Option<&Path>, name: &str) -> Result<Option<Embedding>> {
    let Some(dir) = dir else { return Ok(None) };
    let path = dir.join(format!("{name}.emb"));
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(Embedding::load(&path).with_context(|| format!("loading {}", path.display()))?))
}

pub fn features_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.output_dir.join("features").join(split)
}

#[derive(Debug, Serialize)]
pub struct FeaturizeSummary {
    pub written: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Featurizes every structure file in `input` into `out`.
pub fn featurize_dir(src: &Path, out: &Path, embedding_dir: Option<&Path>) -> Result<FeaturizeSummary> {
    let files = files_with_ext(src, &["pdb", "ent"])?;
    if files.is_empty() {
        return Err(input_err_no_inputs(src));
    }
    fs::create_dir_all(out)?;
    let table = ConformerTable::standard();
    let mut summary = FeaturizeSummary {
        written: Vec::new(),
        failed: Vec::new(),
    };
    for f in files {
        let name = stem(&f);
        let result = read_structure(&f).and_then(|rec| {
            let emb = load_embedding(embedding_dir, &name)?;
            let bundle = featurize(&name, &rec, &table, emb)?;
            let path = out.join(format!("{name}.json"));
            fs::write(&path, serde_json::to_vec(&bundle)?)?;
            Ok(())
        });
        match result {
            Ok(()) => summary.written.push(name),
            Err(e) => {
                log::warn!("{}: {e:#}", f.display());
                summary.failed.push((name, format!("{e:#}")));
            }
        }
    }
    log::info!(
        "featurized {} of {} files into {}",
        summary.written.len(),
        summary.written.len() + summary.failed.len(),
        out.display()
    );
    if summary.written.is_empty() {
        return Err(input("every input failed to featurize"));
    }
    Ok(summary)
}

fn input_err_no_inputs(dir: &Path) -> anyhow::Error {
    input(format!("no inputs in {}", dir.display()))
}

pub fn cmd_featurize(cfg: &RunConfig, input_dir: Option<&Path>) -> Result<()> {
    let emb = cfg.data.embedding_dir.as_deref();
    match input_dir {
        Some(dir) => {
            featurize_dir(dir, &features_dir(cfg, "train"), emb)?;
        }
        None => {
            let train = cfg.data.train_dir.as_deref().ok_or_else(|| input("data.train_dir is not set"))?;
            featurize_dir(train, &features_dir(cfg, "train"), emb)?;
            if let Some(eval) = cfg.data.eval_dir.as_deref() {
                featurize_dir(eval, &features_dir(cfg, "eval"), emb)?;
            }
        }
    }
    Ok(())
}

pub fn load_features(dir: &Path) -> Result<Vec<FeatureBundle>> {
    if !dir.is_dir() {
        return Err(input(format!("feature cache {} not found; run featurize first", dir.display())));
    }
    let files = files_with_ext(dir, &["json"])?;
    if files.is_empty() {
        return Err(input_err_no_inputs(dir));
    }
    files
        .iter()
        .map(|f| {
            let b: FeatureBundle = serde_json::from_slice(&fs::read(f)?)
                .map_err(|e| input(format!("{}: {e}", f.display())))?;
            b.check()?;
            Ok(b)
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Checks a folding checkpoint against the configured model, naming the
/// first mismatched parameter.
fn check_against_config(ckpt: &Checkpoint, model_cfg: &ModelConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, skeleton) = Model::new::<f32>(model_cfg, &mut rng)?;
    skeleton
        .check_compatible(&ckpt.params)
        .map_err(|e| input(format!("checkpoint does not match the model config: {e}")))
}

fn run_training(mut trainer: Trainer, dir: &Path, append: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    trainer.threads = threads_from_env();
    let log_path = dir.join("log.csv");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&log_path)?,
    );
    if !append || fs::metadata(&log_path)?.len() == 0 {
        writeln!(log, "{}", StepReport::CSV_HEADER)?;
    }
    let total = trainer.cfg.steps;
    let (every, ckpt_every) = (trainer.cfg.log_every.max(1), trainer.cfg.checkpoint_every);
    while trainer.step < total {
        let r = trainer.train_step()?;
        writeln!(log, "{}", r.csv_row())?;
        if (r.step + 1) % every == 0 {
            log::info!(
                "step {} loss {:.4} fm {:.4} lddt {:.4} alpha {:.2} lr {:.2e}",
                r.step + 1,
                r.loss,
                r.fm,
                r.lddt,
                r.alpha,
                r.lr
            );
        }
        if ckpt_every > 0 && trainer.step % ckpt_every == 0 {
            trainer.checkpoint()?.save(dir.join(format!("step_{:06}.ckpt", trainer.step)))?;
        }
    }
    log.flush()?;
    trainer.checkpoint()?.save(dir.join("last.ckpt"))?;
    log::info!("wrote {}", dir.join("last.ckpt").display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = load_features(&features_dir(cfg, "train"))?;
    let dir = cfg.output_dir.join("train");
    let trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            check_against_config(&ckpt, &cfg.model)?;
            let mut tr = Trainer::resume(&ckpt, data)?;
            tr.cfg.steps = cfg.train.steps;
            log::info!("resuming at step {}", tr.step);
            tr
        }
        None => Trainer::new(&cfg.model, cfg.train.clone(), data)?,
    };
    run_training(trainer, &dir, resume.is_some())
}

pub fn finetune_config(cfg: &RunConfig) -> simplefold_core::train::TrainConfig {
    let mut t = cfg.train.clone();
    if t.phase == Phase::Pretrain {
        t.phase = Phase::Finetune;
    }
    t.max_residues = 512;
    t
}

pub fn cmd_finetune(cfg: &RunConfig, from: &Path) -> Result<()> {
    let data = load_features(&features_dir(cfg, "train"))?;
    let ckpt = load_checkpoint(from)?;
    check_against_config(&ckpt, &cfg.model)?;
    let model = Model::skeleton(&cfg.model)?;
    let trainer = Trainer::from_params(model, ckpt.params.clone(), ckpt.ema.clone(), finetune_config(cfg), data)?;
    run_training(trainer, &cfg.output_dir.join("finetune"), false)
}

/// EMA weights of a folding checkpoint, falling back to the live ones.
fn folding_weights(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<(Model, ParamTree<f32>)> {
    check_against_config(ckpt, cfg)?;
    let params = ckpt.ema.clone().unwrap_or_else(|| ckpt.params.clone());
    Ok((Model::skeleton(cfg)?, params))
}

pub fn cmd_train_plddt(cfg: &RunConfig, from: &Path) -> Result<()> {
    let data = load_features(&features_dir(cfg, "train"))?;
    let ckpt = load_checkpoint(from)?;
    let (model, folding) = folding_weights(&ckpt, &cfg.model)?;
    let before = folding.fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (head, head_params) = PlddtHead::new::<f32>(&cfg.model, &mut rng)?;
    let dir = cfg.output_dir.join("plddt");
    fs::create_dir_all(&dir)?;
    let mut log = BufWriter::new(fs::File::create(dir.join("log.csv"))?);
    writeln!(log, "{}", PlddtStepReport::CSV_HEADER)?;
    let mut trainer = PlddtTrainer::new(&model, &folding, head, head_params, cfg.plddt.clone(), data)?;
    for k in 0..cfg.plddt.samples {
        let r = trainer.step()?;
        writeln!(log, "{}", r.csv_row())?;
        if (k + 1) % 10 == 0 {
            log::info!("sample {} loss {:.4} target lddt {:.1}", k + 1, r.loss, r.mean_target_lddt);
        }
    }
    log.flush()?;
    let head_params = trainer.head_params.clone();
    drop(trainer);
    if folding.fingerprint() != before {
        anyhow::bail!("folding parameters changed during head training");
    }
    let meta = serde_json::json!({ "kind": PLDDT_KIND, "model": cfg.model, "folding_fingerprint": before });
    Checkpoint {
        step: cfg.plddt.samples,
        meta: meta.to_string(),
        params: head_params,
        ..Checkpoint::default()
    }
    .save(dir.join("head.ckpt"))?;
    log::info!("wrote {} (folding fingerprint {before:016x} unchanged)", dir.join("head.ckpt").display());
    Ok(())
}

fn load_head(path: &Path, cfg: &ModelConfig) -> Result<(PlddtHead, ParamTree<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let meta: serde_json::Value = serde_json::from_str(&ckpt.meta).unwrap_or_default();
    if meta.get("kind").and_then(|k| k.as_str()) != Some(PLDDT_KIND) {
        return Err(input(format!("{} is not a confidence-head checkpoint", path.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (head, skeleton) = PlddtHead::new::<f32>(cfg, &mut rng)?;
    skeleton
        .check_compatible(&ckpt.params)
        .map_err(|e| input(format!("head checkpoint does not match the model config: {e}")))?;
    Ok((head, ckpt.params))
}

/// `(name, sequence)` records of a FASTA file.
pub fn parse_fasta(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(h) = line.strip_prefix('>') {
            let name = h.split_whitespace().next().unwrap_or("").to_string();
            out.push((if name.is_empty() { format!("seq{}", out.len()) } else { name }, String::new()));
        } else if let Some(last) = out.last_mut() {
            last.1.push_str(line);
        } else {
            out.push(("seq0".into(), line.to_string()));
        }
    }
    if out.is_empty() || out.iter().any(|(_, s)| s.is_empty()) {
        return Err(input("FASTA input has no sequence"));
    }
    Ok(out)
}

pub struct FoldArgs {
    pub checkpoint: PathBuf,
    pub plddt: Option<PathBuf>,
    pub input: PathBuf,
    pub embedding: Option<PathBuf>,
    pub tau: Option<f64>,
    pub steps: Option<usize>,
    pub num_samples: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    target: String,
    sample: usize,
    seed: u64,
    file: String,
    mean_plddt: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    tau: f64,
    n_steps: usize,
    sampler: SamplerConfig,
    samples: Vec<ManifestEntry>,
}

pub fn cmd_fold(cfg: &RunConfig, args: &FoldArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (model, params) = folding_weights(&ckpt, &cfg.model)?;
    let head = args.plddt.as_deref().map(|p| load_head(p, &cfg.model)).transpose()?;
    let mut sampler = cfg.sampler.clone();
    if let Some(t) = args.tau {
        sampler.tau = t;
    }
    if let Some(s) = args.steps {
        sampler.n_steps = s;
    }
    sampler.validate().map_err(|e| input(e.to_string()))?;

    let table = ConformerTable::standard();
    let ext = args.input.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let targets: Vec<(String, String)> = match ext.as_str() {
        "pdb" | "ent" => {
            let rec = read_structure(&args.input)?;
            vec![(stem(&args.input), sequence_string(&rec.sequence))]
        }
        _ => parse_fasta(&fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?)?,
    };
    let embedding = args
        .embedding
        .as_deref()
        .map(|p| Embedding::load(p).map_err(|e| input(format!("{}: {e}", p.display()))))
        .transpose()?;

    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("fold"));
    let mut manifest = Manifest {
        seed: cfg.seed,
        tau: sampler.tau,
        n_steps: sampler.n_steps,
        sampler: sampler.clone(),
        samples: Vec::new(),
    };
    for (name, seq_text) in &targets {
        let seq = parse_sequence(seq_text).map_err(|e| input(format!("{name}: {e}")))?;
        let emb = match (&cfg.model.conditioning, &embedding) {
            (Conditioning::Learned, _) => None,
            (Conditioning::Precomputed { .. }, Some(e)) if e.n_res == seq.len() => Some(e.clone()),
            (Conditioning::Precomputed { .. }, _) => {
                return Err(input(format!("{name}: the model needs an embedding file with {} residues", seq.len())))
            }
        };
        let bundle = featurize_sequence(name, &seq, &table, emb)?;
        let inputs = ModelInputs::<f32>::new(&cfg.model, &bundle)?;
        for k in 0..args.num_samples {
            let seed = cfg.seed + k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coords = sample(&model, &params, &inputs, &sampler, &mut rng)?;
            let plddt = head
                .as_ref()
                .map(|(h, hp)| predict_plddt(&model, &params, h, hp, &inputs, &coords))
                .transpose()?;
            let rec = bundle.to_record(&coords)?;
            let dir = out.join(format!("sample_{k}"));
            fs::create_dir_all(&dir)?;
            let file = dir.join(format!("{name}.pdb"));
            fs::write(&file, write_pdb(&rec, &coords, plddt.as_deref())?)?;
            if let Some(p) = &plddt {
                let mut csv = String::from("residue_index,restype,plddt\n");
                for (r, v) in rec.residues.iter().zip(p) {
                    csv.push_str(&format!("{},{},{v:.2}\n", r.residue_index, r.aa.code3()));
                }
                fs::write(dir.join(format!("{name}_plddt.csv")), csv)?;
            }
            log::info!("{name} sample {k} -> {}", file.display());
            manifest.samples.push(ManifestEntry {
                target: name.clone(),
                sample: k,
                seed,
                file: file.strip_prefix(&out).unwrap_or(&file).display().to_string(),
                mean_plddt: plddt.map(|p| p.iter().sum::<f64>() / p.len() as f64),
            });
        }
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn structure_set(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if path.is_file() {
        return Ok(BTreeMap::from([(stem(path), path.to_path_buf())]));
    }
    if !path.is_dir() {
        return Err(input(format!("{} does not exist", path.display())));
    }
    Ok(files_with_ext(path, &["pdb", "ent"])?.into_iter().map(|p| (stem(&p), p)).collect())
}

/// Scores predictions against references paired by file stem. A single
/// file on each side pairs regardless of name.
pub fn evaluate_paths(pred: &Path, reference: &Path) -> Result<MetricReport> {
    let (p, r) = (structure_set(pred)?, structure_set(reference)?);
    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred.is_file() && reference.is_file() {
        vec![(stem(reference), pred.to_path_buf(), reference.to_path_buf())]
    } else {
        for name in p.keys().filter(|k| !r.contains_key(*k)) {
            log::warn!("unpaired prediction {name}");
        }
        for name in r.keys().filter(|k| !p.contains_key(*k)) {
            log::warn!("unpaired reference {name}");
        }
        p.iter()
            .filter_map(|(k, pp)| r.get(k).map(|rp| (k.clone(), pp.clone(), rp.clone())))
            .collect()
    };
    if pairs.is_empty() {
        return Err(input("no name-paired structures"));
    }
    let mut targets = BTreeMap::new();
    for (name, pp, rp) in pairs {
        let m = evaluate_records(&read_structure(&pp)?, &read_structure(&rp)?).with_context(|| format!("scoring {name}"))?;
        targets.insert(name, m);
    }
    Ok(aggregate(targets)?)
}

pub fn report_csv(report: &MetricReport) -> String {
    let mut s = format!("target,{}\n", TargetMetrics::NAMES.join(","));
    for (name, m) in &report.targets {
        let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!("{name},{}\n", vals.join(",")));
    }
    let summary: Vec<String> = TargetMetrics::NAMES.iter().map(|n| report.summary[*n].display()).collect();
    s.push_str(&format!("mean / median,{}\n", summary.join(",")));
    s
}

pub fn cmd_eval(pred: &Path, reference: &Path, out: &Path) -> Result<MetricReport> {
    let report = evaluate_paths(pred, reference)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.with_extension("csv"), report_csv(&report))?;
    for n in TargetMetrics::NAMES {
        log::info!("{n}: {}", report.summary[n].display());
    }
    Ok(report)
}

pub fn cmd_report(pred: &Path, reference: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let report = cmd_eval(pred, reference, &out_dir.join("report"))?;
    for (k, n) in TargetMetrics::NAMES.iter().enumerate() {
        let mut s = format!("target,{n}\n");
        for (name, m) in &report.targets {
            s.push_str(&format!("{name},{:.6}\n", m.values()[k]));
        }
        fs::write(out_dir.join(format!("{n}.csv")), s)?;
    }
    Ok(())
}
