use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;

use ovattr::dataset::{
    generate_synthetic, load_annotations, read_ppm, save_annotations, AttributeFrequencyTable, FrequencySplit,
    ImageRecord, PixelStorage, SyntheticSpec,
};
use ovattr::evaluation::{eval_queries, evaluate, export_logits_matrix, EvalSpec};
use ovattr::geometry::BoxXyxy;
use ovattr::inference::{
    boxfree_from_scores, Detection, Detector, PredictionFile,
};
use ovattr::model::Model;
use ovattr::querygen::{
    normalize, parse_antonyms, LabelCandidateSet, Provenance, QueryBuilder, Templates, Vocabulary,
    DEFAULT_ANTONYMS, UNK,
};
use ovattr::trainer::{
    config_hash, hex, load_checkpoint, run_schedule, save_checkpoint, write_loss_row, Checkpoint, TrainData,
    TrainError, LOSS_CSV_HEADER,
};

use crate::config::{usage, RunConfig};
use crate::{EvalArgs, InferArgs, Mode, SynthArgs, TrainArgs};

pub const SEED_ENV: &str = "LOWA_SEED";
const CHECKPOINT_FILE: &str = "checkpoint.lwa";
const VOCAB_FILE: &str = "vocab.txt";

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

/// Flag, then config file, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if cfg.seed_from_file {
        return Ok(cfg.train.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn templates(cfg: &RunConfig) -> Result<Templates> {
    match &cfg.data.templates {
        None => Ok(Templates::builtin()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Templates::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn antonyms(cfg: &RunConfig) -> Result<std::collections::BTreeMap<String, BTreeSet<String>>> {
    let text = match &cfg.data.antonyms {
        None => DEFAULT_ANTONYMS.to_string(),
        Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
    };
    parse_antonyms(&text).map_err(|e| usage(format!("antonyms: {e}")))
}

fn frequency_table(cfg: &RunConfig, records: &[ImageRecord]) -> Result<AttributeFrequencyTable> {
    let mut t = AttributeFrequencyTable::from_records(records, cfg.data.head_pct, cfg.data.tail_pct);
    if let Some(p) = &cfg.data.split_override {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        t.apply_override(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    Ok(t)
}

fn frequency_summary(t: &AttributeFrequencyTable) -> String {
    let mut s = String::from("attribute frequency (training split)\n");
    for split in [FrequencySplit::Head, FrequencySplit::Medium, FrequencySplit::Tail] {
        for a in t.members(split) {
            s.push_str(&format!("  {a:<18} {:>6}  {split:?}\n", t.counts[a]));
        }
    }
    s
}

pub fn synth(cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = cfg.synth.clone();
    if let Some(n) = a.num_train {
        spec.num_train = n;
    }
    if let Some(n) = a.num_heldout {
        spec.num_heldout = n;
    }
    let seed = resolve_seed(a.seed, &cfg)?;
    let data = generate_synthetic(&spec, seed).map_err(|e| usage(e.to_string()))?;
    ensure_dir(&a.out)?;
    let storage = if a.inline {
        PixelStorage::Inline
    } else {
        PixelStorage::Files(PathBuf::from("images"))
    };
    save_annotations(&a.out.join("train.json"), &data.train, &storage)?;
    save_annotations(&a.out.join("heldout.json"), &data.heldout, &storage)?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    let count = |r: &[ImageRecord]| r.iter().map(|r| r.instances.len()).sum::<usize>();
    println!(
        "seed {seed}: train {} images / {} instances, held-out {} images / {} instances",
        data.train.len(),
        count(&data.train),
        data.heldout.len(),
        count(&data.heldout)
    );
    print!("{}", frequency_summary(&frequency_table(&cfg, &data.train)?));
    Ok(())
}

/// Synthetic spec stored next to the data, or the configured one.
fn data_spec(cfg: &RunConfig, dir: &Path) -> Result<SyntheticSpec> {
    let p = dir.join("spec.json");
    if p.exists() {
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).with_context(|| format!("malformed {}", p.display()))
    } else {
        Ok(cfg.synth.clone())
    }
}

fn train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(m) => usage(m),
        TrainError::HashMismatch { .. } => usage(format!("{e} (pass --force to override)")),
        e => e.into(),
    }
}

fn loss_log(path: &Path, resume_step: Option<u64>) -> Result<File> {
    let mut kept = vec![LOSS_CSV_HEADER.to_string()];
    if let (Some(step), true) = (resume_step, path.exists()) {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let s: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if s.is_some_and(|s| s < step) {
                kept.push(line);
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    cfg.train.seed = resolve_seed(a.seed, &cfg)?;
    let t = &mut cfg.train;
    if let Some(n) = a.steps_o {
        t.steps_o = n;
    }
    if let Some(n) = a.steps_a {
        t.steps_a = n;
    }
    if let Some(n) = a.steps_f {
        t.steps_f = n;
    }
    cfg.validate()?;
    let records = load_annotations(&a.data.join("train.json"), cfg.model.image_size)?;
    let templates = templates(&cfg)?;
    let candidates = LabelCandidateSet::from_records(&records, antonyms(&cfg)?);
    let vocab = candidates.vocabulary(&templates);
    let builder = QueryBuilder::new(vocab.clone(), templates);
    let data = TrainData {
        records: &records,
        candidates,
        builder,
    };
    let hash = config_hash(&cfg.model, &vocab, &cfg.train);
    let mut ckpt = match &a.resume {
        Some(p) => {
            let c = load_checkpoint(p, Some(&hash), a.force).map_err(train_error)?;
            info!("resuming from {} at step {}", p.display(), c.step);
            c
        }
        None => Checkpoint::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.optimizer, hash),
    };
    ensure_dir(&a.out)?;
    fs::write(a.out.join(VOCAB_FILE), vocab.to_text())?;
    fs::write(a.out.join("config.ini"), cfg.to_ini())?;
    let mut log = loss_log(&a.out.join("loss.csv"), a.resume.as_ref().map(|_| ckpt.step))?;
    let total = cfg.train.total_steps();
    let end = a.stop_at.map_or(total, |s| s.min(total));
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    info!(
        "training {} → {end} of {total} steps, config {}",
        ckpt.step,
        &hex(&hash)[..12]
    );
    let mut io_err = None;
    while ckpt.step < end {
        let chunk_end = a.checkpoint_every.map_or(end, |n| ((ckpt.step / n + 1) * n).min(end));
        run_schedule(&mut ckpt, &data, &cfg.train, Some(chunk_end), |r| {
            if let Err(e) = write_loss_row(&mut log, r) {
                io_err.get_or_insert(e);
            }
            if (r.step + 1) % 100 == 0 || r.step + 1 == total {
                info!(
                    "step {:>6} {} total {:.4} (l1 {:.4} giou {:.4} focal {:.4})",
                    r.step + 1,
                    r.phase,
                    r.loss.total,
                    r.loss.l1,
                    r.loss.giou,
                    r.loss.focal
                );
            }
        })
        .map_err(train_error)?;
        if let Some(e) = io_err.take() {
            return Err(e).context("writing loss.csv");
        }
        save_checkpoint(&ckpt_path, &ckpt)?;
    }
    if ckpt.step >= end {
        save_checkpoint(&ckpt_path, &ckpt)?;
    }
    log.flush()?;
    println!("checkpoint {} at step {}", ckpt_path.display(), ckpt.step);
    Ok(())
}

/// Checkpoint file and the vocabulary stored beside it.
fn open_checkpoint(path: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let ckpt = load_checkpoint(&file, None, false)
        .with_context(|| format!("cannot load checkpoint {}", file.display()))?;
    let vpath = file.with_file_name(VOCAB_FILE);
    let text = fs::read_to_string(&vpath).with_context(|| format!("cannot read {}", vpath.display()))?;
    let vocab = Vocabulary::parse(&text).with_context(|| format!("malformed {}", vpath.display()))?;
    Ok((ckpt, vocab))
}

pub fn eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    cfg.validate()?;
    let (ckpt, vocab) = open_checkpoint(&a.checkpoint)?;
    let size = ckpt.model.config.image_size;
    let heldout = load_annotations(&a.data.join("heldout.json"), size)?;
    let train_path = a.data.join("train.json");
    let train = if train_path.exists() {
        load_annotations(&train_path, size)?
    } else {
        heldout.clone()
    };
    let mut spec = EvalSpec::synthetic(&data_spec(&cfg, &a.data)?, &train, cfg.eval.k);
    spec.ar_k = cfg.eval.ar_k;
    spec.frequency = frequency_table(&cfg, &train)?;
    let builder = QueryBuilder::new(vocab, templates(&cfg)?);
    let det = Detector::new(&ckpt.model, &builder);
    let report = evaluate(&det, &heldout, &spec)?;
    ensure_dir(&a.out)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.to_table();
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    if a.logits_matrix {
        let phrases: Vec<_> = eval_queries(&det, &spec)?
            .into_iter()
            .filter(|q| q.provenance == Provenance::Composite)
            .collect();
        let f = File::create(a.out.join("logits_matrix.csv"))?;
        export_logits_matrix(&det, &heldout, &phrases, std::io::BufWriter::new(f))?;
    }
    Ok(())
}

/// One query per non-blank line; lines starting with `#` are comments.
pub fn parse_query_file(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if normalize(line).is_empty() {
            return Err(usage(format!("query file line {}: `{line}` has no words", no + 1)));
        }
        out.push(line.to_string());
    }
    Ok(out)
}

fn parse_box(s: &str) -> Result<BoxXyxy> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--box `{s}`: expected four numbers")))?;
    match v[..] {
        [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(BoxXyxy::new(x0, y0, x1, y1)),
        _ => Err(usage(format!("--box `{s}`: need x0,y0,x1,y1 with x0<x1 and y0<y1"))),
    }
}

pub fn infer(cfg: RunConfig, a: &InferArgs) -> Result<()> {
    let mut queries: Vec<String> = a
        .queries
        .iter()
        .flat_map(|q| q.split(';'))
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .map(String::from)
        .collect();
    if let Some(p) = &a.query_file {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
        queries.extend(parse_query_file(&text).with_context(|| p.display().to_string())?);
    }
    if queries.is_empty() {
        return Err(usage("no queries: pass --queries or --query-file"));
    }
    if a.mode == Mode::Open && !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage(format!("--threshold {} must lie in (0, 1)", a.threshold)));
    }
    if a.mode == Mode::AttrLocalize && a.top_k == 0 {
        return Err(usage("--top-k must be at least 1"));
    }
    let target = match (a.mode, &a.r#box) {
        (Mode::AttrClassify, Some(b)) => Some(parse_box(b)?),
        (Mode::AttrClassify, None) => return Err(usage("attr-classify needs --box x0,y0,x1,y1")),
        _ => None,
    };
    let (ckpt, vocab) = open_checkpoint(&a.checkpoint)?;
    let image = read_ppm(&a.image)?;
    let size = ckpt.model.config.image_size;
    let image = if image.size == size { image } else { image.resized(size) };
    let builder = QueryBuilder::new(vocab, templates(&cfg)?);
    let det = Detector::new(&ckpt.model, &builder);
    for q in &queries {
        let unknown: Vec<String> = normalize(q).into_iter().filter(|w| builder.vocab.id(w) == UNK).collect();
        if !unknown.is_empty() {
            log::warn!("query `{q}` has words outside the vocabulary: {}", unknown.join(" "));
        }
    }
    let dets: Vec<Detection> = match a.mode {
        Mode::Closed => det.detect_closed_vocab(&image, &queries)?,
        Mode::Open => det.detect_open_vocab(&image, &queries, a.threshold)?,
        Mode::AttrLocalize => det
            .localize_by_attribute(&image, &queries, a.top_k)?
            .into_iter()
            .flatten()
            .collect(),
        Mode::AttrClassify => {
            let qs = det.label_queries(&queries, Provenance::Attribute)?;
            let s = det.score(&image, &det.embed_queries(&qs)?)?;
            let (p, scores) = boxfree_from_scores(&s, &target.expect("checked above"));
            scores
                .into_iter()
                .enumerate()
                .map(|(q, score)| Detection {
                    bbox: s.boxes[p],
                    query_index: q,
                    score,
                    proposal: p,
                })
                .collect()
        }
    };
    let file = PredictionFile::from_detections(a.image_id, &dets, &queries);
    let text = serde_json::to_string_pretty(&file)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
