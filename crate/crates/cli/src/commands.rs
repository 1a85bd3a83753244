//! Command implementations. Each reads its inputs from disk, writes its outputs
//! plus the resolved config into an output directory, and returns a summary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use memetrn::captioner::{
    caption_dataset, corpus_score, token_accuracy, train_scst, train_xe, CaptionExample, Captioner,
};
use memetrn::data::{gen_synthetic, load_jsonl, load_memes, save_jsonl, save_memes, CaptionSample, Lexicon, MemeSample};
use memetrn::embedding::InputFlags;
use memetrn::metrics::{evaluate, read_predictions, write_predictions, EvalReport, Prediction};
use memetrn::numerics::{checkpoint, streams, ParamStore, RngState};
use memetrn::text::Vocab;
use memetrn::train::{build_examples, train_detector, LogRecord};
use memetrn::trn::Detector;

use crate::config::RunConfig;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Captioner,
    Detector,
}

/// Header stored in every checkpoint: enough to rebuild the model and its tokenizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub vocab: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_vocab(dir: &Path) -> Result<Vocab> {
    let p = dir.join(VOCAB_FILE);
    Vocab::load(&p).with_context(|| format!("cannot load vocabulary {}", p.display()))
}

fn read_memes(path: &Path) -> Result<Vec<MemeSample>> {
    load_memes(path).with_context(|| format!("cannot load memes from {}", path.display()))
}

fn save_checkpoint(path: &Path, kind: ModelKind, cfg: &RunConfig, vocab: &Vocab, store: &ParamStore) -> Result<()> {
    let meta = CheckpointMeta {
        kind,
        config: cfg.clone(),
        vocab: vocab.tokens().to_vec(),
    };
    checkpoint::save(path, &serde_json::to_string(&meta)?, store)?;
    Ok(())
}

fn load_checkpoint(path: &Path, want: ModelKind) -> Result<(CheckpointMeta, ParamStore)> {
    let ckpt = checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata).context("checkpoint header is not valid metadata")?;
    if meta.kind != want {
        bail!("{} holds a {:?} model, expected {:?}", path.display(), meta.kind, want);
    }
    Ok((meta, ckpt.params))
}

fn init_rng(cfg: &RunConfig) -> RngState {
    RngState::with_stream(cfg.seed, streams::INIT)
}

/// Rebuilds a model's parameter layout and fills it from a checkpoint.
fn restore(fresh: ParamStore, saved: &ParamStore) -> Result<ParamStore> {
    let mut store = fresh;
    store.load_from(saved)?;
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub n: usize,
    pub hateful: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub splits: Vec<SplitStats>,
    pub caption_images: usize,
    pub vocab_size: usize,
    pub balance_waived: bool,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DataSummary> {
    create_dir(out)?;
    let world = gen_synthetic(&cfg.world)?;
    let vocab = Vocab::build(&world.vocab_corpus(&cfg.world), cfg.vocab.size, cfg.vocab.min_char_coverage)?;
    let mut splits = Vec::new();
    for (name, memes) in SPLITS.iter().zip([&world.train, &world.dev, &world.test]) {
        save_memes(memes, out.join(format!("{name}.jsonl")))?;
        splits.push(SplitStats {
            split: name.to_string(),
            n: memes.len(),
            hateful: memes.iter().filter(|m| m.is_hateful()).count(),
        });
    }
    save_jsonl(&world.captions, out.join("captions.jsonl"))?;
    save_jsonl(&world.provenance, out.join("provenance.jsonl"))?;
    vocab.save(out.join(VOCAB_FILE))?;
    write_json(&cfg.world.lexicon(), &out.join(LEXICON_FILE))?;
    let summary = DataSummary {
        splits,
        caption_images: world.captions.len(),
        vocab_size: vocab.len(),
        balance_waived: world.balance_waived,
    };
    write_json(&summary, &out.join("stats.json"))?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerSummary {
    pub token_accuracy: f64,
    pub xe_cider: f64,
    pub final_cider: f64,
    /// Corpus CIDEr-D of the kept checkpoint.
    pub best_cider: f64,
    /// SCST step of the kept checkpoint; 0 is the end of cross-entropy training.
    pub best_step: u64,
    pub scst_skipped: usize,
}

pub fn train_captioner(cfg: &RunConfig, data: &Path, out: &Path, scst: bool) -> Result<CaptionerSummary> {
    create_dir(out)?;
    let vocab = read_vocab(data)?;
    let captions: Vec<CaptionSample> = load_jsonl(data.join("captions.jsonl")).context("cannot load captions.jsonl")?;
    let run = &cfg.captioner;
    let examples = captions
        .iter()
        .map(|c| CaptionExample::from_sample(c, &vocab, run.model.max_len))
        .collect::<memetrn::Result<Vec<_>>>()?;
    let idf = CaptionExample::idf(&examples)?;
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, &run.model, vocab.len(), &mut init_rng(cfg))?;

    let xe_log = train_xe(&model, &mut store, &examples, &run.xe, |_| {})?;
    save_jsonl(&xe_log, out.join("xe_log.jsonl"))?;
    let token_accuracy = token_accuracy(&model, &store, &examples)?;
    let xe_cider = corpus_score(&model, &store, &examples, &vocab, &idf)?;

    let mut best = (xe_cider, 0u64, store.clone());
    let mut final_cider = xe_cider;
    let mut skipped = 0;
    if scst {
        let last = run.scst.steps as u64;
        let report = train_scst(&model, &mut store, &examples, &vocab, &idf, &run.scst, |rec, params| {
            if rec.step % run.eval_every as u64 == 0 || rec.step == last {
                let score = corpus_score(&model, params, &examples, &vocab, &idf)?;
                if rec.step == last {
                    final_cider = score;
                }
                if score > best.0 {
                    best = (score, rec.step, params.clone());
                }
            }
            Ok(())
        })?;
        save_jsonl(&report.log, out.join("scst_log.jsonl"))?;
        skipped = report.skipped;
    }
    save_checkpoint(&out.join("captioner.ckpt"), ModelKind::Captioner, cfg, &vocab, &best.2)?;
    let summary = CaptionerSummary {
        token_accuracy,
        xe_cider,
        final_cider,
        best_cider: best.0,
        best_step: best.1,
        scst_skipped: skipped,
    };
    write_json(&summary, &out.join("metrics.json"))?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSummary {
    pub captioned: usize,
    pub failed: usize,
}

/// Captions every split found in `data` and writes the captioned splits, the
/// caption cache and the vocabulary (plus lexicon, when present) to `out`.
pub fn caption(model_path: &Path, data: &Path, out: &Path) -> Result<CaptionSummary> {
    create_dir(out)?;
    let (meta, saved) = load_checkpoint(model_path, ModelKind::Captioner)?;
    let vocab = Vocab::from_tokens(meta.vocab.clone())?;
    let mut fresh = ParamStore::new();
    let model = Captioner::new(&mut fresh, &meta.config.captioner.model, vocab.len(), &mut init_rng(&meta.config))?;
    let store = restore(fresh, &saved)?;
    let mut summary = CaptionSummary { captioned: 0, failed: 0 };
    let mut found = false;
    for name in SPLITS {
        let path = data.join(format!("{name}.jsonl"));
        if !path.exists() {
            continue;
        }
        found = true;
        let memes = read_memes(&path)?;
        let (captioned, records) = caption_dataset(&model, &store, &memes, &vocab)?;
        summary.failed += records.iter().filter(|r| r.error.is_some()).count();
        summary.captioned += records.len();
        save_memes(&captioned, out.join(format!("{name}.jsonl")))?;
        save_jsonl(&records, out.join(format!("{name}.captions.jsonl")))?;
    }
    if !found {
        bail!("no train/dev/test.jsonl in {}", data.display());
    }
    vocab.save(out.join(VOCAB_FILE))?;
    if data.join(LEXICON_FILE).exists() {
        fs::copy(data.join(LEXICON_FILE), out.join(LEXICON_FILE))?;
    }
    write_json(&summary, &out.join("caption_summary.json"))?;
    meta.config.write_resolved(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub flags: InputFlags,
    pub train_examples: usize,
    /// Memes that yielded fewer paraphrases than requested.
    pub augment_short: usize,
    pub final_loss: f64,
    pub dev: EvalReport,
}

fn lexicon_for(cfg: &RunConfig, data: &Path) -> Result<Lexicon> {
    let p = data.join(LEXICON_FILE);
    if p.exists() {
        let text = fs::read_to_string(&p)?;
        return serde_json::from_str(&text).with_context(|| format!("invalid lexicon {}", p.display()));
    }
    Ok(cfg.world.lexicon())
}

fn detector_predictions(
    model: &Detector,
    store: &ParamStore,
    memes: &[MemeSample],
    vocab: &Vocab,
    flags: InputFlags,
    threads: usize,
) -> Result<Vec<Prediction>> {
    let (examples, _) = build_examples(memes, vocab, flags, &model.cfg.limits, None)?;
    let probs = model.predict_parallel(store, &examples, threads)?;
    Ok(examples
        .iter()
        .zip(probs)
        .map(|(e, p)| Prediction::new(e.id.clone(), p, DECISION_THRESHOLD))
        .collect())
}

pub fn train_detector_run(cfg: &RunConfig, data: &Path, out: &Path) -> Result<DetectorSummary> {
    train_detector_threads(cfg, data, out, cfg.threads)
}

fn train_detector_threads(cfg: &RunConfig, data: &Path, out: &Path, threads: usize) -> Result<DetectorSummary> {
    create_dir(out)?;
    let vocab = read_vocab(data)?;
    let train = read_memes(&data.join("train.jsonl"))?;
    let dev = read_memes(&data.join("dev.jsonl"))?;
    let augment = cfg.paraphrase(&lexicon_for(cfg, data)?);
    let (examples, short) = build_examples(&train, &vocab, cfg.flags, &cfg.model.limits, Some(&augment))?;
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, &cfg.model, vocab.len(), &mut init_rng(cfg))?;
    let log: Vec<LogRecord> = train_detector(&model, &mut store, &examples, &cfg.detector, |_| {})?;
    save_jsonl(&log, out.join("log.jsonl"))?;
    save_checkpoint(&out.join("detector.ckpt"), ModelKind::Detector, cfg, &vocab, &store)?;
    let preds = detector_predictions(&model, &store, &dev, &vocab, cfg.flags, threads)?;
    write_predictions(&preds, out.join("dev_predictions.csv"))?;
    let summary = DetectorSummary {
        flags: cfg.flags,
        train_examples: examples.len(),
        augment_short: short,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
        dev: evaluate(&preds, &dev)?,
    };
    write_json(&summary, &out.join("metrics.json"))?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

/// Writes a prediction CSV for every meme in `data`.
pub fn predict(model_path: &Path, data: &Path, out: &Path) -> Result<Vec<Prediction>> {
    let (meta, saved) = load_checkpoint(model_path, ModelKind::Detector)?;
    let vocab = Vocab::from_tokens(meta.vocab.clone())?;
    let mut fresh = ParamStore::new();
    let model = Detector::new(&mut fresh, &meta.config.model, vocab.len(), &mut init_rng(&meta.config))?;
    let store = restore(fresh, &saved)?;
    let memes = read_memes(data)?;
    let preds = detector_predictions(&model, &store, &memes, &vocab, meta.config.flags, meta.config.threads)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_predictions(&preds, out)?;
    Ok(preds)
}

pub fn eval(pred: &Path, gold: &Path) -> Result<EvalReport> {
    let preds = read_predictions(pred).with_context(|| format!("cannot read predictions {}", pred.display()))?;
    let gold = read_memes(gold)?;
    Ok(evaluate(&preds, &gold)?)
}

/// The eight input-flag combinations of the ablation grid, caption outermost.
pub fn ablation_grid(base: InputFlags) -> Vec<InputFlags> {
    let mut out = Vec::with_capacity(8);
    for use_caption in [false, true] {
        for use_object_labels in [false, true] {
            for use_augmentation in [false, true] {
                out.push(InputFlags {
                    use_caption,
                    use_object_labels,
                    use_augmentation,
                    ..base
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_caption: bool,
    pub use_object_labels: bool,
    pub use_augmentation: bool,
    pub dev_auroc: f64,
    pub dev_accuracy: f64,
}

fn cell_name(f: &InputFlags) -> String {
    format!(
        "caption{}-labels{}-aug{}",
        u8::from(f.use_caption),
        u8::from(f.use_object_labels),
        u8::from(f.use_augmentation)
    )
}

/// Runs the full grid. Without `data`, a world is generated and, unless it
/// carries oracle captions, a captioner is trained and used to caption it.
pub fn ablate(cfg: &RunConfig, data: Option<&Path>, out: &Path, scst: bool) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let data_dir: PathBuf = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let raw = out.join("data");
            gen_data(cfg, &raw)?;
            if cfg.world.oracle_captions {
                raw
            } else {
                let cap_dir = out.join("captioner");
                train_captioner(cfg, &raw, &cap_dir, scst)?;
                let captioned = out.join("captioned");
                caption(&cap_dir.join("captioner.ckpt"), &raw, &captioned)?;
                captioned
            }
        }
    };
    let cells: Vec<RunConfig> = ablation_grid(cfg.flags)
        .into_iter()
        .map(|flags| RunConfig { flags, ..cfg.clone() })
        .collect();
    let workers = cfg.threads.min(cells.len());
    let inner_threads = (cfg.threads / workers).max(1);
    let mut results: Vec<Option<Result<DetectorSummary>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let cells = &cells;
                let data_dir = &data_dir;
                s.spawn(move || {
                    (w..cells.len())
                        .step_by(workers)
                        .map(|i| {
                            let c = &cells[i];
                            (i, train_detector_threads(c, data_dir, &out.join(cell_name(&c.flags)), inner_threads))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (c, r) in cells.iter().zip(results) {
        let summary = r.expect("every cell ran").with_context(|| format!("ablation cell {}", cell_name(&c.flags)))?;
        rows.push(AblationRow {
            use_caption: c.flags.use_caption,
            use_object_labels: c.flags.use_object_labels,
            use_augmentation: c.flags.use_augmentation,
            dev_auroc: summary.dev.auroc,
            dev_accuracy: summary.dev.accuracy,
        });
    }
    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    cfg.write_resolved(out)?;
    Ok(rows)
}

/// Markdown rendering of the ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { " " };
    let mut s = String::from("| caption | object labels | augmentation | dev AUROC | dev accuracy |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            mark(r.use_caption),
            mark(r.use_object_labels),
            mark(r.use_augmentation),
            r.dev_auroc,
            r.dev_accuracy
        ));
    }
    s
}
