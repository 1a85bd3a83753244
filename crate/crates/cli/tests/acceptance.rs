//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass name substrings as arguments to run a subset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use memetrn::captioner::{
    corpus_score, scst_step, token_accuracy, train_scst, train_xe, CaptionExample, Captioner, CaptionerConfig,
};
use memetrn::data::{gen_synthetic, MemeSample, SplitSizes, World, WorldConfig};
use memetrn::embedding::{InputFlags, LayoutLimits};
use memetrn::metrics::{auroc, cider_d, corpus_cider, CiderVariant, IdfTable};
use memetrn::numerics::gradcheck::{check_inputs, check_params, random_tensor};
use memetrn::numerics::{streams, Graph, ParamStore, RngState, Tensor, Var};
use memetrn::text::Vocab;
use memetrn::train::{build_examples, train_detector, Schedule};
use memetrn::trn::attention::{AttnMask, Block};
use memetrn::trn::{Detector, Example, TrnConfig, Variant};

const WHOLE_MODEL_GRAD_TOL: f64 = 1e-5;
const PER_OP_GRAD_TOL: f64 = 1e-6;
const CIDER_ORACLE_TOL: f64 = 1e-9;
const CIDER_CORPORA: usize = 20;
const AUROC_ORACLE_TOL: f64 = 1e-12;
const AUROC_SETS: usize = 200;
const SCST_EQUIV_TOL: f64 = 1e-9;
const OVERFIT_SAMPLES: usize = 32;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_BCE: f64 = 0.01;
const FUSED_MIN_AUROC: f64 = 0.85;
const UNIMODAL_MAX_AUROC: f64 = 0.65;
const CAPTION_GAIN_MIN: f64 = 0.05;
const TOKEN_ACC_MIN: f64 = 0.95;
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn weights(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect()).unwrap()
}

/// Reduces an op output to a scalar with fixed non-uniform weights.
fn project(g: &mut Graph, y: Var) -> memetrn::Result<Var> {
    let w = g.input(weights(g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn per_op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = RngState::new(11);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut rng);
    let (a34, b34, b45, row4, v6) = (t(&[3, 4]), t(&[3, 4]), t(&[4, 5]), t(&[4]), t(&[6]));
    let (gain, bias, table) = (t(&[4]), t(&[4]), t(&[5, 4]));
    let positive = Tensor::new(vec![3, 4], a34.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> memetrn::Result<Var>| {
        out.push((name, check_inputs(inputs, f)));
    };
    run("matmul", &[a34.clone(), b45.clone()], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
    run("add", &[a34.clone(), b34.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y)
    });
    run("sub", &[a34.clone(), b34.clone()], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y)
    });
    run("add_row", &[a34.clone(), row4.clone()], &|g, v| {
        let y = g.add_row(v[0], v[1])?;
        project(g, y)
    });
    run("mul", &[a34.clone(), b34.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y)
    });
    run("scale", std::slice::from_ref(&a34), &|g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y)
    });
    run("add_scalar", std::slice::from_ref(&a34), &|g, v| {
        let y = g.add_scalar(v[0], 0.4);
        let y = g.mul(y, y)?;
        project(g, y)
    });
    run("transpose", std::slice::from_ref(&a34), &|g, v| {
        let y = g.transpose(v[0])?;
        project(g, y)
    });
    run("softmax rows", std::slice::from_ref(&a34), &|g, v| {
        let y = g.softmax(v[0], 1)?;
        project(g, y)
    });
    run("softmax columns", std::slice::from_ref(&a34), &|g, v| {
        let y = g.softmax(v[0], 0)?;
        project(g, y)
    });
    run("layer_norm", &[a34.clone(), gain.clone(), bias.clone()], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
        project(g, y)
    });
    run("embedding", std::slice::from_ref(&table), &|g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2])?;
        project(g, y)
    });
    run("concat", &[a34.clone(), b34.clone()], &|g, v| {
        let rows = g.concat(&[v[0], v[1]], 0)?;
        let cols = g.concat(&[v[1], v[0]], 1)?;
        let r = project(g, rows)?;
        let c = project(g, cols)?;
        g.add(r, c)
    });
    run("slice", std::slice::from_ref(&a34), &|g, v| {
        let r = g.slice(v[0], 0, 1, 3)?;
        let c = g.slice(v[0], 1, 1, 4)?;
        let r = project(g, r)?;
        let c = project(g, c)?;
        g.add(r, c)
    });
    run("row", std::slice::from_ref(&a34), &|g, v| {
        let y = g.row(v[0], 2)?;
        project(g, y)
    });
    run("gelu", std::slice::from_ref(&a34), &|g, v| {
        let y = g.gelu(v[0]);
        project(g, y)
    });
    run("relu", std::slice::from_ref(&positive), &|g, v| {
        let s = g.add_scalar(v[0], -1.0);
        let y = g.relu(s);
        project(g, y)
    });
    run("log", std::slice::from_ref(&positive), &|g, v| {
        let y = g.log(v[0]);
        project(g, y)
    });
    run("exp", std::slice::from_ref(&a34), &|g, v| {
        let y = g.exp(v[0]);
        project(g, y)
    });
    run("clamp", std::slice::from_ref(&v6), &|g, v| {
        let y = g.clamp(v[0], -10.0, 10.0);
        project(g, y)
    });
    run("cross_entropy", std::slice::from_ref(&a34), &|g, v| g.cross_entropy(v[0], &[0, 3, 3]));
    run("masked_fill", std::slice::from_ref(&a34), &|g, v| {
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
        let y = g.masked_fill(v[0], &mask, -2.0)?;
        project(g, y)
    });
    run("sum", std::slice::from_ref(&a34), &|g, v| {
        let s = g.mul(v[0], v[0])?;
        Ok(g.sum(s))
    });
    run("mean", std::slice::from_ref(&a34), &|g, v| {
        let s = g.mul(v[0], v[0])?;
        Ok(g.mean(s))
    });
    run("mean_rows", std::slice::from_ref(&a34), &|g, v| {
        let y = g.mean_rows(v[0])?;
        project(g, y)
    });
    run("attention block inputs", &[t(&[3, 8]), t(&[5, 8])], &|g, v| {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, &mut RngState::new(2))?;
        let mask = AttnMask::Keys(vec![true, true, false, true, true]);
        let y = block.forward(g, &store, v[0], v[1], &mask)?;
        project(g, y)
    });
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", 8, 2, &mut RngState::new(3)).unwrap();
    let x = random_tensor(&[4, 8], &mut RngState::new(4));
    let pc = check_params(&store, None, |s, g| {
        let xv = g.input(x.clone());
        let y = block.forward(g, s, xv, xv, &AttnMask::Causal)?;
        project(g, y)
    });
    out.push(("attention block parameters", pc.max_rel_err));
    out
}

fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        n_samples: 200,
        d_o: 8,
        ..WorldConfig::default()
    }
}

fn world_vocab(world: &World, cfg: &WorldConfig, size: usize) -> Vocab {
    Vocab::build(&world.vocab_corpus(cfg), size, 1.0).unwrap()
}

fn gradient_integrity() -> Outcome {
    let ops = per_op_errors();
    let (worst_op, worst_op_err) = ops
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let wcfg = tiny_world(5);
    let world = gen_synthetic(&wcfg).map_err(fail)?;
    let vocab = world_vocab(&world, &wcfg, 120);
    let limits = LayoutLimits {
        max_ocr: 8,
        max_caption: 8,
        max_labels: 4,
        max_regions: 3,
        max_total: 40,
    };
    let memes: Vec<MemeSample> = world
        .train
        .iter()
        .filter(|m| m.label == 1)
        .take(1)
        .chain(world.train.iter().filter(|m| m.label == 0).take(1))
        .map(|m| MemeSample {
            caption: Some(world.provenance.iter().find(|p| p.id == m.id).unwrap().reference_caption.clone()),
            ..m.clone()
        })
        .collect();
    let (examples, _) = build_examples(&memes, &vocab, InputFlags::default(), &limits, None).map_err(fail)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let mut parts = Vec::new();
    let mut worst_model = 0.0f64;
    for variant in [Variant::OneStream, Variant::TwoStream] {
        let cfg = TrnConfig {
            variant,
            d: 16,
            heads: 2,
            layers: 2,
            text_layers: 2,
            visual_layers: 2,
            co_layers: 2,
            dropout: 0.1,
            d_o: 8,
            limits,
        };
        let mut store = ParamStore::new();
        let model = Detector::new(&mut store, &cfg, vocab.len(), &mut RngState::with_stream(5, streams::INIT)).map_err(fail)?;
        let pc = check_params(&store, None, |s, g| model.batch_loss(g, s, &refs));
        worst_model = worst_model.max(pc.max_rel_err);
        parts.push(format!("{variant:?} {:.1e} over {} entries", pc.max_rel_err, pc.checked));
    }
    check(
        worst_model <= WHOLE_MODEL_GRAD_TOL && worst_op_err <= PER_OP_GRAD_TOL,
        format!(
            "whole model: {} (tol {WHOLE_MODEL_GRAD_TOL:.0e}); {} ops, worst {worst_op} {worst_op_err:.1e} (tol {PER_OP_GRAD_TOL:.0e})",
            parts.join(", "),
            ops.len()
        ),
    )
}

// ---------------------------------------------------------------- metric oracles

fn ngrams(words: &[String], n: usize) -> Vec<String> {
    if words.len() < n {
        return Vec::new();
    }
    (0..=words.len() - n).map(|i| words[i..i + n].join(" ")).collect()
}

/// Straightforward CIDEr-D: hash maps of joined n-grams, recomputed from scratch per call.
fn brute_cider_d(cand: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    let n_docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let df = |gram: &str| -> f64 {
            let hits = corpus
                .iter()
                .filter(|doc| doc.iter().any(|r| ngrams(r, n).iter().any(|x| x == gram)))
                .count();
            hits.max(1) as f64
        };
        let vector = |words: &[String]| -> HashMap<String, f64> {
            let grams = ngrams(words, n);
            let mut counts: HashMap<String, f64> = HashMap::new();
            for g in &grams {
                *counts.entry(g.clone()).or_default() += 1.0;
            }
            let len = grams.len() as f64;
            counts
                .into_iter()
                .map(|(g, c)| {
                    let w = c / len * (n_docs / df(&g)).ln();
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        let vc = vector(cand);
        let mut acc = 0.0;
        for r in refs {
            let vr = vector(r);
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, wc) in &vc {
                if let Some(wr) = vr.get(g) {
                    dot += wc.min(*wr) * wr;
                }
            }
            let delta = cand.len() as f64 - r.len() as f64;
            acc += dot / (nc * nr) * (-delta * delta / 72.0).exp();
        }
        total += acc / refs.len() as f64;
    }
    total / 4.0 * 10.0
}

fn random_sentence(rng: &mut RngState, alphabet: &[&str], max_len: usize) -> Vec<String> {
    let len = rng.below(max_len + 1);
    (0..len).map(|_| rng.choose(alphabet).to_string()).collect()
}

fn cider_oracle() -> Result<f64, String> {
    let alphabet = ["a", "dog", "cat", "runs", "on", "the", "grass", "red"];
    let mut rng = RngState::new(21);
    let mut worst = 0.0f64;
    for _ in 0..CIDER_CORPORA {
        let n_images = 1 + rng.below(5);
        let corpus: Vec<Vec<Vec<String>>> = (0..n_images)
            .map(|_| (0..1 + rng.below(4)).map(|_| random_sentence(&mut rng, &alphabet, 9)).collect())
            .collect();
        let cands: Vec<Vec<String>> = (0..n_images).map(|_| random_sentence(&mut rng, &alphabet, 9)).collect();
        let idf = IdfTable::build(&corpus).map_err(fail)?;
        let mut oracle_sum = 0.0;
        for (c, refs) in cands.iter().zip(&corpus) {
            let want = brute_cider_d(c, refs, &corpus);
            oracle_sum += want;
            worst = worst.max((cider_d(c, refs, &idf) - want).abs());
        }
        let corpus_score = corpus_cider(&cands, &corpus, &idf, CiderVariant::CiderD).map_err(fail)?;
        worst = worst.max((corpus_score - oracle_sum / n_images as f64).abs());
    }
    Ok(worst)
}

fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &sp) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sn) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Result<f64, String> {
    let mut rng = RngState::new(22);
    let mut worst = 0.0f64;
    for _ in 0..AUROC_SETS {
        let n = 2 + rng.below(40);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = 1 + rng.below(6);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / 4.0).collect();
        worst = worst.max((auroc(&scores, &labels).map_err(fail)? - mann_whitney(&scores, &labels)).abs());
    }
    Ok(worst)
}

fn metric_oracles() -> Outcome {
    let c = cider_oracle()?;
    let a = auroc_oracle()?;
    check(
        c <= CIDER_ORACLE_TOL && a <= AUROC_ORACLE_TOL,
        format!(
            "CIDEr-D max |diff| {c:.1e} on {CIDER_CORPORA} corpora (tol {CIDER_ORACLE_TOL:.0e}); AUROC max |diff| {a:.1e} on {AUROC_SETS} tied sets (tol {AUROC_ORACLE_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- captioner

struct CaptionSetup {
    vocab: Vocab,
    data: Vec<CaptionExample>,
    idf: IdfTable<String>,
}

fn caption_setup(n_images: usize, d_o: usize, max_len: usize) -> CaptionSetup {
    let wcfg = WorldConfig {
        n_samples: 200,
        n_caption_images: n_images,
        d_o,
        ..WorldConfig::default()
    };
    let world = gen_synthetic(&wcfg).unwrap();
    let vocab = world_vocab(&world, &wcfg, 400);
    let data: Vec<CaptionExample> = world
        .captions
        .iter()
        .map(|c| CaptionExample::from_sample(c, &vocab, max_len).unwrap())
        .collect();
    let idf = CaptionExample::idf(&data).unwrap();
    CaptionSetup { vocab, data, idf }
}

fn max_abs_grad_diff(a: &memetrn::numerics::Gradients, b: &BTreeMap<usize, Tensor>, store: &ParamStore) -> f64 {
    let mut worst = 0.0f64;
    for id in store.ids() {
        let zero = Tensor::zeros(store.get(id).shape());
        let ga = a.get(id).unwrap_or(&zero);
        let gb = b.get(&id.index()).unwrap_or(&zero);
        worst = worst.max(ga.max_abs_diff(gb));
    }
    worst
}

fn scst_correctness() -> Outcome {
    let setup = caption_setup(40, 8, 16);
    let cfg = CaptionerConfig {
        d: 16,
        heads: 2,
        layers: 1,
        d_o: 8,
        max_len: 16,
        dropout: 0.0,
        ..CaptionerConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, &cfg, setup.vocab.len(), &mut RngState::new(31)).map_err(fail)?;
    let warm = Schedule {
        steps: 150,
        batch_size: 8,
        lr: 3e-3,
        lr_end: None,
        seed: 31,
    };
    train_xe(&model, &mut store, &setup.data, &warm, |_| {}).map_err(fail)?;

    // Rewards are identically zero when no reference word can be produced.
    let unreachable: Vec<CaptionExample> = setup.data[..6]
        .iter()
        .map(|e| CaptionExample {
            refs: vec![vec!["qqqq".to_string()]],
            ..e.clone()
        })
        .collect();
    let zero_batch: Vec<&CaptionExample> = unreachable.iter().collect();
    let zero = scst_step(&model, &store, &zero_batch, &setup.vocab, &setup.idf, &mut RngState::new(32)).map_err(fail)?;
    let zero_ok = zero.advantages().iter().all(|&a| a == 0.0) && zero.grads.all_zero();

    // Surrogate gradient versus the advantage-weighted sum of per-sample log-likelihood gradients.
    let mut worst = f64::INFINITY;
    let mut nonzero = 0;
    for attempt in 0..20u64 {
        let batch: Vec<&CaptionExample> = setup.data.iter().skip(attempt as usize * 4).take(4).collect();
        let step = scst_step(&model, &store, &batch, &setup.vocab, &setup.idf, &mut RngState::with_stream(33 + attempt, streams::SAMPLE))
            .map_err(fail)?;
        let adv = step.advantages();
        nonzero = adv.iter().filter(|&&a| a != 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let mut expected: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut logprob_gap = 0.0f64;
        for ((ex, sample), a) in batch.iter().zip(&step.samples).zip(&adv) {
            let mut g = Graph::new();
            let nll = model.sequence_nll(&mut g, &store, &ex.regions, &sample.tokens).map_err(fail)?;
            logprob_gap = logprob_gap.max((g.scalar(nll) + sample.logprob()).abs());
            let grads = g.backward(nll).map_err(fail)?.into_params();
            for id in store.ids() {
                if let Some(gr) = grads.get(id) {
                    let slot = expected
                        .entry(id.index())
                        .or_insert_with(|| Tensor::zeros(gr.shape()));
                    for (e, v) in slot.data_mut().iter_mut().zip(gr.data()) {
                        *e += a * v / batch.len() as f64;
                    }
                }
            }
        }
        worst = max_abs_grad_diff(&step.grads, &expected, &store).max(logprob_gap);
        break;
    }
    check(
        zero_ok && worst <= SCST_EQUIV_TOL,
        format!(
            "zero-advantage grads exactly zero: {zero_ok}; surrogate vs advantage-weighted log-likelihood gradient max |diff| {worst:.1e} with {nonzero} nonzero advantages (tol {SCST_EQUIV_TOL:.0e})"
        ),
    )
}

fn captioner_training() -> Outcome {
    let setup = caption_setup(200, 32, 16);
    let cfg = CaptionerConfig {
        d: 32,
        heads: 4,
        layers: 2,
        d_o: 32,
        max_len: 16,
        dropout: 0.0,
        ..CaptionerConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, &cfg, setup.vocab.len(), &mut RngState::with_stream(0, streams::INIT)).map_err(fail)?;
    let batch = 10;
    let xe = Schedule {
        steps: 200 * setup.data.len() / batch,
        batch_size: batch,
        lr: 1e-4,
        lr_end: Some(4e-5),
        seed: 0,
    };
    train_xe(&model, &mut store, &setup.data, &xe, |_| {}).map_err(fail)?;
    let acc = token_accuracy(&model, &store, &setup.data).map_err(fail)?;
    let before = corpus_score(&model, &store, &setup.data, &setup.vocab, &setup.idf).map_err(fail)?;

    let scst = Schedule {
        steps: 200,
        batch_size: batch,
        lr: 4e-5,
        lr_end: None,
        seed: 0,
    };
    let mut prev = store.clone();
    let mut unchanged = 0;
    let report = train_scst(&model, &mut store, &setup.data, &setup.vocab, &setup.idf, &scst, |_, params| {
        if *params == prev {
            unchanged += 1;
        }
        prev = params.clone();
        Ok(())
    })
    .map_err(fail)?;
    let after = corpus_score(&model, &store, &setup.data, &setup.vocab, &setup.idf).map_err(fail)?;

    // A corpus whose references are unreachable gives only zero-advantage steps.
    let unreachable: Vec<CaptionExample> = setup.data[..20]
        .iter()
        .map(|e| CaptionExample {
            refs: vec![vec!["qqqq".to_string()]],
            ..e.clone()
        })
        .collect();
    let frozen = store.clone();
    let idle = Schedule { steps: 5, ..scst.clone() };
    let idle_report = train_scst(&model, &mut store, &unreachable, &setup.vocab, &setup.idf, &idle, |_, _| Ok(())).map_err(fail)?;
    let frozen_ok = store == frozen && idle_report.skipped == idle.steps;

    check(
        acc >= TOKEN_ACC_MIN && after >= before && unchanged == report.skipped && frozen_ok,
        format!(
            "XE token accuracy {acc:.4} (min {TOKEN_ACC_MIN}); corpus CIDEr-D {before:.4} -> {after:.4} after SCST; {} skipped steps, {unchanged} unchanged; all-zero-advantage run leaves parameters bit-identical: {frozen_ok}",
            report.skipped
        ),
    )
}

// ---------------------------------------------------------------- detector

fn detector_cfg(d: usize, dropout: f64) -> TrnConfig {
    TrnConfig {
        d,
        heads: 4,
        dropout,
        ..TrnConfig::default()
    }
}

fn overfit() -> Outcome {
    let wcfg = WorldConfig {
        n_samples: 200,
        ..WorldConfig::default()
    };
    let world = gen_synthetic(&wcfg).map_err(fail)?;
    let vocab = world_vocab(&world, &wcfg, 400);
    let memes = &world.train[..OVERFIT_SAMPLES];
    let cfg = detector_cfg(32, 0.0);
    let (examples, _) = build_examples(memes, &vocab, InputFlags::default(), &cfg.limits, None).map_err(fail)?;
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, &cfg, vocab.len(), &mut RngState::with_stream(0, streams::INIT)).map_err(fail)?;
    let sched = Schedule {
        steps: OVERFIT_STEPS,
        batch_size: OVERFIT_SAMPLES,
        lr: 1e-3,
        lr_end: None,
        seed: 0,
    };
    train_detector(&model, &mut store, &examples, &sched, |_| {}).map_err(fail)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, &store, &refs).map_err(fail)?;
    let bce = g.scalar(loss);
    check(
        bce < OVERFIT_BCE,
        format!("mean BCE {bce:.2e} on {OVERFIT_SAMPLES} fixed samples after {OVERFIT_STEPS} steps (max {OVERFIT_BCE})"),
    )
}

fn sized_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        split_sizes: Some(SplitSizes {
            train: 2000,
            dev: 500,
            test: 500,
        }),
        ..WorldConfig::default()
    }
}

fn dev_auroc(world: &World, vocab: &Vocab, flags: InputFlags, seed: u64) -> Result<f64, String> {
    let cfg = detector_cfg(32, 0.1);
    let (train, _) = build_examples(&world.train, vocab, flags, &cfg.limits, None).map_err(fail)?;
    let (dev, _) = build_examples(&world.dev, vocab, flags, &cfg.limits, None).map_err(fail)?;
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, &cfg, vocab.len(), &mut RngState::with_stream(seed, streams::INIT)).map_err(fail)?;
    let sched = Schedule {
        steps: 1500,
        batch_size: 16,
        lr: 1e-3,
        lr_end: None,
        seed,
    };
    train_detector(&model, &mut store, &train, &sched, |_| {}).map_err(fail)?;
    let probs = model.predict(&store, &dev).map_err(fail)?;
    let labels: Vec<u8> = dev.iter().map(|e| e.label).collect();
    auroc(&probs, &labels).map_err(fail)
}

fn multimodal_necessity() -> Outcome {
    let text_only = InputFlags {
        use_regions: false,
        use_object_labels: false,
        use_caption: false,
        ..InputFlags::default()
    };
    let vision_only = InputFlags {
        use_ocr: false,
        use_caption: false,
        ..InputFlags::default()
    };
    let mut ok = true;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let wcfg = sized_world(seed);
        let world = gen_synthetic(&wcfg).map_err(fail)?;
        let vocab = world_vocab(&world, &wcfg, 400);
        let fused = dev_auroc(&world, &vocab, InputFlags::default(), seed)?;
        let text = dev_auroc(&world, &vocab, text_only, seed)?;
        let vision = dev_auroc(&world, &vocab, vision_only, seed)?;
        ok &= fused >= FUSED_MIN_AUROC && text <= UNIMODAL_MAX_AUROC && vision <= UNIMODAL_MAX_AUROC;
        rows.push(format!("seed {seed}: fused {fused:.3} text {text:.3} vision {vision:.3}"));
    }
    check(
        ok,
        format!(
            "{} (need fused >= {FUSED_MIN_AUROC}, unimodal <= {UNIMODAL_MAX_AUROC})",
            rows.join("; ")
        ),
    )
}

fn caption_direction() -> Outcome {
    let mut gains = Vec::new();
    let mut rows = Vec::new();
    for seed in SEEDS {
        let wcfg = WorldConfig {
            caption_only: true,
            oracle_captions: true,
            ..sized_world(seed)
        };
        let world = gen_synthetic(&wcfg).map_err(fail)?;
        let vocab = world_vocab(&world, &wcfg, 400);
        let on = dev_auroc(&world, &vocab, InputFlags::default(), seed)?;
        let off = dev_auroc(
            &world,
            &vocab,
            InputFlags {
                use_caption: false,
                ..InputFlags::default()
            },
            seed,
        )?;
        gains.push(on - off);
        rows.push(format!("seed {seed}: on {on:.3} off {off:.3}"));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    check(
        mean >= CAPTION_GAIN_MIN,
        format!("{}; mean gain {mean:.3} (min {CAPTION_GAIN_MIN})", rows.join("; ")),
    )
}

// ---------------------------------------------------------------- data and reproducibility

fn dataset_statistics() -> Outcome {
    let world = gen_synthetic(&WorldConfig::default()).map_err(fail)?;
    let count = |m: &[MemeSample]| (m.len(), m.iter().filter(|x| x.label == 1).count());
    let (train, dev, test) = (count(&world.train), count(&world.dev), count(&world.test));
    let frac = train.1 as f64 / train.0 as f64;
    let ids: HashSet<&str> = world.memes().map(|m| m.id.as_str()).collect();
    let ok = train == (8500, 3060)
        && dev == (500, 250)
        && test == (1000, 500)
        && (frac - 0.36).abs() <= 0.01
        && ids.len() == 10_000;
    check(
        ok,
        format!(
            "train {}/{} hateful ({:.2}%), dev {}/{}, test {}/{}, {} distinct ids",
            train.1,
            train.0,
            100.0 * frac,
            dev.1,
            dev.0,
            test.1,
            test.0,
            ids.len()
        ),
    )
}

const REPRO_CONFIG: &str = r#"
seed = 9
threads = 2
[world]
n_samples = 400
n_caption_images = 40
[model]
d = 16
heads = 2
[detector]
steps = 40
[captioner.model]
d = 16
heads = 2
max_len = 16
[captioner.xe]
steps = 40
[captioner.scst]
steps = 20
[captioner]
eval_every = 10
"#;

fn memetrn(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_memetrn"))
        .args(args)
        .output()
        .map_err(fail)?;
    if !out.status.success() {
        return Err(format!("memetrn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline(root: &Path) -> Result<String, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = p("run.toml");
    std::fs::write(&cfg, REPRO_CONFIG).map_err(fail)?;
    let mut stdout = String::new();
    stdout += &memetrn(&["gen-data", "--config", &cfg, "--out", &p("data")])?;
    stdout += &memetrn(&["train-captioner", "--config", &cfg, "--data", &p("data"), "--out", &p("captioner"), "--scst"])?;
    stdout += &memetrn(&["caption", "--model", &p("captioner/captioner.ckpt"), "--data", &p("data"), "--out", &p("captioned")])?;
    stdout += &memetrn(&["train-detector", "--config", &cfg, "--data", &p("captioned"), "--out", &p("detector")])?;
    stdout += &memetrn(&["predict", "--model", &p("detector/detector.ckpt"), "--data", &p("captioned/test.jsonl"), "--out", &p("test.csv")])?;
    stdout += &memetrn(&["eval", "--pred", &p("test.csv"), "--gold", &p("captioned/test.jsonl")])?;
    stdout += &memetrn(&["ablate", "--config", &cfg, "--data", &p("captioned"), "--out", &p("ablate")])?;
    Ok(stdout.replace(&root.to_string_lossy().into_owned(), "<root>"))
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir_all(d).map_err(fail)?;
    }
    let out_a = pipeline(&a)?;
    let out_b = pipeline(&b)?;
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = fa.keys().eq(fb.keys());
    let checkpoints = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    check(
        same_set && differing.is_empty() && out_a == out_b,
        format!(
            "{} output files ({checkpoints} checkpoints) across gen-data, train-captioner --scst, caption, train-detector, predict, eval, ablate; differing: {:?}; stdout identical: {}",
            fa.len(),
            differing,
            out_a == out_b
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient-integrity", gradient_integrity),
        ("metric-oracles", metric_oracles),
        ("scst-correctness", scst_correctness),
        ("overfit-sanity", overfit),
        ("multimodal-necessity", multimodal_necessity),
        ("caption-direction", caption_direction),
        ("captioner-training", captioner_training),
        ("dataset-statistics", dataset_statistics),
        ("reproducibility", reproducibility),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
