//! The five pipeline stages over a data directory and a run directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ucap_core::evalkit::{self, Caption, EvalReport};
use ucap_core::models::{ModelConfig, Models};
use ucap_core::textcorpus::{
    build_vocab, decode_ids, encode, filter_corpus, tokenize, TokenSentence, Vocabulary, MAX_UNK_FRACTION,
    MIN_SENTENCE_WORDS,
};
use ucap_core::trainer::{init_pipeline, InitReport, TrainData, TrainLog, Trainer};
use ucap_core::worldsim::{
    default_templates, detect_concepts, gen_world, sample_concept_set, sentence_for_set, synth_corpus,
    ConceptDictionary, ImageFeature,
};

use crate::config::RunConfig;
use crate::formats::{self, CaptionLine, ReferenceLine, TruthLine};

pub const DICTIONARY: &str = "dictionary.txt";
pub const FEATURES: &str = "features.ufea";
pub const DETECTIONS: &str = "detections.jsonl";
pub const CORPUS: &str = "corpus.txt";
pub const TEST_FEATURES: &str = "test_features.ufea";
pub const TRUTH: &str = "truth.jsonl";
pub const REFERENCES: &str = "references.jsonl";

pub const CONFIG: &str = "config.toml";
pub const VOCAB: &str = "vocab.txt";
pub const INIT_CKPT: &str = "init.ckpt";
pub const INIT_REPORT: &str = "init_report.json";
pub const PSEUDO_CAPTIONS: &str = "pseudo_captions.jsonl";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TRAINLOG_CSV: &str = "trainlog.csv";
pub const TRAINLOG_JSONL: &str = "trainlog.jsonl";
pub const CAPTIONS: &str = "captions.jsonl";
pub const REPORT: &str = "report.json";

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const WORLD_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    formats::write_atomic(&dir.join(CONFIG), cfg.to_toml()?.as_bytes())
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        bail!("missing {}: {hint}", path.display())
    }
}

/// Writes a synthetic dataset: train features with detections, held-out
/// test features with references, ground truth for both, the concept
/// dictionary and an unpaired sentence corpus.
pub fn gen_world_stage(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.data_dir()?;
    let world = gen_world(cfg.seed, &cfg.world_config()).map_err(|e| anyhow!("{e}"))?;
    let mut rng = stream(cfg.seed, WORLD_STREAM);
    let n_train = cfg.world.num_images;
    let (train, test) = world.images.split_at(n_train);
    let dict = &world.dictionary;

    let det_cfg = cfg.detector_config();
    let dets = train
        .iter()
        .map(|im| detect_concepts(im, dict, &det_cfg, &mut rng).map_err(|e| anyhow!("{e}")))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = train.iter().map(|im| im.id.clone()).collect();

    let templates = default_templates();
    let sets: Vec<Vec<usize>> = (0..cfg.world.corpus_sentences)
        .map(|_| sample_concept_set(&mut rng, cfg.world.num_concepts, cfg.world.min_concepts, cfg.world.max_concepts))
        .collect();
    let corpus = synth_corpus(&sets, &templates, dict, cfg.world.corpus_sentences, &mut rng).map_err(|e| anyhow!("{e}"))?;

    let truth: Vec<TruthLine> = world
        .images
        .iter()
        .map(|im| TruthLine {
            id: im.id.clone(),
            concepts: im.truth_concepts.iter().flatten().map(|&c| dict.word(c).to_string()).collect(),
        })
        .collect();
    let mut refs = Vec::with_capacity(test.len());
    for im in test {
        let set = im.truth_concepts.as_deref().unwrap_or(&[]);
        let references = (0..cfg.world.references_per_image)
            .map(|_| sentence_for_set(set, &templates, dict, &mut rng).map_err(|e| anyhow!("{e}")))
            .collect::<Result<Vec<_>>>()?;
        refs.push(ReferenceLine { id: im.id.clone(), references });
    }

    formats::write_atomic(&dir.join(DICTIONARY), &formats::encode_words(dict.words()))?;
    formats::write_atomic(&dir.join(FEATURES), &formats::encode_features(train)?)?;
    formats::write_atomic(&dir.join(DETECTIONS), &formats::to_jsonl(&formats::detection_lines(&ids, &dets))?)?;
    formats::write_atomic(&dir.join(CORPUS), corpus.iter().map(|s| format!("{s}\n")).collect::<String>().as_bytes())?;
    formats::write_atomic(&dir.join(TEST_FEATURES), &formats::encode_features(test)?)?;
    formats::write_atomic(&dir.join(TRUTH), &formats::to_jsonl(&truth)?)?;
    formats::write_atomic(&dir.join(REFERENCES), &formats::to_jsonl(&refs)?)?;
    echo_config(cfg, dir)?;
    info!(
        "wrote {} train and {} test images, {} sentences to {}",
        train.len(),
        test.len(),
        corpus.len(),
        dir.display()
    );
    Ok(())
}

/// Everything the init and train stages read from the data directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dictionary: ConceptDictionary,
    pub vocab: Vocabulary,
    pub data: TrainData,
}

fn read_truth(dir: &Path, dict: &ConceptDictionary) -> Result<Option<std::collections::HashMap<String, Vec<usize>>>> {
    let path = dir.join(TRUTH);
    if !path.is_file() {
        return Ok(None);
    }
    let lines: Vec<TruthLine> = formats::from_jsonl(&formats::read_text(&path)?)?;
    let mut out = std::collections::HashMap::new();
    for l in lines {
        let idx = l
            .concepts
            .iter()
            .map(|w| dict.index_of(w).ok_or_else(|| anyhow!("truth for {} names unknown concept {w}", l.id)))
            .collect::<Result<Vec<_>>>()?;
        out.insert(l.id, idx);
    }
    Ok(Some(out))
}

fn read_features(path: &Path, truth: Option<&std::collections::HashMap<String, Vec<usize>>>) -> Result<Vec<ImageFeature>> {
    let mut feats = formats::decode_features(&formats::read(path)?).with_context(|| format!("in {}", path.display()))?;
    if let Some(t) = truth {
        for f in &mut feats {
            f.truth_concepts = t.get(&f.id).cloned();
        }
    }
    Ok(feats)
}

/// Reads the data directory and builds the vocabulary from the corpus.
/// The vocabulary depends only on the corpus, so every stage rebuilds the
/// same one.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir()?;
    let hint = "run `ucap gen-world` or point --data at a dataset";
    let dictionary = ConceptDictionary::new(formats::decode_words(&formats::read_text(&require(dir.join(DICTIONARY), hint)?)?)?)
        .map_err(|e| anyhow!("{e}"))?;
    let truth = read_truth(dir, &dictionary)?;
    let images = read_features(&require(dir.join(FEATURES), hint)?, truth.as_ref())?;
    let ids: Vec<String> = images.iter().map(|f| f.id.clone()).collect();
    let det_lines = formats::from_jsonl(&formats::read_text(&require(dir.join(DETECTIONS), hint)?)?)?;
    let detections = formats::align_detections(&ids, det_lines)?;
    let text = formats::decode_lines(&formats::read_text(&require(dir.join(CORPUS), hint)?)?);
    let toks: Vec<Vec<String>> = text.iter().map(|s| tokenize(s)).collect();
    let vocab = build_vocab(&toks, cfg.text.min_freq, dictionary.words()).map_err(|e| anyhow!("{e}"))?;
    let kept = filter_corpus(&toks, MIN_SENTENCE_WORDS, MAX_UNK_FRACTION, &vocab);
    if kept.is_empty() {
        bail!("no corpus sentence survives filtering (min {MIN_SENTENCE_WORDS} words, at most {MAX_UNK_FRACTION} unknown)");
    }
    let corpus = kept
        .iter()
        .map(|s| encode(s, &vocab).map_err(|e| anyhow!("{e}")))
        .collect::<Result<Vec<TokenSentence>>>()?;
    info!("corpus: {} of {} sentences kept, vocabulary {}", corpus.len(), text.len(), vocab.len());
    let data = TrainData::new(images, detections, corpus, &vocab, &dictionary).map_err(|e| anyhow!("{e}"))?;
    Ok(Dataset { dictionary, vocab, data })
}

fn fresh_models(cfg: &RunConfig, vocab_len: usize, dim: usize) -> Result<Models> {
    let mut rng = stream(cfg.seed, MODEL_STREAM);
    Models::new(ModelConfig::new(vocab_len, dim).with_width(cfg.model.hidden), &mut rng).map_err(|e| anyhow!("{e}"))
}

fn feature_dim(data: &TrainData) -> Result<usize> {
    data.images.first().map(|f| f.vector.len()).ok_or_else(|| anyhow!("dataset has no images"))
}

#[derive(Debug, Serialize)]
struct InitReportJson<'a> {
    con2sen_pairs: usize,
    skipped_sentences: usize,
    pseudo_pairs: usize,
    skipped_images: &'a [String],
    con2sen_loss: (f64, f64),
    feat2sen_loss: (f64, f64),
    mean_q_real: f64,
    mean_q_fake: f64,
}

pub fn init_stage(cfg: &RunConfig) -> Result<InitReport> {
    let out = cfg.out_dir()?;
    let ds = load_dataset(cfg)?;
    let mut models = fresh_models(cfg, ds.vocab.len(), feature_dim(&ds.data)?)?;
    let tc = cfg.train_config()?;
    let mut rng = stream(cfg.seed, INIT_STREAM);
    let rep = init_pipeline(&mut models, &ds.data, &ds.dictionary, &ds.vocab, &tc, &mut rng).map_err(|e| anyhow!("{e}"))?;
    let pseudo: Vec<CaptionLine> = rep
        .pseudo_captions
        .iter()
        .map(|(id, ids)| Ok(CaptionLine { id: id.clone(), caption: decode_ids(ids, &ds.vocab)?.join(" ") }))
        .collect::<Result<_, ucap_core::textcorpus::TextError>>()
        .map_err(|e| anyhow!("{e}"))?;
    let json = InitReportJson {
        con2sen_pairs: rep.con2sen_pairs,
        skipped_sentences: rep.skipped_sentences,
        pseudo_pairs: rep.pseudo_pairs,
        skipped_images: &rep.skipped_images,
        con2sen_loss: rep.con2sen_loss,
        feat2sen_loss: rep.feat2sen_loss,
        mean_q_real: rep.mean_q_real,
        mean_q_fake: rep.mean_q_fake,
    };
    formats::write_atomic(&out.join(VOCAB), &formats::encode_words(ds.vocab.words()))?;
    formats::write_atomic(&out.join(PSEUDO_CAPTIONS), &formats::to_jsonl(&pseudo)?)?;
    formats::write_atomic(&out.join(INIT_REPORT), serde_json::to_string_pretty(&json)?.as_bytes())?;
    formats::write_atomic(&out.join(INIT_CKPT), &models.params.to_checkpoint())?;
    echo_config(cfg, out)?;
    info!(
        "init: {} pseudo pairs, con2sen loss {:.3} -> {:.3}, feat2sen loss {:.3} -> {:.3}, q real/fake {:.3}/{:.3}",
        rep.pseudo_pairs,
        rep.con2sen_loss.0,
        rep.con2sen_loss.1,
        rep.feat2sen_loss.0,
        rep.feat2sen_loss.1,
        rep.mean_q_real,
        rep.mean_q_fake
    );
    Ok(rep)
}

fn load_models(models: &mut Models, path: &Path) -> Result<()> {
    let bytes = formats::read(path)?;
    let n = models.params.load_checkpoint(&bytes).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let want = models.params.iter().count();
    if n != want {
        bail!("{} holds {n} tensors, the model has {want}", path.display());
    }
    Ok(())
}

pub fn train_stage(cfg: &RunConfig) -> Result<TrainLog> {
    let out = cfg.out_dir()?;
    let init_ckpt = cfg.init_dir()?.join(INIT_CKPT);
    if !cfg.train.skip_init && !init_ckpt.is_file() {
        bail!(
            "no initialization checkpoint at {}: run `ucap init-pipeline` first, or pass --skip-init to train from random weights",
            init_ckpt.display()
        );
    }
    let ds = load_dataset(cfg)?;
    let mut models = fresh_models(cfg, ds.vocab.len(), feature_dim(&ds.data)?)?;
    if !cfg.train.skip_init {
        load_models(&mut models, &init_ckpt)?;
    }
    let tc = cfg.train_config()?;
    let steps = tc.steps;
    let every = (steps / 20).max(1);
    let mut trainer = Trainer::new(tc).map_err(|e| anyhow!("{e}"))?;
    info!("training {} for {steps} steps", trainer.cfg.objectives.label());
    let log = trainer
        .train(&mut models, &ds.data, |r, _| {
            if r.step % every == 0 {
                info!(
                    "step {} l_adv {:.3} l_im {:.3} l_sen {:.3} r_adv {:.3} r_c {:.3} r_im {:.3} concepts {:.3}",
                    r.step, r.l_adv, r.l_im, r.l_sen, r.mean_r_adv, r.mean_r_c, r.mean_r_im, r.avg_concepts
                );
            }
            Ok(())
        })
        .map_err(|e| anyhow!("{e}"))?;
    formats::write_atomic(&out.join(VOCAB), &formats::encode_words(ds.vocab.words()))?;
    formats::write_atomic(&out.join(TRAINLOG_CSV), &formats::trainlog_csv(&log)?)?;
    formats::write_atomic(&out.join(TRAINLOG_JSONL), &formats::trainlog_jsonl(&log)?)?;
    formats::write_atomic(&out.join(MODEL_CKPT), &models.params.to_checkpoint())?;
    echo_config(cfg, out)?;
    Ok(log)
}

/// The run's vocabulary and the models stored in `checkpoint`.
pub fn load_run(cfg: &RunConfig, checkpoint: &Path, feature_dim: usize) -> Result<(Models, Vocabulary)> {
    let vocab_path = require(cfg.out_dir()?.join(VOCAB), "run `ucap init-pipeline` or `ucap train` first")?;
    let vocab = Vocabulary::from_words(formats::decode_words(&formats::read_text(&vocab_path)?)?).map_err(|e| anyhow!("{e}"))?;
    let mut models = fresh_models(cfg, vocab.len(), feature_dim)?;
    load_models(&mut models, checkpoint)?;
    Ok((models, vocab))
}

/// Beam-search captions for the held-out features (or `features` if given)
/// from `checkpoint` (default: the run's trained model).
pub fn generate_stage(cfg: &RunConfig, checkpoint: Option<&Path>, features: Option<&Path>) -> Result<Vec<Caption>> {
    let out = cfg.out_dir()?;
    let feats = match features {
        Some(p) => read_features(p, None)?,
        None => read_features(&require(cfg.data_dir()?.join(TEST_FEATURES), "run `ucap gen-world` first")?, None)?,
    };
    let dim = feats.first().map(|f| f.vector.len()).ok_or_else(|| anyhow!("no features to caption"))?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => require(out.join(MODEL_CKPT), "run `ucap train` first")?,
    };
    let (models, vocab) = load_run(cfg, &ckpt, dim)?;
    let caps = evalkit::generate_captions(&models, &feats, &vocab, cfg.eval.beam_size, cfg.eval.length_cap)
        .map_err(|e| anyhow!("{e}"))?;
    formats::write_atomic(&out.join(CAPTIONS), &formats::to_jsonl(&formats::caption_lines(&caps))?)?;
    echo_config(cfg, out)?;
    Ok(caps)
}

/// Scores the run's captions against the dataset references and ground
/// truth concepts.
pub fn evaluate_stage(cfg: &RunConfig) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let data = cfg.data_dir()?;
    let caps_text = formats::read_text(&require(out.join(CAPTIONS), "run `ucap generate` first")?)?;
    let captions = formats::captions_from_lines(formats::from_jsonl(&caps_text)?);
    let refs: Vec<ReferenceLine> =
        formats::from_jsonl(&formats::read_text(&require(data.join(REFERENCES), "the dataset has no references")?)?)?;
    let truth: Vec<TruthLine> =
        formats::from_jsonl(&formats::read_text(&require(data.join(TRUTH), "the dataset has no ground truth")?)?)?;
    let refs: std::collections::HashMap<String, Vec<Vec<String>>> = refs
        .into_iter()
        .map(|r| (r.id, r.references.iter().map(|s| tokenize(s)).collect()))
        .collect();
    let truth: std::collections::HashMap<String, Vec<String>> = truth.into_iter().map(|t| (t.id, t.concepts)).collect();
    let mut references = Vec::with_capacity(captions.len());
    let mut concepts = Vec::with_capacity(captions.len());
    for c in &captions {
        references.push(refs.get(&c.id).cloned().ok_or_else(|| anyhow!("no references for image {}", c.id))?);
        concepts.push((c.id.clone(), truth.get(&c.id).cloned().ok_or_else(|| anyhow!("no ground truth for image {}", c.id))?));
    }
    let report = evalkit::evaluate(captions, &references, &concepts, cfg.count_mode()?).map_err(|e| anyhow!("{e}"))?;
    let json = formats::ReportJson::from(&report);
    formats::write_atomic(&out.join(REPORT), serde_json::to_string_pretty(&json)?.as_bytes())?;
    echo_config(cfg, out)?;
    info!(
        "BLEU-1..4 {:.3} {:.3} {:.3} {:.3}, correct concepts {:.3} over {} images",
        report.bleu1, report.bleu2, report.bleu3, report.bleu4, report.avg_correct_concepts, report.num_images
    );
    Ok(report)
}
