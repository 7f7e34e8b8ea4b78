//! Synthetic corpora with controllable semantics.
//!
//! Sentences are bags of topic words over a vocabulary of disjoint
//! synonym sets plus shared function words. Each sentence is generated
//! from a latent set of topics; entailments share the anchor's latent
//! topics, contradictions use disjoint ones, and STS gold scores are
//! five times the topic-overlap fraction of the generating latents.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::{Error, Result};

/// Fixed sentence length; the last position carries the mask token so
/// mask-token pooling needs no padding logic.
pub const SENTENCE_LEN: usize = 12;
/// Latent topics per sentence.
pub const TOPICS_PER_SENTENCE: usize = 4;
/// Probability of emitting a function word at a content position.
const FUNCTION_WORD_PROB: f64 = 0.25;

pub type Sentence = Vec<usize>;

/// Vocabulary layout: `[pad, mask, function words..., content words...]`
/// where content words are grouped into synonym sets of size
/// `synonyms_per_word`, `words_per_topic` sets per topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub synonyms_per_word: usize,
    pub function_words: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            n_topics: 16,
            words_per_topic: 4,
            synonyms_per_word: 3,
            function_words: 8,
        }
    }
}

impl VocabSpec {
    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        1
    }

    pub fn function_base(&self) -> usize {
        2
    }

    pub fn content_base(&self) -> usize {
        2 + self.function_words
    }

    pub fn vocab_size(&self) -> usize {
        self.content_base() + self.n_topics * self.words_per_topic * self.synonyms_per_word
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 * TOPICS_PER_SENTENCE {
            return Err(Error::config(format!(
                "need at least {} topics to build disjoint contradictions, got {}",
                2 * TOPICS_PER_SENTENCE,
                self.n_topics
            )));
        }
        if self.words_per_topic == 0 || self.synonyms_per_word == 0 {
            return Err(Error::config(
                "words_per_topic and synonyms_per_word must be positive",
            ));
        }
        Ok(())
    }

    /// Topic owning a content token, `None` for reserved/function ids.
    pub fn topic_of(&self, token: usize) -> Option<usize> {
        let base = self.content_base();
        if token < base || token >= self.vocab_size() {
            return None;
        }
        Some((token - base) / (self.words_per_topic * self.synonyms_per_word))
    }

    /// All ids in the same synonym set as `token` (singleton for
    /// function words and reserved ids).
    pub fn synonym_set(&self, token: usize) -> Vec<usize> {
        let base = self.content_base();
        if token < base || token >= self.vocab_size() {
            return vec![token];
        }
        let set = (token - base) / self.synonyms_per_word;
        let start = base + set * self.synonyms_per_word;
        (start..start + self.synonyms_per_word).collect()
    }

    fn sample_token(&self, topics: &[usize], rng: &mut impl Rng) -> usize {
        if rng.gen::<f64>() < FUNCTION_WORD_PROB {
            return self.function_base() + rng.gen_range(0..self.function_words);
        }
        let topic = topics[rng.gen_range(0..topics.len())];
        let word = rng.gen_range(0..self.words_per_topic);
        let syn = rng.gen_range(0..self.synonyms_per_word);
        self.content_base()
            + topic * self.words_per_topic * self.synonyms_per_word
            + word * self.synonyms_per_word
            + syn
    }

    /// Generates one sentence from latent topics: content positions
    /// then the trailing mask token.
    pub fn sample_sentence(&self, topics: &[usize], rng: &mut impl Rng) -> Sentence {
        let mut s: Sentence = (0..SENTENCE_LEN - 1)
            .map(|_| self.sample_token(topics, rng))
            .collect();
        s.push(self.mask_id());
        s
    }

    fn sample_topics(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut all: Vec<usize> = (0..self.n_topics).collect();
        all.shuffle(rng);
        let mut t: Vec<usize> = all.into_iter().take(TOPICS_PER_SENTENCE).collect();
        t.sort_unstable();
        t
    }

    fn sample_disjoint_topics(&self, avoid: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let mut rest: Vec<usize> = (0..self.n_topics).filter(|t| !avoid.contains(t)).collect();
        rest.shuffle(rng);
        let mut t: Vec<usize> = rest.into_iter().take(TOPICS_PER_SENTENCE).collect();
        t.sort_unstable();
        t
    }
}

/// An (anchor, entailment, contradiction) item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: Sentence,
    pub entail: Sentence,
    pub contra: Sentence,
}

/// A scored sentence pair with gold similarity in `[0, 5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub s1: Sentence,
    pub s2: Sentence,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub unlabeled: usize,
    pub triplets: usize,
    pub sts_train: usize,
    pub sts_dev: usize,
    pub sts_test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            unlabeled: 2000,
            triplets: 512,
            sts_train: 64,
            sts_dev: 128,
            sts_test: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: VocabSpec,
    pub unlabeled: Vec<Sentence>,
    pub triplets: Vec<Triplet>,
    pub sts_train: Vec<ScoredPair>,
    pub sts_dev: Vec<ScoredPair>,
    pub sts_test: Vec<ScoredPair>,
}

/// Samples a scored pair together with its latent overlap fraction.
pub fn sample_scored_pair(
    spec: &VocabSpec,
    rng: &mut impl Rng,
) -> (ScoredPair, f64) {
    let k = TOPICS_PER_SENTENCE;
    let overlap = rng.gen_range(0..=k);
    let first = spec.sample_topics(rng);
    let mut shared: Vec<usize> = first.clone();
    shared.shuffle(rng);
    shared.truncate(overlap);
    let mut pool: Vec<usize> = (0..spec.n_topics).filter(|t| !first.contains(t)).collect();
    pool.shuffle(rng);
    let mut second: Vec<usize> = shared;
    second.extend(pool.into_iter().take(k - overlap));
    second.sort_unstable();
    let fraction = overlap as f64 / k as f64;
    let pair = ScoredPair {
        s1: spec.sample_sentence(&first, rng),
        s2: spec.sample_sentence(&second, rng),
        score: 5.0 * fraction,
    };
    (pair, fraction)
}

/// Deterministic corpus generation. Splits are sentence-disjoint:
/// a record is regenerated if any of its sentences already appears in
/// a different split.
pub fn gen_corpus(spec: &VocabSpec, sizes: &CorpusSizes, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    const SPLITS: usize = 5;
    let mut seen: Vec<HashSet<Sentence>> = vec![HashSet::new(); SPLITS];
    const MAX_RETRIES: usize = 200;

    let admit = |split: usize,
                     seen: &mut Vec<HashSet<Sentence>>,
                     sentences: &[&Sentence]|
     -> bool {
        let clash = sentences.iter().any(|s| {
            seen.iter()
                .enumerate()
                .any(|(i, set)| i != split && set.contains(*s))
        });
        if clash {
            return false;
        }
        for s in sentences {
            seen[split].insert((*s).clone());
        }
        true
    };

    let mut rng = seeds::rng(seed, &[0xC0]);

    let mut unlabeled = Vec::with_capacity(sizes.unlabeled);
    for _ in 0..sizes.unlabeled {
        let mut ok = false;
        for _ in 0..MAX_RETRIES {
            let topics = spec.sample_topics(&mut rng);
            let s = spec.sample_sentence(&topics, &mut rng);
            if admit(0, &mut seen, &[&s]) {
                unlabeled.push(s);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::config(
                "vocabulary too small to keep corpus splits disjoint",
            ));
        }
    }

    let mut triplets = Vec::with_capacity(sizes.triplets);
    for _ in 0..sizes.triplets {
        let mut ok = false;
        for _ in 0..MAX_RETRIES {
            let topics = spec.sample_topics(&mut rng);
            let other = spec.sample_disjoint_topics(&topics, &mut rng);
            let t = Triplet {
                anchor: spec.sample_sentence(&topics, &mut rng),
                entail: spec.sample_sentence(&topics, &mut rng),
                contra: spec.sample_sentence(&other, &mut rng),
            };
            if admit(1, &mut seen, &[&t.anchor, &t.entail, &t.contra]) {
                triplets.push(t);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::config(
                "vocabulary too small to keep corpus splits disjoint",
            ));
        }
    }

    let sts = |split: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng, seen: &mut Vec<HashSet<Sentence>>| -> Result<Vec<ScoredPair>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..MAX_RETRIES {
                let (pair, _) = sample_scored_pair(spec, rng);
                if admit(split, seen, &[&pair.s1, &pair.s2]) {
                    out.push(pair);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::config(
                    "vocabulary too small to keep corpus splits disjoint",
                ));
            }
        }
        Ok(out)
    };

    let sts_train = sts(2, sizes.sts_train, &mut rng, &mut seen)?;
    let sts_dev = sts(3, sizes.sts_dev, &mut rng, &mut seen)?;
    let sts_test = sts(4, sizes.sts_test, &mut rng, &mut seen)?;

    Ok(Corpus {
        vocab: spec.clone(),
        unlabeled,
        triplets,
        sts_train,
        sts_dev,
        sts_test,
    })
}

// ── JSONL + vocab file I/O ──────────────────────────────────────────

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::Input(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line)
            .map_err(|e| data_err(path, i + 1, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Input(format!("cannot serialize record: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    load_jsonl(path)
}

pub fn save_triplets(triplets: &[Triplet], path: &Path) -> Result<()> {
    save_jsonl(triplets, path)
}

pub fn load_pairs(path: &Path) -> Result<Vec<ScoredPair>> {
    let pairs: Vec<ScoredPair> = load_jsonl(path)?;
    for (i, p) in pairs.iter().enumerate() {
        if !(0.0..=5.0).contains(&p.score) || !p.score.is_finite() {
            return Err(data_err(
                path,
                i + 1,
                format!("score {} outside the valid range [0, 5]", p.score),
            ));
        }
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[ScoredPair], path: &Path) -> Result<()> {
    save_jsonl(pairs, path)
}

#[derive(Serialize, Deserialize)]
struct UnlabeledRecord {
    tokens: Sentence,
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<Sentence>> {
    Ok(load_jsonl::<UnlabeledRecord>(path)?
        .into_iter()
        .map(|r| r.tokens)
        .collect())
}

pub fn save_unlabeled(sentences: &[Sentence], path: &Path) -> Result<()> {
    let records: Vec<UnlabeledRecord> = sentences
        .iter()
        .map(|s| UnlabeledRecord { tokens: s.clone() })
        .collect();
    save_jsonl(&records, path)
}

/// Writes the whole corpus into a directory: `vocab.json`,
/// `unlabeled.jsonl`, `triplets.jsonl`, `sts_{train,dev,test}.jsonl`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let vocab = serde_json::to_string_pretty(&corpus.vocab)
        .map_err(|e| Error::Input(format!("cannot serialize vocab: {e}")))?;
    fs::write(dir.join("vocab.json"), vocab)?;
    save_unlabeled(&corpus.unlabeled, &dir.join("unlabeled.jsonl"))?;
    save_triplets(&corpus.triplets, &dir.join("triplets.jsonl"))?;
    save_pairs(&corpus.sts_train, &dir.join("sts_train.jsonl"))?;
    save_pairs(&corpus.sts_dev, &dir.join("sts_dev.jsonl"))?;
    save_pairs(&corpus.sts_test, &dir.join("sts_test.jsonl"))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join("vocab.json");
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| {
        Error::Input(format!("cannot open {}: {e}", vocab_path.display()))
    })?;
    let vocab: VocabSpec = serde_json::from_str(&vocab_text)
        .map_err(|e| data_err(&vocab_path, 1, e.to_string()))?;
    Ok(Corpus {
        vocab,
        unlabeled: load_unlabeled(&dir.join("unlabeled.jsonl"))?,
        triplets: load_triplets(&dir.join("triplets.jsonl"))?,
        sts_train: load_pairs(&dir.join("sts_train.jsonl"))?,
        sts_dev: load_pairs(&dir.join("sts_dev.jsonl"))?,
        sts_test: load_pairs(&dir.join("sts_test.jsonl"))?,
    })
}

// ── Spearman rank correlation ───────────────────────────────────────

/// Mid-ranks (ties get the average of their rank run).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
/// Returns `None` when either vector is constant (undefined).
pub fn spearman(preds: &[f64], golds: &[f64]) -> Result<Option<f64>> {
    if preds.len() != golds.len() {
        return Err(Error::input(format!(
            "spearman arguments differ in length: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::input("spearman needs at least two observations"));
    }
    let rp = ranks(preds);
    let rg = ranks(golds);
    let n = rp.len() as f64;
    let mp = rp.iter().sum::<f64>() / n;
    let mg = rg.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for i in 0..rp.len() {
        let dp = rp[i] - mp;
        let dg = rg[i] - mg;
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (vp * vg).sqrt()).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_identical_corpora() {
        let spec = VocabSpec::default();
        let sizes = CorpusSizes {
            unlabeled: 20,
            triplets: 10,
            sts_train: 5,
            sts_dev: 5,
            sts_test: 5,
        };
        let a = gen_corpus(&spec, &sizes, 42).unwrap();
        let b = gen_corpus(&spec, &sizes, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&spec, &sizes, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn triplet_topics_respect_entail_contra_structure() {
        let spec = VocabSpec::default();
        let sizes = CorpusSizes {
            unlabeled: 0,
            triplets: 40,
            sts_train: 0,
            sts_dev: 0,
            sts_test: 0,
        };
        let corpus = gen_corpus(&spec, &sizes, 7).unwrap();
        for t in &corpus.triplets {
            let topics = |s: &Sentence| -> HashSet<usize> {
                s.iter().filter_map(|&tok| spec.topic_of(tok)).collect()
            };
            let anchor = topics(&t.anchor);
            let entail = topics(&t.entail);
            let contra = topics(&t.contra);
            // entailment topics drawn from the anchor's latent set
            assert!(!anchor.is_disjoint(&entail));
            // contradiction topics disjoint from the anchor's
            assert!(anchor.is_disjoint(&contra), "{anchor:?} vs {contra:?}");
        }
    }

    #[test]
    fn identical_latents_score_five_disjoint_score_zero() {
        let spec = VocabSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen_five = false;
        let mut seen_zero = false;
        for _ in 0..200 {
            let (pair, fraction) = sample_scored_pair(&spec, &mut rng);
            assert!((pair.score - 5.0 * fraction).abs() < 1e-12);
            if fraction == 1.0 {
                seen_five = true;
                assert_eq!(pair.score, 5.0);
            }
            if fraction == 0.0 {
                seen_zero = true;
                assert_eq!(pair.score, 0.0);
            }
        }
        assert!(seen_five && seen_zero);
    }

    #[test]
    fn gold_scores_track_latent_overlap_perfectly() {
        let spec = VocabSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut scores = Vec::new();
        let mut overlaps = Vec::new();
        for _ in 0..100 {
            let (pair, fraction) = sample_scored_pair(&spec, &mut rng);
            scores.push(pair.score);
            overlaps.push(fraction);
        }
        let rho = spearman(&scores, &overlaps).unwrap().unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn splits_share_no_sentences() {
        let spec = VocabSpec::default();
        let corpus = gen_corpus(
            &spec,
            &CorpusSizes {
                unlabeled: 50,
                triplets: 30,
                sts_train: 20,
                sts_dev: 20,
                sts_test: 20,
            },
            3,
        )
        .unwrap();
        let mut splits: Vec<HashSet<Sentence>> = Vec::new();
        splits.push(corpus.unlabeled.iter().cloned().collect());
        splits.push(
            corpus
                .triplets
                .iter()
                .flat_map(|t| [t.anchor.clone(), t.entail.clone(), t.contra.clone()])
                .collect(),
        );
        for pairs in [&corpus.sts_train, &corpus.sts_dev, &corpus.sts_test] {
            splits.push(pairs.iter().flat_map(|p| [p.s1.clone(), p.s2.clone()]).collect());
        }
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                assert!(splits[i].is_disjoint(&splits[j]), "splits {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn sentences_have_fixed_length_and_trailing_mask() {
        let spec = VocabSpec::default();
        let corpus = gen_corpus(
            &spec,
            &CorpusSizes {
                unlabeled: 10,
                triplets: 5,
                sts_train: 2,
                sts_dev: 2,
                sts_test: 2,
            },
            1,
        )
        .unwrap();
        for s in &corpus.unlabeled {
            assert_eq!(s.len(), SENTENCE_LEN);
            assert_eq!(*s.last().unwrap(), spec.mask_id());
            assert_eq!(s.iter().filter(|&&t| t == spec.mask_id()).count(), 1);
        }
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let spec = VocabSpec {
            n_topics: 4,
            ..VocabSpec::default()
        };
        let err = gen_corpus(&spec, &CorpusSizes::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = VocabSpec::default();
        let corpus = gen_corpus(
            &spec,
            &CorpusSizes {
                unlabeled: 8,
                triplets: 4,
                sts_train: 2,
                sts_dev: 3,
                sts_test: 2,
            },
            5,
        )
        .unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_triplets(&path).unwrap().is_empty());
        assert!(load_pairs(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"s1\": [1, 2], \"s2\": [3, 4], \"score\": 1.0}\nnot json\n",
        )
        .unwrap();
        let err = load_pairs(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn out_of_range_score_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("range.jsonl");
        fs::write(&path, "{\"s1\": [1], \"s2\": [2], \"score\": 6.1}\n").unwrap();
        let err = load_pairs(&path).unwrap_err();
        assert!(err.to_string().contains("6.1"), "{err}");
    }

    #[test]
    fn spearman_reference_values() {
        let rho = spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        let rho = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        // Σd² = 4 -> 1 − 6·4/(5·24) = 0.8
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0])
            .unwrap()
            .unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        // Σd² = 2 over n=4 -> 1 − 12/60 = 0.8
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])
            .unwrap()
            .unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_undefined_and_errors() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_handles_ties_with_mid_ranks() {
        // golds have a tie; mid-ranks keep the statistic well defined
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0])
            .unwrap()
            .unwrap();
        assert!(rho > 0.9 && rho <= 1.0);
    }
}
