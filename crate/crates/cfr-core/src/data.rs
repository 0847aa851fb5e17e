//! Sample and dataset file formats plus the synthetic compositional
//! question generator used for desk-scale checks.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::matrix::Matrix;
use crate::text::{EmbeddingTable, Predicate, PredicateForm, Vocabulary, UNK};

/// One VQA instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub id: String,
    pub image_features: Matrix, // n_i x d_i
    pub image_predicates: Vec<Predicate>,
    pub question_tokens: Vec<String>,
    pub target: AnswerTarget,
}

/// Free-form answers carry a single gold index; multiple-choice samples
/// carry a candidate list plus the gold position within it.
#[derive(Debug, Clone, PartialEq)]
pub enum AnswerTarget {
    Ffoe { answer: usize },
    Mc { candidates: Vec<usize>, gold: usize },
}

impl SampleBundle {
    pub fn validate(&self) -> Result<()> {
        if self.image_features.rows() == 0 {
            return Err(CfrError::argument(format!("sample {}: no image features", self.id)));
        }
        if let AnswerTarget::Mc { candidates, gold } = &self.target {
            if *gold >= candidates.len() {
                return Err(CfrError::argument(format!(
                    "sample {}: gold position {} out of {} candidates",
                    self.id,
                    gold,
                    candidates.len()
                )));
            }
        }
        Ok(())
    }
}

/// Configuration for the synthetic scene/question generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub objects: usize,
    pub attrs: usize,
    pub emb_dim: usize,
    pub scene_min: usize,
    pub scene_max: usize,
    pub noise: f64,
    pub dropout: f64,
    /// Probability that a scene object also emits a spurious duplicate
    /// detection carrying a wrong attribute and no predicate.
    pub ghost_rate: f64,
    pub train_n: usize,
    pub val_n: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 12,
            attrs: 6,
            emb_dim: 32,
            scene_min: 2,
            scene_max: 3,
            noise: 0.05,
            dropout: 0.1,
            ghost_rate: 0.5,
            train_n: 2000,
            val_n: 500,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects < 2 || self.attrs < 2 {
            return Err(CfrError::argument("vocab sizes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CfrError::argument("dropout must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ghost_rate) {
            return Err(CfrError::argument("ghost rate must lie in [0, 1]"));
        }
        if self.scene_min < 1 || self.scene_min > self.scene_max {
            return Err(CfrError::argument("scene size range invalid"));
        }
        if self.noise < 0.0 {
            return Err(CfrError::argument("noise must be non-negative"));
        }
        if self.emb_dim < 1 {
            return Err(CfrError::argument("embedding dim must be at least 1"));
        }
        Ok(())
    }

    /// Feature dim: one-hot(object) concatenated with one-hot(attribute).
    pub fn feature_dim(&self) -> usize {
        self.objects + self.attrs
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Vec<SampleBundle>,
    pub val: Vec<SampleBundle>,
    pub answer_vocab: Vec<String>,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub stop_words: HashSet<String>,
}

const TEMPLATE: [&str; 4] = ["what", "attribute", "is", "the"];

fn obj_word(i: usize) -> String {
    format!("obj{i}")
}

fn attr_word(i: usize) -> String {
    format!("attr{i}")
}

/// Scenes of attributed objects; the question asks for the attribute of
/// one named object. Predicates carry the clean attribute pairs while
/// features carry noisy one-hots plus spurious duplicate detections, so
/// predicates are strictly more informative than the features alone.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut vocab = Vocabulary::new();
    for w in TEMPLATE {
        vocab.add(w);
    }
    for i in 0..cfg.objects {
        vocab.add(&obj_word(i));
    }
    for i in 0..cfg.attrs {
        vocab.add(&attr_word(i));
    }

    // near-orthogonal random unit vectors; <unk> stays zero
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut table = EmbeddingTable::new(vocab.len(), cfg.emb_dim);
    for idx in 1..vocab.len() {
        let mut v: Vec<f64> = (0..cfg.emb_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x /= norm;
        }
        table.set_vector(idx, &v);
    }

    let noise = Normal::new(0.0, cfg.noise.max(1e-300)).unwrap();
    let gen_sample = |rng: &mut ChaCha8Rng, id: String| -> SampleBundle {
        let scene_max = cfg.scene_max.min(cfg.objects);
        let scene_min = cfg.scene_min.min(scene_max);
        let n_i = rng.random_range(scene_min..=scene_max);
        let objs: Vec<usize> = index_sample(rng, cfg.objects, n_i).into_vec();
        // attributes are distinct within a scene whenever the vocabulary
        // allows it, so attribute matches are unambiguous
        let attrs: Vec<usize> = if n_i <= cfg.attrs {
            index_sample(rng, cfg.attrs, n_i).into_vec()
        } else {
            (0..n_i).map(|_| rng.random_range(0..cfg.attrs)).collect()
        };

        // Spurious duplicate detections: same object, wrong attribute,
        // never covered by a predicate. They make the features alone
        // ambiguous, so only the predicate-guided path can resolve them.
        // Wrong attributes prefer values unused elsewhere in the scene to
        // keep the predicate evidence free of cross-object collisions.
        let mut rows: Vec<(usize, usize)> = objs.iter().copied().zip(attrs.iter().copied()).collect();
        let mut used: HashSet<usize> = attrs.iter().copied().collect();
        for (&o, &a) in objs.iter().zip(attrs.iter()) {
            if cfg.ghost_rate > 0.0 && rng.random::<f64>() < cfg.ghost_rate {
                let fresh: Vec<usize> =
                    (0..cfg.attrs).filter(|w| !used.contains(w)).collect();
                let wrong = if fresh.is_empty() {
                    let mut w = rng.random_range(0..cfg.attrs.saturating_sub(1));
                    if w >= a {
                        w += 1;
                    }
                    w
                } else {
                    fresh[rng.random_range(0..fresh.len())]
                };
                used.insert(wrong);
                rows.push((o, wrong));
            }
        }

        let d = cfg.feature_dim();
        let mut features = Matrix::zeros(rows.len(), d);
        for (row, &(o, a)) in rows.iter().enumerate() {
            let r = features.row_mut(row);
            r[o] = 1.0;
            r[cfg.objects + a] = 1.0;
            if cfg.noise > 0.0 {
                for v in r.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
        }

        let mut predicates = Vec::new();
        for (&o, &a) in objs.iter().zip(attrs.iter()) {
            if cfg.dropout > 0.0 && rng.random::<f64>() < cfg.dropout {
                continue;
            }
            predicates.push(Predicate::attr_obj(&attr_word(a), &obj_word(o)));
        }
        if predicates.is_empty() {
            predicates.push(Predicate::obj(UNK));
        }

        let target_pos = rng.random_range(0..n_i);
        let question: Vec<String> = TEMPLATE
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(obj_word(objs[target_pos])))
            .collect();

        SampleBundle {
            id,
            image_features: features,
            image_predicates: predicates,
            question_tokens: question,
            target: AnswerTarget::Ffoe { answer: attrs[target_pos] },
        }
    };

    let train: Vec<SampleBundle> =
        (0..cfg.train_n).map(|i| gen_sample(&mut rng, format!("train-{i}"))).collect();
    let val: Vec<SampleBundle> =
        (0..cfg.val_n).map(|i| gen_sample(&mut rng, format!("val-{i}"))).collect();

    for s in &train {
        for t in &s.question_tokens {
            vocab.count_word(t);
        }
    }

    Ok(SynthData {
        train,
        val,
        answer_vocab: (0..cfg.attrs).map(attr_word).collect(),
        vocab,
        table,
        stop_words: TEMPLATE.iter().map(|s| s.to_string()).collect(),
    })
}

/// Trivial oracle: answer directly from the matching predicate. Used as
/// the noiseless ceiling check.
pub fn predicate_lookup_oracle(sample: &SampleBundle) -> Option<usize> {
    let obj = sample.question_tokens.last()?;
    for p in &sample.image_predicates {
        if p.form == PredicateForm::AttrObj && &p.words[1] == obj {
            let attr = p.words[0].strip_prefix("attr")?;
            return attr.parse().ok();
        }
    }
    None
}

// ---------------------------------------------------------------------------
// JSON-Lines dataset format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    features: Vec<Vec<f64>>,
    predicates: Vec<PredicateRecord>,
    question: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct PredicateRecord {
    words: Vec<String>,
    form: PredicateForm,
}

impl SampleRecord {
    fn from_sample(s: &SampleBundle) -> Self {
        let (answer, candidates, gold) = match &s.target {
            AnswerTarget::Ffoe { answer } => (Some(*answer), None, None),
            AnswerTarget::Mc { candidates, gold } => {
                (None, Some(candidates.clone()), Some(*gold))
            }
        };
        SampleRecord {
            id: s.id.clone(),
            features: (0..s.image_features.rows())
                .map(|r| s.image_features.row(r).to_vec())
                .collect(),
            predicates: s
                .image_predicates
                .iter()
                .map(|p| PredicateRecord { words: p.words.clone(), form: p.form })
                .collect(),
            question: s.question_tokens.clone(),
            answer,
            candidates,
            gold,
        }
    }

    fn into_sample(self, line: usize) -> Result<SampleBundle> {
        let features = Matrix::from_rows(&self.features)
            .map_err(|e| CfrError::format_at(e.to_string(), line))?;
        let mut predicates = Vec::new();
        for p in self.predicates {
            let pred = Predicate::new(p.words, p.form)
                .map_err(|e| CfrError::format_at(e.to_string(), line))?;
            predicates.push(pred);
        }
        let target = match (self.answer, self.candidates, self.gold) {
            (Some(answer), None, None) => AnswerTarget::Ffoe { answer },
            (None, Some(candidates), Some(gold)) => AnswerTarget::Mc { candidates, gold },
            _ => {
                return Err(CfrError::format_at(
                    "sample must carry either 'answer' or 'candidates'+'gold'",
                    line,
                ));
            }
        };
        let sample = SampleBundle {
            id: self.id,
            image_features: features,
            image_predicates: predicates,
            question_tokens: self.question,
            target,
        };
        sample.validate().map_err(|e| CfrError::format_at(e.to_string(), line))?;
        Ok(sample)
    }
}

pub fn save_dataset(samples: &[SampleBundle], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for s in samples {
        let record = SampleRecord::from_sample(s);
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| CfrError::format(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SampleBundle>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| CfrError::format_at(e.to_string(), i + 1))?;
        samples.push(record.into_sample(i + 1)?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            objects: 6,
            attrs: 4,
            emb_dim: 8,
            scene_min: 2,
            scene_max: 4,
            noise: 0.0,
            dropout: 0.0,
            ghost_rate: 0.5,
            train_n: 40,
            val_n: 10,
            seed: 11,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_synthetic(&small_cfg()).unwrap();
        let b = gen_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn noiseless_oracle_ceiling_is_total() {
        let data = gen_synthetic(&small_cfg()).unwrap();
        for s in data.train.iter().chain(data.val.iter()) {
            let AnswerTarget::Ffoe { answer } = s.target else { panic!() };
            assert_eq!(predicate_lookup_oracle(s), Some(answer), "sample {}", s.id);
        }
    }

    #[test]
    fn samples_satisfy_invariants() {
        let mut cfg = small_cfg();
        cfg.noise = 0.3;
        cfg.dropout = 0.4;
        let data = gen_synthetic(&cfg).unwrap();
        for s in data.train.iter().chain(data.val.iter()) {
            s.validate().unwrap();
            assert!(!s.image_predicates.is_empty());
            assert!(s.image_features.is_finite());
        }
    }

    #[test]
    fn label_balance_near_uniform() {
        let mut cfg = small_cfg();
        cfg.train_n = 1000;
        let data = gen_synthetic(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.attrs];
        for s in &data.train {
            let AnswerTarget::Ffoe { answer } = s.target else { panic!() };
            counts[answer] += 1;
        }
        let expected = cfg.train_n as f64 / cfg.attrs as f64;
        for c in counts {
            assert!(
                (c as f64 - expected).abs() <= 0.2 * expected,
                "count {c} vs expected {expected}"
            );
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.dropout = 1.0;
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.attrs = 1;
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let data = gen_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        save_dataset(&data.train[..10], &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in data.train[..10].iter().zip(back.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image_predicates, b.image_predicates);
            assert_eq!(a.question_tokens, b.question_tokens);
            assert_eq!(a.target, b.target);
            for (x, y) in a.image_features.data().iter().zip(b.image_features.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn malformed_lines_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");

        // a 3-word attr_obj predicate violates the form invariant
        std::fs::write(
            &path,
            r#"{"id":"x","features":[[1.0]],"predicates":[{"words":["a","b","c"],"form":"attr_obj"}],"question":["q"],"answer":0}"#,
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        std::fs::write(&path, "not json\n").unwrap();
        assert!(load_dataset(&path).is_err());

        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn mc_roundtrip_and_validation() {
        let sample = SampleBundle {
            id: "mc-0".into(),
            image_features: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            image_predicates: vec![Predicate::obj("thing")],
            question_tokens: vec!["which".into()],
            target: AnswerTarget::Mc { candidates: vec![3, 1, 4], gold: 2 },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mc.jsonl");
        save_dataset(&[sample.clone()], &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back[0].target, sample.target);

        let bad = SampleBundle {
            target: AnswerTarget::Mc { candidates: vec![3], gold: 5 },
            ..sample
        };
        assert!(bad.validate().is_err());
    }
}
