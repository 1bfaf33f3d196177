//! Caption sources (class-prompted LLM, offline template grammar) and the
//! byte-level caption tokenizer.

pub mod llm;
pub mod template;
pub mod tokenizer;

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
pub use llm::{HttpChatClient, LlmClient};
pub use template::{template_caption, Scene, CAPTION_PREFIX};

const BUILTIN_CLASSES: &str = include_str!("classes.txt");

const PROMPT_TEMPLATE: &str = "Make up a human-annotated description of an image that contains the following object: [object]. The caption should be around 30-40 words long. Describe the different components of the scene in an objective and unbiased way. Do not add subjective judgments about the image, it should be as factual as possible. Do not use fluffy, poetic language. Respond only with the caption itself, beginning with ``This is an image of''.";

/// Default bound on concurrent LLM requests.
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    weights: Option<Vec<f64>>,
    sampler: Option<WeightedIndex<f64>>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        ensure!(!names.is_empty(), Data, "class vocabulary is empty");
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            ensure!(!n.is_empty(), Data, "empty class name");
            ensure!(seen.insert(n.as_str()), Data, "duplicate class name {n:?}");
        }
        Ok(ClassVocabulary {
            names,
            weights: None,
            sampler: None,
        })
    }

    /// The shipped 200-name list.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CLASSES).expect("builtin class list")
    }

    /// One name per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// First `n` names (weights dropped).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        ensure!(
            n > 0 && n <= self.names.len(),
            Parameter,
            "cannot keep {n} of {} classes",
            self.names.len()
        );
        Self::new(self.names[..n].to_vec())
    }

    /// Weights must be non-negative and sum to 1.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        ensure!(
            weights.len() == self.names.len(),
            Dimension,
            "{} weights for {} classes",
            weights.len(),
            self.names.len()
        );
        ensure!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            Parameter,
            "weights must be finite and non-negative"
        );
        let total: f64 = weights.iter().sum();
        ensure!((total - 1.0).abs() < 1e-9, Parameter, "weights sum to {total}, not 1");
        self.sampler = Some(WeightedIndex::new(&weights).map_err(|e| Error::Parameter(e.to_string()))?);
        self.weights = Some(weights);
        Ok(self)
    }

    /// Weights proportional to `1 / rank^exponent` in list order.
    pub fn zipf(self, exponent: f64) -> Result<Self> {
        let raw: Vec<f64> = (1..=self.names.len()).map(|r| (r as f64).powf(-exponent)).collect();
        let total: f64 = raw.iter().sum();
        self.with_weights(raw.into_iter().map(|w| w / total).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| Error::Vocabulary(class.to_owned()))
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.sampler {
            Some(w) => w.sample(rng),
            None => rng.random_range(0..self.names.len()),
        }
    }
}

pub fn build_prompt(class_name: &str) -> Result<String> {
    ensure!(!class_name.trim().is_empty(), Parameter, "class name is empty");
    Ok(PROMPT_TEMPLATE.replacen("[object]", class_name, 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Llm,
    Template,
}

/// One caption. Serializes to the JSONL schema `{text, class, source, seed}`;
/// token ids are recomputed from the text on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    #[serde(rename = "class")]
    pub class_label: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
    /// Slot values when the caption came from the template grammar.
    #[serde(skip)]
    pub scene: Option<Scene>,
}

impl CaptionRecord {
    pub fn new(text: String, class_label: String, source: Source, seed: Option<u64>) -> Self {
        let token_ids = tokenizer::tokenize(&text);
        CaptionRecord {
            text,
            class_label,
            source,
            seed,
            token_ids,
            scene: None,
        }
    }
}

pub fn generate_caption_template<R: Rng + ?Sized>(
    vocab: &ClassVocabulary,
    class_name: &str,
    rng: &mut R,
) -> Result<CaptionRecord> {
    let scene = template::template_caption(vocab, class_name, rng)?;
    let mut rec = CaptionRecord::new(scene.caption(), scene.class.clone(), Source::Template, None);
    rec.scene = Some(scene);
    Ok(rec)
}

pub fn generate_caption_llm(client: &dyn LlmClient, class_name: &str, timeout: Duration) -> Result<CaptionRecord> {
    let prompt = build_prompt(class_name)?;
    let raw = llm::complete_with_retry(client, &prompt, timeout, llm::DEFAULT_RETRIES)?;
    let text = llm::validate_caption(raw)?;
    Ok(CaptionRecord::new(text, class_name.to_owned(), Source::Llm, None))
}

/// Record `i` draws its class and slots from a stream seeded `base_seed + i`.
pub fn template_corpus(vocab: &ClassVocabulary, n: usize, base_seed: u64) -> Vec<CaptionRecord> {
    (0..n)
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = Scene::sample(vocab, &mut rng);
            let mut rec = CaptionRecord::new(scene.caption(), scene.class.clone(), Source::Template, Some(seed));
            rec.scene = Some(scene);
            rec
        })
        .collect()
}

/// LLM captions with at most `concurrency` requests in flight. Record `i`
/// picks its class from a stream seeded `base_seed + i`; output order is
/// record order. The first failure (in record order) is returned.
pub fn llm_corpus(
    client: &dyn LlmClient,
    vocab: &ClassVocabulary,
    n: usize,
    base_seed: u64,
    timeout: Duration,
    concurrency: usize,
) -> Result<Vec<CaptionRecord>> {
    ensure!(concurrency > 0, Config, "concurrency must be positive");
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CaptionRecord>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..concurrency.min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let seed = base_seed.wrapping_add(i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let class = &vocab.names()[vocab.sample_index(&mut rng)];
                let rec = generate_caption_llm(client, class, timeout).map(|mut r| {
                    r.seed = Some(seed);
                    r
                });
                slots.lock().unwrap()[i] = Some(rec);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        r.token_ids = tokenizer::tokenize(&r.text);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_vocabulary() {
        let v = ClassVocabulary::builtin();
        assert_eq!(v.len(), 200);
        assert!(v.names().iter().all(|n| n.len() <= 8));
        assert!(matches!(v.index_of("unicorn"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn prompt_substitutes_once() {
        let p = build_prompt("zebra").unwrap();
        assert!(p.contains("the following object: zebra."));
        assert!(!p.contains("[object]"));
        assert_eq!(p.matches("zebra").count(), 1);
        assert!(build_prompt("").is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let v = ClassVocabulary::parse("a\nb\n").unwrap();
        assert!(v.clone().with_weights(vec![0.5, 0.6]).is_err());
        let z = v.zipf(1.0).unwrap();
        let w = z.weights().unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let recs = template_corpus(&ClassVocabulary::builtin(), 5, 10);
        write_jsonl(&p, &recs).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(first["source"], "template");
        assert_eq!(first["seed"], 10);
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[2].text, recs[2].text);
        assert_eq!(back[2].token_ids, recs[2].token_ids);
    }
}
