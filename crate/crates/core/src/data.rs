//! VQA samples, answer vocabularies and the dataset manifest.
//!
//! A dataset directory holds `manifest.json`, a vocab file, an answer file
//! (one answer per line, line index = class id) and one L4IM raster per
//! sample:
//!
//! ```json
//! {"version": 1, "vocab_file": "vocab.txt", "answers_file": "answers.txt",
//!  "samples": [{"image": "images/train_0000.l4im", "question": "is water present",
//!               "answer": "yes", "type": "yes_no", "split": "train"}]}
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageInput;
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    YesNo,
    Lulc,
}

impl QuestionType {
    pub const ALL: [QuestionType; 2] = [QuestionType::YesNo, QuestionType::Lulc];

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::YesNo => "yes_no",
            QuestionType::Lulc => "lulc",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageInput,
    pub question: String,
    /// Answer class id.
    pub answer: usize,
    pub qtype: QuestionType,
}

/// Answer strings; the index of a string is its class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Format(format!("answer line {i} is empty")));
            }
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Format(format!("answer `{a}` appears twice")));
            }
        }
        Ok(Self { answers, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    /// Loads an answer file that must hold exactly `n_answers` lines.
    pub fn load(path: &Path, n_answers: Option<usize>) -> Result<Self> {
        let v = Self::parse(&std::fs::read_to_string(path)?)?;
        if let Some(n) = n_answers {
            if v.len() != n {
                return Err(Error::config(
                    "head.answers",
                    format!("answer file has {} lines, config expects {n}", v.len()),
                ));
            }
        }
        Ok(v)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.answers.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub answers: AnswerVocab,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub qtype: QuestionType,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub vocab_file: String,
    pub answers_file: String,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Writes the dataset under `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::write(dir.join("vocab.txt"), self.vocab.to_file_string())?;
        std::fs::write(dir.join("answers.txt"), self.answers.to_file_string())?;
        let mut samples = Vec::new();
        for (split, list, tag) in [(Split::Train, &self.train, "train"), (Split::Test, &self.test, "test")] {
            for (i, s) in list.iter().enumerate() {
                let rel = format!("images/{tag}_{i:05}.l4im");
                s.image.save(&dir.join(&rel))?;
                samples.push(ManifestEntry {
                    image: rel,
                    question: s.question.clone(),
                    answer: self.answers.answer(s.answer).unwrap_or_default().to_string(),
                    qtype: s.qtype,
                    split,
                });
            }
        }
        let manifest = Manifest {
            version: 1,
            vocab_file: "vocab.txt".into(),
            answers_file: "answers.txt".into(),
            samples,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Loads a dataset from a manifest path (or a directory containing one).
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&manifest_path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            Error::Format(format!(
                "{}: line {} column {}: {e}",
                manifest_path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if m.version != 1 {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        let vocab = Vocab::load(&dir.join(&m.vocab_file))?;
        let answers = AnswerVocab::load(&dir.join(&m.answers_file), None)?;
        let mut ds = Dataset {
            vocab,
            answers,
            train: Vec::new(),
            test: Vec::new(),
        };
        for e in m.samples {
            let answer = ds
                .answers
                .id(&e.answer)
                .ok_or_else(|| Error::Format(format!("answer `{}` is not in the answer file", e.answer)))?;
            let sample = Sample {
                image: ImageInput::load(&dir.join(&e.image))?,
                question: e.question,
                answer,
                qtype: e.qtype,
            };
            match e.split {
                Split::Train => ds.train.push(sample),
                Split::Test => ds.test.push(sample),
            }
        }
        Ok(ds)
    }
}
