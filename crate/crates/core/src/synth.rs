//! Deterministic synthetic VQA data with a known answer rule.
//!
//! Class `c` owns band `c` and the `c`-th horizontal stripe of the image.
//! An image "contains" class `c` when that stripe of that band is lit
//! (value near 1); everything else is low-amplitude noise. Yes/no questions
//! ask `is <class> present`; LULC questions ask `which classes are present`
//! and are answered with the class names in index order, comma-joined.

use crate::data::{AnswerVocab, Dataset, QuestionType, Sample};
use crate::error::{Error, Result};
use crate::image::{ImageInput, BANDS};
use crate::rng::{derive_seed, CounterRng};
use crate::text::Vocab;

pub const CLASS_NAMES: [&str; BANDS] = [
    "water",
    "forest",
    "urban",
    "farmland",
    "grassland",
    "wetland",
    "bare",
    "snow",
    "shrub",
    "coast",
];

pub const LULC_QUESTION: &str = "which classes are present";
const NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Largest number of classes present in one image (at least one is).
    pub max_present: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            max_present: 2,
            image_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > BANDS {
            return Err(Error::Parameter(format!(
                "classes must be in 2..={BANDS}, got {}",
                self.classes
            )));
        }
        if self.max_present == 0 || self.max_present >= self.classes {
            return Err(Error::Parameter("max_present must be in 1..classes".into()));
        }
        if self.image_size < self.classes {
            return Err(Error::Parameter("image too small for one stripe per class".into()));
        }
        Ok(())
    }

    pub fn yes_no_question(class: usize) -> String {
        format!("is {} present", CLASS_NAMES[class])
    }

    /// Canonical answer for a class set: names in class-index order, joined
    /// by commas.
    pub fn set_answer(classes: &[usize]) -> String {
        let mut c = classes.to_vec();
        c.sort_unstable();
        c.iter().map(|&i| CLASS_NAMES[i]).collect::<Vec<_>>().join(",")
    }

    /// `yes`, `no`, then every class set of size `1..=max_present` in
    /// lexicographic index order.
    pub fn answer_vocab(&self) -> Result<AnswerVocab> {
        let mut answers = vec!["yes".to_string(), "no".to_string()];
        for size in 1..=self.max_present {
            for set in combinations(self.classes, size) {
                answers.push(Self::set_answer(&set));
            }
        }
        AnswerVocab::new(answers)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let mut words = vec!["is", "present", "which", "classes", "are"];
        words.extend(CLASS_NAMES[..self.classes].iter());
        Vocab::with_words(&words)
    }

    /// Renders an image containing exactly `present`.
    pub fn render(&self, present: &[usize], rng: &mut CounterRng) -> Result<ImageInput> {
        let s = self.image_size;
        let stripe = s / self.classes;
        let mut data = Vec::with_capacity(BANDS * s * s);
        for band in 0..BANDS {
            let lit = band < self.classes && present.contains(&band);
            for y in 0..s {
                for _ in 0..s {
                    let on = lit && y / stripe == band;
                    let base = if on { 1.0 } else { 0.0 };
                    data.push((base + (rng.next_f64() * 2.0 - 1.0) * NOISE) as f32);
                }
            }
        }
        ImageInput::new(BANDS, s, s, data)
    }

    /// Sample `index` of the stream for `seed`: the question type alternates,
    /// yes/no answers are balanced by drawing the answer first.
    pub fn sample(&self, seed: u64, index: u64, answers: &AnswerVocab) -> Result<Sample> {
        let mut rng = CounterRng::new(derive_seed(seed, index));
        let qtype = if index.is_multiple_of(2) {
            QuestionType::YesNo
        } else {
            QuestionType::Lulc
        };
        let k = 1 + rng.below(self.max_present);
        let (present, question, answer) = match qtype {
            QuestionType::YesNo => {
                let asked = rng.below(self.classes);
                let yes = rng.next_f64() < 0.5;
                let mut others: Vec<usize> = (0..self.classes).filter(|&c| c != asked).collect();
                rng.shuffle(&mut others);
                let mut present: Vec<usize> = if yes { vec![asked] } else { vec![] };
                let need = if yes { k - 1 } else { k };
                present.extend(others.into_iter().take(need));
                (
                    present,
                    Self::yes_no_question(asked),
                    if yes { "yes" } else { "no" }.to_string(),
                )
            }
            QuestionType::Lulc => {
                let mut all: Vec<usize> = (0..self.classes).collect();
                rng.shuffle(&mut all);
                let present: Vec<usize> = all.into_iter().take(k).collect();
                let answer = Self::set_answer(&present);
                (present, LULC_QUESTION.to_string(), answer)
            }
        };
        let image = self.render(&present, &mut rng)?;
        let answer = answers
            .id(&answer)
            .ok_or_else(|| Error::Internal(format!("answer `{answer}` missing from vocabulary")))?;
        Ok(Sample {
            image,
            question,
            answer,
            qtype,
        })
    }
}

/// `count` training and `test_count` held-out samples; identical for equal
/// arguments.
pub fn generate_synthetic(count: usize, test_count: usize, cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Parameter("count must be >= 1".into()));
    }
    let answers = cfg.answer_vocab()?;
    let train = (0..count as u64)
        .map(|i| cfg.sample(seed, i, &answers))
        .collect::<Result<Vec<_>>>()?;
    let test_seed = derive_seed(seed, u64::MAX);
    let test = (0..test_count as u64)
        .map(|i| cfg.sample(test_seed, i, &answers))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocab: cfg.vocab()?,
        answers,
        train,
        test,
    })
}

/// Which classes are lit in a rendered image (stripe mean above 0.5).
pub fn classes_in(image: &ImageInput, classes: usize) -> Vec<usize> {
    let s = image.size();
    let stripe = s / classes;
    (0..classes)
        .filter(|&c| {
            let band = &image.data()[c * s * s..(c + 1) * s * s];
            let rows = &band[c * stripe * s..(c + 1) * stripe * s];
            rows.iter().map(|&v| v as f64).sum::<f64>() / rows.len() as f64 > 0.5
        })
        .collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_vocab_lists_yes_no_and_sets() {
        let v = SynthConfig::default().answer_vocab().unwrap();
        assert_eq!(v.len(), 2 + 4 + 6);
        assert_eq!(v.answer(0), Some("yes"));
        assert!(v.id("water,forest").is_some());
        assert!(v.id("forest,water").is_none());
    }

    #[test]
    fn rendered_classes_are_recoverable() {
        let cfg = SynthConfig::default();
        let mut rng = CounterRng::new(9);
        let im = cfg.render(&[1, 3], &mut rng).unwrap();
        assert_eq!(classes_in(&im, cfg.classes), vec![1, 3]);
    }
}
