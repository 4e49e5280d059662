//! The composed VQA model: text encoder, image encoder, fusion, head.

use rayon::prelude::*;

use crate::config::ResolvedConfig;
use crate::error::{Error, Result};
use crate::fusion::{AnswerDistribution, FusionConfig};
use crate::image::{image_batch, ImageArch, ImageInput};
use crate::nn::{Forward, Mode, ParamStore};
use crate::rng::CounterRng;
use crate::tape::Var;
use crate::tensor::Scalar;
use crate::text::{TextEncoder, TokenSequence};

/// Parameter-name prefixes of the four modules.
pub const TEXT: &str = "text";
pub const IMAGE: &str = "image";
pub const FUSION: &str = "fusion";
pub const HEAD: &str = "head";
pub const MODULES: [&str; 4] = [TEXT, IMAGE, FUSION, HEAD];

#[derive(Debug, Clone)]
pub struct VqaModel {
    pub text: TextEncoder,
    pub image: ImageArch,
    pub fusion: FusionConfig,
}

impl VqaModel {
    pub fn new(cfg: &ResolvedConfig) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(cfg.text)?,
            image: cfg.image.clone(),
            fusion: cfg.fusion,
        })
    }

    /// Fresh weights; one random stream consumed in registration order.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(seed);
        self.text.init(&mut store, TEXT, &mut rng)?;
        self.image.init(&mut store, IMAGE, &mut rng)?;
        self.fusion.init(&mut store, FUSION, HEAD, &mut rng)?;
        Ok(store)
    }

    /// Answer logits `[b, n_A]` for a batch; `images` is `[b, 10, s, s]`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, seqs: &[TokenSequence], images: Var) -> Result<Var> {
        if fw.tape.shape(images).first() != Some(&seqs.len()) {
            return Err(Error::Input(format!(
                "{} questions for an image batch of shape {:?}",
                seqs.len(),
                fw.tape.shape(images)
            )));
        }
        let t = self.text.forward(fw, TEXT, seqs)?;
        let v = self.image.forward(fw, IMAGE, images)?;
        let f = self.fusion.fuse(fw, FUSION, t, v)?;
        self.fusion.classify(fw, HEAD, f)
    }

    /// Mean cross-entropy of the batch against `targets`.
    pub fn loss<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        seqs: &[TokenSequence],
        images: Var,
        targets: &[usize],
    ) -> Result<Var> {
        let logits = self.forward(fw, seqs, images)?;
        fw.tape.cross_entropy(logits, targets)
    }

    /// Eval-mode answer distributions for one batch.
    pub fn predict_batch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seqs: &[TokenSequence],
        images: &[&ImageInput],
    ) -> Result<Vec<AnswerDistribution>> {
        let mut fw = Forward::new(store, Mode::eval());
        let x = fw.input(image_batch(images)?);
        let logits = self.forward(&mut fw, seqs, x)?;
        let v = fw.tape.value(logits);
        let n = v.shape()[1];
        Ok(v.data()
            .chunks(n)
            .map(|row| AnswerDistribution::from_logits(row.iter().map(|x| x.as_f64()).collect()))
            .collect())
    }

    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &TokenSequence,
        image: &ImageInput,
    ) -> Result<AnswerDistribution> {
        Ok(self
            .predict_batch(store, std::slice::from_ref(seq), &[image])?
            .remove(0))
    }

    /// Predicted answer ids for many samples, evaluated in parallel chunks
    /// of `chunk`; the result is independent of the thread count.
    pub fn predict_all<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        samples: &[(TokenSequence, &ImageInput)],
        chunk: usize,
    ) -> Result<Vec<usize>> {
        let parts: Vec<Result<Vec<usize>>> = samples
            .par_chunks(chunk.max(1))
            .map(|c| {
                let seqs: Vec<TokenSequence> = c.iter().map(|(s, _)| s.clone()).collect();
                let imgs: Vec<&ImageInput> = c.iter().map(|(_, i)| *i).collect();
                Ok(self
                    .predict_batch(store, &seqs, &imgs)?
                    .iter()
                    .map(|d| d.argmax())
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
