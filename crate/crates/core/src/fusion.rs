//! Fusion of text and image features and the answer classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, Linear, ParamStore};
use crate::rng::CounterRng;
use crate::tape::Var;
use crate::tensor::Scalar;

/// Nonlinearity applied to each projection before the product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionActivation {
    #[default]
    Tanh,
    Identity,
}

impl FusionActivation {
    fn activation(self) -> Activation {
        match self {
            FusionActivation::Tanh => Activation::Tanh,
            FusionActivation::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub d_t: usize,
    pub d_v: usize,
    pub d_f: usize,
    pub n_answers: usize,
    pub head_hidden: usize,
    pub dropout_p: f64,
    pub activation: FusionActivation,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fusion.d_t", self.d_t),
            ("fusion.d_v", self.d_v),
            ("fusion.dim", self.d_f),
            ("head.hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.n_answers < 2 {
            return Err(Error::config("head.answers", "needs at least 2 answer classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(
                "head.dropout",
                format!("must be in [0, 1), got {}", self.dropout_p),
            ));
        }
        Ok(())
    }

    fn text_proj(&self) -> Linear {
        Linear::new(self.d_t, self.d_f)
    }

    fn image_proj(&self) -> Linear {
        Linear::new(self.d_v, self.d_f)
    }

    fn fc1(&self) -> Linear {
        Linear::new(self.d_f, self.head_hidden)
    }

    fn fc2(&self) -> Linear {
        Linear::new(self.head_hidden, self.n_answers)
    }

    /// Registers `{fusion}.text_proj`, `{fusion}.image_proj`, `{head}.fc1`
    /// and `{head}.fc2`.
    pub fn init<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        fusion: &str,
        head: &str,
        rng: &mut CounterRng,
    ) -> Result<()> {
        self.text_proj().init(store, &format!("{fusion}.text_proj"), rng)?;
        self.image_proj().init(store, &format!("{fusion}.image_proj"), rng)?;
        self.fc1().init(store, &format!("{head}.fc1"), rng)?;
        self.fc2().init(store, &format!("{head}.fc2"), rng)
    }

    /// `act(text W_t + b_t) * act(img W_v + b_v)`: `[b, d_t], [b, d_v] -> [b, d_f]`.
    pub fn fuse<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, text: Var, image: Var) -> Result<Var> {
        let (ts, is) = (fw.tape.shape(text).to_vec(), fw.tape.shape(image).to_vec());
        if ts.last() != Some(&self.d_t) {
            return Err(Error::config(
                "fusion.d_t",
                format!("text feature {ts:?} does not end in d_t = {}", self.d_t),
            ));
        }
        if is.last() != Some(&self.d_v) {
            return Err(Error::config(
                "fusion.d_v",
                format!("image feature {is:?} does not end in d_v = {}", self.d_v),
            ));
        }
        let act = self.activation.activation();
        let t = self.text_proj().forward(fw, &format!("{prefix}.text_proj"), text)?;
        let t = act.apply(&mut fw.tape, t)?;
        let v = self.image_proj().forward(fw, &format!("{prefix}.image_proj"), image)?;
        let v = act.apply(&mut fw.tape, v)?;
        fw.tape.mul(t, v)
    }

    /// MLP head: `fc2(dropout(GELU(fc1(x))))`, `[b, d_f] -> [b, n_A]` logits.
    pub fn classify<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, fused: Var) -> Result<Var> {
        let h = self.fc1().forward(fw, &format!("{prefix}.fc1"), fused)?;
        let h = fw.tape.gelu(h)?;
        let h = fw.dropout(h, self.dropout_p)?;
        self.fc2().forward(fw, &format!("{prefix}.fc2"), h)
    }
}

/// Logits over the answer classes, with softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / sum).collect();
        Self { logits, probs }
    }

    /// Predicted answer id: the first maximal logit.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn top(&self) -> (usize, f64) {
        let i = self.argmax();
        (i, self.probs[i])
    }
}
