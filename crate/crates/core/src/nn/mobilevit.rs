use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

use super::{init_layer_norm, Activation, Conv, ConvBn, Forward, ParamStore, TransformerBlock};

/// Flat source index in `[b, c, h, w]` for every element of the unfolded
/// `[b, ph*pw, n_patches, c]` layout. Pixel `p = (i, j)` inside patch
/// `n = (r, s)` comes from row `r*ph + i`, column `s*pw + j`.
pub fn unfold_index(b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<usize> {
    let (nh, nw) = (h / ph, w / pw);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for p in 0..ph * pw {
            let (i, j) = (p / pw, p % pw);
            for n in 0..nh * nw {
                let (r, s) = (n / nw, n % nw);
                let (y, x) = (r * ph + i, s * pw + j);
                for ch in 0..c {
                    idx.push(((bi * c + ch) * h + y) * w + x);
                }
            }
        }
    }
    idx
}

fn check_patch(h: usize, w: usize, patch: (usize, usize)) -> Result<()> {
    if patch.0 == 0 || patch.1 == 0 || !h.is_multiple_of(patch.0) || !w.is_multiple_of(patch.1) {
        return Err(Error::dim(format!(
            "{h}x{w} map is not divisible into {}x{} patches",
            patch.0, patch.1
        )));
    }
    Ok(())
}

/// `[b, c, h, w]` → `[b, ph*pw, (h/ph)*(w/pw), c]`: one sequence per pixel
/// position within a patch, running across patches.
pub fn unfold<T: Scalar>(tape: &mut Tape<T>, x: Var, patch: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, c, h, w] = s[..] else {
        return Err(Error::dim(format!("unfold expects [b, c, h, w], got {s:?}")));
    };
    check_patch(h, w, patch)?;
    let (ph, pw) = patch;
    let index = unfold_index(b, c, h, w, ph, pw);
    tape.gather(x, vec![b, ph * pw, (h / ph) * (w / pw), c], index, "unfold")
}

/// Inverse of [`unfold`]: restores every pixel to its original location.
pub fn fold<T: Scalar>(tape: &mut Tape<T>, tokens: Var, patch: (usize, usize), size: (usize, usize)) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let (h, w) = size;
    check_patch(h, w, patch)?;
    let (ph, pw) = patch;
    let [b, p, n, c] = s[..] else {
        return Err(Error::dim(format!("fold expects [b, p, n, c], got {s:?}")));
    };
    if p != ph * pw || n != (h / ph) * (w / pw) {
        return Err(Error::dim(format!(
            "fold: {s:?} does not match {ph}x{pw} patches of a {h}x{w} map"
        )));
    }
    let forward = unfold_index(b, c, h, w, ph, pw);
    let mut index = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        index[src] = i;
    }
    tape.gather(tokens, vec![b, c, h, w], index, "fold")
}

/// MobileNetV2 inverted residual: 1x1 expand, 3x3 depthwise (strided),
/// 1x1 linear projection; identity shortcut when shapes allow.
#[derive(Debug, Clone, Copy)]
pub struct InvertedResidual {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub expansion: usize,
    pub pad_mode: PadMode,
}

impl InvertedResidual {
    pub fn hidden(&self) -> usize {
        self.c_in * self.expansion
    }

    fn layers(&self) -> (Option<ConvBn>, ConvBn, ConvBn) {
        let hid = self.hidden();
        let expand = (self.expansion != 1).then(|| {
            ConvBn::new(
                Conv::new(self.c_in, hid, 1, 1).with_pad_mode(self.pad_mode),
                Activation::Silu,
            )
        });
        let dw = ConvBn::new(
            Conv::depthwise(hid, 3, self.stride).with_pad_mode(self.pad_mode),
            Activation::Silu,
        );
        let project = ConvBn::new(
            Conv::new(hid, self.c_out, 1, 1).with_pad_mode(self.pad_mode),
            Activation::Identity,
        );
        (expand, dw, project)
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        let (expand, dw, project) = self.layers();
        if let Some(e) = expand {
            e.init(store, &format!("{prefix}.expand"), rng)?;
        }
        dw.init(store, &format!("{prefix}.dw"), rng)?;
        project.init(store, &format!("{prefix}.project"), rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let (expand, dw, project) = self.layers();
        let mut y = x;
        if let Some(e) = expand {
            y = e.forward(fw, &format!("{prefix}.expand"), y)?;
        }
        y = dw.forward(fw, &format!("{prefix}.dw"), y)?;
        y = project.forward(fw, &format!("{prefix}.project"), y)?;
        if self.residual() {
            fw.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// MobileViT block: local 3x3 conv, 1x1 projection to `dim`, unfold into
/// patch sequences, `depth` transformer blocks, fold back, 1x1 projection
/// to `channels`, concatenation with the input and a 3x3 fusion conv.
#[derive(Debug, Clone)]
pub struct MobileVitBlock {
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub patch: (usize, usize),
    pub pad_mode: PadMode,
}

impl MobileVitBlock {
    fn local(&self) -> ConvBn {
        ConvBn::new(
            Conv::new(self.channels, self.channels, 3, 1).with_pad_mode(self.pad_mode),
            Activation::Silu,
        )
    }

    fn conv_in(&self) -> Conv {
        Conv::new(self.channels, self.dim, 1, 1)
    }

    fn conv_out(&self) -> ConvBn {
        ConvBn::new(Conv::new(self.dim, self.channels, 1, 1), Activation::Silu)
    }

    fn fusion(&self) -> ConvBn {
        ConvBn::new(
            Conv::new(2 * self.channels, self.channels, 3, 1).with_pad_mode(self.pad_mode),
            Activation::Silu,
        )
    }

    pub fn transformer(&self) -> Result<TransformerBlock> {
        TransformerBlock::msa(self.dim, self.heads, self.ffn_ratio, Activation::Silu)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        self.local().init(store, &format!("{prefix}.local"), rng)?;
        self.conv_in().init(store, &format!("{prefix}.conv_in"), rng)?;
        let tb = self.transformer()?;
        for i in 0..self.depth {
            tb.init(store, &format!("{prefix}.blocks.{i}"), rng)?;
        }
        init_layer_norm(store, &format!("{prefix}.norm"), self.dim, rng)?;
        self.conv_out().init(store, &format!("{prefix}.conv_out"), rng)?;
        self.fusion().init(store, &format!("{prefix}.fusion"), rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let s = fw.tape.shape(x).to_vec();
        let [b, _, h, w] = s[..] else {
            return Err(Error::dim(format!("mobilevit block expects [b, c, h, w], got {s:?}")));
        };
        check_patch(h, w, self.patch)?;
        let y = self.local().forward(fw, &format!("{prefix}.local"), x)?;
        let y = self.conv_in().forward(fw, &format!("{prefix}.conv_in"), y)?;
        let u = unfold(&mut fw.tape, y, self.patch)?;
        let (p, n) = (self.patch.0 * self.patch.1, (h / self.patch.0) * (w / self.patch.1));
        let mut z = fw.tape.reshape(u, &[b * p, n, self.dim])?;
        let tb = self.transformer()?;
        for i in 0..self.depth {
            z = tb.forward(fw, &format!("{prefix}.blocks.{i}"), z, None)?;
        }
        let z = fw.layer_norm(&format!("{prefix}.norm"), z)?;
        let z = fw.tape.reshape(z, &[b, p, n, self.dim])?;
        let m = fold(&mut fw.tape, z, self.patch, (h, w))?;
        let m = self.conv_out().forward(fw, &format!("{prefix}.conv_out"), m)?;
        let cat = fw.tape.concat(&[x, m], 1)?;
        self.fusion().forward(fw, &format!("{prefix}.fusion"), cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unfold_index_is_a_permutation() {
        let mut idx = unfold_index(2, 3, 4, 6, 2, 3);
        idx.sort_unstable();
        assert_eq!(idx, (0..2 * 3 * 4 * 6).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(crate::tensor::Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(unfold(&mut tape, x, (2, 2)), Err(Error::Dimension(_))));
    }
}
