use serde::{Deserialize, Serialize};

/// Affine parameters of one layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
}

/// Weights of one residual block: causal multi-head attention then a ReLU FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub w_1: P,
    pub b_1: P,
    pub w_2: P,
    pub b_2: P,
    pub ln1: Option<LayerNormParams<P>>,
    pub ln2: Option<LayerNormParams<P>>,
}

fn map_ln<'a, P, Q>(
    ln: &'a Option<LayerNormParams<P>>,
    f: &mut impl FnMut(&'a P) -> Q,
) -> Option<LayerNormParams<Q>> {
    ln.as_ref().map(|l| LayerNormParams {
        gamma: f(&l.gamma),
        beta: f(&l.beta),
    })
}

impl<P> BlockParams<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> BlockParams<Q> {
        BlockParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            w_1: f(&self.w_1),
            b_1: f(&self.b_1),
            w_2: f(&self.w_2),
            b_2: f(&self.b_2),
            ln1: map_ln(&self.ln1, f),
            ln2: map_ln(&self.ln2, f),
        }
    }

    /// Every tensor of the block with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
        ];
        if let Some(ln) = &self.ln1 {
            out.push(("ln1_gamma", &ln.gamma));
            out.push(("ln1_beta", &ln.beta));
        }
        if let Some(ln) = &self.ln2 {
            out.push(("ln2_gamma", &ln.gamma));
            out.push(("ln2_beta", &ln.beta));
        }
        out
    }

    /// Same order as [`BlockParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ];
        if let Some(ln) = &mut self.ln1 {
            out.push(&mut ln.gamma);
            out.push(&mut ln.beta);
        }
        if let Some(ln) = &mut self.ln2 {
            out.push(&mut ln.gamma);
            out.push(&mut ln.beta);
        }
        out
    }
}

/// All model weights, parameterized by how a tensor is held.
///
/// Stored models use owned tensors; eager evaluation borrows them and taped
/// evaluation refers to them by tape handle.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embedding: P,
    pub positional: P,
    pub blocks: Vec<BlockParams<P>>,
    pub head: P,
}

impl<P> ModelParams<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embedding: f(&self.embedding),
            positional: f(&self.positional),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            head: f(&self.head),
        }
    }

    pub fn tensors(&self) -> Vec<&P> {
        let mut out = vec![&self.embedding, &self.positional];
        for b in &self.blocks {
            out.extend(b.named().into_iter().map(|(_, p)| p));
        }
        out.push(&self.head);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embedding, &mut self.positional];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head);
        out
    }
}

/// Output head: next-token unembedding over the vocabulary, or a class head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    LmUnembedding,
    Classifier { n_classes: usize },
}
