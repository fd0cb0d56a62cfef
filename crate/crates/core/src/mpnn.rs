//! Message-passing encoders (GCN and mean-aggregator SAGE) and the feature
//! decoder used by the masked-autoencoder objective.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{mean_adjacency, normalize_adjacency, Graph, NormAdj};
use crate::nn::{glorot, Parameters};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gcn,
    Sage,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "sage" => Ok(Self::Sage),
            other => Err(Error::Config(format!("unknown encoder '{other}' (gcn|sage)"))),
        }
    }
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gcn => "gcn",
            Self::Sage => "sage",
        }
    }
}

/// `H' = relu(Â · H · W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `H' = relu(H · W_self + mean_N(H) · W_neigh + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub weight_self: Tensor,
    pub weight_neigh: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Gcn(GcnLayer),
    Sage(SageLayer),
}

impl Layer {
    pub fn d_in(&self) -> usize {
        match self {
            Layer::Gcn(l) => l.weight.rows(),
            Layer::Sage(l) => l.weight_self.rows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Gcn(l) => l.weight.cols(),
            Layer::Sage(l) => l.weight_self.cols(),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Gcn(_) => 2,
            Layer::Sage(_) => 3,
        }
    }
}

/// Node features as fed to the first layer. Sparse inputs skip the zero
/// entries in the first projection.
#[derive(Clone, Debug)]
pub enum Features {
    Dense(Arc<Tensor>),
    Sparse(Arc<CsrMatrix>),
}

impl Features {
    /// Density below which features are stored sparsely.
    pub const SPARSE_BELOW: f64 = 0.1;

    pub fn from_tensor(t: &Tensor) -> Self {
        let nnz = t.data().iter().filter(|&&v| v != 0.0).count();
        let density = nnz as f64 / t.data().len().max(1) as f64;
        if density < Self::SPARSE_BELOW {
            Features::Sparse(Arc::new(CsrMatrix::from_dense(t)))
        } else {
            Features::Dense(Arc::new(t.clone()))
        }
    }

    pub fn dense(t: Tensor) -> Self {
        Features::Dense(Arc::new(t))
    }

    pub fn rows(&self) -> usize {
        match self {
            Features::Dense(t) => t.rows(),
            Features::Sparse(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Features::Dense(t) => t.cols(),
            Features::Sparse(s) => s.cols(),
        }
    }

    fn project(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            Features::Dense(t) => tape.matmul_fixed(t, w),
            Features::Sparse(s) => tape.spmm(s, w),
        }
    }
}

/// Propagation operators derived from one graph.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub norm: NormAdj,
    pub mean: Arc<CsrMatrix>,
}

impl Propagation {
    pub fn new(g: &Graph) -> Self {
        Self {
            norm: normalize_adjacency(g),
            mean: mean_adjacency(g),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.mean.rows()
    }
}

/// Rows of the input replaced by a learnable token before encoding.
#[derive(Clone, Copy, Debug)]
pub struct InputMask<'a> {
    pub rows: &'a [usize],
    pub token: Var,
}

/// Pre- and post-activation output of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub pre: Var,
    pub post: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub kind: EncoderKind,
    pub layers: Vec<Layer>,
    pub dropout_p: f32,
}

impl EncoderStack {
    /// `dims = [d_in, d_1, ..., d_L]`.
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        dims: &[usize],
        dropout_p: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config("encoder layer widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| match kind {
                EncoderKind::Gcn => Layer::Gcn(GcnLayer {
                    weight: glorot(w[0], w[1], rng),
                    bias: Tensor::zeros(1, w[1]),
                }),
                EncoderKind::Sage => Layer::Sage(SageLayer {
                    weight_self: glorot(w[0], w[1], rng),
                    weight_neigh: glorot(w[0], w[1], rng),
                    bias: Tensor::zeros(1, w[1]),
                }),
            })
            .collect();
        Ok(Self {
            kind,
            layers,
            dropout_p,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    pub fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::ShapeMismatch {
                    op: "encoder chain",
                    left: (w[0].d_in(), w[0].d_out()),
                    right: (w[1].d_in(), w[1].d_out()),
                });
            }
        }
        Ok(())
    }

    /// Runs every layer and returns pre/post activations for all of them.
    /// `vars` are this stack's parameters bound to `tape` in `params()` order.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_layers<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prop: &Propagation,
        x: &Features,
        mask: Option<InputMask<'_>>,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<LayerOutput>> {
        self.check_chain()?;
        if x.rows() != prop.num_nodes() || x.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                left: (prop.num_nodes(), self.d_in()),
                right: (x.rows(), x.cols()),
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h: Option<Var> = None;
        let mut offset = 0;
        for layer in &self.layers {
            let p = &vars[offset..offset + layer.param_count()];
            offset += layer.param_count();
            let input = match h {
                Some(prev) => Some(tape.dropout(prev, self.dropout_p, training, rng)?),
                None => None,
            };
            let project = |tape: &mut Tape, w: Var| -> Result<Var> {
                match input {
                    Some(hv) => tape.matmul(hv, w),
                    None => {
                        let z = x.project(tape, w)?;
                        match mask {
                            Some(m) if !m.rows.is_empty() => {
                                let t = tape.matmul(m.token, w)?;
                                tape.set_rows(z, m.rows, t)
                            }
                            _ => Ok(z),
                        }
                    }
                }
            };
            let pre = match layer {
                Layer::Gcn(_) => {
                    let xw = project(tape, p[0])?;
                    let agg = tape.spmm(prop.norm.csr(), xw)?;
                    tape.add_bias(agg, p[1])?
                }
                Layer::Sage(_) => {
                    let own = project(tape, p[0])?;
                    let nb = project(tape, p[1])?;
                    let nb = tape.spmm(&prop.mean, nb)?;
                    let z = tape.add(own, nb)?;
                    tape.add_bias(z, p[2])?
                }
            };
            let post = tape.relu(pre);
            outputs.push(LayerOutput { pre, post });
            h = Some(post);
        }
        Ok(outputs)
    }

    /// Post-activation embeddings `H¹..Hᴸ`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_all_layers<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prop: &Propagation,
        x: &Features,
        mask: Option<InputMask<'_>>,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        Ok(self
            .encode_layers(tape, vars, prop, x, mask, training, rng)?
            .into_iter()
            .map(|o| o.post)
            .collect())
    }

    /// Inference pass returning plain tensors.
    pub fn embed(
        &self,
        prop: &Propagation,
        x: &Features,
        preactivation: bool,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = crate::nn::bind_frozen(&mut tape, self);
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Dropout);
        let outs = self.encode_layers(&mut tape, &vars, prop, x, None, false, &mut rng)?;
        Ok(outs
            .iter()
            .map(|o| tape.value(if preactivation { o.pre } else { o.post }).clone())
            .collect())
    }
}

impl Parameters for EncoderStack {
    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Gcn(g) => vec![&g.weight, &g.bias],
                Layer::Sage(s) => vec![&s.weight_self, &s.weight_neigh, &s.bias],
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Gcn(g) => vec![&mut g.weight, &mut g.bias],
                Layer::Sage(s) => vec![&mut s.weight_self, &mut s.weight_neigh, &mut s.bias],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Gcn,
    Linear,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gcn => "gcn",
            Self::Linear => "linear",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown decoder '{other}' (gcn|linear)"))),
        }
    }
}

/// Reconstructs node features from the last encoder layer. No activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(kind: DecoderKind, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            kind,
            weight: glorot(d_in, d_out, rng),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], prop: &Propagation, h: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(h);
        if cols != self.weight.rows() || rows != prop.num_nodes() {
            return Err(Error::ShapeMismatch {
                op: "decoder",
                left: (prop.num_nodes(), self.weight.rows()),
                right: (rows, cols),
            });
        }
        let z = tape.matmul(h, vars[0])?;
        let z = match self.kind {
            DecoderKind::Gcn => tape.spmm(prop.norm.csr(), z)?,
            DecoderKind::Linear => z,
        };
        tape.add_bias(z, vars[1])
    }
}

impl Parameters for Decoder {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}
