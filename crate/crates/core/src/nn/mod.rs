//! Neural building blocks: linear and batch-norm layers, dense 2D
//! convolution, submanifold/strided sparse 3D convolution and the asymmetric
//! residual, downsample, upsample and dimension-decomposition context blocks.

mod blocks;
mod conv2d;
mod norm;
mod sparse_conv;

pub use blocks::{AsymDownBlock, AsymResidualBlock, AsymUpBlock, DdcmBlock};
pub use conv2d::{conv2d, upsample2x, Conv2dLayer};
pub use norm::{apply_stat_updates, batch_norm_eval, batch_norm_train, BatchNorm, Layout, BN_EPS, BN_MOMENTUM};
pub use sparse_conv::{sparse_conv, Rulebook, SparseConv3d, SparseConvMode};

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{CoordSet, DenseTensor, Graph, ParamId, ParamStore, TensorError};

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Per-batch statistics; observed statistics are queued on the graph.
    #[default]
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct RuleKey {
    input: usize,
    output: usize,
    kernel: [usize; 3],
    mode: SparseConvMode,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T> {
    pub graph: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    rules: RefCell<HashMap<RuleKey, (Arc<CoordSet>, Arc<Rulebook>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            rules: RefCell::new(HashMap::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> DenseTensor<T> {
        self.graph.param(self.store, id)
    }

    /// Rulebooks are cached per (input set, output set, kernel, mode) for the
    /// lifetime of the context.
    pub(crate) fn rulebook(
        &self,
        input: &Arc<CoordSet>,
        target: Option<&Arc<CoordSet>>,
        kernel: [usize; 3],
        mode: SparseConvMode,
    ) -> Result<Arc<Rulebook>, TensorError> {
        let key = RuleKey {
            input: Arc::as_ptr(input) as usize,
            output: target.map_or(0, |t| Arc::as_ptr(t) as usize),
            kernel,
            mode,
        };
        if let Some((_, rb)) = self.rules.borrow().get(&key) {
            return Ok(Arc::clone(rb));
        }
        let rb = Arc::new(Rulebook::build(input, target, kernel, mode)?);
        self.rules
            .borrow_mut()
            .insert(key, (Arc::clone(input), Arc::clone(&rb)));
        Ok(rb)
    }
}

/// Fully connected layer over rows, `w` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Uniform fan-in init in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[inputs, outputs], bound);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), &[outputs], bound));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        let (_, c) = x.dims2()?;
        if c != self.inputs {
            return Err(TensorError::ChannelMismatch {
                op: "linear",
                expected: self.inputs,
                got: c,
            });
        }
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.linear(x, &w, b.as_ref())
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
