use std::collections::BTreeMap;

use crate::autodiff::{GradFault, Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::numerics::params::{Init, ParamStore};
use crate::numerics::rng::RngState;
use crate::tensor::Matrix;

/// Where parameters come from during a forward pass.
pub enum ParamSource<'p> {
    /// Existing store; every lookup must match name and shape.
    Fixed(&'p ParamStore),
    /// Registration pass: unknown names are created with their init scheme.
    Create(&'p mut ParamStore, &'p mut RngState),
}

/// Running-statistics update produced by a training-mode normalization layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A token selection made during the forward pass: the chosen indices and the
/// soft weights at those indices. Replaying a recorded log freezes selection so
/// finite differences see the straight-through relaxation.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    pub indices: Vec<usize>,
    pub soft_at_indices: Vec<f64>,
}

/// One forward pass: the tape, bound parameters and mode flags.
pub struct Graph<'p> {
    pub tape: Tape,
    source: ParamSource<'p>,
    bound: BTreeMap<String, Var>,
    /// Normalization layers use batch statistics (training) instead of running ones.
    pub batch_stats: bool,
    /// Gumbel/random-sampling noise; `None` selects deterministically.
    pub noise: Option<&'p mut RngState>,
    bn_updates: Vec<BnUpdate>,
    pub selection_log: Vec<SelectionRecord>,
    replay: Option<Vec<SelectionRecord>>,
    replay_cursor: usize,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_source(ParamSource::Fixed(params))
    }

    pub fn with_source(source: ParamSource<'p>) -> Self {
        Self {
            tape: Tape::new(),
            source,
            bound: BTreeMap::new(),
            batch_stats: false,
            noise: None,
            bn_updates: Vec::new(),
            selection_log: Vec::new(),
            replay: None,
            replay_cursor: 0,
        }
    }

    /// Training-mode graph: batch statistics and stochastic selection.
    pub fn training(params: &'p ParamStore, rng: &'p mut RngState) -> Self {
        let mut g = Self::new(params);
        g.batch_stats = true;
        g.noise = Some(rng);
        g
    }

    pub fn with_fault(mut self, fault: GradFault) -> Self {
        self.tape = Tape::with_fault(fault);
        self
    }

    pub fn replaying(mut self, log: Vec<SelectionRecord>) -> Self {
        self.replay = Some(log);
        self.replay_cursor = 0;
        self
    }

    /// Next recorded selection when replaying.
    pub fn next_replay(&mut self) -> Option<SelectionRecord> {
        let rec = self.replay.as_ref()?.get(self.replay_cursor).cloned();
        self.replay_cursor += 1;
        rec
    }

    pub fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    /// Binds (or on a registration pass, creates) a trainable parameter.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            let m = self.tape.value(v);
            if m.shape() != (rows, cols) {
                return Err(shape_err(
                    "param",
                    format!("`{name}` bound as {:?}, requested {:?}", m.shape(), (rows, cols)),
                ));
            }
            return Ok(v);
        }
        let value = match &mut self.source {
            ParamSource::Fixed(store) => store.expect(name, rows, cols)?.clone(),
            ParamSource::Create(store, rng) => match store.get(name) {
                Some(m) if m.shape() == (rows, cols) => m.clone(),
                Some(m) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` exists with shape {:?}",
                        m.shape()
                    )))
                }
                None => store.create(name, rows, cols, init, rng)?.clone(),
            },
        };
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer_or(&mut self, name: &str, default: impl FnOnce() -> Matrix) -> Result<Matrix> {
        match &mut self.source {
            ParamSource::Fixed(store) => store
                .buffer(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}`"))),
            ParamSource::Create(store, _) => {
                if store.buffer(name).is_none() {
                    store.set_buffer(name, default());
                }
                Ok(store.buffer(name).cloned().unwrap_or_else(|| unreachable!()))
            }
        }
    }

    /// Name → tape variable for every parameter touched by this pass.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    /// Parameter gradients by name (zeros for parameters that received none).
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, self.tape.value(v))))
            .collect()
    }

    // ---- layers -------------------------------------------------------------

    /// `x · W (+ b)`, with `W` stored as in×out under `{prefix}.weight`.
    pub fn linear(&mut self, x: Var, prefix: &str, out: usize, bias: bool) -> Result<Var> {
        let inp = self.value(x).cols();
        let w = self.param(&format!("{prefix}.weight"), inp, out, Init::FanInUniform)?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.bias"), 1, out, Init::Zeros)?;
            self.tape.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    /// Per-channel normalization over all rows of `x`, with learned scale and shift.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let c = self.value(x).cols();
        let gamma = self.param(&format!("{prefix}.gamma"), 1, c, Init::Ones)?;
        let beta = self.param(&format!("{prefix}.beta"), 1, c, Init::Zeros)?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let run_mean = self.buffer_or(&mean_name, || Matrix::zeros(1, c))?;
        let run_var = self.buffer_or(&var_name, || Matrix::filled(1, c, 1.0))?;
        let normalized = if self.batch_stats {
            let (xhat, mean, var) = self.tape.batch_norm_train(x);
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean,
                var,
            });
            xhat
        } else {
            if run_mean.cols() != c {
                return Err(shape_err("batch_norm", format!("running stats for `{prefix}`")));
            }
            let shift = self.constant(run_mean.map(|m| -m));
            let inv = self.constant(run_var.map(|v| 1.0 / (v + crate::autodiff::BN_EPS).sqrt()));
            let centered = self.tape.add_row(x, shift)?;
            self.tape.mul_row(centered, inv)?
        };
        let scaled = self.tape.mul_row(normalized, gamma)?;
        self.tape.add_row(scaled, beta)
    }

    /// Linear → BatchNorm → ReLU.
    pub fn lbr(&mut self, x: Var, prefix: &str, out: usize) -> Result<Var> {
        let y = self.linear(x, &format!("{prefix}.linear"), out, true)?;
        let y = self.batch_norm(y, &format!("{prefix}.bn"))?;
        Ok(self.tape.relu(y))
    }

    /// LBR applied to several row blocks at once, so normalization statistics
    /// span the whole batch; returns the per-block outputs.
    pub fn lbr_batch(&mut self, xs: &[Var], prefix: &str, out: usize) -> Result<Vec<Var>> {
        let stacked = self.tape.concat_rows(xs)?;
        let y = self.lbr(stacked, prefix, out)?;
        self.split_rows(y, xs)
    }

    /// Splits `y` into row blocks sized like `like`.
    pub fn split_rows(&mut self, y: Var, like: &[Var]) -> Result<Vec<Var>> {
        if like.len() == 1 {
            return Ok(vec![y]);
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(like.len());
        for &p in like {
            let rows = self.value(p).rows();
            parts.push(self.tape.slice_rows(y, start, rows)?);
            start += rows;
        }
        Ok(parts)
    }

    /// Two-layer perceptron `in → hidden → out` with ReLU between.
    pub fn mlp2(&mut self, x: Var, prefix: &str, hidden: usize, out: usize) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.0"), hidden, true)?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.1"), out, true)
    }
}
