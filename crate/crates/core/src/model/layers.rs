//! Parameter registration and the small dense building blocks shared by the
//! encoder, decoder and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamStore, Tape, Tensor, Var};

use super::ModelError;

/// Forward-pass mode. Training-mode batch norm normalizes with the statistics
/// of the rows it sees and records them; evaluation mode uses the running
/// buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub bn: bool,
    pub bn_eps: f64,
}

impl Ctx<'_> {
    pub fn p(&self, name: &str) -> Result<Var, ModelError> {
        Ok(self.tape.param(self.store, name)?)
    }

    /// `x W + b`.
    pub fn linear(&self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let h = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(h, b)?)
    }

    /// Linear layer, optional batch norm, ReLU.
    pub fn dense(&self, x: Var, prefix: &str, bn: bool) -> Result<Var, ModelError> {
        let mut h = self.linear(x, prefix)?;
        if bn && self.bn {
            h = self.batch_norm(h, &format!("{prefix}.bn"))?;
        }
        Ok(self.tape.relu(h)?)
    }

    pub fn batch_norm(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let t = self.tape;
        let normalized = match self.mode {
            Mode::Train => t.batch_norm(x, self.bn_eps, name)?,
            Mode::Eval => {
                let c = t.shape(x)[1];
                let mean = self
                    .store
                    .buffer(&format!("{name}.running_mean"))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&[1, c]));
                let var = self
                    .store
                    .buffer(&format!("{name}.running_var"))
                    .cloned()
                    .unwrap_or_else(|| Tensor::filled(&[1, c], 1.0));
                let shift = Tensor::matrix(1, c, mean.data().iter().map(|m| -m).collect());
                let scale = Tensor::matrix(1, c, var.data().iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect());
                let centred = t.add_row(x, t.leaf(shift))?;
                t.mul_row(centred, t.leaf(scale))?
            }
        };
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let scaled = t.mul_row(normalized, gamma)?;
        Ok(t.add_row(scaled, beta)?)
    }
}

/// Registers parameters in a fixed order from one seeded stream.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
    pub bn: bool,
}

impl Init<'_> {
    /// Uniform `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<(), ModelError> {
        let s = (6.0 / (fan_in + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-s..s)).collect();
        self.store.insert(name, Tensor::matrix(rows, cols, data))?;
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, cols: usize) -> Result<(), ModelError> {
        self.store.insert(name, Tensor::zeros(&[1, cols]))?;
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), ModelError> {
        self.xavier(&format!("{prefix}.w"), fan_in, fan_out, fan_in)?;
        self.zeros(&format!("{prefix}.b"), fan_out)
    }

    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bn: bool) -> Result<(), ModelError> {
        self.linear(prefix, fan_in, fan_out)?;
        if bn && self.bn {
            let name = format!("{prefix}.bn");
            self.store.insert(&format!("{name}.gamma"), Tensor::filled(&[1, fan_out], 1.0))?;
            self.zeros(&format!("{name}.beta"), fan_out)?;
            self.store.set_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[1, fan_out]));
            self.store.set_buffer(&format!("{name}.running_var"), Tensor::filled(&[1, fan_out], 1.0));
        }
        Ok(())
    }
}
