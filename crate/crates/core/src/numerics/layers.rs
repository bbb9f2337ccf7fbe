use ndarray::Array2;

use super::{Init, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// `x W + b` with `W` stored as in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn register<F: Real>(
        params: &mut ParamStore<F>,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        params.init(&weight, in_width, out_width, init)?;
        params.init(&bias, 1, out_width, Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_width,
            out_width,
        })
    }

    pub fn register_without_bias<F: Real>(
        params: &mut ParamStore<F>,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        params.init(&weight, in_width, out_width, init)?;
        Ok(Self {
            weight,
            bias: None,
            in_width,
            out_width,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_width {
            return Err(Error::config(format!(
                "`{}` expects input width {}, got {cols}",
                self.weight, self.in_width
            )));
        }
        let w = tape.param(&self.weight)?;
        if tape.shape(w) != (self.in_width, self.out_width) {
            return Err(Error::config(format!(
                "`{}` has shape {:?}, expected {}x{}",
                self.weight,
                tape.shape(w),
                self.in_width,
                self.out_width
            )));
        }
        let xw = tape.matmul(x, w)?;
        match &self.bias {
            Some(bias) => {
                let b = tape.param(bias)?;
                tape.add_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}

/// Linear → GELU → Linear, hidden width equal to the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<F: Real>(
        params: &mut ParamStore<F>,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        init: Init,
    ) -> Result<Self> {
        Self::register_with_out_init(params, prefix, in_width, out_width, init, init)
    }

    /// Separate initialization for the second layer's weight, e.g. zeros for a
    /// residual branch that starts as the identity.
    pub fn register_with_out_init<F: Real>(
        params: &mut ParamStore<F>,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        init: Init,
        out_init: Init,
    ) -> Result<Self> {
        let fc1 = Linear::register(params, &format!("{prefix}.fc1"), in_width, out_width, init)?;
        let fc2 = Linear::register(params, &format!("{prefix}.fc2"), out_width, out_width, out_init)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn in_width(&self) -> usize {
        self.fc1.in_width
    }

    pub fn out_width(&self) -> usize {
        self.fc2.out_width
    }
}

/// Applies an [`Mlp`] to every row of `input`.
pub fn mlp_forward<F: Real>(input: &Array2<F>, mlp: &Mlp, params: &ParamStore<F>) -> Result<Array2<F>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(input.clone())?;
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub width: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn register<F: Real>(params: &mut ParamStore<F>, prefix: &str, width: usize) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        params.insert(&gain, Array2::ones((1, width)), true)?;
        params.init(&bias, 1, width, Init::Zeros)?;
        Ok(Self { gain, bias, width })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain)?;
        let b = tape.param(&self.bias)?;
        tape.layer_norm(x, g, b, Self::EPS)
    }
}
