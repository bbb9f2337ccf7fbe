//! Pre-norm QKV attention followed by a row-wise MLP, each wrapped in a
//! residual connection.
//!
//! The output always has the query input's row count and width: this block is
//! the encoder (cross-attention from the prior embedding into the input), every
//! latent self-attention layer, and the decoder.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numerics::{Init, LayerNorm, Linear, Mlp, ParamStore, Real, Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    /// Width of the query input, the attention width, and the output width.
    pub query_width: usize,
    pub kv_width: usize,
    pub heads: usize,
    /// Queries, keys and values all come from the same input.
    pub self_attention: bool,
    /// Zero the output projection and the MLP's second layer, making the
    /// freshly initialized block the identity on its query input.
    pub zero_init_residual: bool,
}

/// Parameter names and sizes of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query_norm: LayerNorm,
    pub kv_norm: Option<LayerNorm>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub width: usize,
    pub kv_width: usize,
}

impl AttentionParams {
    pub fn register<F: Real>(params: &mut ParamStore<F>, prefix: &str, shape: AttentionShape) -> Result<Self> {
        let AttentionShape {
            query_width: width,
            kv_width,
            heads,
            self_attention,
            zero_init_residual,
        } = shape;
        if width == 0 || kv_width == 0 {
            return Err(Error::config(format!("`{prefix}`: widths must be positive")));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!(
                "`{prefix}`: attention width {width} is not divisible by {heads} heads"
            )));
        }
        if self_attention && kv_width != width {
            return Err(Error::config(format!(
                "`{prefix}`: self-attention needs equal query and key/value widths"
            )));
        }
        let residual_init = if zero_init_residual { Init::Zeros } else { Init::DEFAULT };
        let query_norm = LayerNorm::register(params, &format!("{prefix}.norm_q"), width)?;
        let kv_norm = if self_attention {
            None
        } else {
            Some(LayerNorm::register(params, &format!("{prefix}.norm_kv"), kv_width)?)
        };
        let query = Linear::register(params, &format!("{prefix}.q"), width, width, Init::DEFAULT)?;
        // a key bias shifts every score of a query row equally and cancels in the softmax
        let key = Linear::register_without_bias(params, &format!("{prefix}.k"), kv_width, width, Init::DEFAULT)?;
        let value = Linear::register(params, &format!("{prefix}.v"), kv_width, width, Init::DEFAULT)?;
        let out = Linear::register(params, &format!("{prefix}.out"), width, width, residual_init)?;
        let mlp_norm = LayerNorm::register(params, &format!("{prefix}.norm_mlp"), width)?;
        let mlp = Mlp::register_with_out_init(
            params,
            &format!("{prefix}.mlp"),
            width,
            width,
            Init::DEFAULT,
            residual_init,
        )?;
        Ok(Self {
            query_norm,
            kv_norm,
            query,
            key,
            value,
            out,
            mlp_norm,
            mlp,
            heads,
            width,
            kv_width,
        })
    }

    /// Per-head key width; scores are scaled by `1/sqrt(key_width)`.
    pub fn key_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, q_in: Var, kv_in: Var, segments: &Segments) -> Result<Var> {
        let (_, qw) = tape.shape(q_in);
        let (_, kw) = tape.shape(kv_in);
        if qw != self.width || kw != self.kv_width {
            return Err(Error::config(format!(
                "attention block `{}` expects widths {}/{}, got {qw}/{kw}",
                self.query.weight, self.width, self.kv_width
            )));
        }
        let qn = self.query_norm.forward(tape, q_in)?;
        let kvn = match &self.kv_norm {
            Some(norm) => norm.forward(tape, kv_in)?,
            None if kv_in == q_in => qn,
            None => self.query_norm.forward(tape, kv_in)?,
        };
        let q = self.query.forward(tape, qn)?;
        let k = self.key.forward(tape, kvn)?;
        let v = self.value.forward(tape, kvn)?;
        let attended = tape.attention(q, k, v, segments, self.heads)?;
        let projected = self.out.forward(tape, attended)?;
        let h = tape.add(q_in, projected)?;
        let hn = self.mlp_norm.forward(tape, h)?;
        let m = self.mlp.forward(tape, hn)?;
        tape.add(h, m)
    }
}

/// Single-sample attention block: `q_input` (N×D_q) attends over `kv_input` (M×D_kv).
pub fn attention_forward<F: Real>(
    q_input: &Array2<F>,
    kv_input: &Array2<F>,
    block: &AttentionParams,
    params: &ParamStore<F>,
) -> Result<Array2<F>> {
    let (n, m) = (q_input.nrows(), kv_input.nrows());
    if n == 0 || m == 0 {
        return Err(Error::data("attention needs at least one query and one key row"));
    }
    let mut tape = Tape::new(params);
    let q = tape.constant(q_input.clone())?;
    let kv = tape.constant(kv_input.clone())?;
    let out = block.forward(&mut tape, q, kv, &Segments::single(n, m))?;
    Ok(tape.value(out).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    fn cross(width: usize, kv_width: usize, heads: usize, zero: bool) -> (ParamStore<f64>, AttentionParams) {
        let mut params = ParamStore::new(17);
        let block = AttentionParams::register(
            &mut params,
            "blk",
            AttentionShape {
                query_width: width,
                kv_width,
                heads,
                self_attention: false,
                zero_init_residual: zero,
            },
        )
        .unwrap();
        (params, block)
    }

    fn input(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.731 + phase).sin())
    }

    #[test]
    fn output_keeps_query_index_dimension() {
        let mut params = ParamStore::<f32>::new(1);
        let block = AttentionParams::register(
            &mut params,
            "enc",
            AttentionShape {
                query_width: 512,
                kv_width: 768,
                heads: 1,
                self_attention: false,
                zero_init_residual: false,
            },
        )
        .unwrap();
        let q = Array2::from_elem((2, 512), 0.1f32);
        let kv = Array2::from_shape_fn((64, 768), |(i, j)| ((i + j) % 7) as f32 * 0.1);
        let out = attention_forward(&q, &kv, &block, &params).unwrap();
        assert_eq!(out.dim(), (2, 512));
    }

    #[test]
    fn single_key_gets_weight_one() {
        let (params, block) = cross(4, 6, 1, false);
        let mut tape = Tape::new(&params);
        let q = tape.constant(input(3, 4, 0.0)).unwrap();
        let kv = tape.constant(input(1, 6, 1.0)).unwrap();
        let out = block.forward(&mut tape, q, kv, &Segments::single(3, 1)).unwrap();
        assert_eq!(tape.shape(out), (3, 4));
        let weights = find_weights(&tape);
        assert!(weights[0].iter().all(|&w| w == 1.0));
    }

    fn find_weights(tape: &Tape<'_, f64>) -> Vec<Array2<f64>> {
        tape.all_attention_weights()[0].to_vec()
    }

    #[test]
    fn key_order_does_not_matter() {
        let (params, block) = cross(6, 5, 2, false);
        let q = input(2, 6, 0.3);
        let kv = input(9, 5, 2.0);
        let mut rev = kv.clone();
        for i in 0..9 {
            rev.row_mut(i).assign(&kv.row((i * 4) % 9));
        }
        let a = attention_forward(&q, &kv, &block, &params).unwrap();
        let b = attention_forward(&q, &rev, &block, &params).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let (params, block) = cross(8, 5, 2, true);
        let q = input(2, 8, 0.9);
        let out = attention_forward(&q, &input(7, 5, 0.1), &block, &params).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (params, block) = cross(4, 6, 1, false);
        let err = attention_forward(&input(2, 5, 0.0), &input(3, 6, 0.0), &block, &params).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut p = ParamStore::<f64>::new(0);
        let bad = AttentionParams::register(
            &mut p,
            "x",
            AttentionShape {
                query_width: 6,
                kv_width: 6,
                heads: 4,
                self_attention: true,
                zero_init_residual: false,
            },
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn gradients_through_block() {
        for heads in [1, 2] {
            let (mut params, block) = cross(4, 6, heads, false);
            // larger weights so every path carries a visible gradient
            let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
            for (k, name) in names.iter().enumerate() {
                let v = params.value(name).unwrap().clone();
                let v = Array2::from_shape_fn(v.dim(), |(i, j)| {
                    v[[i, j]] * 10.0 + 0.05 * (((i * 13 + j * 7 + k) as f64) * 0.61).sin()
                });
                params.set(name, v).unwrap();
            }
            let q = input(3, 4, 0.2);
            let kv = input(5, 6, 1.1);
            let report = finite_diff_check(
                &params,
                |t| {
                    let qv = t.constant(q.clone())?;
                    let kvv = t.constant(kv.clone())?;
                    let o = block.forward(t, qv, kvv, &Segments::single(3, 5))?;
                    let sq = t.mul(o, o)?;
                    t.sum(sq)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4), "heads={heads}: {report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rows_follow_queries_and_weights_are_distributions(n in 1usize..=16, m in 1usize..=64) {
            let (params, block) = cross(4, 3, 1, false);
            let mut tape = Tape::new(&params);
            let q = tape.constant(input(n, 4, 0.5)).unwrap();
            let kv = tape.constant(input(m, 3, 1.5)).unwrap();
            let out = block.forward(&mut tape, q, kv, &Segments::single(n, m)).unwrap();
            prop_assert_eq!(tape.shape(out), (n, 4));
            for w in find_weights(&tape) {
                for row in w.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
