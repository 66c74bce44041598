//! Multilayer perceptrons over tape nodes.

use rand::Rng;

use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Affine layers with tanh between them. The output layer is linear unless
/// `activate_output` is set. Rows of the input are independent samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Layer>,
    widths: Vec<usize>,
    activate_output: bool,
}

impl Mlp {
    /// Registers `widths.len() - 1` layers named `{prefix}.{i}.w` / `{prefix}.{i}.b`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: &[usize],
        activate_output: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::Shape(format!(
                "{prefix}: an MLP needs at least one layer"
            )));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let weight = store.add_glorot(format!("{prefix}.{i}.w"), pair[0], pair[1], rng)?;
            let bias = store.add(format!("{prefix}.{i}.b"), 1, pair[1])?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self {
            layers,
            widths: widths.to_vec(),
            activate_output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Weight and bias handles per layer.
    pub fn layer_params(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().map(|l| (l.weight, l.bias))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId, NnError> {
        let width = tape.shape(x).1;
        if width != self.input_width() {
            return Err(NnError::Shape(format!(
                "MLP expects width {}, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last || self.activate_output {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Matrix<T>,
    ) -> Result<Matrix<T>, NnError> {
        let mut tape = Tape::new(store);
        let xn = tape.input(x.clone());
        let out = self.forward(&mut tape, xn)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line recomputation without the tape.
    fn oracle(store: &ParamStore<f64>, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = mlp.widths().len() - 1;
        for (i, (w, b)) in mlp.layer_params().enumerate() {
            let (rows, cols) = store.entry(w).shape;
            let wv = store.slice(w);
            let bv = store.slice(b);
            let mut next = vec![0.0; cols];
            for c in 0..cols {
                let mut acc = bv[c];
                for r in 0..rows {
                    acc += h[r] * wv[r * cols + c];
                }
                next[c] = if i + 1 < n { acc.tanh() } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], false, &mut rng).unwrap();
        store.fill(0.0);
        let out = mlp
            .apply(&store, &Matrix::row_vector(vec![1.0, -2.0, 0.5]))
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 3], false, &mut rng).unwrap();
        let (w, _) = mlp.layer_params().next().unwrap();
        store.fill(0.0);
        store
            .slice_mut(w)
            .copy_from_slice(Matrix::<f64>::identity(3).as_slice());
        let x = Matrix::row_vector(vec![0.3, -7.0, 2.5]);
        assert_eq!(mlp.apply(&store, &x).unwrap(), x);
    }

    #[test]
    fn random_params_match_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 6, 5, 3], false, &mut rng).unwrap();
        for v in store.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = mlp.apply(&store, &Matrix::row_vector(x.clone())).unwrap();
            for (a, b) in got.as_slice().iter().zip(oracle(&store, &mlp, &x)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], false, &mut rng).unwrap();
        let err = mlp
            .apply(&store, &Matrix::row_vector(vec![1.0; 4]))
            .unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
    }
}
