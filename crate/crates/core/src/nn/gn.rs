//! Graph-network blocks and the encode-process-decode stack.
//!
//! Full GN block with sum aggregation:
//!
//! ```text
//! e'_k = φ_e([e_k, v_{r_k}, v_{s_k}, u])
//! v'_i = φ_v([Σ_{k: r_k = i} e'_k, v_i, u])
//! u'   = φ_u([Σ_k e'_k, Σ_i v'_i, u])
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::mlp::Mlp;
use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::NnError;

/// Attributed directed graph `(u, V, E)`.
///
/// Invariants: `global` is `1 × d_u`; `senders`/`receivers` have one entry
/// per edge row, each `< vertices.rows()`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnGraph<T> {
    pub global: Matrix<T>,
    pub vertices: Matrix<T>,
    pub edges: Matrix<T>,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl<T: Scalar> GnGraph<T> {
    pub fn new(
        global: Matrix<T>,
        vertices: Matrix<T>,
        edges: Matrix<T>,
        senders: Vec<usize>,
        receivers: Vec<usize>,
    ) -> Result<Self, NnError> {
        let g = Self {
            global,
            vertices,
            edges,
            senders,
            receivers,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.global.rows() != 1 {
            return Err(NnError::Shape(format!(
                "global has {} rows",
                self.global.rows()
            )));
        }
        let ne = self.edges.rows();
        if self.senders.len() != ne || self.receivers.len() != ne {
            return Err(NnError::Shape(format!(
                "{ne} edges but {} senders, {} receivers",
                self.senders.len(),
                self.receivers.len()
            )));
        }
        let nv = self.vertices.rows();
        if let Some(&bad) = self
            .senders
            .iter()
            .chain(&self.receivers)
            .find(|&&i| i >= nv)
        {
            return Err(NnError::Shape(format!(
                "edge endpoint {bad} out of {nv} vertices"
            )));
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.rows()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.rows()
    }

    /// Relabels vertex `i` as `vperm[i]` and moves edge `k` to row `eperm[k]`.
    pub fn permuted(&self, vperm: &[usize], eperm: &[usize]) -> Self {
        let mut vertices = Matrix::zeros(self.vertices.rows(), self.vertices.cols());
        for (i, &p) in vperm.iter().enumerate() {
            vertices.row_mut(p).copy_from_slice(self.vertices.row(i));
        }
        let mut edges = Matrix::zeros(self.edges.rows(), self.edges.cols());
        let mut senders = vec![0; self.senders.len()];
        let mut receivers = vec![0; self.receivers.len()];
        for (k, &p) in eperm.iter().enumerate() {
            edges.row_mut(p).copy_from_slice(self.edges.row(k));
            senders[p] = vperm[self.senders[k]];
            receivers[p] = vperm[self.receivers[k]];
        }
        Self {
            global: self.global.clone(),
            vertices,
            edges,
            senders,
            receivers,
        }
    }
}

/// A graph's attributes as tape nodes. Connectivity lives alongside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnNodes {
    pub global: NodeId,
    pub vertices: NodeId,
    pub edges: NodeId,
}

/// Connectivity shared by every attribute set of one graph.
#[derive(Debug, Clone, Copy)]
pub struct Wiring<'a> {
    pub vertex_count: usize,
    pub senders: &'a [usize],
    pub receivers: &'a [usize],
}

impl<T: Scalar> GnGraph<T> {
    pub fn wiring(&self) -> Wiring<'_> {
        Wiring {
            vertex_count: self.vertex_count(),
            senders: &self.senders,
            receivers: &self.receivers,
        }
    }

    pub fn record(&self, tape: &mut Tape<'_, T>) -> GnNodes {
        GnNodes {
            global: tape.input(self.global.clone()),
            vertices: tape.input(self.vertices.clone()),
            edges: tape.input(self.edges.clone()),
        }
    }
}

/// Attribute widths `(edge, vertex, global)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub edge: usize,
    pub vertex: usize,
    pub global: usize,
}

impl Widths {
    pub fn new(edge: usize, vertex: usize, global: usize) -> Self {
        Self {
            edge,
            vertex,
            global,
        }
    }

    fn doubled(self) -> Self {
        Self::new(2 * self.edge, 2 * self.vertex, 2 * self.global)
    }
}

/// One full GN block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GnBlock {
    pub phi_e: Mlp,
    pub phi_v: Mlp,
    pub phi_u: Mlp,
}

impl GnBlock {
    /// `hidden` lists the hidden widths of every φ; φ outputs have widths `output`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: Widths,
        hidden: &[usize],
        output: Widths,
        activate_output: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let widths = |first: usize, last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let e_in = input.edge + 2 * input.vertex + input.global;
        let v_in = output.edge + input.vertex + input.global;
        let u_in = output.edge + output.vertex + input.global;
        Ok(Self {
            phi_e: Mlp::new(
                store,
                &format!("{prefix}.phi_e"),
                &widths(e_in, output.edge),
                activate_output,
                rng,
            )?,
            phi_v: Mlp::new(
                store,
                &format!("{prefix}.phi_v"),
                &widths(v_in, output.vertex),
                activate_output,
                rng,
            )?,
            phi_u: Mlp::new(
                store,
                &format!("{prefix}.phi_u"),
                &widths(u_in, output.global),
                activate_output,
                rng,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        g: GnNodes,
        wiring: Wiring<'_>,
    ) -> Result<GnNodes, NnError> {
        let ne = wiring.senders.len();
        let nv = wiring.vertex_count;
        let v_recv = tape.gather_rows(g.vertices, wiring.receivers)?;
        let v_send = tape.gather_rows(g.vertices, wiring.senders)?;
        let u_e = tape.gather_rows(g.global, &vec![0; ne])?;
        let e_in = tape.concat(&[g.edges, v_recv, v_send, u_e])?;
        let edges = self.phi_e.forward(tape, e_in)?;

        let agg = tape.segment_sum(edges, wiring.receivers, nv)?;
        let u_v = tape.gather_rows(g.global, &vec![0; nv])?;
        let v_in = tape.concat(&[agg, g.vertices, u_v])?;
        let vertices = self.phi_v.forward(tape, v_in)?;

        let e_sum = tape.sum_rows(edges);
        let v_sum = tape.sum_rows(vertices);
        let u_in = tape.concat(&[e_sum, v_sum, g.global])?;
        let global = self.phi_u.forward(tape, u_in)?;
        Ok(GnNodes {
            global,
            vertices,
            edges,
        })
    }

    /// Forward pass on plain values.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &GnGraph<T>,
    ) -> Result<GnGraph<T>, NnError> {
        g.validate()?;
        let mut tape = Tape::new(store);
        let nodes = g.record(&mut tape);
        let out = self.forward(&mut tape, nodes, g.wiring())?;
        Ok(read_back(&tape, out, g))
    }
}

fn read_back<T: Scalar>(tape: &Tape<'_, T>, nodes: GnNodes, like: &GnGraph<T>) -> GnGraph<T> {
    GnGraph {
        global: tape.value(nodes.global).clone(),
        vertices: tape.value(nodes.vertices).clone(),
        edges: tape.value(nodes.edges).clone(),
        senders: like.senders.clone(),
        receivers: like.receivers.clone(),
    }
}

/// Per-attribute MLPs with no message passing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Independent {
    pub edge: Mlp,
    pub vertex: Mlp,
    pub global: Mlp,
}

impl Independent {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: Widths,
        output: Widths,
        activate_output: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            edge: Mlp::new(
                store,
                &format!("{prefix}.edge"),
                &[input.edge, output.edge],
                activate_output,
                rng,
            )?,
            vertex: Mlp::new(
                store,
                &format!("{prefix}.vertex"),
                &[input.vertex, output.vertex],
                activate_output,
                rng,
            )?,
            global: Mlp::new(
                store,
                &format!("{prefix}.global"),
                &[input.global, output.global],
                activate_output,
                rng,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        g: GnNodes,
    ) -> Result<GnNodes, NnError> {
        Ok(GnNodes {
            global: self.global.forward(tape, g.global)?,
            vertices: self.vertex.forward(tape, g.vertices)?,
            edges: self.edge.forward(tape, g.edges)?,
        })
    }
}

/// Sizes of an encode-process-decode stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    /// Width of every latent attribute.
    pub latent: usize,
    /// Hidden widths of each core φ; the core output layer adds one more.
    pub core_hidden: Vec<usize>,
    /// Core applications per forward pass.
    pub steps: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            core_hidden: vec![32],
            steps: 3,
        }
    }
}

/// Encoder, a core block applied `steps` times with a skip connection from
/// the encoding, and a decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeProcessDecode {
    pub encoder: Independent,
    pub core: GnBlock,
    pub decoder: Independent,
    pub steps: usize,
}

impl EncodeProcessDecode {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: Widths,
        output: Widths,
        cfg: &GnnConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if cfg.steps == 0 || cfg.latent == 0 {
            return Err(NnError::Shape(
                "steps and latent width must be positive".into(),
            ));
        }
        let latent = Widths::new(cfg.latent, cfg.latent, cfg.latent);
        Ok(Self {
            encoder: Independent::new(store, &format!("{prefix}.enc"), input, latent, true, rng)?,
            core: GnBlock::new(
                store,
                &format!("{prefix}.core"),
                latent.doubled(),
                &cfg.core_hidden,
                latent,
                true,
                rng,
            )?,
            decoder: Independent::new(store, &format!("{prefix}.dec"), latent, output, false, rng)?,
            steps: cfg.steps,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        g: GnNodes,
        wiring: Wiring<'_>,
    ) -> Result<GnNodes, NnError> {
        let encoded = self.encoder.forward(tape, g)?;
        let mut latent = encoded;
        for _ in 0..self.steps {
            let input = GnNodes {
                global: tape.concat(&[encoded.global, latent.global])?,
                vertices: tape.concat(&[encoded.vertices, latent.vertices])?,
                edges: tape.concat(&[encoded.edges, latent.edges])?,
            };
            latent = self.core.forward(tape, input, wiring)?;
        }
        self.decoder.forward(tape, latent)
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &GnGraph<T>,
    ) -> Result<GnGraph<T>, NnError> {
        g.validate()?;
        let mut tape = Tape::new(store);
        let nodes = g.record(&mut tape);
        let out = self.forward(&mut tape, nodes, g.wiring())?;
        Ok(read_back(&tape, out, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn ring(n: usize, w: Widths, rng: &mut ChaCha8Rng) -> GnGraph<f64> {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for i in 0..n {
            senders.extend([i, (i + 1) % n]);
            receivers.extend([(i + 1) % n, i]);
        }
        senders.push(0);
        receivers.push(n / 2);
        let ne = senders.len();
        GnGraph::new(
            random(1, w.global, rng),
            random(n, w.vertex, rng),
            random(ne, w.edge, rng),
            senders,
            receivers,
        )
        .unwrap()
    }

    fn randomise(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for v in store.values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    /// Plain-loop MLP for the hand-unrolled oracle.
    fn mlp_oracle(store: &ParamStore<f64>, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let m = mlp.apply(store, &Matrix::row_vector(x.to_vec())).unwrap();
        m.into_vec()
    }

    #[test]
    fn lone_vertex_sees_zero_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Widths::new(2, 3, 1);
        let mut store = ParamStore::new();
        let block = GnBlock::new(
            &mut store,
            "b",
            w,
            &[4],
            Widths::new(2, 2, 2),
            false,
            &mut rng,
        )
        .unwrap();
        randomise(&mut store, &mut rng);
        let g = GnGraph::new(
            random(1, 1, &mut rng),
            random(1, 3, &mut rng),
            Matrix::zeros(0, 2),
            vec![],
            vec![],
        )
        .unwrap();
        let out = block.apply(&store, &g).unwrap();
        let mut x = vec![0.0, 0.0];
        x.extend_from_slice(g.vertices.row(0));
        x.extend_from_slice(g.global.row(0));
        assert_eq!(
            out.vertices.row(0),
            mlp_oracle(&store, &block.phi_v, &x).as_slice()
        );
        assert_eq!(out.edges.shape(), (0, 2));
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // index form mirrors the aggregation sums
    fn path_graph_matches_hand_unrolled_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Widths::new(2, 2, 1);
        let out_w = Widths::new(3, 2, 2);
        let mut store = ParamStore::new();
        let block = GnBlock::new(&mut store, "b", w, &[5], out_w, false, &mut rng).unwrap();
        randomise(&mut store, &mut rng);
        // 0 - 1 - 2 with both directions
        let senders = vec![0, 1, 1, 2];
        let receivers = vec![1, 0, 2, 1];
        let g = GnGraph::new(
            random(1, 1, &mut rng),
            random(3, 2, &mut rng),
            random(4, 2, &mut rng),
            senders,
            receivers,
        )
        .unwrap();
        let out = block.apply(&store, &g).unwrap();

        let u = g.global.row(0).to_vec();
        let mut e_new = Vec::new();
        for k in 0..4 {
            let mut x = g.edges.row(k).to_vec();
            x.extend_from_slice(g.vertices.row(g.receivers[k]));
            x.extend_from_slice(g.vertices.row(g.senders[k]));
            x.extend_from_slice(&u);
            e_new.push(mlp_oracle(&store, &block.phi_e, &x));
        }
        let mut v_new = Vec::new();
        for i in 0..3 {
            let mut agg = vec![0.0; 3];
            for k in 0..4 {
                if g.receivers[k] == i {
                    for c in 0..3 {
                        agg[c] += e_new[k][c];
                    }
                }
            }
            let mut x = agg;
            x.extend_from_slice(g.vertices.row(i));
            x.extend_from_slice(&u);
            v_new.push(mlp_oracle(&store, &block.phi_v, &x));
        }
        let mut x = vec![0.0; 5];
        for e in &e_new {
            for c in 0..3 {
                x[c] += e[c];
            }
        }
        for v in &v_new {
            for c in 0..2 {
                x[3 + c] += v[c];
            }
        }
        x.extend_from_slice(&u);
        let u_new = mlp_oracle(&store, &block.phi_u, &x);

        assert_close(
            &out.edges,
            &Matrix::from_vec(4, 3, e_new.concat()).unwrap(),
            1e-12,
        );
        assert_close(
            &out.vertices,
            &Matrix::from_vec(3, 2, v_new.concat()).unwrap(),
            1e-12,
        );
        assert_close(&out.global, &Matrix::row_vector(u_new), 1e-12);
    }

    fn stack(
        store: &mut ParamStore<f64>,
        w: Widths,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> EncodeProcessDecode {
        let cfg = GnnConfig {
            latent: 6,
            core_hidden: vec![6],
            steps,
        };
        EncodeProcessDecode::new(store, "g", w, Widths::new(1, 2, 3), &cfg, rng).unwrap()
    }

    #[test]
    fn one_step_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Widths::new(2, 3, 1);
        let mut store = ParamStore::new();
        let model = stack(&mut store, w, 1, &mut rng);
        let g = ring(5, w, &mut rng);
        let out = model.apply(&store, &g).unwrap();

        let mut tape = Tape::new(&store);
        let nodes = g.record(&mut tape);
        let enc = model.encoder.forward(&mut tape, nodes).unwrap();
        let doubled = GnNodes {
            global: tape.concat(&[enc.global, enc.global]).unwrap(),
            vertices: tape.concat(&[enc.vertices, enc.vertices]).unwrap(),
            edges: tape.concat(&[enc.edges, enc.edges]).unwrap(),
        };
        let core = model.core.forward(&mut tape, doubled, g.wiring()).unwrap();
        let dec = model.decoder.forward(&mut tape, core).unwrap();
        assert_eq!(&out.global, tape.value(dec.global));
        assert_eq!(&out.vertices, tape.value(dec.vertices));
        assert_eq!(&out.edges, tape.value(dec.edges));
    }

    #[test]
    fn more_steps_change_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Widths::new(2, 3, 1);
        let mut store = ParamStore::new();
        let mut model = stack(&mut store, w, 1, &mut rng);
        let g = ring(4, w, &mut rng);
        let one = model.apply(&store, &g).unwrap();
        model.steps = 2;
        let two = model.apply(&store, &g).unwrap();
        assert_ne!(one.edges, two.edges);
        assert_ne!(one.global, two.global);
    }

    #[test]
    fn stack_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Widths::new(2, 3, 1);
        let mut store = ParamStore::new();
        let model = stack(&mut store, w, 3, &mut rng);
        let g = ring(6, w, &mut rng);
        let out = model.apply(&store, &g).unwrap();
        let vperm = vec![3, 0, 5, 1, 4, 2];
        let eperm: Vec<usize> = (0..g.edge_count()).rev().collect();
        let permuted = model.apply(&store, &g.permuted(&vperm, &eperm)).unwrap();
        let expected = out.permuted(&vperm, &eperm);
        assert_close(&permuted.vertices, &expected.vertices, 1e-9);
        assert_close(&permuted.edges, &expected.edges, 1e-9);
        assert_close(&permuted.global, &out.global, 1e-9);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Widths::new(2, 2, 1);
        let mut store = ParamStore::new();
        let model = stack(&mut store, w, 2, &mut rng);
        let g = ring(3, w, &mut rng);
        let seed_e = random(g.edge_count(), 1, &mut rng);
        let seed_u = random(1, 3, &mut rng);
        let loss = |store: &ParamStore<f64>| {
            let out = model.apply(store, &g).unwrap();
            let e: f64 = out
                .edges
                .as_slice()
                .iter()
                .zip(seed_e.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let u: f64 = out
                .global
                .as_slice()
                .iter()
                .zip(seed_u.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            e + u
        };
        let mut tape = Tape::new(&store);
        let nodes = g.record(&mut tape);
        let out = model.forward(&mut tape, nodes, g.wiring()).unwrap();
        let grads = tape
            .backward(&[(out.edges, seed_e.clone()), (out.global, seed_u.clone())])
            .unwrap();
        let h = 1e-5;
        let base = store.values().to_vec();
        let mut probe = store.clone();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            probe.set_values(&v).unwrap();
            let plus = loss(&probe);
            v[i] = base[i] - h;
            probe.set_values(&v).unwrap();
            numeric.push((plus - loss(&probe)) / (2.0 * h));
        }
        let diff: f64 = grads
            .params
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn parameter_count_ignores_graph_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Widths::new(2, 3, 1);
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let ma = stack(&mut a, w, 3, &mut rng);
        let _ = stack(&mut b, w, 3, &mut rng);
        assert_eq!(a.len(), b.len());
        for n in [3, 7] {
            let g = ring(n, w, &mut rng);
            let out = ma.apply(&a, &g).unwrap();
            assert_eq!(out.edges.rows(), g.edge_count());
        }
    }
}
