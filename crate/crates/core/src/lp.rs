//! Optimal multipath max-link-utilisation via linear programming.
//!
//! Variables: one fraction `f_i(e)` per positive-demand commodity `i` and
//! edge `e`, plus the objective variable `U`. Constraints:
//!
//! ```text
//! out(v) - in(v) = 1 (v = s_i), -1 (v = t_i), 0 otherwise     per commodity
//! sum_i d_i f_i(e) - U c(e) <= 0                              per edge
//! 0 <= f_i(e) <= 1,  U >= 0
//! ```
//!
//! Demands are rescaled by their maximum before solving so the constraint
//! coefficients stay near one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::demand::DemandMatrix;
use crate::graph::{Network, VertexId};
use crate::scalar::Scalar;

/// Tolerance the oracle's constraint checks are held to.
pub const LP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("demand matrix is {got}x{got}, network has {expected} vertices")]
    DemandSize { expected: usize, got: usize },
    #[error("flow ({0},{1}) has positive demand but sink is unreachable")]
    Unreachable(VertexId, VertexId),
    #[error("LP backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub sense: Sense,
    pub rhs: f64,
}

/// Minimisation LP in sparse triple form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub var_names: Vec<String>,
    pub objective: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub rows: Vec<Row>,
    /// `(row, column, coefficient)` entries of the constraint matrix.
    pub triples: Vec<(usize, usize, f64)>,
}

impl LinearProgram {
    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, bounds: (f64, f64)) -> usize {
        self.var_names.push(name.into());
        self.objective.push(cost);
        self.bounds.push(bounds);
        self.objective.len() - 1
    }

    pub fn add_row(
        &mut self,
        name: impl Into<String>,
        coeffs: impl IntoIterator<Item = (usize, f64)>,
        sense: Sense,
        rhs: f64,
    ) -> usize {
        let row = self.rows.len();
        self.rows.push(Row {
            name: name.into(),
            sense,
            rhs,
        });
        self.triples
            .extend(coeffs.into_iter().map(|(col, coef)| (row, col, coef)));
        row
    }

    pub fn var_count(&self) -> usize {
        self.objective.len()
    }

    /// CPLEX-LP text rendering, for cross-checking with external solvers.
    pub fn to_cplex_lp(&self) -> String {
        let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.rows.len()];
        for &(r, c, v) in &self.triples {
            by_row[r].push((c, v));
        }
        let term = |out: &mut String, first: bool, coef: f64, var: &str| {
            let sign = if coef < 0.0 {
                "- "
            } else if first {
                ""
            } else {
                "+ "
            };
            let _ = write!(out, " {sign}{} {var}", coef.abs());
        };
        let mut out = String::from("\\ max-link-utilisation multicommodity flow\nMinimize\n obj:");
        let mut first = true;
        for (c, &cost) in self.objective.iter().enumerate() {
            if cost != 0.0 {
                term(&mut out, first, cost, &self.var_names[c]);
                first = false;
            }
        }
        if first {
            out.push_str(" 0");
        }
        out.push_str("\nSubject To\n");
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, " {}:", row.name);
            if by_row[r].is_empty() {
                out.push_str(" 0");
            }
            for (k, &(c, v)) in by_row[r].iter().enumerate() {
                term(&mut out, k == 0, v, &self.var_names[c]);
            }
            let op = match row.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            let _ = writeln!(out, " {op} {}", row.rhs);
        }
        out.push_str("Bounds\n");
        for (c, &(lo, hi)) in self.bounds.iter().enumerate() {
            let name = &self.var_names[c];
            if hi.is_infinite() {
                let _ = writeln!(out, " {name} >= {lo}");
            } else {
                let _ = writeln!(out, " {lo} <= {name} <= {hi}");
            }
        }
        out.push_str("End\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub objective: f64,
    pub values: Vec<f64>,
}

/// A solver able to minimise a [`LinearProgram`].
pub trait LpBackend {
    fn solve(&self, lp: &LinearProgram) -> Result<LpOutcome, LpError>;
}

/// Pure-Rust simplex backend (the `microlp` crate).
#[derive(Debug, Clone, Copy, Default)]
pub struct MicroLp;

impl LpBackend for MicroLp {
    fn solve(&self, lp: &LinearProgram) -> Result<LpOutcome, LpError> {
        use microlp::{ComparisonOp, OptimizationDirection, Problem};

        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = lp
            .objective
            .iter()
            .zip(&lp.bounds)
            .map(|(&c, &b)| problem.add_var(c, b))
            .collect();
        let mut by_row: Vec<Vec<(microlp::Variable, f64)>> = vec![Vec::new(); lp.rows.len()];
        for &(r, c, v) in &lp.triples {
            by_row[r].push((vars[c], v));
        }
        for (row, coeffs) in lp.rows.iter().zip(by_row) {
            let op = match row.sense {
                Sense::Le => ComparisonOp::Le,
                Sense::Eq => ComparisonOp::Eq,
                Sense::Ge => ComparisonOp::Ge,
            };
            problem.add_constraint(coeffs.as_slice(), op, row.rhs);
        }
        let empty = |status| LpOutcome {
            status,
            objective: f64::NAN,
            values: Vec::new(),
        };
        match problem.solve() {
            Ok(outcome) => {
                let solution = outcome
                    .solution()
                    .ok_or_else(|| LpError::Backend("solve interrupted".into()))?;
                Ok(LpOutcome {
                    status: LpStatus::Optimal,
                    objective: solution.objective(),
                    values: vars.iter().map(|&v| solution.var_value(v)).collect(),
                })
            }
            Err(microlp::Error::Infeasible) => Ok(empty(LpStatus::Infeasible)),
            Err(microlp::Error::Unbounded) => Ok(empty(LpStatus::Unbounded)),
            Err(e) => Err(LpError::Backend(e.to_string())),
        }
    }
}

/// Column layout of the max-utilisation LP.
#[derive(Debug, Clone)]
pub struct UmaxLayout {
    pub umax_var: usize,
    /// Commodities in row-major demand order with their first fraction column.
    pub commodities: Vec<((VertexId, VertexId), usize)>,
    /// Divisor applied to demands inside the LP.
    pub demand_scale: f64,
}

/// Builds the max-link-utilisation LP for the positive entries of `demands`.
pub fn build_umax_lp<T: Scalar>(
    net: &Network<T>,
    demands: &DemandMatrix<T>,
) -> Result<(LinearProgram, UmaxLayout), LpError> {
    if demands.size() != net.vertex_count() {
        return Err(LpError::DemandSize {
            expected: net.vertex_count(),
            got: demands.size(),
        });
    }
    let flows: Vec<_> = demands.flows().collect();
    let scale = flows
        .iter()
        .map(|f| f.demand.as_f64())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let m = net.edge_count();

    let mut lp = LinearProgram::default();
    let umax_var = lp.add_var("umax", 1.0, (0.0, f64::INFINITY));
    let mut commodities = Vec::with_capacity(flows.len());
    for flow in &flows {
        let (s, t) = (flow.source, flow.sink);
        if !net.reachable_from(s)[t] {
            return Err(LpError::Unreachable(s, t));
        }
        let first = lp.var_count();
        for &(a, b) in net.edges() {
            lp.add_var(format!("f_{s}_{t}_{a}_{b}"), 0.0, (0.0, 1.0));
        }
        commodities.push(((s, t), first));
        for v in 0..net.vertex_count() {
            let coeffs = net
                .out_edges(v)
                .iter()
                .map(|&e| (first + e, 1.0))
                .chain(net.in_edges(v).iter().map(|&e| (first + e, -1.0)));
            let rhs = if v == s {
                1.0
            } else if v == t {
                -1.0
            } else {
                0.0
            };
            lp.add_row(format!("cons_{s}_{t}_{v}"), coeffs, Sense::Eq, rhs);
        }
    }
    for e in 0..m {
        let (a, b) = net.edge(e);
        let coeffs = flows
            .iter()
            .zip(&commodities)
            .map(|(f, &(_, first))| (first + e, f.demand.as_f64() / scale))
            .chain(std::iter::once((umax_var, -net.capacity(e).as_f64())));
        lp.add_row(format!("cap_{a}_{b}"), coeffs, Sense::Le, 0.0);
    }
    Ok((
        lp,
        UmaxLayout {
            umax_var,
            commodities,
            demand_scale: scale,
        },
    ))
}

/// Optimal max-link-utilisation and per-commodity edge fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<T> {
    pub u_max_optimal: T,
    pub edge_fractions: BTreeMap<(VertexId, VertexId), Vec<T>>,
    pub status: LpStatus,
}

pub fn solve_optimal_umax<T: Scalar>(
    net: &Network<T>,
    demands: &DemandMatrix<T>,
) -> Result<LpSolution<T>, LpError> {
    solve_optimal_umax_with(&MicroLp, net, demands)
}

pub fn solve_optimal_umax_with<T: Scalar>(
    backend: &dyn LpBackend,
    net: &Network<T>,
    demands: &DemandMatrix<T>,
) -> Result<LpSolution<T>, LpError> {
    let (lp, layout) = build_umax_lp(net, demands)?;
    if layout.commodities.is_empty() {
        return Ok(LpSolution {
            u_max_optimal: T::zero(),
            edge_fractions: BTreeMap::new(),
            status: LpStatus::Optimal,
        });
    }
    let outcome = backend.solve(&lp)?;
    if outcome.status != LpStatus::Optimal {
        return Ok(LpSolution {
            u_max_optimal: T::nan(),
            edge_fractions: BTreeMap::new(),
            status: outcome.status,
        });
    }
    let m = net.edge_count();
    let edge_fractions = layout
        .commodities
        .iter()
        .map(|&(key, first)| {
            let fr = outcome.values[first..first + m]
                .iter()
                .map(|&x| T::of(x.clamp(0.0, 1.0)))
                .collect();
            (key, fr)
        })
        .collect();
    let u = outcome.values[layout.umax_var].max(0.0) * layout.demand_scale;
    Ok(LpSolution {
        u_max_optimal: T::of(u),
        edge_fractions,
        status: LpStatus::Optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_report_from_fractions;

    fn single_flow(n: usize, s: usize, t: usize, d: f64) -> DemandMatrix<f64> {
        DemandMatrix::from_fn(n, |i, j| if (i, j) == (s, t) { d } else { 0.0 }).unwrap()
    }

    #[test]
    fn symmetric_two_path_is_half() {
        let net = Network::new(3, [(0, 2, 1.0), (0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let sol = solve_optimal_umax(&net, &single_flow(3, 0, 2, 1.0)).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.u_max_optimal - 0.5).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_capacities_match_brute_force() {
        // min over a of max(a/3, 1-a) on a 1e-3 grid
        let oracle = (0..=1000)
            .map(|k| {
                let a = k as f64 / 1000.0;
                (a / 3.0).max(1.0 - a)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((oracle - 0.25).abs() < 1e-3);
        let net = Network::new(3, [(0, 2, 3.0), (0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let sol = solve_optimal_umax(&net, &single_flow(3, 0, 2, 1.0)).unwrap();
        assert!((sol.u_max_optimal - oracle).abs() < 1e-3);
        let direct = sol.edge_fractions[&(0, 2)][net.edge_id(0, 2).unwrap()];
        assert!((direct - 0.75).abs() < 1e-6);
    }

    #[test]
    fn zero_demand_is_zero() {
        let net = Network::bidirectional(3, &[(0, 1), (1, 2)], 1.0).unwrap();
        let sol = solve_optimal_umax(&net, &DemandMatrix::zeros(3)).unwrap();
        assert_eq!(sol.u_max_optimal, 0.0);
    }

    #[test]
    fn solution_satisfies_constraints() {
        let net =
            Network::bidirectional(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 1.0).unwrap();
        let d =
            DemandMatrix::from_fn(4, |i, j| if i == j { 0.0 } else { (i + 2 * j) as f64 }).unwrap();
        let sol = solve_optimal_umax(&net, &d).unwrap();
        for (&(s, t), fr) in &sol.edge_fractions {
            for v in 0..4 {
                let out: f64 = net.out_edges(v).iter().map(|&e| fr[e]).sum();
                let inn: f64 = net.in_edges(v).iter().map(|&e| fr[e]).sum();
                let expect = if v == s {
                    1.0
                } else if v == t {
                    -1.0
                } else {
                    0.0
                };
                assert!((out - inn - expect).abs() < LP_TOLERANCE);
            }
        }
        let report = load_report_from_fractions(&net, &d, &sol.edge_fractions);
        assert!(report.u_max <= sol.u_max_optimal * (1.0 + 1e-6) + LP_TOLERANCE);
    }

    #[test]
    fn unreachable_sink_is_rejected() {
        let net = Network::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(
            solve_optimal_umax(&net, &single_flow(3, 2, 0, 1.0)).unwrap_err(),
            LpError::Unreachable(2, 0)
        );
    }

    #[test]
    fn cplex_dump_lists_rows_and_bounds() {
        let net = Network::new(3, [(0, 2, 1.0), (0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let (lp, _) = build_umax_lp(&net, &single_flow(3, 0, 2, 1.0)).unwrap();
        let text = lp.to_cplex_lp();
        assert!(text.contains("Minimize\n obj: 1 umax"), "{text}");
        assert!(text.contains(" cons_0_2_0: 1 f_0_2_0_1 + 1 f_0_2_0_2 = 1"));
        assert!(text.contains(" cap_0_2: 1 f_0_2_0_2 - 1 umax <= 0"));
        assert!(text.contains(" umax >= 0"));
        assert!(text.ends_with("End\n"));
    }
}
