//! Dual (auxiliary-variable) representations of pairwise factors.
//!
//! Every factor table `P` is written as a finite mixture
//!
//! ```text
//! P[a, b] = h_u[a] * h_v[b] * sum_k g_k * exp(left_k[a] + right_k[b])
//! ```
//!
//! where `k` ranges over the states of the factor's dual variable. Given the
//! dual variables of all factors the primal variables are conditionally
//! independent (up to equality bonds, see [`Component::Equality`]), and given
//! the primal variables the dual variables are independent. That is what the
//! two-block sampler in [`crate::sampling`] exploits.
//!
//! Binary factors go through a strictly positive factorization `P = B C^T`
//! ([`factorize_positive`]) whose two rank-one terms become the two dual
//! states ([`dual_params`]). Potts factors use the Swendsen-Wang bond split,
//! and Ising factors can alternatively use Higdon's partial split.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::{parse_model, write_model};
use crate::model::{Factor, FactorId, Model, State, Table};

pub type Mat2 = [[f64; 2]; 2];

/// Relative determinant below which a 2x2 table is treated as exactly rank one.
const RANK_ONE_SNAP: f64 = 1e-12;

/// Entries below this fraction of the largest entry count as zero.
const ZERO_FLOOR: f64 = 1e-12;

/// Relative tolerance for recognizing Ising/Potts structure.
const STRUCTURE_TOL: f64 = 1e-12;

pub fn mat_mul_t(b: &Mat2, c: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = b[i][0] * c[j][0] + b[i][1] * c[j][1];
        }
    }
    out
}

fn check_positive(p: &Mat2) -> Result<()> {
    if p.iter().flatten().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidTable(format!("entries must be strictly positive and finite: {p:?}")));
    }
    Ok(())
}

/// Factor a symmetric positive 2x2 matrix with non-negative determinant as
/// `B B^T` with a positive `B`.
///
/// `B = [[sqrt(p11) cos(phi), sqrt(p11) sin(phi)], [sqrt(p22) sin(phi), sqrt(p22) cos(phi)]]`
/// with `phi = pi/4 - acos(p12 / sqrt(p11 p22)) / 2`, evaluated through the
/// closed forms `cos(phi) = (sqrt(1+a) + sqrt(1-a)) / 2` and
/// `sin(phi) = (sqrt(1+a) - sqrt(1-a)) / 2`.
pub fn symmetric_factor(p: Mat2) -> Result<Mat2> {
    check_positive(&p)?;
    let scale = p[0][1].abs().max(p[1][0].abs());
    if (p[0][1] - p[1][0]).abs() > 1e-12 * scale {
        return Err(Error::InvalidTable(format!("matrix is not symmetric: {p:?}")));
    }
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    if det < -RANK_ONE_SNAP * p[0][0] * p[1][1] {
        return Err(Error::InvalidTable(format!("determinant {det} is negative")));
    }
    Ok(symmetric_factor_unchecked(p, det))
}

fn symmetric_factor_unchecked(p: Mat2, det: f64) -> Mat2 {
    let diag = p[0][0] * p[1][1];
    let a = (p[0][1] / diag.sqrt()).clamp(0.0, 1.0);
    // 1 - a^2 from the determinant keeps precision near rank one.
    let mut one_minus_a2 = (det / diag).clamp(0.0, 1.0);
    if one_minus_a2 < RANK_ONE_SNAP {
        one_minus_a2 = 0.0;
    }
    let (cos, sin) = if one_minus_a2 == 0.0 {
        (FRAC_1_SQRT_2, FRAC_1_SQRT_2)
    } else {
        let sp = (1.0 + a).sqrt();
        let sm = one_minus_a2.sqrt() / sp;
        (0.5 * (sp + sm), 0.5 * (sp - sm))
    };
    let (r1, r2) = (p[0][0].sqrt(), p[1][1].sqrt());
    [[r1 * cos, r1 * sin], [r2 * sin, r2 * cos]]
}

/// Strictly positive factorization `P = B C^T` of a strictly positive 2x2
/// matrix.
///
/// If `det P < 0` the rows are swapped first, which flips the sign of the
/// determinant. Scaling the rows by `1/p12` and `1/p21` then gives a
/// symmetric matrix `M` with the same determinant sign, `M = Bt Bt^T`, and
/// undoing the row operations yields `B = S D^-1 Bt`, `C = Bt`.
pub fn factorize_positive(p: Mat2) -> Result<(Mat2, Mat2)> {
    check_positive(&p)?;
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let swapped = det < 0.0;
    let pp = if swapped { [p[1], p[0]] } else { p };
    let m = [[pp[0][0] / pp[0][1], 1.0], [1.0, pp[1][1] / pp[1][0]]];
    let det_m = (m[0][0] * m[1][1] - 1.0).max(0.0);
    let bt = symmetric_factor_unchecked(m, det_m);
    let mut b = [
        [pp[0][1] * bt[0][0], pp[0][1] * bt[0][1]],
        [pp[1][0] * bt[1][0], pp[1][0] * bt[1][1]],
    ];
    if swapped {
        b.swap(0, 1);
    }
    Ok((b, bt))
}

/// Dual parameters of a binary factor: with `theta` in `{0, 1}`,
///
/// ```text
/// P[x1, x2] ∝ sum_theta exp(alpha1 x1 + alpha2 x2) exp(q theta) exp(theta (beta1 x1 + beta2 x2))
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualFactor {
    pub alpha1: f64,
    pub alpha2: f64,
    pub q: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl DualFactor {
    /// The mixture evaluated at all four states (proportional to the table).
    pub fn reconstruct(&self) -> Mat2 {
        let mut out = [[0.0; 2]; 2];
        for (x1, row) in out.iter_mut().enumerate() {
            for (x2, o) in row.iter_mut().enumerate() {
                let (x1f, x2f) = (x1 as f64, x2 as f64);
                let h = (self.alpha1 * x1f + self.alpha2 * x2f).exp();
                let on = (self.q + self.beta1 * x1f + self.beta2 * x2f).exp();
                *o = h * (1.0 + on);
            }
        }
        out
    }
}

/// Dual parameters from a positive factorization `P = B C^T`.
pub fn dual_params(b: &Mat2, c: &Mat2) -> Result<DualFactor> {
    check_positive(b)?;
    check_positive(c)?;
    Ok(DualFactor {
        alpha1: (b[1][0] / b[0][0]).ln(),
        alpha2: (c[1][0] / c[0][0]).ln(),
        q: (b[0][1] * c[0][1] / (b[0][0] * c[0][0])).ln(),
        beta1: (b[1][1] * b[0][0] / (b[0][1] * b[1][0])).ln(),
        beta2: (c[1][1] * c[0][0] / (c[0][1] * c[1][0])).ln(),
    })
}

/// One term of a factor mixture, in the linear domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    /// `weight * left ⊗ right`.
    RankOne { weight: f64, left: Vec<f64>, right: Vec<f64> },
    /// `weight * diag(diag)`: nonzero only where both endpoints agree.
    /// Represents a Swendsen-Wang style bond.
    Equality { weight: f64, diag: Vec<f64> },
}

impl Component {
    pub fn weight(&self) -> f64 {
        match self {
            Component::RankOne { weight, .. } | Component::Equality { weight, .. } => *weight,
        }
    }

    pub fn value(&self, a: usize, b: usize) -> f64 {
        match self {
            Component::RankOne { weight, left, right } => weight * left[a] * right[b],
            Component::Equality { weight, diag } => {
                if a == b {
                    weight * diag[a]
                } else {
                    0.0
                }
            }
        }
    }
}

/// A factor table written as a sum of components.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    rows: usize,
    cols: usize,
    components: Vec<Component>,
}

impl Mixture {
    pub fn new(rows: usize, cols: usize, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        for c in &components {
            let ok = match c {
                Component::RankOne { weight, left, right } => {
                    left.len() == rows
                        && right.len() == cols
                        && *weight > 0.0
                        && left.iter().chain(right).all(|&x| x >= 0.0 && x.is_finite())
                        && left.iter().any(|&x| x > 0.0)
                        && right.iter().any(|&x| x > 0.0)
                }
                Component::Equality { weight, diag } => {
                    rows == cols
                        && diag.len() == rows
                        && *weight > 0.0
                        && diag.iter().all(|&x| x >= 0.0 && x.is_finite())
                        && diag.iter().any(|&x| x > 0.0)
                }
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("malformed mixture component {c:?}")));
            }
        }
        Ok(Self { rows, cols, components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(Component::weight).collect()
    }

    /// Sum of all components, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for a in 0..self.rows {
            for b in 0..self.cols {
                out[a * self.cols + b] = self.components.iter().map(|c| c.value(a, b)).sum();
            }
        }
        out
    }

    /// Largest entrywise relative deviation from `table`.
    pub fn relative_error(&self, table: &Table) -> f64 {
        relative_error(&self.reconstruct(), table.data())
    }
}

/// Largest entrywise `|got - want| / |want|`.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs())
        .fold(0.0, f64::max)
}

/// Largest entrywise deviation of `got` from `c * want`, where `c` is fixed
/// by the first entry.
pub fn proportionality_error(got: &[f64], want: &[f64]) -> f64 {
    let c = got[0] / want[0];
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - c * w).abs() / (c * w).abs())
        .fold(0.0, f64::max)
}

/// Swendsen-Wang split of a Potts table `[1 on the diagonal, e^-w elsewhere]`
/// with the equality part expanded into one rank-one indicator term per
/// state: `1 + n_states` components.
pub fn sw_decompose(w: f64, n_states: usize) -> Result<Mixture> {
    check_sw(w, n_states)?;
    let off = (-w).exp();
    let mut components = vec![Component::RankOne {
        weight: off,
        left: vec![1.0; n_states],
        right: vec![1.0; n_states],
    }];
    for k in 0..n_states {
        let mut e = vec![0.0; n_states];
        e[k] = 1.0;
        components.push(Component::RankOne {
            weight: 1.0 - off,
            left: e.clone(),
            right: e,
        });
    }
    Mixture::new(n_states, n_states, components)
}

/// Swendsen-Wang split with the equality part kept as a single bond: the
/// dual variable is the usual binary bond indicator.
pub fn sw_bond_mixture(w: f64, n_states: usize) -> Result<Mixture> {
    check_sw(w, n_states)?;
    let off = (-w).exp();
    Mixture::new(
        n_states,
        n_states,
        vec![
            Component::RankOne {
                weight: off,
                left: vec![1.0; n_states],
                right: vec![1.0; n_states],
            },
            Component::Equality {
                weight: 1.0 - off,
                diag: vec![1.0; n_states],
            },
        ],
    )
}

fn check_sw(w: f64, n_states: usize) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("Swendsen-Wang coupling must be positive, got {w}")));
    }
    if n_states < 2 {
        return Err(Error::InvalidArgument("need at least two states".into()));
    }
    Ok(())
}

/// Higdon's partial Swendsen-Wang split of the Ising table
/// `[[1, e^-w], [e^-w, 1]] = [[1-alpha, e^-w], [e^-w, 1-alpha]] + alpha I`.
///
/// The first term is positively factorized into two rank-one components, the
/// second is an equality bond: a three-state dual variable.
pub fn higdon_decompose(w: f64, alpha: f64) -> Result<Mixture> {
    check_sw(w, 2)?;
    let off = (-w).exp();
    let max_alpha = 1.0 - off;
    if !(alpha > 0.0 && alpha <= max_alpha * (1.0 + 1e-15)) {
        return Err(Error::InvalidArgument(format!(
            "Higdon alpha must lie in (0, {max_alpha}], got {alpha}"
        )));
    }
    let d = (1.0 - alpha).max(off);
    let (b, c) = factorize_positive([[d, off], [off, d]])?;
    let mut components: Vec<Component> = (0..2)
        .map(|k| Component::RankOne {
            weight: 1.0,
            left: vec![b[0][k], b[1][k]],
            right: vec![c[0][k], c[1][k]],
        })
        .collect();
    components.push(Component::Equality {
        weight: alpha,
        diag: vec![1.0, 1.0],
    });
    Mixture::new(2, 2, components)
}

/// Default Higdon split parameter, half of the feasible range.
pub fn default_higdon_alpha(w: f64) -> f64 {
    0.5 * (1.0 - (-w).exp())
}

/// How `dualize` treats each factor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Strategy {
    /// Binary factors through the positive factorization, Potts factors with
    /// more than two states through Swendsen-Wang bonds, anything else
    /// through an entrywise mixture.
    #[default]
    Generic,
    /// Swendsen-Wang bonds on every factor; all factors must be Potts.
    SwendsenWang,
    /// Higdon's split on every factor; all factors must be binary Ising.
    /// `None` uses [`default_higdon_alpha`].
    Higdon { alpha: Option<f64> },
}

/// How a factor dual was constructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualKind {
    Binary(DualFactor),
    SwendsenWang { w: f64 },
    Higdon { w: f64, alpha: f64 },
    Entrywise { floor: f64 },
    Custom,
}

/// Log-domain component used by the samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct LogComponent {
    pub log_weight: f64,
    /// Message to the first endpoint. For equality components this holds
    /// the log diagonal.
    pub left: Vec<f64>,
    /// Message to the second endpoint. Zero for equality components.
    pub right: Vec<f64>,
    pub equality: bool,
}

impl LogComponent {
    /// `log g_k + <s(x), r_k>` for endpoint states `(a, b)`.
    #[inline]
    pub fn log_value(&self, a: usize, b: usize) -> f64 {
        if self.equality && a != b {
            f64::NEG_INFINITY
        } else {
            self.log_weight + self.left[a] + self.right[b]
        }
    }
}

/// The dual representation of one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDual {
    scope: (usize, usize),
    /// Log `h_i` terms moved into the endpoint unaries.
    absorbed: (Vec<f64>, Vec<f64>),
    components: Vec<LogComponent>,
    kind: DualKind,
}

impl FactorDual {
    /// Dual of a binary factor from its dual parameters. `log_scale` is
    /// `log(B11 C11)`, making the mixture equal to the table rather than
    /// merely proportional.
    pub fn from_params(scope: (usize, usize), params: DualFactor, log_scale: f64) -> Self {
        Self {
            scope,
            absorbed: (vec![0.0, params.alpha1], vec![0.0, params.alpha2]),
            components: vec![
                LogComponent {
                    log_weight: log_scale,
                    left: vec![0.0, 0.0],
                    right: vec![0.0, 0.0],
                    equality: false,
                },
                LogComponent {
                    log_weight: log_scale + params.q,
                    left: vec![0.0, params.beta1],
                    right: vec![0.0, params.beta2],
                    equality: false,
                },
            ],
            kind: DualKind::Binary(params),
        }
    }

    pub fn from_mixture(scope: (usize, usize), mixture: &Mixture, kind: DualKind) -> Self {
        let ln = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
        let components = mixture
            .components()
            .iter()
            .map(|c| match c {
                Component::RankOne { weight, left, right } => LogComponent {
                    log_weight: weight.ln(),
                    left: ln(left),
                    right: ln(right),
                    equality: false,
                },
                Component::Equality { weight, diag } => LogComponent {
                    log_weight: weight.ln(),
                    left: ln(diag),
                    right: vec![0.0; diag.len()],
                    equality: true,
                },
            })
            .collect();
        Self {
            scope,
            absorbed: (vec![0.0; mixture.rows], vec![0.0; mixture.cols]),
            components,
            kind,
        }
    }

    pub fn scope(&self) -> (usize, usize) {
        self.scope
    }

    pub fn kind(&self) -> DualKind {
        self.kind
    }

    pub fn params(&self) -> Option<DualFactor> {
        match self.kind {
            DualKind::Binary(p) => Some(p),
            _ => None,
        }
    }

    pub fn components(&self) -> &[LogComponent] {
        &self.components
    }

    pub fn absorbed(&self) -> (&[f64], &[f64]) {
        (&self.absorbed.0, &self.absorbed.1)
    }

    /// Number of states of the dual variable.
    pub fn cardinality(&self) -> usize {
        self.components.len()
    }

    pub fn has_equality(&self) -> bool {
        self.components.iter().any(|c| c.equality)
    }

    /// Whether every component message is finite, i.e. the dual admits the
    /// expectation-based variational updates.
    pub fn is_smooth(&self) -> bool {
        self.components
            .iter()
            .all(|c| !c.equality && c.left.iter().chain(&c.right).all(|x| x.is_finite()))
    }

    /// Message component `k` sends to endpoint `v`.
    #[inline]
    pub fn message(&self, k: usize, to_first: bool) -> &[f64] {
        if to_first {
            &self.components[k].left
        } else {
            &self.components[k].right
        }
    }

    /// `log p~_i(x_u, x_v, theta_i)` excluding the absorbed terms.
    #[inline]
    pub fn log_component(&self, k: usize, a: usize, b: usize) -> f64 {
        self.components[k].log_value(a, b)
    }

    /// `log G_i(x_u, x_v) = log sum_k g_k exp(<s, r_k>)`.
    pub fn log_g(&self, a: usize, b: usize) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for c in &self.components {
            max = max.max(c.log_value(a, b));
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + self
            .components
            .iter()
            .map(|c| (c.log_value(a, b) - max).exp())
            .sum::<f64>()
            .ln()
    }

    /// The full factor value `h_u h_v G` at every state, row-major. Equals
    /// the original table.
    pub fn reconstruct(&self) -> Vec<f64> {
        let (rows, cols) = (self.absorbed.0.len(), self.absorbed.1.len());
        let mut out = Vec::with_capacity(rows * cols);
        for a in 0..rows {
            for b in 0..cols {
                out.push((self.absorbed.0[a] + self.absorbed.1[b] + self.log_g(a, b)).exp());
            }
        }
        out
    }
}

fn potts_coupling(table: &Table) -> Option<(f64, f64)> {
    let n = table.rows();
    if table.cols() != n {
        return None;
    }
    let d = table.get(0, 0);
    let o = table.get(0, 1);
    let close = |x: f64, y: f64| (x - y).abs() <= STRUCTURE_TOL * y.abs();
    for a in 0..n {
        for b in 0..n {
            let want = if a == b { d } else { o };
            if !close(table.get(a, b), want) {
                return None;
            }
        }
    }
    (d > o).then_some((d, o))
}

fn scaled_mixture(mixture: Mixture, scale: f64) -> Mixture {
    let components = mixture
        .components
        .into_iter()
        .map(|c| match c {
            Component::RankOne { weight, left, right } => Component::RankOne {
                weight: weight * scale,
                left,
                right,
            },
            Component::Equality { weight, diag } => Component::Equality {
                weight: weight * scale,
                diag,
            },
        })
        .collect();
    Mixture { components, ..mixture }
}

/// Binary dual of a strictly positive 2x2 table via the positive
/// factorization pipeline.
pub fn dualize_binary(scope: (usize, usize), table: &Table) -> Result<FactorDual> {
    let p = [[table.get(0, 0), table.get(0, 1)], [table.get(1, 0), table.get(1, 1)]];
    let (b, c) = factorize_positive(p)?;
    let params = dual_params(&b, &c)?;
    Ok(FactorDual::from_params(scope, params, (b[0][0] * c[0][0]).ln()))
}

/// Dual of a single factor under `strategy`.
pub fn dualize_factor(factor: &Factor, strategy: Strategy) -> Result<FactorDual> {
    let table = factor.table();
    let id = factor.id();
    let scope = factor.scope();
    if table.min_entry() < ZERO_FLOOR * table.max_entry() {
        return Err(Error::InvalidFactor {
            factor: id,
            reason: "table has effectively zero entries".into(),
        });
    }
    match strategy {
        Strategy::Generic => {
            if table.rows() == 2 && table.cols() == 2 {
                return dualize_binary(scope, table).map_err(|e| Error::InvalidFactor {
                    factor: id,
                    reason: e.to_string(),
                });
            }
            if let Some((d, o)) = potts_coupling(table) {
                let w = (d / o).ln();
                let mixture = scaled_mixture(sw_bond_mixture(w, table.rows())?, d);
                return Ok(FactorDual::from_mixture(scope, &mixture, DualKind::SwendsenWang { w }));
            }
            let floor = 0.5 * table.min_entry();
            let (rows, cols) = (table.rows(), table.cols());
            let mut components = vec![Component::RankOne {
                weight: floor,
                left: vec![1.0; rows],
                right: vec![1.0; cols],
            }];
            for a in 0..rows {
                for b in 0..cols {
                    let mut left = vec![0.0; rows];
                    let mut right = vec![0.0; cols];
                    left[a] = 1.0;
                    right[b] = 1.0;
                    components.push(Component::RankOne {
                        weight: table.get(a, b) - floor,
                        left,
                        right,
                    });
                }
            }
            let mixture = Mixture::new(rows, cols, components)?;
            Ok(FactorDual::from_mixture(scope, &mixture, DualKind::Entrywise { floor }))
        }
        Strategy::SwendsenWang => {
            let (d, o) = potts_coupling(table).ok_or(Error::NotSwendsenWang(id))?;
            let w = (d / o).ln();
            let mixture = scaled_mixture(sw_bond_mixture(w, table.rows())?, d);
            Ok(FactorDual::from_mixture(scope, &mixture, DualKind::SwendsenWang { w }))
        }
        Strategy::Higdon { alpha } => {
            let (d, o) = potts_coupling(table)
                .filter(|_| table.rows() == 2)
                .ok_or(Error::NotSwendsenWang(id))?;
            let w = (d / o).ln();
            let alpha = alpha.unwrap_or_else(|| default_higdon_alpha(w));
            let mixture = scaled_mixture(higdon_decompose(w, alpha)?, d);
            Ok(FactorDual::from_mixture(scope, &mixture, DualKind::Higdon { w, alpha }))
        }
    }
}

/// Assignment of every dual variable, indexed by factor id. Entries of
/// removed factors are ignored.
pub type DualState = Vec<usize>;

/// A model augmented with one dual variable per factor.
///
/// The absorbed `h_i` terms are folded into per-variable unaries, so that
/// `log p~(x, theta) = sum_v h_unary[v][x_v] + sum_i log_component_i(theta_i, x)`
/// and `sum_theta p~(x, theta) = p~(x)` exactly.
#[derive(Debug, Clone)]
pub struct DualModel {
    base: Model,
    strategy: Strategy,
    duals: Vec<Option<FactorDual>>,
    h_unary: Vec<Vec<f64>>,
    equality_factors: usize,
    edit_work: u64,
}

impl DualModel {
    pub fn new(model: Model, strategy: Strategy) -> Result<Self> {
        let mut duals = vec![None; model.factor_capacity()];
        let mut equality_factors = 0;
        for f in model.factors() {
            let dual = dualize_factor(f, strategy)?;
            equality_factors += usize::from(dual.has_equality());
            duals[f.id().index()] = Some(dual);
        }
        let mut out = Self {
            h_unary: Vec::with_capacity(model.num_variables()),
            base: model,
            strategy,
            duals,
            equality_factors,
            edit_work: 0,
        };
        for v in 0..out.base.num_variables() {
            let h = out.compute_h_unary(v);
            out.h_unary.push(h);
        }
        out.edit_work = 0;
        Ok(out)
    }

    pub fn model(&self) -> &Model {
        &self.base
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn num_variables(&self) -> usize {
        self.base.num_variables()
    }

    pub fn factor_capacity(&self) -> usize {
        self.duals.len()
    }

    pub fn dual(&self, id: FactorId) -> Option<&FactorDual> {
        self.duals.get(id.index()).and_then(Option::as_ref)
    }

    /// Live factor duals in increasing id order.
    pub fn duals(&self) -> impl Iterator<Item = (FactorId, &FactorDual)> + '_ {
        self.duals
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.as_ref().map(|d| (FactorId(i), d)))
    }

    pub(crate) fn dual_slots(&self) -> &[Option<FactorDual>] {
        &self.duals
    }

    /// `log h` restricted to variable `v`: the model unary plus every
    /// absorbed term of incident factors.
    pub fn h_unary(&self, v: usize) -> &[f64] {
        &self.h_unary[v]
    }

    pub fn has_equality(&self) -> bool {
        self.equality_factors > 0
    }

    /// Whether every factor dual has finite messages and no equality bonds.
    pub fn is_smooth(&self) -> bool {
        self.duals().all(|(_, d)| d.is_smooth())
    }

    pub fn dual_cardinality(&self, id: FactorId) -> Option<usize> {
        self.dual(id).map(FactorDual::cardinality)
    }

    /// Adjacency entries and unary terms touched by edits so far.
    pub fn edit_work(&self) -> u64 {
        self.edit_work + self.base.edit_work()
    }

    fn compute_h_unary(&mut self, v: usize) -> Vec<f64> {
        let mut h = self.base.unary(v).to_vec();
        for &fid in self.base.adjacency(v) {
            self.edit_work += 1;
            let dual = self.duals[fid.index()].as_ref().expect("dual out of sync");
            let (u, _) = dual.scope;
            let absorbed = if u == v { &dual.absorbed.0 } else { &dual.absorbed.1 };
            for (hk, a) in h.iter_mut().zip(absorbed) {
                *hk += a;
            }
        }
        h
    }

    /// Add a factor and dualize it; only the two endpoint unaries are
    /// recomputed.
    pub fn add_factor(&mut self, u: usize, v: usize, table: Table) -> Result<FactorId> {
        let id = self.base.add_factor(u, v, table)?;
        let dual = match dualize_factor(self.base.factor(id).unwrap(), self.strategy) {
            Ok(d) => d,
            Err(e) => {
                self.base.remove_factor(id)?;
                return Err(e);
            }
        };
        self.equality_factors += usize::from(dual.has_equality());
        if self.duals.len() <= id.index() {
            self.duals.resize(id.index() + 1, None);
        }
        self.duals[id.index()] = Some(dual);
        self.refresh_endpoints(u, v);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor> {
        let factor = self.base.remove_factor(id)?;
        let dual = self.duals[id.index()].take().expect("dual out of sync");
        self.equality_factors -= usize::from(dual.has_equality());
        let (u, v) = factor.scope();
        self.refresh_endpoints(u, v);
        Ok(factor)
    }

    /// Replace the dual of an existing factor, e.g. with an alternative
    /// decomposition. The new dual must reproduce the factor table.
    pub fn replace_dual(&mut self, id: FactorId, dual: FactorDual) -> Result<()> {
        let factor = self.base.factor(id).ok_or(Error::UnknownFactor(id))?;
        if dual.scope != factor.scope() {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: "dual scope differs from factor scope".into(),
            });
        }
        let err = relative_error(&dual.reconstruct(), factor.table().data());
        if err.is_nan() || err > 1e-10 {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: format!("dual does not reproduce the table (relative error {err:e})"),
            });
        }
        let old = self.duals[id.index()].replace(dual).expect("dual out of sync");
        self.equality_factors -= usize::from(old.has_equality());
        self.equality_factors += usize::from(self.duals[id.index()].as_ref().unwrap().has_equality());
        let (u, v) = factor.scope();
        self.refresh_endpoints(u, v);
        Ok(())
    }

    fn refresh_endpoints(&mut self, u: usize, v: usize) {
        self.h_unary[u] = self.compute_h_unary(u);
        self.h_unary[v] = self.compute_h_unary(v);
    }

    pub fn validate(&self, x: &[usize], theta: &[usize]) -> Result<()> {
        self.base.validate_state(x)?;
        if theta.len() < self.duals.len() {
            return Err(Error::StateLength {
                expected: self.duals.len(),
                got: theta.len(),
            });
        }
        for (id, dual) in self.duals() {
            let k = theta[id.index()];
            if k >= dual.cardinality() {
                return Err(Error::StateOutOfRange {
                    var: id.index(),
                    state: k,
                    cardinality: dual.cardinality(),
                });
            }
        }
        Ok(())
    }

    /// `log p~(x, theta)`; `-inf` where an active bond is violated.
    pub fn log_joint(&self, x: &[usize], theta: &[usize]) -> f64 {
        let unary: f64 = (0..x.len()).map(|v| self.h_unary[v][x[v]]).sum();
        let pair: f64 = self
            .duals()
            .map(|(id, d)| d.log_component(theta[id.index()], x[d.scope.0], x[d.scope.1]))
            .sum();
        unary + pair
    }

    /// `log h(x)`.
    pub fn log_h(&self, x: &[usize]) -> f64 {
        (0..x.len()).map(|v| self.h_unary[v][x[v]]).sum()
    }

    /// `log g(theta)`.
    pub fn log_g_theta(&self, theta: &[usize]) -> f64 {
        self.duals()
            .map(|(id, d)| d.components[theta[id.index()]].log_weight)
            .sum()
    }

    /// Mixed-radix sizes of the dual state, in live-factor order.
    pub(crate) fn live_dual_ids(&self) -> Vec<FactorId> {
        self.duals().map(|(id, _)| id).collect()
    }

    pub fn zero_dual_state(&self) -> DualState {
        vec![0; self.duals.len()]
    }
}

/// Convenience wrapper for [`DualModel::new`] with the generic strategy.
pub fn dualize_model(model: Model) -> Result<DualModel> {
    DualModel::new(model, Strategy::Generic)
}

/// Serialize a dual model: the model text followed by one `dual` line per
/// factor.
///
/// * `dual <id> binary <alpha1> <alpha2> <q> <beta1> <beta2> <log_scale>`
/// * `dual <id> swendsen-wang <w>`
/// * `dual <id> higdon <w> <alpha>`
/// * `dual <id> entrywise <floor>`
pub fn write_dual_model(dual: &DualModel) -> Result<String> {
    let mut out = write_model(&dual.base);
    for (id, d) in dual.duals() {
        match d.kind {
            DualKind::Binary(p) => writeln!(
                out,
                "dual {id} binary {:?} {:?} {:?} {:?} {:?} {:?}",
                p.alpha1, p.alpha2, p.q, p.beta1, p.beta2, d.components[0].log_weight
            ),
            DualKind::SwendsenWang { w } => writeln!(out, "dual {id} swendsen-wang {w:?}"),
            DualKind::Higdon { w, alpha } => writeln!(out, "dual {id} higdon {w:?} {alpha:?}"),
            DualKind::Entrywise { floor } => writeln!(out, "dual {id} entrywise {floor:?}"),
            DualKind::Custom => {
                return Err(Error::Unsupported(format!(
                    "factor {id} has a custom dual without a text form"
                )))
            }
        }
        .unwrap();
    }
    Ok(out)
}

/// Parse the output of [`write_dual_model`]. Every listed dual is checked
/// against its factor table.
pub fn parse_dual_model(text: &str) -> Result<DualModel> {
    let mut model_text = String::with_capacity(text.len());
    let mut dual_lines = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.split('#').next().unwrap_or("").trim();
        if trimmed.starts_with("dual ") || trimmed == "dual" {
            dual_lines.push((idx + 1, trimmed.to_string()));
            model_text.push('\n');
        } else {
            model_text.push_str(line);
            model_text.push('\n');
        }
    }
    let model = parse_model(&model_text)?;
    let mut dual = DualModel::new(model, Strategy::Generic)?;
    let err = |line: usize, message: String| Error::Parse { line, message };
    for (line, text) in dual_lines {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(err(line, "`dual` needs an id and a kind".into()));
        }
        let id = FactorId(
            tokens[1]
                .parse()
                .map_err(|_| err(line, format!("bad factor id `{}`", tokens[1])))?,
        );
        let nums = tokens[3..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(line, format!("expected a number, got `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let factor = dual
            .model()
            .factor(id)
            .ok_or_else(|| err(line, format!("unknown factor {id}")))?;
        let scope = factor.scope();
        let expect = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(err(line, format!("`{}` takes {n} numbers", tokens[2])))
            }
        };
        let fd = match tokens[2] {
            "binary" => {
                expect(6)?;
                let params = DualFactor {
                    alpha1: nums[0],
                    alpha2: nums[1],
                    q: nums[2],
                    beta1: nums[3],
                    beta2: nums[4],
                };
                FactorDual::from_params(scope, params, nums[5])
            }
            "swendsen-wang" => {
                expect(0).or_else(|_| expect(1))?;
                dualize_factor(factor, Strategy::SwendsenWang).map_err(|e| err(line, e.to_string()))?
            }
            "higdon" => {
                expect(2)?;
                dualize_factor(factor, Strategy::Higdon { alpha: Some(nums[1]) })
                    .map_err(|e| err(line, e.to_string()))?
            }
            "entrywise" => {
                expect(1)?;
                dualize_factor(factor, Strategy::Generic).map_err(|e| err(line, e.to_string()))?
            }
            other => return Err(err(line, format!("unknown dual kind `{other}`"))),
        };
        dual.replace_dual(id, fd).map_err(|e| err(line, e.to_string()))?;
    }
    Ok(dual)
}

/// Reconstruction check for a whole dual model: `sum_theta p~(x, theta)`
/// against `p~(x)` at one state, in log space.
pub fn marginal_log_joint(dual: &DualModel, x: &State) -> f64 {
    dual.log_h(x)
        + dual
            .duals()
            .map(|(_, d)| d.log_g(x[d.scope.0], x[d.scope.1]))
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use crate::model::{build_grid_ising, ising_table, potts_table};
    use proptest::prelude::*;

    fn max_rel(a: &Mat2, b: &Mat2) -> f64 {
        relative_error(&a.concat(), &b.concat())
    }

    #[test]
    fn symmetric_all_ones_is_rank_one() {
        let b = symmetric_factor([[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let h = FRAC_1_SQRT_2;
        for x in b.iter().flatten() {
            assert!((x - h).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_two_one() {
        let p = [[2.0, 1.0], [1.0, 2.0]];
        let b = symmetric_factor(p).unwrap();
        // phi = pi/12
        let phi = std::f64::consts::PI / 12.0;
        let want = [
            [2f64.sqrt() * phi.cos(), 2f64.sqrt() * phi.sin()],
            [2f64.sqrt() * phi.sin(), 2f64.sqrt() * phi.cos()],
        ];
        assert!(max_rel(&b, &want) < 1e-14);
        assert!((b[0][0] - 1.36603).abs() < 1e-5 && (b[0][1] - 0.36603).abs() < 1e-5);
        assert!(max_rel(&mat_mul_t(&b, &b), &p) < 1e-14);
    }

    #[test]
    fn symmetric_rejects_bad_input() {
        assert!(symmetric_factor([[1.0, 2.0], [1.0, 1.0]]).is_err());
        assert!(symmetric_factor([[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(symmetric_factor([[1.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn factorize_negative_determinant() {
        let p = [[1.0, 2.0], [3.0, 4.0]];
        let (b, c) = factorize_positive(p).unwrap();
        assert!(b.iter().chain(&c).flatten().all(|&x| x > 0.0));
        assert!(max_rel(&mat_mul_t(&b, &c), &p) < 1e-12);
    }

    #[test]
    fn factorize_all_ones() {
        let p = [[1.0, 1.0], [1.0, 1.0]];
        let (b, c) = factorize_positive(p).unwrap();
        assert!(max_rel(&mat_mul_t(&b, &c), &p) < 1e-15);
        assert!(factorize_positive([[1.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn dual_params_examples() {
        let ones = [[1.0, 1.0], [1.0, 1.0]];
        let d = dual_params(&ones, &ones).unwrap();
        assert_eq!(d, DualFactor { alpha1: 0.0, alpha2: 0.0, q: 0.0, beta1: 0.0, beta2: 0.0 });

        let b = [[1.0, 1.0], [2.0, 1.0]];
        let c = [[1.0, 1.0], [1.0, 2.0]];
        let d = dual_params(&b, &c).unwrap();
        let l2 = 2f64.ln();
        assert!((d.alpha1 - l2).abs() < 1e-15);
        assert!(d.alpha2.abs() < 1e-15 && d.q.abs() < 1e-15);
        assert!((d.beta1 + l2).abs() < 1e-15 && (d.beta2 - l2).abs() < 1e-15);
        // Oracle: evaluate the two-state mixture directly.
        let mut mix = [[0.0; 2]; 2];
        for (x1, row) in mix.iter_mut().enumerate() {
            for (x2, m) in row.iter_mut().enumerate() {
                for theta in 0..2 {
                    let (x1, x2, t) = (x1 as f64, x2 as f64, theta as f64);
                    *m += (d.alpha1 * x1 + d.alpha2 * x2 + d.q * t + t * (d.beta1 * x1 + d.beta2 * x2)).exp();
                }
            }
        }
        let want = [[2.0, 3.0], [3.0, 4.0]];
        assert_eq!(mat_mul_t(&b, &c), want);
        assert!(max_rel(&mix, &want) < 1e-14);
        assert!(max_rel(&d.reconstruct(), &want) < 1e-14);
    }

    #[test]
    fn sw_examples() {
        let m = sw_decompose(2f64.ln(), 2).unwrap();
        assert_eq!(m.len(), 3);
        assert!((m.weights()[0] - 0.5).abs() < 1e-15 && (m.weights()[1] - 0.5).abs() < 1e-15);

        let m = sw_decompose(1e-12, 2).unwrap();
        assert!((m.weights()[0] - 1.0).abs() < 1e-11 && m.weights()[1] < 1e-11);

        let m = sw_decompose(1.0, 2).unwrap();
        assert!((m.weights()[0] - 0.36788).abs() < 1e-5 && (m.weights()[1] - 0.63212).abs() < 1e-5);
        assert!(m.relative_error(&ising_table(1.0)) < 1e-15);

        let bond = sw_bond_mixture(1.0, 2).unwrap();
        assert_eq!(bond.len(), 2);
        assert!(bond.relative_error(&ising_table(1.0)) < 1e-15);

        let potts = sw_decompose(0.7, 4).unwrap();
        assert_eq!(potts.len(), 5);
        assert!(potts.relative_error(&potts_table(0.7, 4)) < 1e-15);
        assert!(sw_bond_mixture(0.7, 4).unwrap().relative_error(&potts_table(0.7, 4)) < 1e-15);

        assert!(sw_decompose(0.0, 2).is_err());
        assert!(sw_decompose(-1.0, 2).is_err());
    }

    #[test]
    fn higdon_examples() {
        let m = higdon_decompose(1.0, 0.3).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.relative_error(&ising_table(1.0)) < 1e-10);

        let edge = 1.0 - (-1f64).exp();
        let m = higdon_decompose(1.0, edge).unwrap();
        assert!(m.relative_error(&ising_table(1.0)) < 1e-10);

        // alpha -> 0: the bond weight vanishes and the rank-one part is the
        // plain Ising factorization.
        let m = higdon_decompose(1.0, 1e-14).unwrap();
        assert!(m.weights()[2] < 1e-13);
        let plain = dualize_binary((0, 1), &ising_table(1.0)).unwrap();
        let rank_one: Vec<f64> = {
            let two = Mixture::new(2, 2, m.components()[..2].to_vec()).unwrap();
            two.reconstruct()
        };
        assert!(relative_error(&rank_one, &plain.reconstruct()) < 1e-12);

        assert!(higdon_decompose(1.0, 0.0).is_err());
        assert!(higdon_decompose(1.0, 0.7).is_err());
    }

    #[test]
    fn rank_one_tables_have_no_coupling() {
        let u = [0.3, 1.7];
        let v = [2.2, 0.4];
        let p = [[u[0] * v[0], u[0] * v[1]], [u[1] * v[0], u[1] * v[1]]];
        let (b, c) = factorize_positive(p).unwrap();
        let d = dual_params(&b, &c).unwrap();
        assert!(d.beta1.abs() < 1e-9 && d.beta2.abs() < 1e-9, "{d:?}");
    }

    #[test]
    fn gauge_invariance() {
        let p = [[0.4, 1.3], [2.1, 0.9]];
        let p7 = [[2.8, 9.1], [14.7, 6.3]];
        let (b, c) = factorize_positive(p).unwrap();
        let (b7, c7) = factorize_positive(p7).unwrap();
        let d = dual_params(&b, &c).unwrap();
        let d7 = dual_params(&b7, &c7).unwrap();
        assert!((d.beta1 - d7.beta1).abs() < 1e-12 && (d.beta2 - d7.beta2).abs() < 1e-12);
        // Remaining parameters agree up to the reconstruction constant.
        let r = d.reconstruct().concat();
        let r7 = d7.reconstruct().concat();
        assert!(proportionality_error(&r, &r7) < 1e-12);
    }

    #[test]
    fn dualize_model_grid_and_locality() {
        let empty = dualize_model(Model::binary(3)).unwrap();
        assert_eq!(empty.duals().count(), 0);

        let mut dual = dualize_model(build_grid_ising(3, 3, 0.3, None).unwrap()).unwrap();
        let before: Vec<FactorDual> = dual.duals().map(|(_, d)| d.clone()).collect();
        let id = dual.add_factor(0, 8, ising_table(0.9)).unwrap();
        let after: Vec<FactorDual> = dual.duals().filter(|(i, _)| *i != id).map(|(_, d)| d.clone()).collect();
        assert_eq!(before, after);
        assert!(dual.dual(id).is_some());
    }

    #[test]
    fn dual_edits_keep_h_unary_consistent() {
        let mut dual = dualize_model(build_grid_ising(3, 3, 0.3, Some(&[0.1; 9])).unwrap()).unwrap();
        let fresh_before = dualize_model(dual.model().clone()).unwrap();
        let id = dual.add_factor(2, 6, Table::from_rows([[1.0, 2.0], [0.5, 3.0]])).unwrap();
        let fresh = dualize_model(dual.model().clone()).unwrap();
        for v in 0..9 {
            assert_eq!(dual.h_unary(v), fresh.h_unary(v));
        }
        dual.remove_factor(id).unwrap();
        for v in 0..9 {
            assert_eq!(dual.h_unary(v), fresh_before.h_unary(v));
        }
    }

    #[test]
    fn strategies_reject_wrong_structure() {
        let mut m = Model::binary(2);
        m.add_factor(0, 1, Table::from_rows([[1.0, 2.0], [3.0, 4.0]])).unwrap();
        assert!(matches!(
            DualModel::new(m.clone(), Strategy::SwendsenWang),
            Err(Error::NotSwendsenWang(_))
        ));
        assert!(DualModel::new(m, Strategy::Higdon { alpha: None }).is_err());

        let mut tiny = Model::binary(2);
        tiny.add_factor(0, 1, Table::from_rows([[1.0, 1e-13], [1.0, 1.0]])).unwrap();
        assert!(matches!(dualize_model(tiny), Err(Error::InvalidFactor { .. })));
    }

    #[test]
    fn every_strategy_reconstructs_tables() {
        let grid = build_grid_ising(2, 3, 0.8, None).unwrap();
        for strategy in [Strategy::Generic, Strategy::SwendsenWang, Strategy::Higdon { alpha: None }] {
            let dual = DualModel::new(grid.clone(), strategy).unwrap();
            for (id, d) in dual.duals() {
                let table = dual.model().factor(id).unwrap().table();
                assert!(relative_error(&d.reconstruct(), table.data()) < 1e-12, "{strategy:?}");
            }
        }
        // non-Potts multi-state table goes through the entrywise mixture
        let mut m = Model::new();
        m.add_variable(crate::model::Variable::new(vec![0.0, 0.0, 0.0]).unwrap());
        m.add_variable(crate::model::Variable::new(vec![0.0, 0.0]).unwrap());
        let t = Table::new(3, 2, vec![1.0, 2.0, 0.5, 0.25, 3.0, 1.5]).unwrap();
        m.add_factor(0, 1, t.clone()).unwrap();
        let dual = dualize_model(m).unwrap();
        let d = dual.dual(FactorId(0)).unwrap();
        assert_eq!(d.cardinality(), 7);
        assert!(relative_error(&d.reconstruct(), t.data()) < 1e-12);
    }

    #[test]
    fn dual_text_round_trip() {
        let mut dual = dualize_model(build_grid_ising(2, 2, 0.6, Some(&[0.2, -0.1, 0.0, 0.3])).unwrap()).unwrap();
        dual.add_factor(0, 3, Table::from_rows([[1.0, 2.0], [3.0, 4.0]])).unwrap();
        let text = write_dual_model(&dual).unwrap();
        assert!(text.contains("dual 4 binary"));
        let back = parse_dual_model(&text).unwrap();
        for ((ia, a), (ib, b)) in dual.duals().zip(back.duals()) {
            assert_eq!(ia, ib);
            assert_eq!(a, b);
        }

        let sw = DualModel::new(build_grid_ising(2, 2, 0.6, None).unwrap(), Strategy::SwendsenWang).unwrap();
        let back = parse_dual_model(&write_dual_model(&sw).unwrap()).unwrap();
        assert!(back.has_equality());

        let bad = text.replace("dual 4 binary", "dual 4 binary 9.0");
        assert!(matches!(parse_dual_model(&bad), Err(Error::Parse { .. })));
    }

    fn positive_table() -> impl proptest::strategy::Strategy<Value = Mat2> {
        proptest::strategy::Strategy::prop_map(proptest::array::uniform4(-3.0f64..3.0), |z| [[z[0].exp(), z[1].exp()], [z[2].exp(), z[3].exp()]])
    }

    proptest! {
        #[test]
        fn symmetric_factor_reconstructs(p11 in 0.05f64..20.0, p22 in 0.05f64..20.0, frac in 0.0f64..=1.0) {
            let p12 = frac * (p11 * p22).sqrt();
            prop_assume!(p12 > 0.0);
            let p = [[p11, p12], [p12, p22]];
            let b = symmetric_factor(p).unwrap();
            prop_assert!(b.iter().flatten().all(|&x| x > 0.0));
            prop_assert!(max_rel(&mat_mul_t(&b, &b), &p) < 1e-12);
        }

        #[test]
        fn factorize_reconstructs(p in positive_table()) {
            let (b, c) = factorize_positive(p).unwrap();
            prop_assert!(b.iter().chain(&c).flatten().all(|&x| x > 0.0));
            prop_assert!(max_rel(&mat_mul_t(&b, &c), &p) < 1e-10);
            let d = dual_params(&b, &c).unwrap();
            prop_assert!(proportionality_error(&d.reconstruct().concat(), &p.concat()) < 1e-10);
        }
    }
}
