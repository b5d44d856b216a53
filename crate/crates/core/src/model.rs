//! Game specification, standing-assumption validation, and bundled
//! reference instances.
//!
//! A [`ProblemSpec`] holds the regime-indexed coefficients of the state
//! equation
//!
//! ```text
//! dx = [A x + A_hat x_bar + B1 u1 + B2 u2] dt
//!    + [C x + C_hat x_bar + D1 u1 + D2 u2] dW,    x_bar = E[x | chain]
//! ```
//!
//! together with both players' quadratic cost weights and the generator of
//! the modulating Markov chain. Regimes are indexed 0-based internally;
//! file formats and reports use 1-based indices.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for generator row sums and weight symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue floor for positive semidefiniteness checks.
pub const PSD_TOL: f64 = 1e-10;

/// Per-regime coefficient matrices and cost weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeCoefficients {
    pub a: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q1_hat: DMatrix<f64>,
    pub n1: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub g1_hat: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q2_hat: DMatrix<f64>,
    pub n2: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub g2_hat: DMatrix<f64>,
}

impl RegimeCoefficients {
    /// All-zero dynamics with identity control weights, for building
    /// instances field by field.
    pub fn zeros(n: usize, m1: usize, m2: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            a_hat: DMatrix::zeros(n, n),
            b1: DMatrix::zeros(n, m1),
            b2: DMatrix::zeros(n, m2),
            c: DMatrix::zeros(n, n),
            c_hat: DMatrix::zeros(n, n),
            d1: DMatrix::zeros(n, m1),
            d2: DMatrix::zeros(n, m2),
            q1: DMatrix::zeros(n, n),
            q1_hat: DMatrix::zeros(n, n),
            n1: DMatrix::identity(m1, m1),
            g1: DMatrix::zeros(n, n),
            g1_hat: DMatrix::zeros(n, n),
            q2: DMatrix::zeros(n, n),
            q2_hat: DMatrix::zeros(n, n),
            n2: DMatrix::identity(m2, m2),
            g2: DMatrix::zeros(n, n),
            g2_hat: DMatrix::zeros(n, n),
        }
    }
}

/// Full specification of one game instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// Horizon `T > 0`.
    pub horizon: f64,
    /// State dimension `n`.
    pub state_dim: usize,
    /// Follower control dimension `m1`.
    pub control_dim_follower: usize,
    /// Leader control dimension `m2`.
    pub control_dim_leader: usize,
    /// Deterministic initial state.
    pub x0: DVector<f64>,
    /// Initial regime, 0-based.
    pub initial_regime: usize,
    /// Chain generator; off-diagonal rates are nonnegative and rows sum
    /// to zero.
    pub generator: DMatrix<f64>,
    /// Per-regime coefficients, one entry per chain state.
    pub regimes: Vec<RegimeCoefficients>,
}

impl ProblemSpec {
    pub fn regime_count(&self) -> usize {
        self.regimes.len()
    }
}

/// A [`ProblemSpec`] that passed [`validate_spec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedSpec(ProblemSpec);

impl ValidatedSpec {
    /// Validation is idempotent: re-validating returns an equal value.
    pub fn revalidate(&self) -> Result<ValidatedSpec> {
        validate_spec(self.0.clone())
    }

    pub fn into_inner(self) -> ProblemSpec {
        self.0
    }
}

impl Deref for ValidatedSpec {
    type Target = ProblemSpec;
    fn deref(&self) -> &ProblemSpec {
        &self.0
    }
}

fn check_shape(
    what: &str,
    m: &DMatrix<f64>,
    expected_rows: usize,
    expected_cols: usize,
) -> Result<()> {
    if m.nrows() != expected_rows || m.ncols() != expected_cols {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected_rows,
            expected_cols,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn check_symmetric(
    assumption: &'static str,
    matrix: &'static str,
    regime: usize,
    m: &DMatrix<f64>,
) -> Result<()> {
    let asym = linalg::max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::AssumptionViolated {
            assumption,
            matrix,
            regime,
            detail: format!("asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e}"),
        });
    }
    Ok(())
}

fn check_psd(
    assumption: &'static str,
    matrix: &'static str,
    regime: usize,
    m: &DMatrix<f64>,
) -> Result<()> {
    let min_eig = linalg::min_symmetric_eigenvalue(m);
    if min_eig < -PSD_TOL {
        return Err(Error::AssumptionViolated {
            assumption,
            matrix,
            regime,
            detail: format!("not PSD: min eigenvalue {min_eig:.3e}"),
        });
    }
    Ok(())
}

fn check_pd(
    assumption: &'static str,
    matrix: &'static str,
    regime: usize,
    m: &DMatrix<f64>,
) -> Result<()> {
    let min_eig = linalg::min_symmetric_eigenvalue(m);
    if min_eig <= PSD_TOL {
        return Err(Error::AssumptionViolated {
            assumption,
            matrix,
            regime,
            detail: format!("not PD: min eigenvalue {min_eig:.3e}"),
        });
    }
    Ok(())
}

/// Validate dimensions, the generator, weight symmetry, and the standing
/// assumptions (A1) (follower weights) and (A2) (leader weights).
pub fn validate_spec(spec: ProblemSpec) -> Result<ValidatedSpec> {
    let k = spec.regime_count();
    let n = spec.state_dim;
    let m1 = spec.control_dim_follower;
    let m2 = spec.control_dim_leader;

    if k == 0 {
        return Err(Error::GeneratorInvalid {
            detail: "no regimes".to_string(),
        });
    }
    if n == 0 || m1 == 0 || m2 == 0 {
        return Err(Error::ConfigInvalid {
            detail: format!("dimensions must be positive: n={n}, m1={m1}, m2={m2}"),
        });
    }
    if !(spec.horizon > 0.0) || !spec.horizon.is_finite() {
        return Err(Error::ConfigInvalid {
            detail: format!("horizon must be positive and finite, got {}", spec.horizon),
        });
    }
    if spec.x0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "x0".to_string(),
            expected_rows: n,
            expected_cols: 1,
            rows: spec.x0.len(),
            cols: 1,
        });
    }
    if spec.initial_regime >= k {
        return Err(Error::ConfigInvalid {
            detail: format!(
                "initial regime {} out of range for {k} regimes (0-based)",
                spec.initial_regime
            ),
        });
    }

    check_shape("generator", &spec.generator, k, k)?;
    for i in 0..k {
        let mut row_sum = 0.0;
        for j in 0..k {
            let rate = spec.generator[(i, j)];
            if !rate.is_finite() {
                return Err(Error::GeneratorInvalid {
                    detail: format!("non-finite rate at ({}, {})", i + 1, j + 1),
                });
            }
            if i != j && rate < 0.0 {
                return Err(Error::GeneratorInvalid {
                    detail: format!("negative off-diagonal rate {rate} at ({}, {})", i + 1, j + 1),
                });
            }
            row_sum += rate;
        }
        if row_sum.abs() > SYMMETRY_TOL {
            return Err(Error::GeneratorInvalid {
                detail: format!("row {} sums to {row_sum:.3e}, not 0", i + 1),
            });
        }
    }

    for (i, r) in spec.regimes.iter().enumerate() {
        check_shape("A", &r.a, n, n)?;
        check_shape("A_hat", &r.a_hat, n, n)?;
        check_shape("B1", &r.b1, n, m1)?;
        check_shape("B2", &r.b2, n, m2)?;
        check_shape("C", &r.c, n, n)?;
        check_shape("C_hat", &r.c_hat, n, n)?;
        check_shape("D1", &r.d1, n, m1)?;
        check_shape("D2", &r.d2, n, m2)?;
        check_shape("Q1", &r.q1, n, n)?;
        check_shape("Q1_hat", &r.q1_hat, n, n)?;
        check_shape("N1", &r.n1, m1, m1)?;
        check_shape("G1", &r.g1, n, n)?;
        check_shape("G1_hat", &r.g1_hat, n, n)?;
        check_shape("Q2", &r.q2, n, n)?;
        check_shape("Q2_hat", &r.q2_hat, n, n)?;
        check_shape("N2", &r.n2, m2, m2)?;
        check_shape("G2", &r.g2, n, n)?;
        check_shape("G2_hat", &r.g2_hat, n, n)?;

        // Asymmetric weights are rejected, not silently symmetrized.
        check_symmetric("A1", "Q1", i, &r.q1)?;
        check_symmetric("A1", "Q1_hat", i, &r.q1_hat)?;
        check_symmetric("A1", "N1", i, &r.n1)?;
        check_symmetric("A1", "G1", i, &r.g1)?;
        check_symmetric("A1", "G1_hat", i, &r.g1_hat)?;
        check_symmetric("A2", "Q2", i, &r.q2)?;
        check_symmetric("A2", "Q2_hat", i, &r.q2_hat)?;
        check_symmetric("A2", "N2", i, &r.n2)?;
        check_symmetric("A2", "G2", i, &r.g2)?;
        check_symmetric("A2", "G2_hat", i, &r.g2_hat)?;

        check_psd("A1", "Q1", i, &r.q1)?;
        check_psd("A1", "Q1_hat", i, &r.q1_hat)?;
        check_pd("A1", "N1", i, &r.n1)?;
        check_psd("A1", "G1", i, &r.g1)?;
        check_psd("A1", "G1_hat", i, &r.g1_hat)?;
        check_psd("A2", "Q2", i, &r.q2)?;
        check_psd("A2", "Q2_hat", i, &r.q2_hat)?;
        check_pd("A2", "N2", i, &r.n2)?;
        check_psd("A2", "G2", i, &r.g2)?;
        check_psd("A2", "G2_hat", i, &r.g2_hat)?;
    }

    Ok(ValidatedSpec(spec))
}

/// Uniform time grid on `[0, T]` with `step_count` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    step_count: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(step_count: usize, horizon: f64) -> Result<Self> {
        if step_count == 0 {
            return Err(Error::ConfigInvalid {
                detail: "time grid needs at least one step".to_string(),
            });
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::ConfigInvalid {
                detail: format!("horizon must be positive and finite, got {horizon}"),
            });
        }
        Ok(Self {
            step_count,
            horizon,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Number of nodes, `step_count + 1`.
    pub fn node_count(&self) -> usize {
        self.step_count + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.step_count as f64
    }

    /// Node `t_k = k T / N`, exact at both endpoints.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.step_count);
        if k == self.step_count {
            self.horizon
        } else {
            k as f64 * self.horizon / self.step_count as f64
        }
    }
}

/// Names of the bundled reference instances.
pub const BUILTIN_EXAMPLES: [&str; 4] = [
    "paper_example",
    "pension_reduced",
    "single_regime_classic",
    "all_zero_costs",
];

/// Returns the named built-in instance.
///
/// * `paper_example` — two regimes, scalar state and controls, only the
///   follower's control coefficient switching (`B1(1)=2`, `B1(2)=1`),
///   multiplicative noise `C=0.5`, unit control weights, terminal weights
///   `G=1`, `G_hat=0.5` for both players.
/// * `pension_reduced` — homogeneous reduction of a two-regime pension-fund
///   allocation problem: drift `r(i) + (b(i)-r(i))*pi` and volatility
///   `sigma(i)*pi` with both contribution rates entering the drift, cost on
///   control effort plus the conditional-mean terminal wealth.
/// * `single_regime_classic` — one regime, no mean-field terms, control
///   noise on both players.
/// * `all_zero_costs` — paper dynamics with every state weight zero; the
///   equilibrium is identically zero control effort.
pub fn builtin_example(name: &str) -> Result<ProblemSpec> {
    match name {
        "paper_example" => Ok(paper_example()),
        "pension_reduced" => Ok(pension_reduced()),
        "single_regime_classic" => Ok(single_regime_classic()),
        "all_zero_costs" => Ok(all_zero_costs()),
        _ => Err(Error::UnknownExample {
            name: name.to_string(),
        }),
    }
}

fn scalar_mat(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn paper_example() -> ProblemSpec {
    let mut regimes = Vec::with_capacity(2);
    for &b1 in &[2.0, 1.0] {
        let mut r = RegimeCoefficients::zeros(1, 1, 1);
        r.b1 = scalar_mat(b1);
        r.b2 = scalar_mat(1.0);
        r.c = scalar_mat(0.5);
        r.n1 = scalar_mat(1.0);
        r.n2 = scalar_mat(1.0);
        r.g1 = scalar_mat(1.0);
        r.g1_hat = scalar_mat(0.5);
        r.g2 = scalar_mat(1.0);
        r.g2_hat = scalar_mat(0.5);
        regimes.push(r);
    }
    ProblemSpec {
        horizon: 1.0,
        state_dim: 1,
        control_dim_follower: 1,
        control_dim_leader: 1,
        x0: DVector::from_element(1, 1.0),
        initial_regime: 0,
        generator: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        regimes,
    }
}

/// Market data for the pension reduction: interest rates, appreciation
/// rates, volatilities per regime, and the stock allocation fraction.
const PENSION_R: [f64; 2] = [0.03, 0.01];
const PENSION_B: [f64; 2] = [0.08, 0.04];
const PENSION_SIGMA: [f64; 2] = [0.2, 0.3];
const PENSION_PI: f64 = 0.5;

fn pension_reduced() -> ProblemSpec {
    let mut regimes = Vec::with_capacity(2);
    for i in 0..2 {
        let mut r = RegimeCoefficients::zeros(1, 1, 1);
        r.a = scalar_mat(PENSION_R[i] + (PENSION_B[i] - PENSION_R[i]) * PENSION_PI);
        r.c = scalar_mat(PENSION_SIGMA[i] * PENSION_PI);
        r.b1 = scalar_mat(1.0);
        r.b2 = scalar_mat(1.0);
        r.n1 = scalar_mat(1.0);
        r.n2 = scalar_mat(1.0);
        // The terminal target acts on the conditional-mean fund level.
        r.g1_hat = scalar_mat(1.0);
        r.g2_hat = scalar_mat(1.0);
        regimes.push(r);
    }
    ProblemSpec {
        horizon: 1.0,
        state_dim: 1,
        control_dim_follower: 1,
        control_dim_leader: 1,
        x0: DVector::from_element(1, 1.0),
        initial_regime: 0,
        generator: DMatrix::from_row_slice(2, 2, &[-0.8, 0.8, 1.2, -1.2]),
        regimes,
    }
}

fn single_regime_classic() -> ProblemSpec {
    let mut r = RegimeCoefficients::zeros(1, 1, 1);
    r.a = scalar_mat(0.2);
    r.b1 = scalar_mat(1.0);
    r.b2 = scalar_mat(1.0);
    r.c = scalar_mat(0.3);
    r.d1 = scalar_mat(0.1);
    r.d2 = scalar_mat(0.2);
    r.q1 = scalar_mat(1.0);
    r.n1 = scalar_mat(1.0);
    r.g1 = scalar_mat(1.0);
    r.q2 = scalar_mat(0.5);
    r.n2 = scalar_mat(1.0);
    r.g2 = scalar_mat(1.0);
    ProblemSpec {
        horizon: 1.0,
        state_dim: 1,
        control_dim_follower: 1,
        control_dim_leader: 1,
        x0: DVector::from_element(1, 1.0),
        initial_regime: 0,
        generator: DMatrix::zeros(1, 1),
        regimes: vec![r],
    }
}

fn all_zero_costs() -> ProblemSpec {
    let mut spec = paper_example();
    for r in &mut spec.regimes {
        r.g1 = scalar_mat(0.0);
        r.g1_hat = scalar_mat(0.0);
        r.g2 = scalar_mat(0.0);
        r.g2_hat = scalar_mat(0.0);
    }
    spec
}
