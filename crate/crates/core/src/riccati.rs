//! Backward integration of the four regime-coupled matrix Riccati systems
//! and construction of every derived coefficient matrix.
//!
//! The follower's pair (`P1`, `P1_tilde`, both `n x n` per regime) feeds
//! the leader's pair (`P2`, `P2_tilde`, both `2n x 2n` after dimensional
//! augmentation). `P1_tilde` depends on `P1` through the shared gain
//! kernel, and both leader equations depend on the follower pair through
//! the reduced coefficients, so all four systems are integrated jointly as
//! one stacked ODE: classical RK4, fixed step, backward in time, with the
//! regime coupling `sum_j lambda_ij [P(t,j) - P(t,i)]` evaluated inside
//! the right-hand side. Every stored matrix is symmetrized after each
//! step; terminal nodes are assigned, not integrated.
//!
//! The hatted solutions are recovered as differences: `P_hat = P_tilde - P`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ProblemSpec, RegimeCoefficients, TimeGrid, ValidatedSpec};

/// Eigenvalue floor below which a gain kernel counts as singular.
pub const GAIN_EIG_FLOOR: f64 = 1e-10;
/// Reciprocal-condition floor for `I - P2*D1`.
pub const RCOND_FLOOR: f64 = 1e-12;

/// A time-grid-indexed family of per-regime matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeTrajectory {
    grid: TimeGrid,
    regime_count: usize,
    dim: usize,
    /// Node-major storage: entry `node * regime_count + regime`.
    values: Vec<DMatrix<f64>>,
}

impl RegimeTrajectory {
    fn new(grid: TimeGrid, regime_count: usize, dim: usize) -> Self {
        let values = alloc::vec![DMatrix::zeros(dim, dim); grid.node_count() * regime_count];
        Self {
            grid,
            regime_count,
            dim,
            values,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn regime_count(&self) -> usize {
        self.regime_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Matrix at grid node `k`, regime `i`.
    pub fn at(&self, node: usize, regime: usize) -> &DMatrix<f64> {
        &self.values[node * self.regime_count + regime]
    }

    fn set(&mut self, node: usize, regime: usize, m: DMatrix<f64>) {
        self.values[node * self.regime_count + regime] = m;
    }

    /// Smallest symmetric eigenvalue over all nodes and regimes.
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(linalg::min_symmetric_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest asymmetry over all nodes and regimes.
    pub fn max_asymmetry(&self) -> f64 {
        self.values
            .iter()
            .map(linalg::max_asymmetry)
            .fold(0.0, f64::max)
    }
}

/// Follower Riccati pair and the recovered hat difference.
#[derive(Debug, Clone)]
pub struct FollowerSolution {
    pub p1: RegimeTrajectory,
    pub p1_tilde: RegimeTrajectory,
    pub p1_hat: RegimeTrajectory,
}

/// Leader Riccati pair (augmented `2n` dimension) and the hat difference.
#[derive(Debug, Clone)]
pub struct LeaderSolution {
    pub p2: RegimeTrajectory,
    pub p2_tilde: RegimeTrajectory,
    pub p2_hat: RegimeTrajectory,
}

/// Reduced coefficients of the leader-facing system at one `(t, regime)`,
/// obtained by substituting the follower's feedback. Doubled letters
/// (`aa`, `bb1`, ...) transcribe the blackboard symbols.
#[derive(Debug, Clone)]
pub struct FollowerDerived {
    /// Gain kernel `N1 + D1^T P1 D1`, symmetric positive definite.
    pub n1_tilde: DMatrix<f64>,
    pub n1_tilde_inv: DMatrix<f64>,
    pub n1_tilde_min_eig: f64,
    /// `B1^T P1 + D1^T P1 C`.
    pub s1: DMatrix<f64>,
    /// `B1^T P1_hat + D1^T P1 C_hat`.
    pub s1_hat: DMatrix<f64>,
    pub s1_tilde: DMatrix<f64>,
    /// `A - B1 N1t^{-1} S1`.
    pub aa: DMatrix<f64>,
    pub aa_hat: DMatrix<f64>,
    /// `C - D1 N1t^{-1} S1`.
    pub cc: DMatrix<f64>,
    pub cc_hat: DMatrix<f64>,
    /// `B2^T P1 + D2^T P1 C`.
    pub s2: DMatrix<f64>,
    pub s2_hat: DMatrix<f64>,
    /// `S2 - D2^T P1 D1 N1t^{-1} S1`.
    pub f2: DMatrix<f64>,
    pub f2_hat: DMatrix<f64>,
    /// `-B1 N1t^{-1} D1^T`.
    pub bb1: DMatrix<f64>,
    /// `B2 - B1 N1t^{-1} D1^T P1 D2`.
    pub bb2: DMatrix<f64>,
    /// `-D1 N1t^{-1} D1^T`, symmetric negative semidefinite.
    pub dd1: DMatrix<f64>,
    /// `D2 - D1 N1t^{-1} D1^T P1 D2`.
    pub dd2: DMatrix<f64>,
    /// `-B1 N1t^{-1} B1^T`, symmetric negative semidefinite.
    pub ff1: DMatrix<f64>,
    /// `D1^T P1 D2`, reused by the follower's feedback composition.
    pub d1t_p1_d2: DMatrix<f64>,
}

fn follower_derived_impl(
    reg: &RegimeCoefficients,
    p1: &DMatrix<f64>,
    p1_hat: &DMatrix<f64>,
    t: f64,
    regime: usize,
) -> Result<FollowerDerived> {
    let d1t_p1 = reg.d1.transpose() * p1;
    let mut n1_tilde = &reg.n1 + &d1t_p1 * &reg.d1;
    linalg::symmetrize(&mut n1_tilde);
    let (min_eig, inv) = linalg::spd_inverse(&n1_tilde);
    let n1_tilde_inv = match inv {
        Some(inv) if min_eig >= GAIN_EIG_FLOOR => inv,
        _ => {
            return Err(Error::GainSingular {
                which: "N1_tilde",
                t,
                regime,
                min_eig,
            })
        }
    };

    let s1 = reg.b1.transpose() * p1 + &d1t_p1 * &reg.c;
    let s1_hat = reg.b1.transpose() * p1_hat + &d1t_p1 * &reg.c_hat;
    let s1_tilde = &s1 + &s1_hat;

    let b1_n1inv = &reg.b1 * &n1_tilde_inv;
    let d1_n1inv = &reg.d1 * &n1_tilde_inv;
    let aa = &reg.a - &b1_n1inv * &s1;
    let aa_hat = &reg.a_hat - &b1_n1inv * &s1_hat;
    let cc = &reg.c - &d1_n1inv * &s1;
    let cc_hat = &reg.c_hat - &d1_n1inv * &s1_hat;

    let d2t_p1 = reg.d2.transpose() * p1;
    let s2 = reg.b2.transpose() * p1 + &d2t_p1 * &reg.c;
    let s2_hat = reg.b2.transpose() * p1_hat + &d2t_p1 * &reg.c_hat;
    let d2t_p1_d1 = &d2t_p1 * &reg.d1;
    let f2 = &s2 - &d2t_p1_d1 * (&n1_tilde_inv * &s1);
    let f2_hat = &s2_hat - &d2t_p1_d1 * (&n1_tilde_inv * &s1_hat);

    let d1t_p1_d2 = &d1t_p1 * &reg.d2;
    let bb1 = -(&b1_n1inv * reg.d1.transpose());
    let bb2 = &reg.b2 - &b1_n1inv * &d1t_p1_d2;
    let mut dd1 = -(&d1_n1inv * reg.d1.transpose());
    linalg::symmetrize(&mut dd1);
    let dd2 = &reg.d2 - &d1_n1inv * &d1t_p1_d2;
    let mut ff1 = -(&b1_n1inv * reg.b1.transpose());
    linalg::symmetrize(&mut ff1);

    Ok(FollowerDerived {
        n1_tilde,
        n1_tilde_inv,
        n1_tilde_min_eig: min_eig,
        s1,
        s1_hat,
        s1_tilde,
        aa,
        aa_hat,
        cc,
        cc_hat,
        s2,
        s2_hat,
        f2,
        f2_hat,
        bb1,
        bb2,
        dd1,
        dd2,
        ff1,
        d1t_p1_d2,
    })
}

/// Derived follower coefficients at a grid node.
pub fn follower_derived_at(
    spec: &ValidatedSpec,
    sol: &FollowerSolution,
    node: usize,
    regime: usize,
) -> Result<FollowerDerived> {
    follower_derived_impl(
        &spec.regimes[regime],
        sol.p1.at(node, regime),
        sol.p1_hat.at(node, regime),
        sol.p1.grid().node(node),
        regime,
    )
}

/// The `2n` block matrices of the dimensional augmentation. The augmented
/// state is `X = (x, psi)` with `X_0 = (x_0, 0)`.
#[derive(Debug, Clone)]
pub struct AugmentedCoefficients {
    pub a: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    /// `antidiag(BB1, BB1)`.
    pub b1: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    /// `col(BB2, 0)`, `2n x m2`.
    pub b2: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    /// `row(0, F2)`, `m2 x 2n`.
    pub f2: DMatrix<f64>,
    pub f2_hat: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q2_hat: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub g2_hat: DMatrix<f64>,
}

/// Assembles the augmented block matrices from the reduced coefficients.
pub fn build_augmented(reg: &RegimeCoefficients, fd: &FollowerDerived) -> AugmentedCoefficients {
    let n = reg.a.nrows();
    let zero_n = DMatrix::<f64>::zeros(n, n);
    AugmentedCoefficients {
        a: linalg::block_diag2(&fd.aa, &fd.aa),
        a_hat: linalg::block_diag2(&fd.aa_hat, &fd.aa_hat),
        c: linalg::block_diag2(&fd.cc, &fd.cc),
        c_hat: linalg::block_diag2(&fd.cc_hat, &fd.cc_hat),
        b1: linalg::block_antidiag2(&fd.bb1, &fd.bb1),
        d1: linalg::block_antidiag2(&fd.dd1, &fd.dd1),
        f1: linalg::block_antidiag2(&fd.ff1, &fd.ff1),
        b2: linalg::stack_over_zero(&fd.bb2),
        d2: linalg::stack_over_zero(&fd.dd2),
        f2: linalg::pad_left_zero(&fd.f2),
        f2_hat: linalg::pad_left_zero(&fd.f2_hat),
        q2: linalg::block_diag2(&reg.q2, &zero_n),
        q2_hat: linalg::block_diag2(&reg.q2_hat, &zero_n),
        g2: linalg::block_diag2(&reg.g2, &zero_n),
        g2_hat: linalg::block_diag2(&reg.g2_hat, &zero_n),
    }
}

/// Quantities derived from the leader's Riccati values at one node.
#[derive(Debug, Clone)]
pub struct LeaderDerived {
    /// `B1^T P2 + C` (bold blocks).
    pub j2: DMatrix<f64>,
    pub j2_hat: DMatrix<f64>,
    pub j2_tilde: DMatrix<f64>,
    /// `(I - P2 D1)^{-1} P2`, symmetrized.
    pub r: DMatrix<f64>,
    /// Asymmetry of `r` before symmetrization.
    pub r_asymmetry: f64,
    /// Reciprocal condition estimate of `I - P2 D1`.
    pub w_rcond: f64,
    /// `N2 + D2^T R D2`, symmetric positive definite.
    pub n2_tilde: DMatrix<f64>,
    pub n2_tilde_inv: DMatrix<f64>,
    pub n2_tilde_min_eig: f64,
    /// `D2^T R J2 + B2^T P2 + F2`.
    pub s2: DMatrix<f64>,
    pub s2_hat: DMatrix<f64>,
    pub s2_tilde: DMatrix<f64>,
}

fn leader_derived_impl(
    reg: &RegimeCoefficients,
    aug: &AugmentedCoefficients,
    p2: &DMatrix<f64>,
    p2_hat: &DMatrix<f64>,
    t: f64,
    regime: usize,
) -> Result<LeaderDerived> {
    let dim = p2.nrows();
    let w = DMatrix::<f64>::identity(dim, dim) - p2 * &aug.d1;
    let (w_rcond, w_inv) = linalg::inverse_with_rcond(&w);
    let w_inv = match w_inv {
        Some(inv) if w_rcond >= RCOND_FLOOR => inv,
        _ => {
            return Err(Error::MatrixSingular {
                what: "I - P2*D1",
                t,
                regime,
                rcond: w_rcond,
            })
        }
    };
    let r_raw = &w_inv * p2;
    let r_asymmetry = linalg::max_asymmetry(&r_raw);
    let r = linalg::sym_part(&r_raw);

    let j2 = aug.b1.transpose() * p2 + &aug.c;
    let j2_hat = aug.b1.transpose() * p2_hat + &aug.c_hat;
    let j2_tilde = &j2 + &j2_hat;

    let d2t_r = aug.d2.transpose() * &r;
    let mut n2_tilde = &reg.n2 + &d2t_r * &aug.d2;
    linalg::symmetrize(&mut n2_tilde);
    let (min_eig, inv) = linalg::spd_inverse(&n2_tilde);
    let n2_tilde_inv = match inv {
        Some(inv) if min_eig >= GAIN_EIG_FLOOR => inv,
        _ => {
            return Err(Error::GainSingular {
                which: "N2_tilde",
                t,
                regime,
                min_eig,
            })
        }
    };

    let s2 = &d2t_r * &j2 + aug.b2.transpose() * p2 + &aug.f2;
    let s2_hat = &d2t_r * &j2_hat + aug.b2.transpose() * p2_hat + &aug.f2_hat;
    let s2_tilde = &s2 + &s2_hat;

    Ok(LeaderDerived {
        j2,
        j2_hat,
        j2_tilde,
        r,
        r_asymmetry,
        w_rcond,
        n2_tilde,
        n2_tilde_inv,
        n2_tilde_min_eig: min_eig,
        s2,
        s2_hat,
        s2_tilde,
    })
}

/// Derived leader coefficients at a grid node, given the follower's
/// reduced coefficients at the same node.
pub fn leader_derived_at(
    spec: &ValidatedSpec,
    fd: &FollowerDerived,
    sol: &LeaderSolution,
    node: usize,
    regime: usize,
) -> Result<LeaderDerived> {
    let reg = &spec.regimes[regime];
    let aug = build_augmented(reg, fd);
    leader_derived_impl(
        reg,
        &aug,
        sol.p2.at(node, regime),
        sol.p2_hat.at(node, regime),
        sol.p2.grid().node(node),
        regime,
    )
}

fn coupling_term(
    generator: &DMatrix<f64>,
    values: &[DMatrix<f64>],
    regime: usize,
) -> DMatrix<f64> {
    let k = values.len();
    let mut out = DMatrix::zeros(values[regime].nrows(), values[regime].ncols());
    for j in 0..k {
        if j == regime {
            continue;
        }
        let rate = generator[(regime, j)];
        if rate != 0.0 {
            out += (&values[j] - &values[regime]) * rate;
        }
    }
    out
}

/// `dP1/dt` for every regime (equation for the follower's `P1`).
pub fn follower_p1_rhs(
    spec: &ProblemSpec,
    p1: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let k = spec.regime_count();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let reg = &spec.regimes[i];
        let d1t_p1 = reg.d1.transpose() * &p1[i];
        let mut n1_tilde = &reg.n1 + &d1t_p1 * &reg.d1;
        linalg::symmetrize(&mut n1_tilde);
        let (min_eig, inv) = linalg::spd_inverse(&n1_tilde);
        let n1_inv = match inv {
            Some(inv) if min_eig >= GAIN_EIG_FLOOR => inv,
            _ => {
                return Err(Error::GainSingular {
                    which: "N1_tilde",
                    t,
                    regime: i,
                    min_eig,
                })
            }
        };
        let s1 = reg.b1.transpose() * &p1[i] + &d1t_p1 * &reg.c;
        let pa = &p1[i] * &reg.a;
        let bracket = &pa
            + pa.transpose()
            + reg.c.transpose() * (&p1[i] * &reg.c)
            + &reg.q1
            - s1.transpose() * (&n1_inv * &s1)
            + coupling_term(&spec.generator, p1, i);
        out.push(-bracket);
    }
    Ok(out)
}

/// `dP1_tilde/dt` for every regime; depends on `P1` through the shared
/// gain kernel and the diffusion quadratic.
pub fn follower_p1_tilde_rhs(
    spec: &ProblemSpec,
    p1: &[DMatrix<f64>],
    p1_tilde: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let k = spec.regime_count();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let reg = &spec.regimes[i];
        let d1t_p1 = reg.d1.transpose() * &p1[i];
        let mut n1_tilde = &reg.n1 + &d1t_p1 * &reg.d1;
        linalg::symmetrize(&mut n1_tilde);
        let (min_eig, inv) = linalg::spd_inverse(&n1_tilde);
        let n1_inv = match inv {
            Some(inv) if min_eig >= GAIN_EIG_FLOOR => inv,
            _ => {
                return Err(Error::GainSingular {
                    which: "N1_tilde",
                    t,
                    regime: i,
                    min_eig,
                })
            }
        };
        let a_tilde = &reg.a + &reg.a_hat;
        let c_tilde = &reg.c + &reg.c_hat;
        let q_tilde = &reg.q1 + &reg.q1_hat;
        let s1_tilde = reg.b1.transpose() * &p1_tilde[i] + &d1t_p1 * &c_tilde;
        let pa = &p1_tilde[i] * &a_tilde;
        let bracket = &pa
            + pa.transpose()
            + c_tilde.transpose() * (&p1[i] * &c_tilde)
            + q_tilde
            - s1_tilde.transpose() * (&n1_inv * &s1_tilde)
            + coupling_term(&spec.generator, p1_tilde, i);
        out.push(-bracket);
    }
    Ok(out)
}

/// `dP2/dt` for every regime, given the follower pair at the same time.
pub fn leader_p2_rhs(
    spec: &ProblemSpec,
    p1: &[DMatrix<f64>],
    p1_tilde: &[DMatrix<f64>],
    p2: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let k = spec.regime_count();
    let dim = 2 * spec.state_dim;
    let zero = DMatrix::<f64>::zeros(dim, dim);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let reg = &spec.regimes[i];
        let p1_hat = &p1_tilde[i] - &p1[i];
        let fd = follower_derived_impl(reg, &p1[i], &p1_hat, t, i)?;
        let aug = build_augmented(reg, &fd);
        let ld = leader_derived_impl(reg, &aug, &p2[i], &zero, t, i)?;
        let pa = &p2[i] * &aug.a;
        let bracket = &pa
            + pa.transpose()
            + &p2[i] * (&aug.f1 * &p2[i])
            + &aug.q2
            + ld.j2.transpose() * (&ld.r * &ld.j2)
            - ld.s2.transpose() * (&ld.n2_tilde_inv * &ld.s2)
            + coupling_term(&spec.generator, p2, i);
        out.push(-bracket);
    }
    Ok(out)
}

/// `dP2_tilde/dt` for every regime; the resolvent `R` and the gain kernel
/// `N2_tilde` are built from `P2`, not `P2_tilde`.
pub fn leader_p2_tilde_rhs(
    spec: &ProblemSpec,
    p1: &[DMatrix<f64>],
    p1_tilde: &[DMatrix<f64>],
    p2: &[DMatrix<f64>],
    p2_tilde: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let k = spec.regime_count();
    let dim = 2 * spec.state_dim;
    let zero = DMatrix::<f64>::zeros(dim, dim);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let reg = &spec.regimes[i];
        let p1_hat = &p1_tilde[i] - &p1[i];
        let fd = follower_derived_impl(reg, &p1[i], &p1_hat, t, i)?;
        let aug = build_augmented(reg, &fd);
        let ld = leader_derived_impl(reg, &aug, &p2[i], &zero, t, i)?;
        let a_tilde = &aug.a + &aug.a_hat;
        let c_tilde = &aug.c + &aug.c_hat;
        let q_tilde = &aug.q2 + &aug.q2_hat;
        let f2_tilde = &aug.f2 + &aug.f2_hat;
        let j_tilde = aug.b1.transpose() * &p2_tilde[i] + &c_tilde;
        let s_tilde =
            aug.d2.transpose() * (&ld.r * &j_tilde) + aug.b2.transpose() * &p2_tilde[i] + f2_tilde;
        let pa = &p2_tilde[i] * &a_tilde;
        let bracket = &pa
            + pa.transpose()
            + &p2_tilde[i] * (&aug.f1 * &p2_tilde[i])
            + q_tilde
            + j_tilde.transpose() * (&ld.r * &j_tilde)
            - s_tilde.transpose() * (&ld.n2_tilde_inv * &s_tilde)
            + coupling_term(&spec.generator, p2_tilde, i);
        out.push(-bracket);
    }
    Ok(out)
}

/// Which of the four Riccati systems a right-hand-side query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiccatiKind {
    FollowerP1,
    FollowerP1Tilde,
    LeaderP2,
    LeaderP2Tilde,
}

/// Stacked per-regime values needed by [`ode_rhs`]. Leader kinds require
/// the follower fields; `LeaderP2Tilde` also requires `p2`.
#[derive(Debug, Clone, Copy)]
pub struct RhsInputs<'a> {
    pub p1: &'a [DMatrix<f64>],
    pub p1_tilde: &'a [DMatrix<f64>],
    pub p2: &'a [DMatrix<f64>],
}

/// `dP/dt` of the requested system at the stacked value, exposed for
/// residual testing. The equations are autonomous; `t` only labels
/// errors.
pub fn ode_rhs(
    kind: RiccatiKind,
    spec: &ProblemSpec,
    inputs: RhsInputs<'_>,
    values: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<DMatrix<f64>>> {
    match kind {
        RiccatiKind::FollowerP1 => follower_p1_rhs(spec, values, t),
        RiccatiKind::FollowerP1Tilde => follower_p1_tilde_rhs(spec, inputs.p1, values, t),
        RiccatiKind::LeaderP2 => leader_p2_rhs(spec, inputs.p1, inputs.p1_tilde, values, t),
        RiccatiKind::LeaderP2Tilde => {
            leader_p2_tilde_rhs(spec, inputs.p1, inputs.p1_tilde, inputs.p2, values, t)
        }
    }
}

/// Stacked state of the joint backward integration.
#[derive(Clone)]
struct JointState {
    p1: Vec<DMatrix<f64>>,
    p1_tilde: Vec<DMatrix<f64>>,
    p2: Vec<DMatrix<f64>>,
    p2_tilde: Vec<DMatrix<f64>>,
}

impl JointState {
    fn axpy(&mut self, a: f64, other: &JointState) {
        let pairs = [
            (&mut self.p1, &other.p1),
            (&mut self.p1_tilde, &other.p1_tilde),
            (&mut self.p2, &other.p2),
            (&mut self.p2_tilde, &other.p2_tilde),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s * a;
            }
        }
    }

    fn symmetrize(&mut self) {
        for group in [
            &mut self.p1,
            &mut self.p1_tilde,
            &mut self.p2,
            &mut self.p2_tilde,
        ] {
            for m in group.iter_mut() {
                linalg::symmetrize(m);
            }
        }
    }

    fn check_finite(&self, t: f64) -> Result<()> {
        for (label, group) in [
            ("P1", &self.p1),
            ("P1_tilde", &self.p1_tilde),
            ("P2", &self.p2),
            ("P2_tilde", &self.p2_tilde),
        ] {
            for (i, m) in group.iter().enumerate() {
                if !linalg::all_finite(m) {
                    return Err(Error::StepUnstable {
                        t,
                        regime: i,
                        detail: format!("non-finite entries in {label}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn joint_rhs(spec: &ProblemSpec, state: &JointState, t: f64, with_leader: bool) -> Result<JointState> {
    let p1_dot = follower_p1_rhs(spec, &state.p1, t)?;
    let p1_tilde_dot = follower_p1_tilde_rhs(spec, &state.p1, &state.p1_tilde, t)?;
    let (p2_dot, p2_tilde_dot) = if with_leader {
        (
            leader_p2_rhs(spec, &state.p1, &state.p1_tilde, &state.p2, t)?,
            leader_p2_tilde_rhs(
                spec,
                &state.p1,
                &state.p1_tilde,
                &state.p2,
                &state.p2_tilde,
                t,
            )?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(JointState {
        p1: p1_dot,
        p1_tilde: p1_tilde_dot,
        p2: p2_dot,
        p2_tilde: p2_tilde_dot,
    })
}

fn terminal_state(spec: &ProblemSpec, with_leader: bool) -> JointState {
    let k = spec.regime_count();
    let n = spec.state_dim;
    let zero_n = DMatrix::<f64>::zeros(n, n);
    let mut p1 = Vec::with_capacity(k);
    let mut p1_tilde = Vec::with_capacity(k);
    let mut p2 = Vec::with_capacity(k);
    let mut p2_tilde = Vec::with_capacity(k);
    for reg in &spec.regimes {
        p1.push(reg.g1.clone());
        p1_tilde.push(&reg.g1 + &reg.g1_hat);
        if with_leader {
            p2.push(linalg::block_diag2(&reg.g2, &zero_n));
            p2_tilde.push(linalg::block_diag2(&(&reg.g2 + &reg.g2_hat), &zero_n));
        }
    }
    JointState {
        p1,
        p1_tilde,
        p2,
        p2_tilde,
    }
}

/// One classical RK4 step of size `h` (negative for backward time).
fn rk4_step(spec: &ProblemSpec, state: &JointState, t: f64, h: f64, with_leader: bool) -> Result<JointState> {
    let k1 = joint_rhs(spec, state, t, with_leader)?;
    let mut s2 = state.clone();
    s2.axpy(0.5 * h, &k1);
    let k2 = joint_rhs(spec, &s2, t + 0.5 * h, with_leader)?;
    let mut s3 = state.clone();
    s3.axpy(0.5 * h, &k2);
    let k3 = joint_rhs(spec, &s3, t + 0.5 * h, with_leader)?;
    let mut s4 = state.clone();
    s4.axpy(h, &k3);
    let k4 = joint_rhs(spec, &s4, t + h, with_leader)?;

    let mut next = state.clone();
    next.axpy(h / 6.0, &k1);
    next.axpy(h / 3.0, &k2);
    next.axpy(h / 3.0, &k3);
    next.axpy(h / 6.0, &k4);
    Ok(next)
}

fn integrate(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    with_leader: bool,
) -> Result<(FollowerSolution, Option<LeaderSolution>)> {
    let k = spec.regime_count();
    let n = spec.state_dim;
    let steps = grid.step_count();
    let h = -grid.step();

    let mut p1 = RegimeTrajectory::new(grid.clone(), k, n);
    let mut p1_tilde = RegimeTrajectory::new(grid.clone(), k, n);
    let mut p1_hat = RegimeTrajectory::new(grid.clone(), k, n);
    let mut leader = if with_leader {
        Some((
            RegimeTrajectory::new(grid.clone(), k, 2 * n),
            RegimeTrajectory::new(grid.clone(), k, 2 * n),
            RegimeTrajectory::new(grid.clone(), k, 2 * n),
        ))
    } else {
        None
    };

    let mut state = terminal_state(spec, with_leader);
    let store = |state: &JointState,
                 node: usize,
                 p1: &mut RegimeTrajectory,
                 p1_tilde: &mut RegimeTrajectory,
                 p1_hat: &mut RegimeTrajectory,
                 leader: &mut Option<(RegimeTrajectory, RegimeTrajectory, RegimeTrajectory)>| {
        for i in 0..k {
            p1.set(node, i, state.p1[i].clone());
            p1_tilde.set(node, i, state.p1_tilde[i].clone());
            p1_hat.set(node, i, &state.p1_tilde[i] - &state.p1[i]);
            if let Some((p2, p2t, p2h)) = leader {
                p2.set(node, i, state.p2[i].clone());
                p2t.set(node, i, state.p2_tilde[i].clone());
                p2h.set(node, i, &state.p2_tilde[i] - &state.p2[i]);
            }
        }
    };

    // Terminal node is assigned exactly, not integrated.
    store(&state, steps, &mut p1, &mut p1_tilde, &mut p1_hat, &mut leader);

    for node in (0..steps).rev() {
        let t = grid.node(node + 1);
        state = rk4_step(spec, &state, t, h, with_leader)?;
        state.symmetrize();
        state.check_finite(grid.node(node))?;
        store(&state, node, &mut p1, &mut p1_tilde, &mut p1_hat, &mut leader);
    }

    let follower = FollowerSolution {
        p1,
        p1_tilde,
        p1_hat,
    };
    let leader = leader.map(|(p2, p2_tilde, p2_hat)| LeaderSolution {
        p2,
        p2_tilde,
        p2_hat,
    });
    Ok((follower, leader))
}

/// Solves the follower's Riccati pair backward from the terminal weights.
pub fn solve_follower(spec: &ValidatedSpec, grid: &TimeGrid) -> Result<FollowerSolution> {
    let (follower, _) = integrate(spec, grid, false)?;
    Ok(follower)
}

/// Solves the leader's Riccati pair backward from `diag(G2, 0)`.
///
/// The follower block is re-integrated inside the same stacked ODE so the
/// leader right-hand side sees follower values at the RK4 stage times
/// without interpolation; the recomputed follower block is bit-identical
/// to `solve_follower` on the same grid.
pub fn solve_leader(
    spec: &ValidatedSpec,
    follower: &FollowerSolution,
    grid: &TimeGrid,
) -> Result<LeaderSolution> {
    if follower.p1.grid() != grid {
        return Err(Error::ConfigInvalid {
            detail: "follower solution grid does not match the requested grid".to_string(),
        });
    }
    let (refollower, leader) = integrate(spec, grid, true)?;
    debug_assert!(
        linalg::max_abs_diff(refollower.p1.at(0, 0), follower.p1.at(0, 0)) == 0.0,
        "stacked follower block diverged from the standalone solve"
    );
    Ok(leader.expect("leader block requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example, validate_spec, RegimeCoefficients};
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn validated(name: &str) -> ValidatedSpec {
        validate_spec(builtin_example(name).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_follower_solution() {
        let spec = validated("all_zero_costs");
        let grid = TimeGrid::new(64, 1.0).unwrap();
        let sol = solve_follower(&spec, &grid).unwrap();
        for node in 0..grid.node_count() {
            for i in 0..2 {
                assert_eq!(sol.p1.at(node, i)[(0, 0)], 0.0);
                assert_eq!(sol.p1_tilde.at(node, i)[(0, 0)], 0.0);
            }
        }
    }

    #[test]
    fn scalar_riccati_matches_tanh_oracle() {
        // A = C = 0, D1 = 0, B1 = N1 = Q1 = 1, G1 = 0 gives
        // dP/dt = P^2 - 1, P(1) = 0, so P(t) = tanh(1 - t).
        let mut reg = RegimeCoefficients::zeros(1, 1, 1);
        reg.b1 = DMatrix::from_element(1, 1, 1.0);
        reg.n1 = DMatrix::from_element(1, 1, 1.0);
        reg.q1 = DMatrix::from_element(1, 1, 1.0);
        let spec = validate_spec(crate::model::ProblemSpec {
            horizon: 1.0,
            state_dim: 1,
            control_dim_follower: 1,
            control_dim_leader: 1,
            x0: DVector::from_element(1, 1.0),
            initial_regime: 0,
            generator: DMatrix::zeros(1, 1),
            regimes: vec![reg],
        })
        .unwrap();
        let grid = TimeGrid::new(1000, 1.0).unwrap();
        let sol = solve_follower(&spec, &grid).unwrap();
        let mut worst = 0.0f64;
        for node in 0..grid.node_count() {
            let t = grid.node(node);
            let expected = (1.0 - t).tanh();
            worst = worst.max((sol.p1.at(node, 0)[(0, 0)] - expected).abs());
        }
        assert!(worst <= 1e-8, "max error {worst:.3e}");
    }

    #[test]
    fn terminal_conditions_are_assigned_exactly() {
        let spec = validated("paper_example");
        let grid = TimeGrid::new(32, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let lsol = solve_leader(&spec, &fsol, &grid).unwrap();
        let last = grid.step_count();
        for i in 0..2 {
            assert_eq!(fsol.p1.at(last, i)[(0, 0)], 1.0);
            assert_eq!(fsol.p1_tilde.at(last, i)[(0, 0)], 1.5);
            assert_eq!(lsol.p2.at(last, i)[(0, 0)], 1.0);
            assert_eq!(lsol.p2.at(last, i)[(1, 1)], 0.0);
            assert_eq!(lsol.p2.at(last, i)[(0, 1)], 0.0);
            assert_eq!(lsol.p2_tilde.at(last, i)[(0, 0)], 1.5);
            assert_eq!(lsol.p2_tilde.at(last, i)[(1, 1)], 0.0);
        }
    }

    #[test]
    fn follower_derived_collapses_without_control_noise() {
        let spec = validated("paper_example");
        let grid = TimeGrid::new(16, 1.0).unwrap();
        let sol = solve_follower(&spec, &grid).unwrap();
        // D1 = 0 so the gain kernel equals N1.
        let fd = follower_derived_at(&spec, &sol, 7, 0).unwrap();
        assert_relative_eq!(fd.n1_tilde[(0, 0)], 1.0, epsilon = 1e-14);
        // At the terminal node S1 = B1^T G1 = 2 in regime 1.
        let fd_term = follower_derived_at(&spec, &sol, grid.step_count(), 0).unwrap();
        assert_relative_eq!(fd_term.s1[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(fd_term.s1_hat[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn follower_derived_collapses_at_zero_p1() {
        let spec = validated("single_regime_classic");
        let reg = &spec.regimes[0];
        let zero = DMatrix::zeros(1, 1);
        let fd = follower_derived_impl(reg, &zero, &zero, 0.0, 0).unwrap();
        assert_relative_eq!(fd.s1[(0, 0)], 0.0);
        assert_relative_eq!(fd.aa[(0, 0)], reg.a[(0, 0)]);
        assert_relative_eq!(fd.bb2[(0, 0)], reg.b2[(0, 0)]);
    }

    #[test]
    fn augmented_blocks_have_the_documented_layout() {
        let spec = validated("paper_example");
        let grid = TimeGrid::new(16, 1.0).unwrap();
        let sol = solve_follower(&spec, &grid).unwrap();
        let fd = follower_derived_at(&spec, &sol, grid.step_count(), 0).unwrap();
        let aug = build_augmented(&spec.regimes[0], &fd);
        // G2 = 1 embeds as [[1, 0], [0, 0]].
        assert_eq!(aug.g2[(0, 0)], 1.0);
        assert_eq!(aug.g2[(1, 1)], 0.0);
        // F1 is an antidiagonal embedding of a symmetric block.
        assert_relative_eq!(linalg::max_asymmetry(&aug.f1), 0.0, epsilon = 1e-15);
        // F2 = row(0, f2).
        assert_eq!(aug.f2[(0, 0)], 0.0);
        assert_relative_eq!(aug.f2[(0, 1)], fd.f2[(0, 0)]);
        // FF1 and DD1 are negative semidefinite.
        assert!(linalg::min_symmetric_eigenvalue(&fd.ff1) <= 1e-12);
        assert!(linalg::min_symmetric_eigenvalue(&fd.dd1) <= 1e-12);
    }

    #[test]
    fn zero_cost_leader_solution_is_zero() {
        let spec = validated("all_zero_costs");
        let grid = TimeGrid::new(64, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let lsol = solve_leader(&spec, &fsol, &grid).unwrap();
        for node in 0..grid.node_count() {
            for i in 0..2 {
                assert_eq!(lsol.p2.at(node, i).amax(), 0.0);
                assert_eq!(lsol.p2_tilde.at(node, i).amax(), 0.0);
            }
        }
    }

    #[test]
    fn paper_example_leader_solution_is_finite_with_identity_resolvent_at_terminal() {
        let spec = validated("paper_example");
        let grid = TimeGrid::new(128, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let lsol = solve_leader(&spec, &fsol, &grid).unwrap();
        for node in 0..grid.node_count() {
            for i in 0..2 {
                assert!(linalg::all_finite(lsol.p2.at(node, i)));
                assert!(linalg::all_finite(lsol.p2_tilde.at(node, i)));
            }
        }
        // D1 = D2 = 0 makes I - P2*D1 exactly the identity at T.
        let fd = follower_derived_at(&spec, &fsol, grid.step_count(), 0).unwrap();
        let ld = leader_derived_at(&spec, &fd, &lsol, grid.step_count(), 0).unwrap();
        assert_relative_eq!(ld.w_rcond, 1.0, epsilon = 1e-12);
        assert_relative_eq!(ld.n2_tilde[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn leader_derived_collapses_when_d1_vanishes() {
        // With D1 = 0 the resolvent R equals P2 itself.
        let spec = validated("paper_example");
        let grid = TimeGrid::new(64, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let lsol = solve_leader(&spec, &fsol, &grid).unwrap();
        let fd = follower_derived_at(&spec, &fsol, 10, 1).unwrap();
        let ld = leader_derived_at(&spec, &fd, &lsol, 10, 1).unwrap();
        assert!(linalg::max_abs_diff(&ld.r, lsol.p2.at(10, 1)) <= 1e-12);
    }

    #[test]
    fn leader_derived_reduces_to_f2_at_zero_p2() {
        let spec = validated("single_regime_classic");
        let grid = TimeGrid::new(16, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let fd = follower_derived_at(&spec, &fsol, 8, 0).unwrap();
        let aug = build_augmented(&spec.regimes[0], &fd);
        let zero = DMatrix::zeros(2, 2);
        let ld = leader_derived_impl(&spec.regimes[0], &aug, &zero, &zero, 0.5, 0).unwrap();
        assert!(linalg::max_abs_diff(&ld.s2, &aug.f2) <= 1e-14);
    }

    #[test]
    fn rhs_is_zero_for_zero_state_and_weights() {
        let spec = validated("all_zero_costs");
        let zeros = vec![DMatrix::zeros(1, 1); 2];
        let dot = follower_p1_rhs(&spec, &zeros, 0.0).unwrap();
        assert_eq!(dot[0].amax(), 0.0);
        let zeros2 = vec![DMatrix::zeros(2, 2); 2];
        let dot2 = leader_p2_rhs(&spec, &zeros, &zeros, &zeros2, 0.0).unwrap();
        assert_eq!(dot2[0].amax(), 0.0);
    }

    #[test]
    fn rhs_matches_scalar_oracle_at_terminal() {
        // tanh case: dP/dt at P = 0 equals -Q1 = -1.
        let mut reg = RegimeCoefficients::zeros(1, 1, 1);
        reg.b1 = DMatrix::from_element(1, 1, 1.0);
        reg.n1 = DMatrix::from_element(1, 1, 1.0);
        reg.q1 = DMatrix::from_element(1, 1, 1.0);
        let spec = crate::model::ProblemSpec {
            horizon: 1.0,
            state_dim: 1,
            control_dim_follower: 1,
            control_dim_leader: 1,
            x0: DVector::from_element(1, 1.0),
            initial_regime: 0,
            generator: DMatrix::zeros(1, 1),
            regimes: vec![reg],
        };
        let dot = follower_p1_rhs(&spec, &[DMatrix::zeros(1, 1)], 1.0).unwrap();
        assert_relative_eq!(dot[0][(0, 0)], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn ode_rhs_dispatcher_agrees_with_direct_functions() {
        let spec = validated("paper_example");
        let grid = TimeGrid::new(32, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid).unwrap();
        let node = 16;
        let p1: Vec<_> = (0..2).map(|i| fsol.p1.at(node, i).clone()).collect();
        let p1t: Vec<_> = (0..2).map(|i| fsol.p1_tilde.at(node, i).clone()).collect();
        let direct = follower_p1_tilde_rhs(&spec, &p1, &p1t, 0.5).unwrap();
        let via_dispatch = ode_rhs(
            RiccatiKind::FollowerP1Tilde,
            &spec,
            RhsInputs {
                p1: &p1,
                p1_tilde: &p1t,
                p2: &[],
            },
            &p1t,
            0.5,
        )
        .unwrap();
        assert!(linalg::max_abs_diff(&direct[0], &via_dispatch[0]) == 0.0);
    }

    #[test]
    fn mismatched_grid_is_rejected_by_solve_leader() {
        let spec = validated("paper_example");
        let grid_a = TimeGrid::new(32, 1.0).unwrap();
        let grid_b = TimeGrid::new(64, 1.0).unwrap();
        let fsol = solve_follower(&spec, &grid_a).unwrap();
        assert!(matches!(
            solve_leader(&spec, &fsol, &grid_b),
            Err(Error::ConfigInvalid { .. })
        ));
    }
}
