//! Uniform grid on (0,1), clamped finite-difference operators, the Dirichlet
//! elliptic solver and spectral negative-order norms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::error::{Error, Result};

pub const MIN_INTERIOR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_interior: usize,
    h: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.n_interior
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    /// Discrete L² inner product `h Σ aᵢbᵢ`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.h * dot(a, b)
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }
}

pub fn build_grid(n_interior: usize) -> Result<Grid> {
    if n_interior < MIN_INTERIOR {
        return Err(Error::InvalidInput(format!(
            "grid needs at least {MIN_INTERIOR} interior nodes, got {n_interior}"
        )));
    }
    let h = 1.0 / (n_interior as f64 + 1.0);
    let nodes = (1..=n_interior).map(|i| i as f64 * h).collect();
    Ok(Grid {
        n_interior,
        h,
        nodes,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interior-node operators under u = u_x = 0 (clamped) and v = 0 (Dirichlet).
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub grid: Grid,
    /// central first derivative, Dirichlet closure (antisymmetric)
    pub d1: BandMatrix,
    pub d2: BandMatrix,
    /// antisymmetric third derivative, stencil truncated at the wall
    pub d3: BandMatrix,
    /// clamped fourth derivative, ghost node u₋₁ = u₁
    pub d4: BandMatrix,
    /// −∂ₓₓ with Dirichlet conditions
    pub l_dirichlet: BandMatrix,
}

pub fn build_operators(grid: &Grid) -> OperatorSet {
    let n = grid.n();
    let h = grid.h();
    let d1 = BandMatrix::from_stencil(n, &[(-1, -0.5 / h), (1, 0.5 / h)]);
    let h2 = h * h;
    let d2 = BandMatrix::from_stencil(n, &[(-1, 1.0 / h2), (0, -2.0 / h2), (1, 1.0 / h2)]);
    let h3 = h2 * h;
    let d3 = BandMatrix::from_stencil(
        n,
        &[
            (-2, -0.5 / h3),
            (-1, 1.0 / h3),
            (1, -1.0 / h3),
            (2, 0.5 / h3),
        ],
    );
    let h4 = h2 * h2;
    let mut d4 = BandMatrix::from_stencil(
        n,
        &[
            (-2, 1.0 / h4),
            (-1, -4.0 / h4),
            (0, 6.0 / h4),
            (1, -4.0 / h4),
            (2, 1.0 / h4),
        ],
    );
    // u_x = 0 reflects the ghost value onto the first interior node
    d4.add(0, 0, 1.0 / h4);
    d4.add(n - 1, n - 1, 1.0 / h4);
    let l_dirichlet = d2.scaled(-1.0);
    OperatorSet {
        grid: grid.clone(),
        d1,
        d2,
        d3,
        d4,
        l_dirichlet,
    }
}

impl OperatorSet {
    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Smallest eigenvalue of the discrete Dirichlet Laplacian, (4/h²)sin²(πh/2).
    pub fn lambda_min_dirichlet(&self) -> f64 {
        let h = self.grid.h();
        let s = (PI * h / 2.0).sin();
        4.0 * s * s / (h * h)
    }

    pub fn elliptic(&self, c: f64) -> Result<EllipticSolver> {
        EllipticSolver::new(self, c)
    }
}

/// Factored (L + cI) for repeated solves.
#[derive(Debug, Clone)]
pub struct EllipticSolver {
    c: f64,
    lower_bound: f64,
    matrix: BandMatrix,
    lu: BandLu,
}

impl EllipticSolver {
    pub fn new(ops: &OperatorSet, c: f64) -> Result<Self> {
        let lmin = ops.lambda_min_dirichlet();
        let tol = 1e-10 * lmin;
        if !c.is_finite() || c <= -lmin + tol {
            return Err(Error::NonCoercive { c, bound: -lmin });
        }
        let matrix = ops.l_dirichlet.axpy(c, &BandMatrix::identity(ops.n()));
        let lu = matrix.lu()?;
        Ok(Self {
            c,
            lower_bound: lmin + c,
            matrix,
            lu,
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Smallest eigenvalue of L + cI.
    pub fn coercivity(&self) -> f64 {
        self.lower_bound
    }

    pub fn matrix(&self) -> &BandMatrix {
        &self.matrix
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.lu.solve(rhs)
    }
}

pub fn solve_elliptic(ops: &OperatorSet, c: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    Ok(EllipticSolver::new(ops, c)?.solve(rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegOrder {
    /// ‖L^{-1/2}·‖
    MinusOne,
    /// ‖D4^{-1/2}·‖
    MinusTwo,
}

impl NegOrder {
    pub fn from_int(order: i32) -> Result<Self> {
        match order {
            -1 => Ok(NegOrder::MinusOne),
            -2 => Ok(NegOrder::MinusTwo),
            o => Err(Error::InvalidInput(format!(
                "negative norm order must be -1 or -2, got {o}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct Spectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl Spectrum {
    fn of(m: &BandMatrix) -> Self {
        let eig = SymmetricEigen::new(m.to_dense());
        Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        }
    }

    fn weighted_sq(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.values.len() {
            let col = self.vectors.column(j);
            let coef: f64 = col.iter().zip(u).map(|(q, x)| q * x).sum();
            acc += coef * coef / self.values[j];
        }
        acc
    }
}

/// Discrete H⁻¹ / H⁻² surrogates by spectral calculus.
#[derive(Debug, Clone)]
pub struct NegNormRealizer {
    h: f64,
    laplace: Spectrum,
    biharmonic: Spectrum,
}

impl NegNormRealizer {
    pub fn new(ops: &OperatorSet) -> Self {
        Self {
            h: ops.grid.h(),
            laplace: Spectrum::of(&ops.l_dirichlet),
            biharmonic: Spectrum::of(&ops.d4),
        }
    }

    pub fn eigenvalues(&self, order: NegOrder) -> &[f64] {
        match order {
            NegOrder::MinusOne => self.laplace.values.as_slice(),
            NegOrder::MinusTwo => self.biharmonic.values.as_slice(),
        }
    }

    pub fn norm(&self, field: &[f64], order: NegOrder) -> f64 {
        let s = match order {
            NegOrder::MinusOne => &self.laplace,
            NegOrder::MinusTwo => &self.biharmonic,
        };
        (self.h * s.weighted_sq(field)).max(0.0).sqrt()
    }
}

pub fn neg_norm(realizer: &NegNormRealizer, field: &[f64], order: NegOrder) -> f64 {
    realizer.norm(field, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ops(n: usize) -> OperatorSet {
        build_operators(&build_grid(n).unwrap())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(9).unwrap();
        assert!((g.h() - 0.1).abs() < 1e-16);
        assert!((g.nodes()[0] - 0.1).abs() < 1e-16);
        assert!((g.nodes()[8] - 0.9).abs() < 1e-15);
        let g = build_grid(31).unwrap();
        assert_eq!(g.h(), 1.0 / 32.0);
        assert!((g.h() * 32.0 - 1.0).abs() <= f64::EPSILON);
        assert!(build_grid(7).is_err());
    }

    #[test]
    fn d4_on_quartic_is_twenty_four_away_from_walls() {
        // fourth derivative of x²(1-x)² is 24; the clamped closure is exact
        // on the interior rows and first order at the wall rows
        let o = ops(32);
        let u = o.grid.sample(|x| x * x * (1.0 - x) * (1.0 - x));
        let d4u = o.d4.apply(&u);
        for v in &d4u[2..30] {
            assert!((v - 24.0).abs() < 1e-6, "{v}");
        }
        assert_eq!(o.d4.asymmetry(), 0.0);
        assert_eq!(o.d2.asymmetry(), 0.0);
    }

    #[test]
    fn d4_is_positive_definite_and_d3_antisymmetric() {
        let o = ops(16);
        let eig = SymmetricEigen::new(o.d4.to_dense());
        assert!(eig.eigenvalues.min() > 0.0);
        let d3 = o.d3.to_dense();
        assert_eq!((&d3 + d3.transpose()).amax(), 0.0);
        let d1 = o.d1.to_dense();
        assert_eq!((&d1 + d1.transpose()).amax(), 0.0);
    }

    #[test]
    fn d2_on_sine_converges_at_second_order() {
        let mut errs = Vec::new();
        for n in [31, 63, 127] {
            let o = ops(n);
            let u = o.grid.sample(|x| (PI * x).sin());
            let exact: Vec<f64> = u.iter().map(|v| -PI * PI * v).collect();
            errs.push(max_abs_diff(&o.d2.apply(&u), &exact));
        }
        for w in errs.windows(2) {
            let f = w[0] / w[1];
            assert!(f > 3.5 && f < 4.5, "{f}");
        }
    }

    #[test]
    fn dirichlet_lambda_min_matches_closed_form() {
        let o = ops(20);
        let eig = SymmetricEigen::new(o.l_dirichlet.to_dense());
        assert!((eig.eigenvalues.min() - o.lambda_min_dirichlet()).abs() < 1e-9);
        assert!(o.lambda_min_dirichlet() < PI * PI);
    }

    #[test]
    fn elliptic_eigenfunction_examples() {
        let o = ops(64);
        for c in [0.0, 3.0] {
            let rhs = o.grid.sample(|x| (PI * PI + c) * (PI * x).sin());
            let v = solve_elliptic(&o, c, &rhs).unwrap();
            let exact = o.grid.sample(|x| (PI * x).sin());
            assert!(max_abs_diff(&v, &exact) < 1e-3);
        }
    }

    #[test]
    fn elliptic_matches_dense_lu() {
        let o = ops(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = solve_elliptic(&o, 1.0, &rhs).unwrap();
        let dense = (o.l_dirichlet.to_dense() + DMatrix::identity(40, 40))
            .lu()
            .solve(&DVector::from_vec(rhs))
            .unwrap();
        assert!(max_abs_diff(&v, dense.as_slice()) < 1e-10);
    }

    #[test]
    fn elliptic_rejects_non_coercive_c() {
        let o = ops(16);
        let lmin = o.lambda_min_dirichlet();
        assert!(matches!(
            solve_elliptic(&o, -lmin, &vec![1.0; 16]),
            Err(Error::NonCoercive { .. })
        ));
        assert!(solve_elliptic(&o, -PI * PI, &vec![1.0; 16]).is_err());
        assert!(solve_elliptic(&o, -0.9 * lmin, &vec![1.0; 16]).is_ok());
    }

    #[test]
    fn neg_norm_of_sine_and_zero() {
        let o = ops(64);
        let r = NegNormRealizer::new(&o);
        assert_eq!(r.norm(&vec![0.0; 64], NegOrder::MinusOne), 0.0);
        let u = o.grid.sample(|x| (PI * x).sin());
        let expect = o.grid.norm(&u) / PI;
        assert!((r.norm(&u, NegOrder::MinusOne) - expect).abs() < 1e-3 * expect);
    }

    #[test]
    fn neg_norm_matches_analytic_sine_expansion() {
        // eigenpairs of the Dirichlet Laplacian: sin(jπx_i), (4/h²)sin²(jπh/2)
        let n = 24;
        let o = ops(n);
        let r = NegNormRealizer::new(&o);
        let h = o.grid.h();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for j in 1..=n {
            let mode = o.grid.sample(|x| (j as f64 * PI * x).sin());
            let norm_sq = dot(&mode, &mode);
            let coef = dot(&mode, &u);
            let s = (j as f64 * PI * h / 2.0).sin();
            let lam = 4.0 * s * s / (h * h);
            acc += coef * coef / norm_sq / lam;
        }
        let oracle = (h * acc).sqrt();
        assert!((r.norm(&u, NegOrder::MinusOne) - oracle).abs() < 1e-12 * oracle);

        // order −2 against a dense solve: ‖D4^{-1/2}u‖² = h uᵀD4⁻¹u
        let w =
            o.d4.to_dense()
                .lu()
                .solve(&DVector::from_vec(u.clone()))
                .unwrap();
        let oracle2 = (h * dot(&u, w.as_slice())).sqrt();
        assert!((r.norm(&u, NegOrder::MinusTwo) - oracle2).abs() < 1e-10 * oracle2);
    }

    #[test]
    fn neg_order_parsing() {
        assert_eq!(NegOrder::from_int(-1).unwrap(), NegOrder::MinusOne);
        assert_eq!(NegOrder::from_int(-2).unwrap(), NegOrder::MinusTwo);
        assert!(NegOrder::from_int(0).is_err());
    }
}
