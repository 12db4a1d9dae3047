//! Discrete-time optimal control problem interface consumed by the SQP.

use nalgebra::{DMatrix, DVector};

/// Stage cost value with gradient and a positive semidefinite Hessian
/// approximation. Costs are assumed separable in state and input.
#[derive(Debug, Clone)]
pub struct CostTerms {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    pub hess_uu: DMatrix<f64>,
}

/// Stage inequality residuals `c >= 0` with Jacobians (one row per residual).
#[derive(Debug, Clone)]
pub struct ConstraintTerms {
    pub values: DVector<f64>,
    pub jac_x: DMatrix<f64>,
    pub jac_u: DMatrix<f64>,
}

/// `min sum_k l_k(x_k, u_k) + l_N(x_N)` subject to `x_{k+1} = f(x_k, u_k)`,
/// `x_0` fixed, input boxes (hard) and stage residuals (softened by the solver).
///
/// At the terminal stage `u` is `None`; implementations return zero-width
/// input blocks there.
pub trait OcpModel: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Next state with `df/dx` and `df/du`.
    fn step_jacobian(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>);

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64;

    fn stage_cost_terms(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> CostTerms;

    /// Lower and upper input bounds (may be infinite).
    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>);

    fn stage_constraints(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> DVector<f64>;

    fn stage_constraint_terms(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> ConstraintTerms;
}
