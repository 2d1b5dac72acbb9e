//! Regularization losses derived from a transport plan.

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ot::{CostMatrix, TransportPlan};

pub const DEFAULT_LAMBDA_SPR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtLossBreakdown {
    pub l_cost: f64,
    pub l_spr: f64,
    pub l_ot: f64,
    pub lambda_spr: f64,
}

/// The three loss terms as backend variables (all `1 x 1`).
#[derive(Debug, Clone)]
pub struct OtLossVars<V> {
    pub l_cost: V,
    pub l_spr: V,
    pub l_ot: V,
}

fn check_same_shape(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// `sum_ij gamma_ij C_ij`.
pub fn transport_cost_on<B: Backend>(b: &mut B, gamma: &B::Var, cost: &B::Var) -> Result<B::Var> {
    check_same_shape(b.value(gamma), b.value(cost), "transport_cost")?;
    b.dot(gamma, cost)
}

/// Divides each row by its sum.
pub fn row_normalize_on<B: Backend>(b: &mut B, gamma: &B::Var) -> Result<B::Var> {
    if let Some(i) = b.value(gamma).row_sums().iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Degenerate(format!("plan row {i} has no mass")));
    }
    let sums = b.sum_rows(gamma)?;
    b.div(gamma, &sums)
}

/// `(1/n_a) sum_i (1 - ||row_i||_2)` over the row-normalized plan.
pub fn sparsity_loss_on<B: Backend>(b: &mut B, gamma: &B::Var) -> Result<B::Var> {
    let n = b.value(gamma).rows();
    let rows = row_normalize_on(b, gamma)?;
    let sq = b.mul(&rows, &rows)?;
    let ss = b.sum_rows(&sq)?;
    let norms = b.sqrt(&ss)?;
    let total = b.sum(&norms)?;
    let mean = b.scale(&total, -1.0 / n as f64)?;
    b.offset(&mean, 1.0)
}

/// `l_ot = l_cost + lambda_spr * l_spr`.
pub fn ot_loss_on<B: Backend>(
    b: &mut B,
    gamma: &B::Var,
    cost: &B::Var,
    lambda_spr: f64,
) -> Result<OtLossVars<B::Var>> {
    if !(lambda_spr >= 0.0) {
        return Err(Error::Contract(format!("lambda_spr must be nonnegative, got {lambda_spr}")));
    }
    let l_cost = transport_cost_on(b, gamma, cost)?;
    let l_spr = sparsity_loss_on(b, gamma)?;
    let weighted = b.scale(&l_spr, lambda_spr)?;
    let l_ot = b.add(&l_cost, &weighted)?;
    Ok(OtLossVars { l_cost, l_spr, l_ot })
}

impl<V> OtLossVars<V> {
    pub fn breakdown<B: Backend<Var = V>>(&self, b: &B, lambda_spr: f64) -> OtLossBreakdown {
        OtLossBreakdown {
            l_cost: b.value(&self.l_cost).get(0, 0),
            l_spr: b.value(&self.l_spr).get(0, 0),
            l_ot: b.value(&self.l_ot).get(0, 0),
            lambda_spr,
        }
    }
}

pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    Ok(transport_cost_on(&mut Eager, &plan.gamma, cost.values())?.get(0, 0))
}

pub fn row_normalize(plan: &TransportPlan) -> Result<Matrix> {
    row_normalize_on(&mut Eager, &plan.gamma)
}

pub fn sparsity_loss(plan: &TransportPlan) -> Result<f64> {
    Ok(sparsity_loss_on(&mut Eager, &plan.gamma)?.get(0, 0))
}

pub fn ot_loss(plan: &TransportPlan, cost: &CostMatrix, lambda_spr: f64) -> Result<OtLossBreakdown> {
    let vars = ot_loss_on(&mut Eager, &plan.gamma, cost.values(), lambda_spr)?;
    Ok(vars.breakdown(&Eager, lambda_spr))
}
