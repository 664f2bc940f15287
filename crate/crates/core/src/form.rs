//! Semi-discrete right-hand sides `du/dt = -sum_b scale_b * T_b(u)`.
//!
//! A linear term applies its operator to `u`. A quadratic term uses the
//! feature map `z_k = u_i * u_{i+k}`, so `T_i(u) = u_i * (N^i)^T u_{Omega_i}`.
//! Reference data and learned-model forecasts both go through
//! [`SemiDiscreteForm::rhs_into`], which keeps them bitwise comparable.

use crate::error::{Error, Result};
use crate::grid::AssembledOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub kind: TermKind,
    pub scale: f64,
    pub op: AssembledOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDiscreteForm {
    terms: Vec<Term>,
    n: usize,
}

impl SemiDiscreteForm {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let n = terms
            .first()
            .ok_or_else(|| Error::Assembly("a form needs at least one term".into()))?
            .op
            .n();
        if let Some(t) = terms.iter().find(|t| t.op.n() != n) {
            return Err(Error::Dimension {
                expected: n,
                got: t.op.n(),
            });
        }
        Ok(SemiDiscreteForm { terms, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n];
        self.rhs_into(u, &mut out)?;
        Ok(out)
    }

    pub fn rhs_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        if u.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: u.len(),
            });
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in &self.terms {
                let mut s = 0.0;
                for (j, c) in t.op.row_entries(i) {
                    s += c * u[j];
                }
                if t.kind == TermKind::Quadratic {
                    s *= u[i];
                }
                acc += t.scale * s;
            }
            *o = -acc;
        }
        Ok(())
    }
}
