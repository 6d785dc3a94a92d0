use nalgebra::{DMatrix, DVector};

use crate::hjb::PolicyField;

/// Drift of the controlled diffusion: either a closed-loop matrix `M x`, or
/// `M x + B u(x)` with `u` a piecewise-constant grid policy.
#[derive(Debug, Clone)]
pub enum Drift {
    Linear(DMatrix<f64>),
    Controlled { matrix: DMatrix<f64>, input: DMatrix<f64>, policy: PolicyField },
}

impl Drift {
    pub fn dim(&self) -> usize {
        match self {
            Drift::Linear(m) | Drift::Controlled { matrix: m, .. } => m.nrows(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        match self {
            Drift::Linear(m) | Drift::Controlled { matrix: m, .. } => m,
        }
    }

    /// Drift at interior grid node `node` with coordinates `x`.
    pub fn at_node(&self, node: usize, x: &[f64], out: &mut [f64]) {
        linear_part(self.matrix(), x, out);
        if let Drift::Controlled { input, policy, .. } = self {
            add_input(input, policy.value(node), out);
        }
    }

    /// Drift at an arbitrary point; policies are read at the nearest interior node.
    pub fn at_point(&self, x: &[f64], out: &mut [f64]) {
        linear_part(self.matrix(), x, out);
        if let Drift::Controlled { input, policy, .. } = self {
            add_input(input, policy.lookup(x), out);
        }
    }
}

fn linear_part(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..x.len()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

fn add_input(b: &DMatrix<f64>, u: &DVector<f64>, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o += (0..u.len()).map(|k| b[(i, k)] * u[k]).sum::<f64>();
    }
}
