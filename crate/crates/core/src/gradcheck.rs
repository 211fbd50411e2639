//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to rounding compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding error bound of the central difference itself.
    pub noise: f64,
}

/// Headroom over unit roundoff for the rounding accumulated inside the
/// evaluated function.
const ROUNDOFF_MARGIN: f64 = 16.0;

impl Probe {
    /// Relative error after discounting the part of the discrepancy that is
    /// below the resolution of the finite difference.
    pub fn rel_err(&self) -> f64 {
        let gap = ((self.analytic - self.numeric).abs() - self.noise).max(0.0);
        gap / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub probes: Vec<Probe>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// Chooses `per_input` random coordinates in every input plus `extra`
/// coordinates in uniformly chosen inputs.
pub fn sample_coords(shapes: &[Vec<usize>], per_input: usize, extra: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        for _ in 0..per_input {
            coords.push((i, rng.random_range(0..n)));
        }
    }
    for _ in 0..extra {
        let i = rng.random_range(0..shapes.len());
        let n: usize = shapes[i].iter().product();
        coords.push((i, rng.random_range(0..n)));
    }
    coords
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h` at the given `(input, flat index)` coordinates.
pub fn check<F>(inputs: &[Tensor<f64>], coords: &[(usize, usize)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut work = inputs.to_vec();
    let mut probes = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + h;
        let plus = eval(&work)?;
        work[input].data_mut()[index] = orig - h;
        let minus = eval(&work)?;
        work[input].data_mut()[index] = orig;
        probes.push(Probe {
            input,
            index,
            analytic: analytic[input].data()[index],
            numeric: (plus - minus) / (2.0 * h),
            noise: ROUNDOFF_MARGIN * f64::EPSILON * plus.abs().max(minus.abs()) / h,
        });
    }
    Ok(GradReport { probes })
}
