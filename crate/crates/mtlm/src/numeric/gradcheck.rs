use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The smallest gradient magnitude compared relatively. A central difference
/// of a loss L resolves the gradient only to about ulp(L) / (2 epsilon); for
/// a summed cross-entropy of magnitude ~40 at epsilon 1e-5 that is ~4e-10,
/// so coordinates below this floor are held to an absolute tolerance of
/// floor * rtol instead of drowning the report in quantization noise.
pub const DENOM_FLOOR: f64 = 1e-5;

/// Compare an analytic gradient against central finite differences.
///
/// `loss` evaluates the objective at a flat parameter vector; `grad` returns
/// the analytic gradient at the same point. A random subsample of at least
/// `min_coords` coordinates is checked (all of them when the vector is small).
/// Returns the maximum relative error, with the denominator floored at
/// `DENOM_FLOOR` so coordinates the finite difference cannot resolve do not
/// blow the ratio up.
pub fn check_gradients<L, G>(
    loss: L,
    grad: G,
    theta: &[f64],
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64>
where
    L: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!("finite-difference epsilon {epsilon} must be > 0")));
    }
    let analytic = grad(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }

    let n = theta.len();
    let coords: Vec<usize> = if n <= min_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, n, min_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut work = theta.to_vec();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + epsilon;
        let up = loss(&work)?;
        work[i] = orig - epsilon;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite loss while perturbing coordinate {i} ({up} / {down})"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
