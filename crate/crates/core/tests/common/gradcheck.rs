//! Central finite-difference gradient checking, independent of the tape's
//! backward rules: only forward values are used for the numeric side.

use albert_wop::numeric::{DType, Tape, Tensor, TensorError, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a small absolute floor, so that coordinates whose
/// true gradient is ~0 compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub struct Report {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: (usize, usize),
}

/// Compares the tape gradient of `f` with respect to every input against
/// central differences at up to `max_coords` coordinates per input.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, floor: f64, max_coords: usize, seed: u64) -> Report
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars).expect("forward");
        tape.value(loss).item().unwrap()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report { checked: 0, worst: 0.0, worst_at: (0, 0) };
    for (which, input) in inputs.iter().enumerate() {
        let g = grads.raw(vars[which]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let coords: Vec<usize> = if input.numel() <= max_coords {
            (0..input.numel()).collect()
        } else {
            sample(&mut rng, input.numel(), max_coords).into_vec()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let base = input.data()[c];
            plus[which].data_mut()[c] = base + h;
            minus[which].data_mut()[c] = base - h;
            let (xp, xm) = if input.dtype() == DType::F32 {
                // the perturbed coordinate must itself be representable
                let xp = (base + h) as f32 as f64;
                let xm = (base - h) as f32 as f64;
                plus[which].data_mut()[c] = xp;
                minus[which].data_mut()[c] = xm;
                (xp, xm)
            } else {
                (base + h, base - h)
            };
            let numeric = (eval(&plus) - eval(&minus)) / (xp - xm);
            let e = rel_err(g[c], numeric, floor);
            if e > report.worst {
                report.worst = e;
                report.worst_at = (which, c);
            }
            report.checked += 1;
        }
    }
    report
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64, dtype: DType) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data, dtype).unwrap()
}
