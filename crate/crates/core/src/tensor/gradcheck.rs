//! Finite-difference verification of every tape op.
//!
//! Analytic gradients from [`Tape::backward`] are compared against
//! central differences (f(x+h) - f(x-h)) / 2h with h = 1e-5, elementwise,
//! using the relative error |a - n| / max(|a|, |n|). Denominators below
//! 1e-6 count as agreement: the finite-difference noise floor for an
//! O(1) loss at this step is near 1e-11, so comparing gradients that
//! small only measures that noise, while a genuinely wrong gradient
//! pairs a dead side against a side far above the guard and still fails.
//!
//! Non-smooth ops are probed away from their kinks: relu inputs keep a
//! margin from zero and max pool inputs are pairwise distinct with gaps
//! far wider than h, so the finite difference never straddles a switch
//! of the active branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::tape::{Mode, NodeId, Tape};
use super::{RunningStat, Tensor, TensorError};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Per-op acceptance threshold on the worst relative error.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check case.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a small-denominator guard.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Worst relative error between analytic and central-difference
/// gradients of `build`, a scalar function of `inputs` expressed as tape
/// ops. `build` must be deterministic: it is re-run for every probe.
pub fn max_relative_error<F>(inputs: &[Tensor], build: &mut F) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map_or_else(|| vec![0.0; 0], |t| t.data().to_vec()))
        .collect();

    let eval = |work: &[Tensor], build: &mut F| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = work.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + STEP;
            let plus = eval(&work, build)?;
            work[ti].data_mut()[ei] = orig - STEP;
            let minus = eval(&work, build)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[ti].get(ei).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("uniform tensor size")
}

/// Uniform values kept at least 0.1 away from zero, for relu probes.
fn uniform_off_kink(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("off-kink tensor size")
}

/// Pairwise-distinct values with gaps of 0.05, for max pool probes.
fn distinct(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order.into_iter().map(|r| r as f64 * 0.05 - len as f64 * 0.025).collect();
    Tensor::from_vec(shape, data).expect("distinct tensor size")
}

/// Scalarizes `y` with fixed pseudo-random coefficients so every output
/// element influences the probe.
fn scalarize(tape: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, &coeffs)
}

type BuildFn = Box<dyn FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>>;

fn cases() -> Vec<(String, Vec<Tensor>, BuildFn)> {
    let mut list: Vec<(String, Vec<Tensor>, BuildFn)> = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0x6d6f_6443);

    // conv2d over each grouping regime: dense, grouped, depthwise.
    for &(name, cin, cout, groups, stride, pad) in &[
        ("conv2d_g1", 2usize, 3usize, 1usize, 2usize, 1usize),
        ("conv2d_g2", 4, 4, 2, 1, 1),
        ("conv2d_depthwise", 3, 3, 3, 1, 1),
    ] {
        let x = uniform(&mut rng, vec![1, cin, 5, 6]);
        let w = uniform(&mut rng, vec![cout, cin / groups, 3, 3]);
        let b = uniform(&mut rng, vec![cout]);
        list.push((
            name.to_string(),
            vec![x, w, b],
            Box::new(move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad, groups)?;
                scalarize(tape, y, 11)
            }),
        ));
    }

    // conv2d_transposed with the decoder geometry (k4 s2 p1).
    let x = uniform(&mut rng, vec![1, 3, 3, 4]);
    let w = uniform(&mut rng, vec![3, 2, 4, 4]);
    let b = uniform(&mut rng, vec![2]);
    list.push((
        "conv2d_transposed".to_string(),
        vec![x, w, b],
        Box::new(|tape, ids| {
            let y = tape.conv2d_transposed(ids[0], ids[1], Some(ids[2]), 2, 1)?;
            scalarize(tape, y, 12)
        }),
    ));

    // batch_norm, train mode: batch statistics are part of the graph.
    let x = uniform(&mut rng, vec![2, 3, 2, 2]);
    let g = uniform_off_kink(&mut rng, vec![3]);
    let bt = uniform(&mut rng, vec![3]);
    list.push((
        "batch_norm_train".to_string(),
        vec![x, g, bt],
        Box::new(|tape, ids| {
            let mut rs = RunningStat::new(3);
            let y = tape.batch_norm(ids[0], ids[1], ids[2], &mut rs, Mode::Train, 0.9, 1e-5)?;
            scalarize(tape, y, 13)
        }),
    ));

    // batch_norm, eval mode: running statistics are constants.
    let x = uniform(&mut rng, vec![2, 3, 2, 2]);
    let g = uniform_off_kink(&mut rng, vec![3]);
    let bt = uniform(&mut rng, vec![3]);
    list.push((
        "batch_norm_eval".to_string(),
        vec![x, g, bt],
        Box::new(|tape, ids| {
            let mut rs = RunningStat::new(3);
            rs.mean = vec![0.2, -0.1, 0.4];
            rs.var = vec![0.5, 1.5, 0.9];
            let y = tape.batch_norm(ids[0], ids[1], ids[2], &mut rs, Mode::Eval, 0.9, 1e-5)?;
            scalarize(tape, y, 14)
        }),
    ));

    let x = uniform_off_kink(&mut rng, vec![1, 2, 4, 5]);
    list.push((
        "relu".to_string(),
        vec![x],
        Box::new(|tape, ids| {
            let y = tape.relu(ids[0])?;
            scalarize(tape, y, 15)
        }),
    ));

    // Overlapping max pool windows (stride < kernel) with distinct values.
    let x = distinct(&mut rng, vec![1, 2, 5, 5]);
    list.push((
        "max_pool2d".to_string(),
        vec![x],
        Box::new(|tape, ids| {
            let y = tape.max_pool2d(ids[0], 3, 2, 1)?;
            scalarize(tape, y, 16)
        }),
    ));

    let x = uniform(&mut rng, vec![1, 2, 5, 5]);
    list.push((
        "avg_pool2d".to_string(),
        vec![x],
        Box::new(|tape, ids| {
            let y = tape.avg_pool2d(ids[0], 3, 2, 1)?;
            scalarize(tape, y, 17)
        }),
    ));

    let x = uniform(&mut rng, vec![2, 6, 2, 3]);
    list.push((
        "channel_shuffle".to_string(),
        vec![x],
        Box::new(|tape, ids| {
            let y = tape.channel_shuffle(ids[0], 3)?;
            scalarize(tape, y, 18)
        }),
    ));

    let a = uniform(&mut rng, vec![1, 2, 3, 3]);
    let b = uniform(&mut rng, vec![1, 3, 3, 3]);
    list.push((
        "concat".to_string(),
        vec![a, b],
        Box::new(|tape, ids| {
            let y = tape.concat(ids[0], ids[1])?;
            scalarize(tape, y, 19)
        }),
    ));

    let a = uniform(&mut rng, vec![2, 3, 2, 2]);
    let b = uniform(&mut rng, vec![2, 3, 2, 2]);
    list.push((
        "add".to_string(),
        vec![a, b],
        Box::new(|tape, ids| {
            let y = tape.add(ids[0], ids[1])?;
            scalarize(tape, y, 20)
        }),
    ));

    // Weighted cross-entropy straight to the scalar loss.
    let logits = uniform(&mut rng, vec![2, 2, 2, 3]);
    let labels: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    list.push((
        "weighted_cross_entropy".to_string(),
        vec![logits],
        Box::new(move |tape, ids| tape.wce_loss(ids[0], &labels, [0.3, 1.7])),
    ));

    list
}

/// Runs every op case whose name contains `filter` (all cases when
/// `filter` is `None`) and reports the worst relative error of each.
pub fn check_all(filter: Option<&str>) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut reports = Vec::new();
    for (name, inputs, mut build) in cases() {
        if let Some(f) = filter {
            if !name.contains(f) {
                continue;
            }
        }
        let err = max_relative_error(&inputs, &mut build)?;
        reports.push(GradCheckReport {
            name,
            max_rel_err: err,
            tolerance: OP_TOLERANCE,
            passed: err < OP_TOLERANCE,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_gradcheck() {
        let reports = check_all(None).unwrap();
        assert_eq!(reports.len(), 13);
        for r in &reports {
            assert!(r.passed, "{} failed gradcheck: max rel err {:.3e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn filter_selects_matching_cases() {
        let reports = check_all(Some("conv2d")).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports.iter().all(|r| r.name.contains("conv2d")));
    }

    #[test]
    fn relative_error_guards_tiny_denominators() {
        assert_eq!(relative_error(0.0, 1e-9), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
