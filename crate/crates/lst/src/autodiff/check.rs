//! Finite-difference gradient checking.
//!
//! The checker rebuilds the expression from scratch for every probe, so it
//! exercises exactly the same code path as training does, including fused ops
//! and gradient-of-gradient constructions.

use crate::autodiff::array::Array;
use crate::autodiff::tape::{NodeId, Tape};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base step for central differences; scaled by `1 + |x|` per coordinate.
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub failures: Vec<GradCheckFailure>,
    pub checked: usize,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients of a scalar-valued expression against central
/// differences, coordinate by coordinate. `build` receives a fresh tape and
/// leaf ids for `inputs` and must return the loss node.
pub fn grad_check<F>(build: F, inputs: &[Array], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value_scalar(loss))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let analytic = tape.grad_arrays(loss, &ids)?;

    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x = input.data()[k];
            let h = cfg.eps * (1.0 + x.abs());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] = x + h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] = x - h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[i].data()[k];
            // Both effectively zero: nothing meaningful to compare.
            if a.abs() < 1e-8 && numeric.abs() < 1e-8 {
                report.checked += 1;
                continue;
            }
            let err = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            if err > cfg.atol + cfg.rtol * a.abs().max(numeric.abs()) {
                report.failures.push(GradCheckFailure {
                    input: i,
                    coord: k,
                    analytic: a,
                    numeric,
                });
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array {
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Array::new(r, c, data).unwrap()
    }

    #[test]
    fn quadratic_passes() {
        let report = grad_check(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                t.sum(sq)
            },
            &[Array::row(&[0.3, -1.2, 2.0])],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "failures: {:?}", report.failures);
    }

    #[test]
    fn deliberately_wrong_gradient_fails() {
        // stop_gradient makes the analytic gradient zero while the numeric
        // gradient is not: the checker must flag every coordinate.
        let report = grad_check(
            |t, ids| {
                let s = t.stop_gradient(ids[0]);
                let sq = t.mul(s, s)?;
                t.sum(sq)
            },
            &[Array::row(&[0.7, -0.4])],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.failures.len(), 2);
    }

    #[test]
    fn matmul_chain_with_relu_and_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_array(&mut rng, 4, 3);
        let w1 = random_array(&mut rng, 3, 5);
        let b1 = random_array(&mut rng, 1, 5);
        let w2 = random_array(&mut rng, 5, 3);
        let report = grad_check(
            |t, ids| {
                let h = t.matmul(ids[0], ids[1])?;
                let h = t.add(h, ids[2])?;
                let h = t.relu(h)?;
                let z = t.matmul(h, ids[3])?;
                let ce = t.cross_entropy_rows(z, &[0, 2, 1, 1])?;
                t.mean(ce)
            },
            &[x, w1, b1, w2],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "failures: {:?}", report.failures);
    }

    #[test]
    fn softmax_log_mul_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_array(&mut rng, 3, 4);
        let w = Array::new(
            3,
            4,
            (0..12).map(|_| rng.gen_range(0.05..1.0)).collect(),
        )
        .unwrap();
        let report = grad_check(
            |t, ids| {
                let p = t.softmax_rows(ids[0])?;
                let lp = t.log(p)?;
                let wl = t.mul(ids[1], lp)?;
                let s = t.sum(wl)?;
                t.scale(s, -1.0)
            },
            &[z, w],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "failures: {:?}", report.failures);
    }

    #[test]
    fn gather_slice_concat_transpose_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_array(&mut rng, 5, 4);
        let b = random_array(&mut rng, 5, 2);
        let report = grad_check(
            |t, ids| {
                let g = t.gather_rows(ids[0], &[4, 0, 0, 2])?;
                let s = t.slice_cols(g, 1, 3)?;
                let picked = t.gather_rows(ids[1], &[1, 1, 3, 2])?;
                let cat = t.concat_cols(s, picked)?;
                let ct = t.transpose(cat)?;
                let sq = t.mul(ct, ct)?;
                t.sum(sq)
            },
            &[a, b],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "failures: {:?}", report.failures);
    }

    #[test]
    fn second_order_unrolled_update_matches_numeric_meta_gradient() {
        // One gradient step on an inner CE loss, then an outer CE loss at the
        // updated weights. The numeric check probes the *whole* unrolled
        // computation, so agreement requires correct second-order terms.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs = random_array(&mut rng, 4, 3);
        let xq = random_array(&mut rng, 3, 3);
        let w = random_array(&mut rng, 3, 3);
        let report = grad_check(
            |t, ids| {
                let (xs, xq, w) = (ids[0], ids[1], ids[2]);
                let zs = t.matmul(xs, w)?;
                let ce = t.cross_entropy_rows(zs, &[0, 1, 2, 0])?;
                let inner = t.mean(ce)?;
                let g = t.grad_nodes(inner, &[w])?[0];
                let step = t.scale(g, 0.5)?;
                let w1 = t.sub(w, step)?;
                let zq = t.matmul(xq, w1)?;
                let ceq = t.cross_entropy_rows(zq, &[2, 0, 1])?;
                t.mean(ceq)
            },
            &[xs, xq, w],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "failures: {:?}", report.failures);
    }
}
