use super::cloud::{sq_dist, tensor_to_points, Point};
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// For each point of `from`, the index of its nearest point in `to` (lowest index on ties)
/// and the squared distance.
fn nearest(from: &[Point], to: &[Point]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = sq_dist(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Symmetric squared-L2 Chamfer distance: mean over `pred` of the squared
/// distance to the nearest target point, plus the same from `target` to `pred`.
pub fn chamfer(pred: &[Point], target: &[Point]) -> Result<f64> {
    if pred.is_empty() || target.is_empty() {
        return Err(arg_err!("chamfer: both point sets must be non-empty"));
    }
    let fwd: f64 = nearest(pred, target).iter().map(|x| x.1).sum::<f64>() / pred.len() as f64;
    let bwd: f64 = nearest(target, pred).iter().map(|x| x.1).sum::<f64>() / target.len() as f64;
    Ok(fwd + bwd)
}

/// Mean Chamfer distance over groups: `pred` is `[G, A, 3]` on the tape,
/// `target` a constant `[G, B, 3]`. An empty batch (`G = 0`) yields 0.
pub fn chamfer_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    let ts = target.shape();
    if ps.len() != 3 || ts.len() != 3 || ps[2] != 3 || ts[2] != 3 || ps[0] != ts[0] {
        return Err(dim_err!("chamfer_loss: pred {ps:?} vs target {ts:?}"));
    }
    let groups = ps[0];
    if groups == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if ps[1] == 0 || ts[1] == 0 {
        return Err(arg_err!("chamfer_loss: empty point sets"));
    }
    let p_all = tensor_to_points(tape.value(pred));
    let t_all = tensor_to_points(target);
    let (a, b) = (ps[1], ts[1]);
    let mut total = 0.0;
    for g in 0..groups {
        total += chamfer(&p_all[g * a..(g + 1) * a], &t_all[g * b..(g + 1) * b])?;
    }
    let out = Tensor::scalar(total / groups as f64);
    Ok(tape.custom(&[pred], out, Box::new(ChamferOp { target: target.clone() })))
}

struct ChamferOp {
    target: Tensor,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let pred = inputs[0];
        let (groups, a, b) = (pred.shape()[0], pred.shape()[1], self.target.shape()[1]);
        let p_all = tensor_to_points(pred);
        let t_all = tensor_to_points(&self.target);
        let scale = grad[0] / groups as f64;
        let mut gp = vec![0.0; pred.numel()];
        for g in 0..groups {
            let (pg, tg) = (&p_all[g * a..(g + 1) * a], &t_all[g * b..(g + 1) * b]);
            for (i, (j, _)) in nearest(pg, tg).into_iter().enumerate() {
                for ax in 0..3 {
                    gp[(g * a + i) * 3 + ax] += scale * 2.0 / a as f64 * (pg[i][ax] - tg[j][ax]);
                }
            }
            for (j, (i, _)) in nearest(tg, pg).into_iter().enumerate() {
                for ax in 0..3 {
                    gp[(g * a + i) * 3 + ax] += scale * 2.0 / b as f64 * (pg[i][ax] - tg[j][ax]);
                }
            }
        }
        vec![Some(gp)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded, uniform};
    use crate::numerics::{grad_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;

    #[test]
    fn chamfer_examples() {
        let p = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer(&[], &p).is_err());
    }

    #[test]
    fn chamfer_loss_gradient_matches_finite_differences() {
        let target = uniform(&mut seeded(1), &[3, 5, 3], -1.0, 1.0);
        let mut ps = ParamStore::new();
        ps.insert("pred", uniform(&mut seeded(2), &[3, 4, 3], -1.0, 1.0));
        let f = |t: &mut Tape, ps: &ParamStore| {
            let p = t.param(ps, "pred")?;
            chamfer_loss(t, p, &target)
        };
        let opts = GradCheckOptions { tol: 1e-6, full_limit: 100, ..Default::default() };
        let report = grad_check(f, &ps, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn empty_batch_is_zero() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::zeros(&[0, 4, 3]));
        let l = chamfer_loss(&mut t, p, &Tensor::zeros(&[0, 4, 3])).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    fn cloud() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..12)
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_and_nonnegative(p in cloud(), q in cloud()) {
            let (a, b) = (chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn chamfer_is_zero_for_mutually_contained_sets(p in cloud(), dup in 0usize..12) {
            let mut q = p.clone();
            q.reverse();
            q.push(p[dup % p.len()]);
            prop_assert_eq!(chamfer(&p, &q).unwrap(), 0.0);
        }
    }
}
