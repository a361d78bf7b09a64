//! Parameterized scan layers: the state-wise structural scan run by the
//! encoder blocks and the plain selective scan run by the decoder.
//!
//! Parameter paths under a direction prefix `p`:
//!
//! | path                         | shape    |
//! |------------------------------|----------|
//! | `p.phi_b.weight`             | `[E, M]` |
//! | `p.phi_c.weight`             | `[E, M]` |
//! | `p.mlp_b.{0,1}.{weight,bias}`| `3 -> 32 -> 1` (structural only) |
//! | `p.mlp_c.{0,1}.{weight,bias}`| `3 -> 32 -> 1` (structural only) |
//! | `p.phi_delta.{weight,bias}`  | `[E, E]`, `[E]` |
//! | `p.a`                        | `[M, E]` |
//! | `p.tau`                      | `[E]` (structural only) |

use rand::Rng as _;

use super::{diff, Direction};
use crate::error::{dim_err, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};

/// Hidden width of the offset MLPs.
pub const OFFSET_HIDDEN: usize = 32;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

fn init_common(ps: &mut ParamStore, rng: &mut Rng, p: &str, e: usize, m: usize) {
    ps.init_linear(rng, &format!("{p}.phi_b"), e, m, false);
    ps.init_linear(rng, &format!("{p}.phi_c"), e, m, false);
    ps.init_linear(rng, &format!("{p}.phi_delta"), e, e, true);
    // softplus(bias) log-uniform in [DT_MIN, DT_MAX]
    let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
    let bias: Vec<f64> = (0..e)
        .map(|_| {
            let dt = rng.gen_range(lo..hi).exp();
            dt.exp_m1().ln()
        })
        .collect();
    ps.insert(format!("{p}.phi_delta.bias"), Tensor::from_vec(bias));
    let a = (0..m).flat_map(|j| std::iter::repeat_n(-((j + 1) as f64), e)).collect();
    ps.insert(format!("{p}.a"), Tensor::new(&[m, e], a).expect("m x e"));
}

/// Initializes one direction of a structural scan under `prefix`.
pub fn init_structural(ps: &mut ParamStore, rng: &mut Rng, prefix: &str, e: usize, m: usize) {
    init_common(ps, rng, prefix, e, m);
    for which in ["mlp_b", "mlp_c"] {
        ps.init_linear(rng, &format!("{prefix}.{which}.0"), 3, OFFSET_HIDDEN, true);
        ps.init_linear(rng, &format!("{prefix}.{which}.1"), OFFSET_HIDDEN, 1, true);
    }
    ps.insert(format!("{prefix}.tau"), Tensor::full(&[e], 1.0));
}

/// Initializes a standard (decoder) scan under `prefix`.
pub fn init_standard(ps: &mut ParamStore, rng: &mut Rng, prefix: &str, e: usize, m: usize) {
    init_common(ps, rng, prefix, e, m);
}

fn offset_mlp(tape: &mut Tape, ps: &ParamStore, p: &str, offsets: Var) -> Result<Var> {
    let w0 = tape.param(ps, &format!("{p}.0.weight"))?;
    let b0 = tape.param(ps, &format!("{p}.0.bias"))?;
    let w1 = tape.param(ps, &format!("{p}.1.weight"))?;
    let b1 = tape.param(ps, &format!("{p}.1.bias"))?;
    let h = tape.linear(offsets, w0, Some(b0))?;
    let h = tape.silu(h);
    tape.linear(h, w1, Some(b1))
}

/// State-wise input and readout coefficients `(b, c)`, both `[N, M]`:
/// a token projection plus an MLP of the token-to-state offset.
pub fn gen_bc(tape: &mut Tape, ps: &ParamStore, prefix: &str, x_hat: Var, offsets: &Tensor) -> Result<(Var, Var)> {
    let n = tape.value(x_hat).rows();
    let os = offsets.shape();
    if os.len() != 3 || os[0] != n || os[2] != 3 {
        return Err(dim_err!("gen_bc: {n} tokens vs offsets {os:?}"));
    }
    let m = os[1];
    let off = tape.constant(offsets.clone());
    let mut out = [x_hat; 2];
    for (slot, which) in out.iter_mut().zip(["b", "c"]) {
        let w = tape.param(ps, &format!("{prefix}.phi_{which}.weight"))?;
        let proj = tape.linear(x_hat, w, None)?;
        let mlp = offset_mlp(tape, ps, &format!("{prefix}.mlp_{which}"), off)?;
        let mlp = tape.reshape(mlp, &[n, m])?;
        *slot = tape.add(proj, mlp)?;
    }
    Ok((out[0], out[1]))
}

/// `softplus(phi_delta(x_hat))`, shape `[N, E]`.
pub fn raw_delta(tape: &mut Tape, ps: &ParamStore, prefix: &str, x_hat: Var) -> Result<Var> {
    let w = tape.param(ps, &format!("{prefix}.phi_delta.weight"))?;
    let b = tape.param(ps, &format!("{prefix}.phi_delta.bias"))?;
    let z = tape.linear(x_hat, w, Some(b))?;
    Ok(tape.softplus(z))
}

/// One direction of the structural scan. `x_hat: [N, E]`, `h0: [M, E]`,
/// `offsets: [N, M, 3]`. Returns `(y: [N, E], h_final: [M, E])`.
pub fn structural_direction(
    tape: &mut Tape,
    ps: &ParamStore,
    prefix: &str,
    x_hat: Var,
    h0: Var,
    offsets: &Tensor,
    dir: Direction,
) -> Result<(Var, Var)> {
    let (b, c) = gen_bc(tape, ps, prefix, x_hat, offsets)?;
    let raw = raw_delta(tape, ps, prefix, x_hat)?;
    let tau = tape.param(ps, &format!("{prefix}.tau"))?;
    let delta = diff::adaptive_delta(tape, raw, tau)?;
    let a = tape.param(ps, &format!("{prefix}.a"))?;
    diff::selective_scan(tape, x_hat, h0, delta, a, b, c, dir)
}

/// Forward selective scan from a zero state with token-only parameters.
pub fn standard_layer(tape: &mut Tape, ps: &ParamStore, prefix: &str, x_hat: Var) -> Result<Var> {
    let wb = tape.param(ps, &format!("{prefix}.phi_b.weight"))?;
    let wc = tape.param(ps, &format!("{prefix}.phi_c.weight"))?;
    let b = tape.linear(x_hat, wb, None)?;
    let c = tape.linear(x_hat, wc, None)?;
    let delta = raw_delta(tape, ps, prefix, x_hat)?;
    let a = tape.param(ps, &format!("{prefix}.a"))?;
    let zeros = Tensor::zeros(tape.shape(a));
    let h0 = tape.constant(zeros);
    Ok(diff::selective_scan(tape, x_hat, h0, delta, a, b, c, Direction::Forward)?.0)
}
