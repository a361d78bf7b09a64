//! Per-group point embedding: a two-stage shared point MLP with max pooling.

use crate::error::{dim_err, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};

pub const HIDDEN_1: usize = 128;
pub const HIDDEN_2: usize = 256;

pub fn init(ps: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) {
    ps.init_linear(rng, &format!("{prefix}.first.0"), 3, HIDDEN_1, true);
    ps.init_linear(rng, &format!("{prefix}.first.1"), HIDDEN_1, HIDDEN_2, true);
    ps.init_linear(rng, &format!("{prefix}.second"), 2 * HIDDEN_2, d, true);
}

/// Embeds `grouped: [N, K, 3]` relative coordinates into `[N, D]` tokens.
pub fn token_embed(tape: &mut Tape, ps: &ParamStore, prefix: &str, grouped: &Tensor) -> Result<Var> {
    let s = grouped.shape();
    if s.len() != 3 || s[2] != 3 || s[1] == 0 {
        return Err(dim_err!("token_embed: expected [N, K, 3], got {s:?}"));
    }
    let (n, k) = (s[0], s[1]);
    let lin = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
        let w = tape.param(ps, &format!("{prefix}.{name}.weight"))?;
        let b = tape.param(ps, &format!("{prefix}.{name}.bias"))?;
        tape.linear(x, w, Some(b))
    };
    let x = tape.constant(grouped.clone());
    let h = lin(tape, x, "first.0")?;
    let h = tape.silu(h);
    let f = lin(tape, h, "first.1")?;
    let pooled = tape.max_pool(f)?;

    // [pooled, point feature] for every point
    let repeat: Vec<usize> = (0..n).flat_map(|g| std::iter::repeat_n(g, k)).collect();
    let spread = tape.gather_rows(pooled, &repeat)?;
    let points = tape.reshape(f, &[n * k, HIDDEN_2])?;
    let joint = tape.concat_cols(spread, points)?;
    let out = lin(tape, joint, "second")?;
    let d = tape.value(out).last_dim();
    let out = tape.reshape(out, &[n, k, d])?;
    tape.max_pool(out)
}
