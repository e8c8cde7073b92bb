use alloc::format;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Registers `{prefix}.w` (`[fan_in, fan_out]`) and a zero bias `{prefix}.b`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.init_weight(&format!("{prefix}.w"), fan_in, fan_out)?;
    store.init_zeros(&format!("{prefix}.b"), &[fan_out])
}

/// `x[n, in] · w + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `linear(relu(linear(x)))` with layers `{prefix}.0` and `{prefix}.1`.
pub fn mlp2(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.0"), x)?;
    let h = tape.relu(h)?;
    linear(tape, store, &format!("{prefix}.1"), h)
}
