use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Mode, ParamId, ParamStore, Session};
use crate::autograd::{gradcheck, GradcheckOptions, GradcheckReport, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Reduces `y` to a scalar as `sum(y * r)` with `r` drawn from `seed`, so that
/// every output element contributes with its own weight.
pub fn projected_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Gradient-checks `forward` with respect to `inputs` and every trainable
/// parameter in `store`. Non-scalar outputs are reduced with [`projected_sum`].
pub fn gradcheck_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    opts: &GradcheckOptions,
    forward: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + Sync,
{
    let params: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(params.iter().map(|&id| store.value(id).clone()));
    let n_inputs = inputs.len();
    let seed = opts.seed;
    gradcheck(
        |g, vars| {
            let y = {
                let mut s = Session::new(g, store, mode);
                for (k, &id) in params.iter().enumerate() {
                    s.bind(id, vars[n_inputs + k]);
                }
                forward(&mut s, &vars[..n_inputs])?
            };
            projected_sum(g, y, seed ^ 0xA5A5)
        },
        &all,
        opts,
    )
}
