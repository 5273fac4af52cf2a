#![allow(dead_code)]

use scamnet_core::numerics::{Graph, Tensor, Var};
use scamnet_core::Result;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Forward value of `f` at `params`.
pub fn eval_loss(params: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars).expect("loss builds");
    g.scalar(loss)
}

/// Central difference of `f` along one coordinate `(tensor, element)`.
pub fn central_difference(
    params: &[Tensor<f64>],
    coord: (usize, usize),
    h: f64,
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut plus = params.to_vec();
    plus[coord.0].data_mut()[coord.1] += h;
    let mut minus = params.to_vec();
    minus[coord.0].data_mut()[coord.1] -= h;
    (eval_loss(&plus, f) - eval_loss(&minus, f)) / (2.0 * h)
}

/// Stable 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
