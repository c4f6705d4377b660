//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scattnet::attention::{
    apply_attention, channel_attention, spatial_attention, AttentionBlock, HiddenActivation,
};
use scattnet::gradcheck::{finite_diff_check_projected, GradCheck};
use scattnet::{Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in [−2, 2].
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut rng(seed))
}

/// Uniform in [−2, 2] with every entry at least `margin` away from zero, so
/// finite differences never straddle a ReLU kink.
pub fn off_kink(shape: &[usize], seed: u64, margin: f32) -> Tensor {
    uniform(shape, seed).map(|x| {
        if x.abs() < margin {
            margin.copysign(x)
        } else {
            x
        }
    })
}

/// Distinct values spread over [−2, 2] in random order, at least
/// `4 / numel` apart, so max-pool arguments never tie under perturbation.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n)
        .map(|i| -2.0 + 4.0 * i as f32 / n.max(2) as f32)
        .collect();
    vals.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Projected gradient check of a tensor-valued `f` with a random projection.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f32, seed: u64) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let out = {
        let mut t = Tape::new();
        let x = t.constant(at.clone());
        let y = f(&mut t, x).unwrap();
        t.value(y).shape().to_vec()
    };
    let projection = Tensor::uniform(out, -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    finite_diff_check_projected(f, at, eps, &projection).unwrap()
}

pub fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// At most this share of coordinates may be set aside for straddling a
/// relu or max-pool branch boundary.
pub const MAX_STRADDLED: f64 = 0.25;

pub fn assert_grad(r: &GradCheck, label: &str) {
    assert!(
        r.max_rel_error < GRAD_TOL,
        "{label}: max relative error {:.3e} at {}",
        r.max_rel_error,
        r.worst_index
    );
    assert!(
        r.straddled_fraction() <= MAX_STRADDLED,
        "{label}: {} of {} coordinates straddled a branch boundary",
        r.straddled.len(),
        r.numeric.len()
    );
}

/// Full cascade refinement differentiated with respect to one leaf:
/// 0 = features, 1 = w1, 2 = w2, 3 = spatial kernel.
pub fn refine_with(
    t: &mut Tape,
    x: scattnet::Var,
    b: &AttentionBlock,
    f: &Tensor,
    which: usize,
) -> scattnet::Result<scattnet::Var> {
    let leaf =
        |t: &mut Tape, i: usize, v: &Tensor| if i == which { x } else { t.constant(v.clone()) };
    let fv = leaf(t, 0, f);
    let w1 = leaf(t, 1, &b.channel.w1);
    let w2 = leaf(t, 2, &b.channel.w2);
    let k = leaf(t, 3, &b.spatial.kernel);
    let wc = channel_attention(t, fv, w1, w2, HiddenActivation::Relu)?;
    let f1 = apply_attention(t, fv, wc)?;
    let ws = spatial_attention(t, f1, k)?;
    apply_attention(t, f1, ws)
}

pub fn permute_spatial(f: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = f.dims4("perm").unwrap();
    let hw = h * w;
    Tensor::from_fn([n, c, h, w], |i| f.data()[(i / hw) * hw + perm[i % hw]])
}

pub fn permute_channels(f: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = f.dims4("perm").unwrap();
    let hw = h * w;
    Tensor::from_fn([n, c, h, w], |i| {
        let (b, ch, p) = (i / (c * hw), (i / hw) % c, i % hw);
        f.data()[(b * c + perm[ch]) * hw + p]
    })
}
