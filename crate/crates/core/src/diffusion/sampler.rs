use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Denoise, NoiseSchedule};
use crate::embedder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::tokens::TokenGrid;

/// Deterministic reverse chain from seeded Gaussian noise:
///
/// ```text
/// ε̂ = (z_t - √α_t ẑ₀) / √(1 - α_t)
/// z_{t-1} = √α_{t-1} ẑ₀ + √(1 - α_{t-1}) ε̂,   α_0 = 1
/// ```
///
/// One slice is generated per condition; `h x w` tokens of `c` channels.
pub fn sample(
    denoiser: &impl Denoise,
    cond: &[ConditionEmbedding],
    schedule: &NoiseSchedule,
    channels: usize,
    seed: u64,
) -> Result<Vec<TokenGrid>> {
    let first = cond.first().ok_or_else(|| Error::InvalidArgument("sampling zero slices".into()))?;
    let (h, w) = (first.tokens.h, first.tokens.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<TokenGrid> = cond
        .iter()
        .map(|_| {
            let data = (0..h * w * channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            TokenGrid::new(h, w, channels, data)
        })
        .collect::<Result<_>>()?;
    for t in (1..=schedule.steps()).rev() {
        let z0 = denoiser.denoise(&z, t, cond)?;
        if z0.len() != z.len() || z0.iter().zip(&z).any(|(a, b)| !a.same_shape(b)) {
            return Err(Error::Shape("denoiser changed the slice stack shape".into()));
        }
        if z0.iter().any(|g| !g.data.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite { index: t });
        }
        let (a_t, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
        if t == 1 {
            z = z0;
            break;
        }
        let (sa, sn) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (pa, pn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        for (zt, x0) in z.iter_mut().zip(&z0) {
            for (v, x) in zt.data.iter_mut().zip(&x0.data) {
                let eps = (*v - sa * x) / sn;
                *v = pa * x + pn * eps;
            }
        }
    }
    Ok(z)
}
