//! Proximal maps and projections used by the splitting iterations.

/// Soft threshold: `argmin_x  t|x| + (x - v)^2 / 2`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Prox of `t * x` restricted to `x >= 0`.
pub fn shifted_nonneg(v: f64, t: f64) -> f64 {
    (v - t).max(0.0)
}

/// Projects `z` onto the Euclidean ball of radius `eps` around `center`, in place.
/// Returns whether the point was moved.
pub fn project_ball(z: &mut [f64], center: &[f64], eps: f64) -> bool {
    debug_assert_eq!(z.len(), center.len());
    let dist = z
        .iter()
        .zip(center)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt();
    if dist <= eps {
        return false;
    }
    let scale = eps / dist;
    for (a, c) in z.iter_mut().zip(center) {
        *a = c + (*a - c) * scale;
    }
    true
}

pub fn clip_upper(t: f64, c: f64) -> f64 {
    t.min(c)
}
