use super::Vec3;

/// Angle between two vectors in `[0, π]`; the cosine is clamped before
/// `acos`. Zero-length inputs give 0.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    libm::acos(c)
}

/// Point pair feature `(∠(n_i, d), ∠(n_j, d), ∠(n_i, n_j), ‖d‖)` with
/// `d = p_j − p_i`. Coincident points give 0 for the two offset angles.
pub fn ppf(p_i: &Vec3, n_i: &Vec3, p_j: &Vec3, n_j: &Vec3) -> [f64; 4] {
    let d = p_j - p_i;
    [angle_between(n_i, &d), angle_between(n_j, &d), angle_between(n_i, n_j), d.norm()]
}
