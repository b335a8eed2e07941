//! Constant-velocity Kalman filter with a Rauch-Tung-Striebel backward pass.

use nalgebra::{Matrix2x4, Matrix4, Vector2, Vector4};

use crate::data::TrajPoint;
use crate::error::{Error, Result};

/// Smooth a trajectory sampled at unit spacing. `q` scales the white-noise
/// acceleration covariance, `r` the isotropic measurement variance.
pub fn kalman_smooth(traj: &[TrajPoint], q: f64, r: f64) -> Result<Vec<TrajPoint>> {
    if !(q > 0.0 && q.is_finite() && r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise levels must be positive, got q={q} r={r}"
        )));
    }
    if traj.len() < 2 {
        return Ok(traj.to_vec());
    }
    let dt: f64 = 1.0;
    #[rustfmt::skip]
    let f = Matrix4::new(
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    let (a, b, c) = (dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt * dt);
    #[rustfmt::skip]
    let qm = Matrix4::new(
        a, 0.0, b, 0.0,
        0.0, a, 0.0, b,
        b, 0.0, c, 0.0,
        0.0, b, 0.0, c,
    ) * q;
    #[rustfmt::skip]
    let h = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    );
    let rm = nalgebra::Matrix2::identity() * r;

    let v0 = traj[1] - traj[0];
    let mut x = Vector4::new(traj[0].x, traj[0].y, v0.x, v0.y);
    let mut p = Matrix4::from_diagonal(&Vector4::new(r, r, 2.0 * r, 2.0 * r));

    let n = traj.len();
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    for (t, z) in traj.iter().enumerate() {
        let (xp, pp) = if t == 0 { (x, p) } else { (f * x, f * p * f.transpose() + qm) };
        let s = h * pp * h.transpose() + rm;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular innovation covariance".into()))?;
        let k = pp * h.transpose() * s_inv;
        let innov = Vector2::new(z.x, z.y) - h * xp;
        x = xp + k * innov;
        p = (Matrix4::identity() - k * h) * pp;
        predicted.push((xp, pp));
        filtered.push((x, p));
    }

    let mut xs = filtered[n - 1].0;
    let mut out = vec![TrajPoint::new(xs[0], xs[1]); n];
    for t in (0..n - 1).rev() {
        let (xf, pf) = filtered[t];
        let (xp, pp) = predicted[t + 1];
        let pp_inv = pp
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular predicted covariance".into()))?;
        let gain = pf * f.transpose() * pp_inv;
        xs = xf + gain * (xs - xp);
        out[t] = TrajPoint::new(xs[0], xs[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_is_a_fixed_point() {
        let traj: Vec<TrajPoint> = (0..13).map(|i| TrajPoint::new(0.7 * i as f64 - 1.0, -0.3 * i as f64)).collect();
        let s = kalman_smooth(&traj, 1e-8, 1e-2).unwrap();
        for (a, b) in s.iter().zip(&traj) {
            assert!(a.dist(*b) < 1e-3, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zigzag_is_damped() {
        let traj: Vec<TrajPoint> = (0..13)
            .map(|i| TrajPoint::new(i as f64, if i % 2 == 0 { 0.2 } else { -0.2 }))
            .collect();
        let s = kalman_smooth(&traj, 1e-3, 0.05).unwrap();
        let dev = |t: &[TrajPoint]| t.iter().map(|p| p.y.abs()).sum::<f64>() / t.len() as f64;
        assert!(dev(&s) < dev(&traj), "{} vs {}", dev(&s), dev(&traj));
    }

    #[test]
    fn degenerate_and_invalid() {
        let one = vec![TrajPoint::new(3.0, 4.0)];
        assert_eq!(kalman_smooth(&one, 1.0, 1.0).unwrap(), one);
        assert!(kalman_smooth(&one, 0.0, 1.0).is_err());
        assert!(kalman_smooth(&one, 1.0, -1.0).is_err());
    }
}
