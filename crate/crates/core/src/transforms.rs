//! Direct and inverse backstepping transformations between the plant
//! variables `(u, v)` and the target variables `(w, z)`:
//!
//! ```text
//! w = u − ∫₀ˣ k(x,y) u(y) dy
//! z = v − ∫₀¹ γ(x,y,D̂) u(y) dy − D̂ ∫₀ˣ q(x−y,D̂) v(y) dy
//! u = w + ∫₀ˣ l(x,y) w(y) dy
//! v = z + ∫₀¹ η(x,y,D̂) w(y) dy + D̂ ∫₀ˣ p(x−y,D̂) z(y) dy
//! ```

use crate::error::Result;
use crate::kernels::{EdgeKernel, KernelBundle, SquareKernel, TriKernel};
use crate::numerics::{trapz, Field, Grid1D};

#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    pub w: Field,
    pub z: Field,
    pub t: f64,
}

fn check_grids(a: &Field, b: &Field, kernel: Grid1D) -> Result<()> {
    a.same_grid(b)?;
    a.same_grid(&Field::zeros(kernel))
}

/// `(u, v) ↦ (w, z)` at the bundle's delay. The returned `t` is 0; callers
/// that transform a trace snapshot stamp it themselves.
pub fn forward_transform(
    u: &Field,
    v: &Field,
    bundle: &KernelBundle,
    k: &TriKernel,
) -> Result<TargetState> {
    check_grids(u, v, k.grid())?;
    check_grids(u, v, bundle.gamma.grid())?;
    let grid = u.grid();
    let n = grid.len();
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    volterra_into(u.values(), k.values(), grid.h(), -1.0, &mut w);
    z_into(
        u.values(),
        v.values(),
        bundle.gamma.values(),
        bundle.q.values(),
        bundle.d_hat,
        grid.h(),
        &mut z,
    );
    Ok(TargetState {
        w: Field::new(grid, w)?,
        z: Field::new(grid, z)?,
        t: 0.0,
    })
}

/// `(w, z) ↦ (u, v)`. `u` is rebuilt first; `v` only needs `w` and `z`.
pub fn inverse_transform(
    w: &Field,
    z: &Field,
    l: &TriKernel,
    eta: &SquareKernel,
    p: &EdgeKernel,
    d_hat: f64,
) -> Result<(Field, Field)> {
    check_grids(w, z, l.grid())?;
    check_grids(w, z, eta.grid())?;
    let grid = w.grid();
    let n = grid.len();
    let h = grid.h();
    let mut u = vec![0.0; n];
    volterra_into(w.values(), l.values(), h, 1.0, &mut u);
    let mut v = vec![0.0; n];
    let (wv, zv) = (w.values(), z.values());
    for (i, vi) in v.iter_mut().enumerate() {
        let row = eta.row(i);
        let fred = fredholm(row, wv, h);
        *vi = zv[i] + fred + d_hat * convolution(p.values(), zv, i, h);
    }
    Ok((Field::new(grid, u)?, Field::new(grid, v)?))
}

/// `N = ½∫(1+x)w² + (b₁/2)∫(1+x)z²`.
pub fn weighted_norm_n(w: &Field, z: &Field, b1: f64) -> f64 {
    weighted_norm_n_raw(w.values(), z.values(), w.grid().h(), b1)
}

pub fn weighted_norm_n_raw(w: &[f64], z: &[f64], h: f64, b1: f64) -> f64 {
    let n = w.len();
    let mut acc_w = 0.0;
    let mut acc_z = 0.0;
    for i in 0..n {
        let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * (1.0 + i as f64 * h);
        acc_w += wt * w[i] * w[i];
        acc_z += wt * z[i] * z[i];
    }
    0.5 * h * acc_w + 0.5 * b1 * h * acc_z
}

/// `out_i = f_i + sign·∫₀^{x_i} K(x_i, y) f(y) dy` for a row-major
/// triangle table.
pub(crate) fn volterra_into(f: &[f64], table: &[f64], h: f64, sign: f64, out: &mut [f64]) {
    let n = f.len();
    for i in 0..n {
        let row = &table[i * n..(i + 1) * n];
        let integral = if i == 0 {
            0.0
        } else {
            let mut s = 0.5 * (row[0] * f[0] + row[i] * f[i]);
            for m in 1..i {
                s += row[m] * f[m];
            }
            h * s
        };
        out[i] = f[i] + sign * integral;
    }
}

#[inline]
pub(crate) fn fredholm(row: &[f64], f: &[f64], h: f64) -> f64 {
    let n = f.len();
    let mut s = 0.5 * (row[0] * f[0] + row[n - 1] * f[n - 1]);
    for m in 1..n - 1 {
        s += row[m] * f[m];
    }
    h * s
}

/// `∫₀^{x_i} kernel(x_i − y) f(y) dy`.
#[inline]
pub(crate) fn convolution(kernel: &[f64], f: &[f64], i: usize, h: f64) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let mut s = 0.5 * (kernel[i] * f[0] + kernel[0] * f[i]);
    for m in 1..i {
        s += kernel[i - m] * f[m];
    }
    h * s
}

pub(crate) fn z_into(
    u: &[f64],
    v: &[f64],
    gamma: &[f64],
    q: &[f64],
    d_hat: f64,
    h: f64,
    out: &mut [f64],
) {
    let n = u.len();
    for i in 0..n {
        let row = &gamma[i * n..(i + 1) * n];
        out[i] = v[i] - fredholm(row, u, h) - d_hat * convolution(q, v, i, h);
    }
}

/// `∫₀¹ (1+x) a(x) b(x) dx`.
pub(crate) fn weighted_inner(a: &[f64], b: &[f64], h: f64) -> f64 {
    let prod: Vec<f64> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| (1.0 + i as f64 * h) * x * y)
        .collect();
    trapz(&prod, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid1D {
        Grid1D::new(n).unwrap()
    }

    fn zero_bundle(g: Grid1D, d: f64) -> KernelBundle {
        let sq = SquareKernel::zeros(g);
        let edge = EdgeKernel::from_values(g, vec![0.0; g.len()]).unwrap();
        KernelBundle {
            d_hat: d,
            gamma: sq.clone(),
            gamma_y: sq.clone(),
            gamma_d: sq,
            q: edge.clone(),
            q_d: edge,
        }
    }

    #[test]
    fn zero_kernels_are_identity() {
        let g = grid(31);
        let u = Field::from_fn(g, |x| (3.0 * x).sin());
        let v = Field::from_fn(g, |x| x * x - 0.2);
        let t = forward_transform(&u, &v, &zero_bundle(g, 1.5), &TriKernel::zeros(g)).unwrap();
        assert_eq!(t.w, u);
        assert_eq!(t.z, v);
        let (eta, p) = crate::kernels::solve_eta(&Field::zeros(g), 1.5, g).unwrap();
        let (u2, v2) = inverse_transform(&t.w, &t.z, &TriKernel::zeros(g), &eta, &p, 1.5).unwrap();
        assert_eq!(u2, u);
        assert_eq!(v2, v);
    }

    #[test]
    fn constant_kernel_examples() {
        let g = grid(41);
        let c = 0.3;
        let k = TriKernel::from_fn(g, |_, _| c);
        let t = forward_transform(
            &Field::constant(g, 1.0),
            &Field::zeros(g),
            &zero_bundle(g, 1.0),
            &k,
        )
        .unwrap();
        for i in 0..41 {
            assert!((t.w.at(i) - (1.0 - c * g.node(i))).abs() < 1e-14);
        }
        let (eta, p) = crate::kernels::solve_eta(&Field::zeros(g), 1.0, g).unwrap();
        let (u, _) = inverse_transform(
            &Field::constant(g, 1.0),
            &Field::zeros(g),
            &k,
            &eta,
            &p,
            1.0,
        )
        .unwrap();
        for i in 0..41 {
            assert!((u.at(i) - (1.0 + c * g.node(i))).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let g = grid(21);
        let zero = Field::zeros(g);
        let one = Field::constant(g, 1.0);
        assert_eq!(weighted_norm_n(&zero, &zero, 9.0), 0.0);
        assert!((weighted_norm_n(&one, &zero, 9.0) - 0.75).abs() < 1e-14);
        assert!((weighted_norm_n(&zero, &one, 9.0) - 6.75).abs() < 1e-13);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let u = Field::zeros(grid(11));
        let v = Field::zeros(grid(12));
        assert!(forward_transform(
            &u,
            &v,
            &zero_bundle(grid(11), 1.0),
            &TriKernel::zeros(grid(11))
        )
        .is_err());
    }
}
