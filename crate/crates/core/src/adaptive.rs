//! Certainty-equivalence control law, the delay update law with projection,
//! and the perturbation kernels `M₁..M₄` that drive the `z`-channel of the
//! target system
//!
//! ```text
//! D z_t = z_x − D̃ P₁ − D D̂′ P₂,   D̂′ = θ·Proj(τ).
//! ```

use crate::error::{contract, Result};
use crate::kernels::{
    eta_into, query_cache, Coefficients, EdgeKernel, KernelBundle, KernelCache, KernelForm,
    SquareKernel, TriKernel,
};
use crate::numerics::Field;
use crate::plant::{DelayBounds, PlantState};
use crate::transforms::{self, convolution, fredholm, weighted_inner, weighted_norm_n_raw};

/// Gain, Lyapunov weight and projection bounds of the update law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLawConfig {
    pub theta: f64,
    pub b1: f64,
    pub bounds: DelayBounds,
}

impl UpdateLawConfig {
    pub fn new(theta: f64, b1: f64, bounds: DelayBounds) -> Result<Self> {
        if !(theta > 0.0) {
            return contract(format!("adaptation gain must be positive, got {theta}"));
        }
        if !(b1 > 2.0 * bounds.high()) {
            return contract(format!(
                "b1 must exceed 2*D_bar = {}, got {b1}",
                2.0 * bounds.high()
            ));
        }
        Ok(Self { theta, b1, bounds })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MFields {
    pub m1: Field,
    pub m2: SquareKernel,
    pub m3: SquareKernel,
    pub m4: SquareKernel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConstants {
    pub l_bar: f64,
    pub theta_star: f64,
    pub r: f64,
    pub rho: f64,
}

/// `U = ∫₀¹ γ(1,y,D̂) u dy + D̂ ∫₀¹ q(1−y,D̂) v dy`.
pub fn control_u(u: &Field, v: &Field, bundle: &KernelBundle) -> Result<f64> {
    u.same_grid(v)?;
    u.same_grid(&Field::zeros(bundle.gamma.grid()))?;
    let n = u.grid().len();
    Ok(control_u_raw(
        u.values(),
        v.values(),
        bundle.gamma.row(n - 1),
        bundle.q.values(),
        bundle.d_hat,
        u.grid().h(),
    ))
}

pub(crate) fn control_u_raw(
    u: &[f64],
    v: &[f64],
    gamma_1: &[f64],
    q: &[f64],
    d_hat: f64,
    h: f64,
) -> f64 {
    fredholm(gamma_1, u, h) + d_hat * convolution(q, v, u.len() - 1, h)
}

/// Control value that is consistent with itself sitting at `v(1)`: the
/// trapezoid weight of the `y = 1` node in the `q`-integral is `h/2`.
pub(crate) fn control_u_closed(
    u: &[f64],
    v: &mut [f64],
    gamma_1: &[f64],
    q: &[f64],
    d_hat: f64,
    h: f64,
) -> f64 {
    let n = u.len();
    v[n - 1] = 0.0;
    let partial = control_u_raw(u, v, gamma_1, q, d_hat, h);
    let u_ctrl = partial / (1.0 - 0.5 * h * d_hat * q[0]);
    v[n - 1] = u_ctrl;
    u_ctrl
}

/// `K(x,y) = −γ_y(x,y) + ∫_y¹ γ(x,τ) f(τ,y) dτ` for row `x_i`.
fn k_row(gamma: &[f64], gamma_y: &[f64], c: &Coefficients, h: f64, out: &mut [f64]) {
    let n = gamma.len();
    for j in 0..n {
        let integral = if j == n - 1 {
            0.0
        } else {
            let mut s = 0.5 * (gamma[j] * c.f(j, j) + gamma[n - 1] * c.f(n - 1, j));
            for m in j + 1..n - 1 {
                s += gamma[m] * c.f(m, j);
            }
            h * s
        };
        out[j] = -gamma_y[j] + integral;
    }
}

/// `∫_{y_j}^1 a(ξ) l(ξ, y_j) dξ`.
fn tail_against_l(a: &[f64], l: &TriKernel, j: usize, h: f64) -> f64 {
    let n = a.len();
    if j == n - 1 {
        return 0.0;
    }
    let mut s = 0.5 * (a[j] * l.get(j, j) + a[n - 1] * l.get(n - 1, j));
    for m in j + 1..n - 1 {
        s += a[m] * l.get(m, j);
    }
    h * s
}

/// `M₂(x,y) = γ(x,1) l(1,y) + K(x,y) + ∫_y¹ K(x,ξ) l(ξ,y) dξ`.
pub fn m2_table(
    gamma: &SquareKernel,
    gamma_y: &SquareKernel,
    l: &TriKernel,
    c: &Coefficients,
) -> SquareKernel {
    let grid = gamma.grid();
    let n = grid.len();
    let h = grid.h();
    let l_last = l.row(n - 1);
    let mut out = vec![0.0; n * n];
    let mut kr = vec![0.0; n];
    for i in 0..n {
        let g_row = gamma.row(i);
        k_row(g_row, gamma_y.row(i), c, h, &mut kr);
        let g1 = g_row[n - 1];
        for j in 0..n {
            out[i * n + j] = g1 * l_last[j] + kr[j] + tail_against_l(&kr, l, j, h);
        }
    }
    SquareKernel::from_values(grid, out).expect("sized by construction")
}

/// `Q(s) = q(s) + D̂ q_D̂(s)`, or the ungrouped `q + q_D̂` in printed form.
fn grouped_q(q: &EdgeKernel, q_d: &EdgeKernel, d_hat: f64, form: KernelForm) -> Vec<f64> {
    let factor = match form {
        KernelForm::Derived => d_hat,
        KernelForm::Printed => 1.0,
    };
    q.values()
        .iter()
        .zip(q_d.values())
        .map(|(a, b)| a + factor * b)
        .collect()
}

/// `M₁..M₄` at the bundle's delay.
pub fn eval_m(
    bundle: &KernelBundle,
    l: &TriKernel,
    eta: &SquareKernel,
    p: &EdgeKernel,
    c: &Coefficients,
    form: KernelForm,
) -> MFields {
    let grid = bundle.gamma.grid();
    let n = grid.len();
    let h = grid.h();
    let d = bundle.d_hat;
    let m1 = Field::new(grid, bundle.q.values().to_vec()).expect("finite kernel");
    let m2 = m2_table(&bundle.gamma, &bundle.gamma_y, l, c);

    // the convolution ∫_y^x Q(x−ξ) p(ξ−y) dξ depends on x − y only and always
    // uses the grouped Q; the printed form differs only in the leading term
    let q_lead = grouped_q(&bundle.q, &bundle.q_d, d, form);
    let q_conv = grouped_q(&bundle.q, &bundle.q_d, d, KernelForm::Derived);
    let conv: Vec<f64> = (0..n)
        .map(|s| convolution(&q_conv, p.values(), s, h))
        .collect();
    let mut m3 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            m3[i * n + j] = q_lead[i - j] + d * conv[i - j];
        }
    }

    let mut m4 = vec![0.0; n * n];
    let mut eta_col = vec![0.0; n];
    for j in 0..n {
        for (m, e) in eta_col.iter_mut().enumerate() {
            *e = eta.get(m, j);
        }
        for i in 0..n {
            let gd = bundle.gamma_d.row(i);
            m4[i * n + j] =
                gd[j] + tail_against_l(gd, l, j, h) + convolution(&q_conv, &eta_col, i, h);
        }
    }
    MFields {
        m1,
        m2,
        m3: SquareKernel::from_values(grid, m3).expect("sized"),
        m4: SquareKernel::from_values(grid, m4).expect("sized"),
    }
}

/// `P₁ = z(0) M₁ + ∫ w M₂ dy`, `P₂ = ∫ z M₃ dy + ∫ w M₄ dy`.
pub fn eval_p(w: &Field, z: &Field, m: &MFields) -> Result<(Field, Field)> {
    w.same_grid(z)?;
    w.same_grid(&m.m1)?;
    let grid = w.grid();
    let n = grid.len();
    let h = grid.h();
    let (wv, zv) = (w.values(), z.values());
    let mut p1 = vec![0.0; n];
    p1_into(wv, zv, m.m1.values(), m.m2.values(), h, &mut p1);
    let p2 = (0..n)
        .map(|i| fredholm(m.m3.row(i), zv, h) + fredholm(m.m4.row(i), wv, h))
        .collect();
    Ok((Field::new(grid, p1)?, Field::new(grid, p2)?))
}

pub(crate) fn p1_into(w: &[f64], z: &[f64], m1: &[f64], m2: &[f64], h: f64, out: &mut [f64]) {
    let n = w.len();
    for i in 0..n {
        out[i] = z[0] * m1[i] + fredholm(&m2[i * n..(i + 1) * n], w, h);
    }
}

/// `P₁` and `P₂` written in the plant variables; an independent route to
/// the same quantities as [`eval_p`].
///
/// ```text
/// P₁ = γ(x,1) v(0) + ∫₀¹ u(y) [−γ_y(x,y) + ∫_y¹ γ(x,τ) f(τ,y) dτ] dy
/// P₂ = ∫₀¹ γ_D̂(x,y) u(y) dy + ∫₀ˣ (q + D̂ q_D̂)(x−y) v(y) dy
/// ```
pub fn p_from_plant(
    u: &Field,
    v: &Field,
    bundle: &KernelBundle,
    c: &Coefficients,
) -> Result<(Field, Field)> {
    u.same_grid(v)?;
    let grid = u.grid();
    let n = grid.len();
    let h = grid.h();
    let (uv, vv) = (u.values(), v.values());
    let mut kr = vec![0.0; n];
    let mut p1 = vec![0.0; n];
    for i in 0..n {
        k_row(bundle.gamma.row(i), bundle.gamma_y.row(i), c, h, &mut kr);
        p1[i] = bundle.q.get(i) * vv[0] + fredholm(&kr, uv, h);
    }
    let q_grouped = grouped_q(&bundle.q, &bundle.q_d, bundle.d_hat, KernelForm::Derived);
    let p2 = (0..n)
        .map(|i| fredholm(bundle.gamma_d.row(i), uv, h) + convolution(&q_grouped, vv, i, h))
        .collect();
    Ok((Field::new(grid, p1)?, Field::new(grid, p2)?))
}

/// `τ = −b₁ ∫(1+x) z P₁ dx / N`, with `τ = 0` at `N = 0`.
pub fn tau(w: &Field, z: &Field, p1: &Field, b1: f64) -> f64 {
    tau_raw(w.values(), z.values(), p1.values(), w.grid().h(), b1)
}

pub(crate) fn tau_raw(w: &[f64], z: &[f64], p1: &[f64], h: f64, b1: f64) -> f64 {
    let n_val = weighted_norm_n_raw(w, z, h, b1);
    if n_val <= 0.0 {
        return 0.0;
    }
    -b1 * weighted_inner(z, p1, h) / n_val
}

/// Projection onto `[D̲, D̄]`: adaptation freezes at a bound when `τ`
/// points outward.
pub fn project(d_hat: f64, tau: f64, bounds: DelayBounds) -> Result<f64> {
    if !bounds.contains(d_hat) {
        return contract(format!(
            "delay estimate {d_hat} outside [{}, {}]",
            bounds.low(),
            bounds.high()
        ));
    }
    Ok(
        if (d_hat == bounds.low() && tau < 0.0) || (d_hat == bounds.high() && tau > 0.0) {
            0.0
        } else {
            tau
        },
    )
}

/// One forward-Euler step of `D̂′ = θ·Proj(τ)`, clamped to the bounds.
pub fn euler_update(d_hat: f64, tau: f64, law: &UpdateLawConfig, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return contract(format!("time step must be positive, got {dt}"));
    }
    let rate = law.theta * project(d_hat, tau, law.bounds)?;
    Ok((d_hat + dt * rate).clamp(law.bounds.low(), law.bounds.high()))
}

/// Advances the estimate carried by `state` using `τ` evaluated from the
/// state through the cached kernels.
pub fn update_d_hat(
    state: &PlantState,
    cache: &KernelCache,
    law: &UpdateLawConfig,
    dt: f64,
) -> Result<f64> {
    let bundle = query_cache(cache, state.d_hat)?;
    let target = transforms::forward_transform(&state.u, &state.v, &bundle, cache.k())?;
    let grid = cache.grid();
    let n = grid.len();
    let mut m2 = vec![0.0; n * n];
    cache.lerp_table_into(state.d_hat, |node| node.m2.values(), &mut m2)?;
    let mut p1 = vec![0.0; n];
    p1_into(
        target.w.values(),
        target.z.values(),
        bundle.q.values(),
        &m2,
        grid.h(),
        &mut p1,
    );
    let t = tau_raw(target.w.values(), target.z.values(), &p1, grid.h(), law.b1);
    euler_update(state.d_hat, t, law, dt)
}

/// `θ* = min{D̲, b₁ − 2D̄}·min{1, b₁} / (2 b₁² L̄²)`.
pub fn theta_star(b1: f64, bounds: DelayBounds, l_bar: f64) -> Result<f64> {
    if !(b1 > 2.0 * bounds.high()) {
        return contract(format!(
            "b1 must exceed 2*D_bar = {}, got {b1}",
            2.0 * bounds.high()
        ));
    }
    if !(l_bar > 0.0) {
        return contract(format!("perturbation bound must be positive, got {l_bar}"));
    }
    Ok(bounds.low().min(b1 - 2.0 * bounds.high()) * b1.min(1.0) / (2.0 * b1 * b1 * l_bar * l_bar))
}

/// Sampled sup norms `[M̄₁, M̄₂, M̄₃, M̄₄]`.
pub fn m_bars(m: &MFields) -> [f64; 4] {
    [
        m.m1.sup_norm(),
        m.m2.sup_norm(),
        m.m3.sup_norm(),
        m.m4.sup_norm(),
    ]
}

/// `L̄ = max{M̄₁ + M̄₂, 2M̄₃ + M̄₄}`.
pub fn l_bar_from_bars(bars: [f64; 4]) -> f64 {
    (bars[0] + bars[1]).max(2.0 * bars[2] + bars[3])
}

pub fn estimate_lbar(m: &MFields) -> f64 {
    l_bar_from_bars(m_bars(m))
}

/// `L̄` maximized over every cached delay node.
pub fn estimate_lbar_over_cache(cache: &KernelCache) -> Result<f64> {
    let grid = cache.grid();
    let n = grid.len();
    let psi = cache.l().last_row();
    let mut bars = [0.0_f64; 4];
    let mut eta = vec![0.0; n * n];
    for node in cache.nodes() {
        let bundle = query_cache(cache, node.delay)?;
        eta_into(psi.values(), node.delay, n, grid.h(), &mut eta);
        let eta_k = SquareKernel::from_values(grid, eta.clone())?;
        let p = EdgeKernel::from_values(grid, eta_k.column(n - 1))?;
        let m = eval_m(
            &bundle,
            cache.l(),
            &eta_k,
            &p,
            cache.coefficients(),
            cache.options().form,
        );
        for (b, v) in bars.iter_mut().zip(m_bars(&m)) {
            *b = b.max(v);
        }
    }
    Ok(l_bar_from_bars(bars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Grid1D;

    fn bounds() -> DelayBounds {
        DelayBounds::new(0.1, 4.0).unwrap()
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project(0.1, -0.5, bounds()).unwrap(), 0.0);
        assert_eq!(project(4.0, 0.2, bounds()).unwrap(), 0.0);
        assert_eq!(project(2.0, 0.3, bounds()).unwrap(), 0.3);
        assert_eq!(project(0.1, 0.5, bounds()).unwrap(), 0.5);
        assert_eq!(project(4.0, -0.2, bounds()).unwrap(), -0.2);
        assert!(project(4.5, 0.0, bounds()).is_err());
    }

    #[test]
    fn euler_examples() {
        let law = UpdateLawConfig::new(0.021, 9.0, bounds()).unwrap();
        assert_eq!(euler_update(2.0, 0.0, &law, 0.01).unwrap(), 2.0);
        assert!((euler_update(2.0, -2.0, &law, 0.01).unwrap() - 1.99958).abs() < 1e-15);
        assert_eq!(euler_update(0.1, -3.0, &law, 0.01).unwrap(), 0.1);
        // overshoot past a bound is clamped
        assert_eq!(euler_update(3.9999, 1e6, &law, 0.01).unwrap(), 4.0);
    }

    #[test]
    fn theta_star_examples() {
        let t1 = theta_star(9.0, bounds(), 1.0).unwrap();
        assert!((t1 - 0.1 / 162.0).abs() < 1e-18);
        assert!((t1 - 6.1728e-4).abs() < 1e-8);
        let t2 = theta_star(9.0, bounds(), 2.0).unwrap();
        assert!((t2 - t1 / 4.0).abs() < 1e-18);
        assert!(theta_star(8.0, bounds(), 1.0).is_err());
        assert!(UpdateLawConfig::new(0.021, 7.0, bounds()).is_err());
        assert!(UpdateLawConfig::new(0.0, 9.0, bounds()).is_err());
    }

    #[test]
    fn lbar_formula() {
        assert_eq!(l_bar_from_bars([1.0, 2.0, 0.5, 1.0]), 3.0);
        assert_eq!(l_bar_from_bars([0.0; 4]), 0.0);
    }

    #[test]
    fn tau_examples() {
        let g = Grid1D::new(51).unwrap();
        let zero = Field::zeros(g);
        let one = Field::constant(g, 1.0);
        assert_eq!(tau(&one, &zero, &one, 9.0), 0.0);
        assert_eq!(tau(&zero, &zero, &zero, 9.0), 0.0);
        assert!((tau(&zero, &one, &one, 9.0) + 2.0).abs() < 1e-13);
    }

    #[test]
    fn control_with_constant_kernels() {
        let g = Grid1D::new(21).unwrap();
        let n = 21;
        let gamma = SquareKernel::from_values(g, vec![0.4; n * n]).unwrap();
        let q = EdgeKernel::from_values(g, vec![0.25; n]).unwrap();
        let bundle = KernelBundle {
            d_hat: 1.6,
            gamma_y: gamma.d_dy(),
            gamma_d: gamma.clone(),
            gamma,
            q_d: q.clone(),
            q,
        };
        let one = Field::constant(g, 1.0);
        let u_ctrl = control_u(&one, &one, &bundle).unwrap();
        assert!((u_ctrl - (0.4 + 1.6 * 0.25)).abs() < 1e-14);
        assert_eq!(
            control_u(&Field::zeros(g), &Field::zeros(g), &bundle).unwrap(),
            0.0
        );
    }

    #[test]
    fn p_from_simple_m() {
        let g = Grid1D::new(11).unwrap();
        let m = MFields {
            m1: Field::constant(g, 1.0),
            m2: SquareKernel::zeros(g),
            m3: SquareKernel::zeros(g),
            m4: SquareKernel::zeros(g),
        };
        let mut z = vec![0.0; 11];
        z[0] = 2.0;
        let z = Field::new(g, z).unwrap();
        let w = Field::from_fn(g, |x| x);
        let (p1, p2) = eval_p(&w, &z, &m).unwrap();
        assert!(p1.values().iter().all(|&v| v == 2.0));
        assert!(p2.values().iter().all(|&v| v == 0.0));
    }
}
