use fbp_core::profile_mod::modify_profile;
use fbp_core::profiles::{Profile, Sigma};
use fbp_core::rankone::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pm() -> Profile {
    Profile::perona_malik_rational(1.0).unwrap()
}

fn rand_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    &v / v.norm()
}

/// Unit vector along the part of `x` orthogonal to `q`.
fn perp(x: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    let qh = q / q.norm();
    let y = x - &qh * x.dot(&qh);
    &y / y.norm()
}

/// `B` assembled block by block from `M₁`, `M_{s'}` and `N_{s'}`, then
/// reduced by `(a₁ − a_{s'})`.
fn assembled_det(
    u: &DVector<f64>,
    v: &DVector<f64>,
    q: &DVector<f64>,
    g: &DVector<f64>,
    s: f64,
    prof: &Profile,
) -> f64 {
    let n = u.len();
    let m1 = flux_jacobian(prof, u);
    let ms = flux_jacobian(prof, v) * s;
    let omega = flux_jacobian(prof, v) * q - g;
    let qw = q.dot(&omega);
    let mut nm = DMatrix::zeros(n, n);
    for j in 0..n {
        let coef = (s * g[j] + q.dot(&ms.column(j))) / qw;
        nm.set_column(j, &(&omega * coef));
    }
    let au = prof.sigma(u.norm()) / u.norm();
    let av = prof.sigma(v.norm()) / v.norm();
    let b = (m1 - &ms / s + nm / s) / (au - av);
    b.lu().determinant()
}

#[test]
fn det_matches_assembled_matrix() {
    let prof = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..100 {
        let n = 2 + k % 2;
        let u = rand_unit(&mut rng, n) * rng.random_range(1.5..3.5);
        let v = rand_unit(&mut rng, n) * rng.random_range(0.1..0.9);
        let q = rand_unit(&mut rng, n);
        let g = perp(&rand_unit(&mut rng, n), &q) * if k % 3 == 0 { 1.0 } else { rng.random_range(0.0..1.0) };
        let s = -rng.random_range(0.05..2.0);
        let want = assembled_det(&u, &v, &q, &g, s, &prof);
        let got = det_b(&u, &v, &q, &g, &prof).unwrap();
        assert!(
            (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
            "case {k}: {got} vs {want}"
        );
    }
}

#[test]
fn jacobian_determinant_factorises() {
    let prof = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = 2;
        let p = rand_unit(&mut rng, n) * 1.0;
        let q = rand_unit(&mut rng, n) * rng.random_range(0.5..2.0);
        let g = perp(&rand_unit(&mut rng, n), &q) * 0.2;
        let s = -rng.random_range(0.1..0.9);
        let beta = DVector::zeros(n);
        let j = system_jacobian(&p, &beta, &g, &q, s, &prof);
        let wm = &p + &q * s;
        let wp = &p + &q;
        let a1 = prof.sigma(wp.norm()) / wp.norm();
        let as_ = prof.sigma(wm.norm()) / wm.norm();
        let omega = flux_jacobian(&prof, &wm) * &q - &g;
        let t = q.norm();
        let det = det_b(&wp, &wm, &(&q / t), &(&g / t), &prof).unwrap();
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let want = sign * s.powi(n as i32 - 1) * q.dot(&omega) * (a1 - as_).powi(n as i32) * det;
        let got = j.determinant();
        assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let prof = pm();
    let p = DVector::from_vec(vec![0.7, 0.4]);
    let beta = DVector::from_vec(vec![0.3, 0.1]);
    let g = DVector::from_vec(vec![0.05, -0.02]);
    let q = DVector::from_vec(vec![1.1, 0.6]);
    let s = -0.3;
    let j = system_jacobian(&p, &beta, &g, &q, s, &prof);
    let res = |x: &DVector<f64>| {
        let (g, q, s) = (x.rows(0, 2).into_owned(), x.rows(2, 2).into_owned(), x[4]);
        let e1 = DVector::from_vec(prof.flux((&p + &q * s).as_slice())) - &beta - &g * s;
        let e2 = DVector::from_vec(prof.flux((&p + &q).as_slice())) - &beta - &g;
        DVector::from_vec(vec![e1[0], e1[1], e2[0], e2[1], g.dot(&q)])
    };
    let x = DVector::from_vec(vec![g[0], g[1], q[0], q[1], s]);
    for c in 0..5 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += 1e-6;
        xm[c] -= 1e-6;
        let col = (res(&xp) - res(&xm)) / 2e-6;
        for r in 0..5 {
            assert!((col[r] - j[(r, c)]).abs() < 1e-7, "({r},{c})");
        }
    }
}

#[test]
fn perturbed_points_have_witnesses() {
    let prof = pm();
    let w = WindowParams::new(&prof, 0.3, 0.4).unwrap();
    let mp = modify_profile(&prof, 0.3, 0.4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lo, hi) = (w.radii.sm1, w.radii.sp2);
    let mut ok = 0;
    for _ in 0..40 {
        let zeta = rand_unit(&mut rng, 2);
        let s = rng.random_range(lo + 0.02 * (hi - lo)..hi - 0.02 * (hi - lo));
        let p = &zeta * s + rand_unit(&mut rng, 2) * 1e-3;
        let beta = DVector::from_vec(mp.flux((&zeta * s).as_slice())) + rand_unit(&mut rng, 2) * 1e-3;
        if let Ok(sol) = solve_rank_one(&p, &beta, &w, None) {
            assert!(sol.residual <= 1e-10);
            let wit = &sol.witness;
            let xi = SpaceTimeMatrix::diagonal(p.as_slice(), beta.as_slice());
            assert!(wit.certifies(&xi, &w));
            // 𝒮 does not see (c, B)
            for _ in 0..3 {
                let mut x2 = xi.clone();
                x2.c = rng.random_range(-2.0..2.0);
                let a = rng.random_range(-1.0..1.0);
                x2.b = DMatrix::from_row_slice(2, 2, &[a, rng.random_range(-1.0..1.0), 0.3, -a]);
                assert!(wit.certifies(&x2, &w));
            }
            for b in [0.1, 1.0, 10.0] {
                let sv = wit.with_b(b).eta().singular_values();
                let mut sv: Vec<f64> = sv.iter().cloned().collect();
                sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert!(sv[1] <= 1e-10 * sv[0]);
            }
            let eta = wit.eta();
            let lam = wit.lambda();
            let xm = xi.shifted(wit.t_minus, &eta).to_matrix();
            let xp = xi.shifted(wit.t_plus, &eta).to_matrix();
            let back = xp * lam + xm * (1.0 - lam);
            assert!((back - xi.to_matrix()).abs().max() <= 1e-10);
            ok += 1;
        }
    }
    assert!(ok >= 39, "{ok}/40");
}

#[test]
fn orthogonal_pair_projects_within_bound() {
    let prof = pm();
    let w = WindowParams::new(&prof, 0.3, 0.4).unwrap();
    let (r1, r2) = (0.45, 2.3);
    let th = twod_angle(r1, r2, prof.sigma(r1), prof.sigma(r2)).unwrap();
    let (em, ep) = twod_directions(th);
    let pm_ = DVector::from_vec(vec![r1 * em[0], r1 * em[1]]);
    let pp = DVector::from_vec(vec![r2 * ep[0], r2 * ep[1]]);
    let cp = collinear_projection(&pm_, &pp, &w).unwrap();
    assert!((cp.zeta0[0]).abs() < 1e-14 && (cp.zeta0[1] - 1.0).abs() < 1e-14);
    assert!(cp.max_distance <= cp.bound);
    assert!(matches!(
        collinear_projection(&pp, &pm_, &w),
        Err(RankOneError::PreconditionFailed(_))
    ));
    // collinear input
    let z = DVector::from_vec(vec![0.0, 1.0]);
    let cp = collinear_projection(&(&z * 0.45), &(&z * 2.3), &w);
    assert!(cp.is_err(), "collinear pair off 𝒜 is not orthogonal");
    let a = prof.branch_inverse(0.35, fbp_core::profiles::Branch::Minus).unwrap();
    let b = prof.branch_inverse(0.35, fbp_core::profiles::Branch::Plus).unwrap();
    let cp = collinear_projection(&(&z * a), &(&z * b), &w).unwrap();
    assert!(cp.max_distance <= (w.radii.sm2 - w.radii.sm1).max(w.delta2()).max(0.1));
}

#[test]
fn h_bound_terms_reevaluated() {
    let (a, b, c, d1, d2, eta) = (0.5f64, 2.0f64, 0.4f64, 0.1f64, 0.5f64, 0.05f64);
    let g = ((b - a + d1 + d2) * eta / (2.0 * (a + b - d1) * (c - eta))).sqrt().atan();
    let cg = g.cos();
    let t1 = (2f64.sqrt() * a * (1.0 - cg).sqrt()).max(((a - d1).powi(2) + a * a - 2.0 * a * (a - d1) * cg).sqrt());
    let t2 = (2f64.sqrt() * b * (1.0 - cg).sqrt()).max(((b + d2).powi(2) + b * b - 2.0 * b * (b + d2) * cg).sqrt());
    let t3 = (2f64.sqrt() * c * (1.0 - cg).sqrt()).max(((c - eta).powi(2) + c * c - 2.0 * c * (c - eta) * cg).sqrt());
    let h = h_bound(fbp_core::profile_mod::ModCase::CaseI, a, b, c, d1, d2, eta).unwrap();
    assert!((h - t1.max(t2).max(t3)).abs() < 1e-15);
}
