use fbp_core::convex_integration::*;
use fbp_core::div_inverse::BoxSpec;
use fbp_core::profile_mod::modify_profile;
use fbp_core::profiles::{Profile, Sigma};
use fbp_core::rankone::{solve_rank_one, RankOneWitness, WindowParams};
use nalgebra::DVector;

fn witness(n: usize) -> RankOneWitness {
    let prof = Profile::perona_malik_rational(1.0).unwrap();
    let w = WindowParams::new(&prof, 0.3, 0.4).unwrap();
    let mp = modify_profile(&prof, 0.3, 0.4).unwrap();
    let mut p = DVector::zeros(n);
    p[0] = 0.9;
    if n > 1 {
        p[1] = 0.4;
    }
    let beta = DVector::from_vec(mp.flux(p.as_slice()));
    solve_rank_one(&p, &beta, &w, None).unwrap().witness
}

fn unit_box(n: usize) -> BoxSpec {
    let mut b = BoxSpec::new(vec![(0.0, 1.0); n]);
    b.time = Some((0.0, 1.0));
    b
}

#[test]
fn patch_properties_at_eps_005() {
    for n in [1, 2] {
        let wit = witness(n).with_b(1.0);
        let (l1, l2) = (-wit.t_minus, wit.t_plus);
        let opts = PatchOptions {
            samples: if n == 1 { 200_000 } else { 50_000 },
            nodes: if n == 1 { 257 } else { 33 },
            ..Default::default()
        };
        let patch = oscillation_on_box(&unit_box(n), &wit, l1, l2, 0.05, opts).unwrap();
        let pr = patch.properties;
        println!("n={n}: {pr:?} period {}", patch.tile.period);
        assert!(pr.div_psi <= 1e-10);
        assert!(pr.exceptional <= 0.05);
        assert!(pr.segment_dist <= 0.05);
        assert!(pr.sup_omega <= 0.05);
        assert!(pr.slice_mean <= 1e-12);
    }
}
