use proptest::prelude::*;
use surfel_gi::fixtures::{point_light, random_scene, surfel_facing, two_kernel, RandomSceneSpec};
use surfel_gi::scene::{alpha_integral, opacity_at, LightKind};
use surfel_gi::sh::{ColorSh, Material, Vec3};
use surfel_gi::solvers::solve_dense;
use surfel_gi::transport::*;
use surfel_gi::{Light, Scene};

fn facing_pair(gap: f64) -> Scene {
    let mut scene = Scene::new(2);
    let m = Material::diffuse([0.6, 0.5, 0.4]);
    scene.surfels.push(surfel_facing(Vec3::zeros(), Vec3::z(), [0.4, 0.3], 3.0, m));
    scene
        .surfels
        .push(surfel_facing(Vec3::new(0.0, 0.0, gap), -Vec3::z(), [0.5, 0.2], 2.5, m));
    scene
}

fn blocker(z: f64, g: f64) -> surfel_gi::Surfel {
    surfel_facing(Vec3::new(0.0, 0.0, z), Vec3::z(), [0.2, 0.2], g, Material::diffuse([0.5; 3]))
}

#[test]
fn point_light_direct_matches_hand_evaluation() {
    let scene = two_kernel(2);
    let s = &scene.surfels[0];
    let light = &scene.lights[0];
    let d = light.position - s.center;
    let d2 = d.norm_squared();
    let cos = d.z / d2.sqrt();
    let alpha = 1.0 - (-0.03279 * 3.0f64.powf(3.4)).exp();
    let got = gather_direct(&scene, 0).unwrap();
    let y00 = 0.5 / std::f64::consts::PI.sqrt();
    for c in 0..3 {
        // diffuse: only the DC band survives, c00 = 4 kd, light c00 = 2√π I
        let want = alpha * 4.0 * s.material.kd[c] * y00 * (y00 * 2.0 * std::f64::consts::PI.sqrt() * light.intensity[c])
            * cos
            / d2;
        let ch = got.channel(c);
        assert!((ch[0] - want).abs() < 1e-14 * want, "{} vs {want}", ch[0]);
        assert!(ch[1..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn facing_decay_is_alpha_integral_over_distance_squared() {
    let scene = facing_pair(1.7);
    let v = decay(&scene, 1, 0).unwrap();
    let want = alpha_integral(&scene.surfels[1]) / (1.7 * 1.7);
    assert!((v - want).abs() < 1e-15 * want);
}

#[test]
fn occluded_decay_composes_with_transmittance() {
    let open = facing_pair(2.0);
    let mut blocked = open.clone();
    blocked.surfels.push(blocker(0.9, 2.0));
    blocked.surfels.push(blocker(1.3, 1.5));
    let t = transmittance(&blocked, &open.surfels[1].center, &open.surfels[0].center, &[0, 1]);
    let want = (1.0 - opacity_at(&blocked.surfels[2], 0.0, 0.0)) * (1.0 - opacity_at(&blocked.surfels[3], 0.0, 0.0));
    assert!((t - want).abs() < 1e-15);
    let v_open = decay(&open, 1, 0).unwrap();
    let v_blocked = decay(&blocked, 1, 0).unwrap();
    assert!((v_blocked - v_open * t).abs() < 1e-15 * v_open);
}

#[test]
fn reversed_decay_swaps_the_source_factor() {
    let scene = random_scene(11, &RandomSceneSpec::default());
    for i in 0..scene.surfels.len() {
        for j in 0..scene.surfels.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&scene.surfels[i], &scene.surfels[j]);
            let fwd = decay(&scene, j, i).unwrap() / (b.lambda * alpha_integral(b));
            let rev = decay(&scene, i, j).unwrap() / (a.lambda * alpha_integral(a));
            assert!((fwd - rev).abs() <= 1e-14 * fwd.max(rev).max(1e-300));
        }
    }
}

#[test]
fn gather_is_linear_in_source_radiance() {
    let scene = facing_pair(1.2);
    let b = ColorSh::from_flat(2, (0..27).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    let once = gather_from(&scene, 0, 1, &b).unwrap();
    let twice = gather_from(&scene, 0, 1, &b.scaled(2.0)).unwrap();
    for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
        assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1e-300));
    }
    assert!(gather_from(&scene, 0, 1, &ColorSh::zeros(2)).unwrap().is_zero());
}

#[test]
fn single_bounce_matches_dense_solution() {
    // an emissive black surfel lighting a reflective one: one bounce only
    let mut scene = facing_pair(1.1);
    scene.surfels[1].material = Material::black();
    scene.surfels[1].emission = Some(ColorSh::isotropic(2, [1.0, 0.8, 0.5]));
    let dense = solve_dense(&scene).unwrap();
    let bounce = gather_from(&scene, 0, 1, &scene.emission(1)).unwrap();
    for (x, y) in dense.radiosity[0].as_slice().iter().zip(bounce.as_slice()) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-12));
    }
}

#[test]
fn directional_light_has_no_distance_falloff() {
    let make = |lift: f64| {
        let mut scene = Scene::new(2);
        scene.surfels.push(surfel_facing(
            Vec3::new(0.0, 0.0, lift),
            Vec3::z(),
            [0.5, 0.5],
            3.0,
            Material::diffuse([0.5; 3]),
        ));
        scene.lights.push(Light {
            kind: LightKind::Directional,
            position: Vec3::new(0.3, 0.1, -1.0).normalize(),
            intensity: [1.0; 3],
        });
        gather_direct(&scene, 0).unwrap()
    };
    let (near, far) = (make(0.0), make(5.0));
    for (a, b) in near.as_slice().iter().zip(far.as_slice()) {
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
    }
    assert!(!near.is_zero());
}

#[test]
fn lights_behind_receivers_contribute_nothing() {
    let mut scene = Scene::new(2);
    for k in 0..3 {
        scene.surfels.push(surfel_facing(
            Vec3::new(k as f64, 0.0, 0.0),
            Vec3::z(),
            [0.3, 0.3],
            3.0,
            Material::diffuse([0.7; 3]),
        ));
    }
    scene.lights.push(point_light(Vec3::new(1.0, 0.0, -1.0), [5.0; 3]));
    for i in 0..3 {
        assert!(gather_direct(&scene, i).unwrap().is_zero());
    }
}

#[test]
fn light_shoots_sum_to_direct_gather() {
    let spec = RandomSceneSpec {
        point_lights: 2,
        ..Default::default()
    };
    let scene = random_scene(3, &spec);
    let emission: Vec<ColorSh> = (0..scene.kernel_count()).map(|i| scene.emission(i)).collect();
    let mut state = ShootState::from_emission(emission.clone());
    for j in scene.light_indices() {
        shoot(&scene, j, &emission[j], &mut state).unwrap();
    }
    for i in 0..scene.surfels.len() {
        let mut want = emission[i].clone();
        want.add_assign(&gather_direct(&scene, i).unwrap());
        for (a, b) in state.accumulated[i].as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-14));
        }
    }
}

fn unshot_energy(state: &ShootState) -> f64 {
    state.unshot.iter().map(|b| b.channel_norms().iter().sum::<f64>()).sum()
}

#[test]
fn shooting_from_the_brightest_kernel_loses_energy() {
    let scene = random_scene(5, &RandomSceneSpec::default());
    let emission: Vec<ColorSh> = (0..scene.kernel_count()).map(|i| scene.emission(i)).collect();
    let mut state = ShootState::from_emission(emission);
    for _ in 0..6 {
        let before = unshot_energy(&state);
        let brightest = (0..scene.kernel_count())
            .max_by(|a, b| {
                let na: f64 = state.unshot[*a].channel_norms().iter().sum();
                let nb: f64 = state.unshot[*b].channel_norms().iter().sum();
                na.total_cmp(&nb)
            })
            .unwrap();
        let u = state.unshot[brightest].clone();
        shoot(&scene, brightest, &u, &mut state).unwrap();
        assert!(unshot_energy(&state) < before);
    }
}

#[test]
fn cache_matches_fresh_decays_and_the_front_face_rule() {
    let scene = random_scene(8, &RandomSceneSpec {
        blocker: true,
        ..Default::default()
    });
    let cache = build_pair_cache(&scene).unwrap();
    for p in &cache.pairs {
        assert!(p.decay > 0.0);
        assert_eq!(p.decay.to_bits(), decay(&scene, p.source, p.receiver).unwrap().to_bits());
    }
    let listed = |i, j| cache.pairs.iter().any(|p| p.receiver == i && p.source == j);
    for i in 0..scene.kernel_count() {
        for j in 0..scene.kernel_count() {
            if i != j {
                assert_eq!(listed(i, j), decay(&scene, j, i).unwrap() > 0.0);
            }
        }
    }
    // back-to-back surfels never exchange energy
    let mut back = Scene::new(1);
    let m = Material::diffuse([0.5; 3]);
    back.surfels.push(surfel_facing(Vec3::zeros(), -Vec3::z(), [0.3, 0.3], 2.0, m));
    back.surfels.push(surfel_facing(Vec3::new(0.0, 0.0, 1.0), Vec3::z(), [0.3, 0.3], 2.0, m));
    assert!(build_pair_cache(&back).unwrap().is_empty());
}

proptest! {
    #[test]
    fn transmittance_is_bounded_and_monotone(zs in prop::collection::vec((0.05..0.95f64, 0.0..6.0f64), 0..5)) {
        let mut scene = facing_pair(1.0);
        let (from, to) = (scene.surfels[1].center, scene.surfels[0].center);
        let mut last = transmittance(&scene, &from, &to, &[0, 1]);
        prop_assert_eq!(last, 1.0);
        for (z, g) in zs {
            scene.surfels.push(blocker(z, g));
            let t = transmittance(&scene, &from, &to, &[0, 1]);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn gather_is_linear_in_reflectance(kd in 0.0..1.0f64) {
        let mut scene = facing_pair(1.3);
        let b = ColorSh::isotropic(2, [1.0, 2.0, 3.0]);
        scene.surfels[0].material = Material::diffuse([kd; 3]);
        let a = gather_from(&scene, 0, 1, &b).unwrap();
        scene.surfels[0].material = Material::diffuse([0.5 * kd; 3]);
        let h = gather_from(&scene, 0, 1, &b).unwrap();
        for (x, y) in a.as_slice().iter().zip(h.as_slice()) {
            prop_assert!((x - 2.0 * y).abs() <= 1e-15 * x.abs().max(1e-300));
        }
    }
}
