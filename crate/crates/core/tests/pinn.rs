use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rootzone_core::field::{Grid3D, Observation, ObservationSet, TimeGrid};
use rootzone_core::net::{init_network, InputScaling, JetEvaluation, NetworkParams, OutputScaling};
use rootzone_core::pinn::{
    boundary_loss, data_loss, re_loss, re_residual, residual_of_jet, total_loss, train, CollocationSet, LossWeights,
    PcdlError, Problem, TrainConfig,
};
use rootzone_core::richards::{BoundarySpec, Face, Scenario};
use rootzone_core::VanGenuchten;

fn grid() -> Grid3D {
    Grid3D::new(100.0, 100.0, 50.0, 4, 4, 3).unwrap()
}

fn times() -> TimeGrid {
    TimeGrid::new(0.0, 900.0, 4).unwrap()
}

fn problem(bc: BoundarySpec) -> Problem {
    Problem { grid: grid(), times: times(), soil: VanGenuchten::celia_loam(), bc }
}

fn domain() -> InputScaling {
    InputScaling::new([0.0; 4], [100.0, 100.0, 50.0, 2700.0]).unwrap()
}

fn constant_net(c: f64) -> NetworkParams {
    NetworkParams::from_parts(&[4, 1], InputScaling::identity(), OutputScaling::identity(), vec![0.0, 0.0, 0.0, 0.0, c])
        .unwrap()
}

fn random_net(rng: &mut ChaCha8Rng) -> NetworkParams {
    let mut net = init_network(rng.gen(), &[4, 6, 5, 1], domain(), OutputScaling::spanning(-250.0, -30.0).unwrap()).unwrap();
    for p in net.params_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    net
}

fn psi(net: &NetworkParams, p: [f64; 4]) -> f64 {
    net.forward_jet(p).unwrap().0.value
}

/// Residual from plain network values: nested central differences for every
/// derivative, and θ′, K′ by differencing θ and K themselves.
fn nested_fd_residual(net: &NetworkParams, soil: &VanGenuchten, p: [f64; 4]) -> f64 {
    let h = [0.05, 0.05, 0.025, 1.5];
    let shift = |p: [f64; 4], k: usize, s: f64| {
        let mut q = p;
        q[k] += s;
        q
    };
    let d1 = |p: [f64; 4], k: usize| (psi(net, shift(p, k, h[k])) - psi(net, shift(p, k, -h[k]))) / (2.0 * h[k]);
    let d2 = |k: usize| (d1(shift(p, k, h[k]), k) - d1(shift(p, k, -h[k]), k)) / (2.0 * h[k]);
    let v = psi(net, p);
    let g: Vec<f64> = (0..4).map(|k| d1(p, k)).collect();
    let hp = 1e-4 * v.abs();
    let cap = (soil.theta(v + hp) - soil.theta(v - hp)) / (2.0 * hp);
    let kk = soil.eval(v).k;
    let dk = (soil.eval(v + hp).k - soil.eval(v - hp).k) / (2.0 * hp);
    cap * g[3] - dk * (g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + g[2]) - kk * (d2(0) + d2(1) + d2(2))
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.gen_range(5.0..95.0), rng.gen_range(5.0..95.0), rng.gen_range(5.0..45.0), rng.gen_range(10.0..2690.0)]
}

#[test]
fn residual_matches_nested_finite_differences() {
    let soil = VanGenuchten::celia_loam();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let net = random_net(&mut rng);
        let p = random_point(&mut rng);
        let r = re_residual(&net, &soil, p).unwrap();
        let fd = nested_fd_residual(&net, &soil, p);
        // floor: size of the largest single term, so cancellation does not blow up the ratio
        let jet = net.forward_jet(p).unwrap().0;
        let c = soil.eval(jet.value);
        let scale = (c.capacity * jet.dt).abs().max((c.k * (jet.dxx + jet.dyy + jet.dzz)).abs()).max(c.dk * jet.dz.abs());
        let err = (r - fd).abs() / fd.abs().max(1e-2 * scale);
        assert!(err <= 1e-4, "case {case}: {r} vs {fd} (err {err})");
    }
}

#[test]
fn constant_and_hydrostatic_fields_have_zero_residual() {
    let soil = VanGenuchten::celia_loam();
    assert_eq!(re_residual(&constant_net(-80.0), &soil, [10.0, 20.0, 30.0, 40.0]).unwrap(), 0.0);
    for z in [0.0, 12.5, 50.0] {
        let jet = JetEvaluation { value: -60.0 - z, dt: 0.0, dx: 0.0, dy: 0.0, dz: -1.0, dxx: 0.0, dyy: 0.0, dzz: 0.0 };
        assert!(residual_of_jet(&jet, &soil).abs() <= 1e-12);
    }
}

#[test]
fn re_loss_is_the_mean_squared_residual() {
    let soil = VanGenuchten::celia_loam();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = random_net(&mut rng);
    let pts: Vec<_> = (0..100).map(|_| random_point(&mut rng)).collect();
    let brute: f64 = pts.iter().map(|&p| nested_fd_residual(&net, &soil, p).powi(2)).sum::<f64>() / 100.0;
    let l = re_loss(&net, &soil, &pts, 1.0).unwrap();
    assert!((l - brute).abs() <= 1e-4 * brute, "{l} vs {brute}");
    assert_eq!(re_loss(&constant_net(-50.0), &soil, &pts, 1.0).unwrap(), 0.0);
    let two = re_loss(&net, &soil, &pts[..2], 1.0).unwrap();
    let r1 = re_residual(&net, &soil, pts[0]).unwrap();
    let r2 = re_residual(&net, &soil, pts[1]).unwrap();
    assert!((two - (r1 * r1 + r2 * r2) / 2.0).abs() <= 1e-15 * two.max(1e-300));
}

fn obs(records: &[((usize, usize, usize), usize, f64)]) -> ObservationSet {
    ObservationSet {
        records: records.iter().map(|&(node, time, theta_m)| Observation { node, time, theta_m }).collect(),
        sigma: 0.0,
        seed: 0,
    }
}

#[test]
fn data_loss_hand_cases() {
    let p = problem(BoundarySpec::evaporation(-1.8));
    let soil = p.soil;
    let c = -100.0;
    let th = soil.theta(c);
    // exact reproduction
    assert_eq!(data_loss(&constant_net(c), &p, &obs(&[((0, 0, 0), 0, th), ((3, 2, 1), 3, th)])).unwrap(), 0.0);
    // one observation off by δ
    let d = 0.013;
    let l = data_loss(&constant_net(c), &p, &obs(&[((1, 1, 1), 2, th + d)])).unwrap();
    assert!((l - d * d).abs() < 1e-15);
    // θ(-100) of the default loam is 0.2569...; three readings around it
    let hand = [0.25, 0.30, 0.21];
    let l = data_loss(&constant_net(c), &p, &obs(&[((0, 1, 2), 0, hand[0]), ((2, 2, 0), 1, hand[1]), ((3, 0, 1), 3, hand[2])]))
        .unwrap();
    let expect = hand.iter().map(|t| (t - th).powi(2)).sum::<f64>() / 3.0;
    assert!((l - expect).abs() < 1e-15, "{l} vs {expect}");
    assert!(matches!(data_loss(&constant_net(c), &p, &obs(&[])), Err(PcdlError::Domain(_))));
}

fn face_points(faces: &[Face], per: usize, g: &Grid3D) -> Vec<([f64; 4], Face)> {
    let mut out = vec![];
    for &f in faces {
        for i in 0..per {
            let s = (i as f64 + 0.5) / per as f64;
            let mut p = [s * g.length, (1.0 - s) * g.width, s * g.depth, 100.0 * s];
            p[f.axis()] = if f.outward() > 0.0 { [g.length, g.width, g.depth][f.axis()] } else { 0.0 };
            out.push((p, f));
        }
    }
    out
}

#[test]
fn boundary_loss_hand_cases() {
    let g = grid();
    let bc = BoundarySpec::infiltration(-100.0, -100.0);
    let colloc = |faces: &[Face]| CollocationSet {
        interior: vec![],
        boundary: face_points(faces, 7, &g),
        scenario: Some(Scenario::Infiltration),
        seed: 0,
    };
    assert_eq!(boundary_loss(&constant_net(-100.0), &colloc(&Face::ALL), &g, &bc, 1.0).unwrap(), 0.0);
    let l = boundary_loss(&constant_net(-95.0), &colloc(&[Face::Bottom, Face::Top]), &g, &bc, 1.0).unwrap();
    assert!((l - 25.0).abs() < 1e-12, "{l}");

    // hydrostatic field under a closed domain satisfies the no-flux faces exactly
    let hydro = NetworkParams::from_parts(&[4, 1], InputScaling::identity(), OutputScaling::identity(), vec![0.0, 0.0, -1.0, 0.0, -40.0])
        .unwrap();
    let closed = CollocationSet { interior: vec![], boundary: face_points(&Face::ALL, 5, &g), scenario: Some(Scenario::Closed), seed: 0 };
    assert!(boundary_loss(&hydro, &closed, &g, &BoundarySpec::closed(), 1.0).unwrap() < 1e-24);

    // a tag that does not match the scenario, or a point off its face, is rejected
    let err = boundary_loss(&constant_net(-95.0), &colloc(&[Face::Top]), &g, &BoundarySpec::evaporation(-1.8), 1.0);
    assert!(matches!(err, Err(PcdlError::Config(_))));
    let mut bad = colloc(&[Face::Top]);
    bad.boundary[0].0[2] = 10.0;
    assert!(matches!(boundary_loss(&constant_net(-95.0), &bad, &g, &bc, 1.0), Err(PcdlError::Config(_))));
}

#[test]
fn total_loss_decomposes_under_unit_weights() {
    let p = problem(BoundarySpec::evaporation(-1.8));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = random_net(&mut rng);
    let colloc = CollocationSet::sample(&p.grid, &p.times, Scenario::Evaporation, 50, 10, 4);
    let o = obs(&[((0, 0, 0), 0, 0.3), ((1, 2, 2), 3, 0.25)]);
    let cfg = TrainConfig::default();
    let b = total_loss(&net, &p, &o, &colloc, &cfg).unwrap();
    assert!(b.data > 0.0 && b.residual > 0.0 && b.boundary > 0.0);
    assert_eq!(b.physics, b.residual + b.boundary);
    assert_eq!(b.total, b.data + b.physics);
    let ablated = TrainConfig { weights: LossWeights { data: 1.0, residual: 0.0, boundary: 0.0 }, ..cfg.clone() };
    assert_eq!(total_loss(&net, &p, &o, &colloc, &ablated).unwrap().total, b.data);
}

#[test]
fn collocation_points_respect_the_domain() {
    let p = problem(BoundarySpec::evaporation(-1.8));
    let c = CollocationSet::sample(&p.grid, &p.times, Scenario::Evaporation, 500, 40, 8);
    assert_eq!(c.interior.len(), 500);
    assert_eq!(c.boundary.len(), 240);
    for q in &c.interior {
        assert!(q[0] > 0.0 && q[0] < 100.0 && q[1] > 0.0 && q[1] < 100.0 && q[2] > 0.0 && q[2] < 50.0);
        assert!(q[3] >= 0.0 && q[3] <= 2700.0);
    }
    assert_eq!(c, CollocationSet::sample(&p.grid, &p.times, Scenario::Evaporation, 500, 40, 8));
}

fn quick_config(physics: bool) -> TrainConfig {
    let w = if physics { 1.0 } else { 0.0 };
    TrainConfig {
        steps: 1500,
        hidden_layers: 2,
        width: 8,
        collocation_points: 200,
        boundary_points_per_face: 20,
        collocation_batch: 32,
        boundary_batch: 32,
        log_interval: 100,
        head_scale: 100.0,
        weights: LossWeights { data: 1.0, residual: w, boundary: w },
        ..TrainConfig::default()
    }
}

/// Gaussian-noised constant data: no fit can beat the noise variance by much,
/// and a working optimiser gets close to it.
#[test]
fn noisy_constant_data_trains_down_to_the_noise_floor() {
    let p = problem(BoundarySpec::evaporation(-1.8));
    let theta0 = p.soil.theta(-90.0);
    let sigma = 0.005;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let mut records = vec![];
    for l in 0..4 {
        for d in 0..3 {
            for t in 0..4 {
                records.push(((l, 3 - l, d), t, theta0 + rng.sample(normal)));
            }
        }
    }
    let o = obs(&records);
    let mut cfg = quick_config(false);
    cfg.steps = 3000;
    cfg.adam.lr = 3e-3;
    let out = train(&p, &o, &cfg, 17, None).unwrap();
    let final_d = data_loss(&out.net, &p, &o).unwrap();
    assert!(final_d <= 1.5 * sigma * sigma, "L_D {final_d:e} vs σ² {:e}", sigma * sigma);

    let mut prev = f64::INFINITY;
    for r in &out.history {
        assert!(r.best_total <= prev);
        prev = r.best_total;
    }
}

#[test]
fn training_is_deterministic() {
    let p = problem(BoundarySpec::infiltration(-100.0, -20.0));
    let o = obs(&[((0, 0, 0), 0, 0.28), ((1, 1, 2), 2, 0.31), ((3, 2, 1), 3, 0.30)]);
    let mut cfg = quick_config(true);
    cfg.steps = 200;
    let a = train(&p, &o, &cfg, 99, None).unwrap();
    let b = train(&p, &o, &cfg, 99, None).unwrap();
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.history, b.history);
    let c = train(&p, &o, &cfg, 100, None).unwrap();
    assert_ne!(a.net.params(), c.net.params());
}

#[test]
fn divergence_is_reported_with_its_step() {
    let p = problem(BoundarySpec::evaporation(-1.8));
    let o = obs(&[((0, 0, 0), 0, 0.3)]);
    let mut cfg = quick_config(true);
    cfg.steps = 50;
    cfg.adam.lr = f64::MAX;
    match train(&p, &o, &cfg, 1, None) {
        Err(PcdlError::Diverged { .. }) | Err(PcdlError::NonFinite(_)) | Err(PcdlError::Net(_)) => {}
        other => panic!("expected a divergence error, got {:?}", other.map(|o| o.best_step)),
    }
}
