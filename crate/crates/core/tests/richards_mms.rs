use std::f64::consts::PI;
use std::sync::Arc;

use rootzone_core::field::{Grid3D, TimeGrid};
use rootzone_core::net::JetEvaluation;
use rootzone_core::pinn::residual_of_jet;
use rootzone_core::richards::{solve, BoundarySpec, SolverConfig};
use rootzone_core::VanGenuchten;

const L: f64 = 100.0;
const W: f64 = 100.0;
const D: f64 = 50.0;
const DECAY: f64 = 2000.0;

/// ψ* = -90 + 25 cos(πx/L) cos(πy/W) cos(πz/D) e^{-t/τ}; zero normal gradient on every face.
fn exact_jet(p: [f64; 3], t: f64) -> JetEvaluation {
    let (a, b, c) = (PI / L, PI / W, PI / D);
    let (cx, sx) = ((a * p[0]).cos(), (a * p[0]).sin());
    let (cy, sy) = ((b * p[1]).cos(), (b * p[1]).sin());
    let (cz, sz) = ((c * p[2]).cos(), (c * p[2]).sin());
    let e = 25.0 * (-t / DECAY).exp();
    let f = cx * cy * cz;
    JetEvaluation {
        value: -90.0 + e * f,
        dt: -e * f / DECAY,
        dx: -e * a * sx * cy * cz,
        dy: -e * b * cx * sy * cz,
        dz: -e * c * cx * cy * sz,
        dxx: -e * a * a * f,
        dyy: -e * b * b * f,
        dzz: -e * c * c * f,
    }
}

fn rms_error(n: usize, nd: usize, dt: f64) -> f64 {
    let soil = VanGenuchten::celia_loam();
    let grid = Grid3D::new(L, W, D, n, n, nd).unwrap();
    let times = TimeGrid::new(0.0, 400.0, 2).unwrap();
    let source = Arc::new(move |p: [f64; 3], t: f64| residual_of_jet(&exact_jet(p, t), &soil));
    let cfg = SolverConfig::new(dt, 1e-10, 50, 5).unwrap().with_manufactured_source(source);
    let ic: Vec<f64> = (0..grid.n_nodes())
        .map(|i| {
            let (l, w, d) = grid.node_coords(i);
            exact_jet(grid.position(l, w, d), 0.0).value
        })
        .collect();
    // gradient 0 on top and bottom: the evaporation faces with c1 = 0
    let sim = solve(&ic, &BoundarySpec::evaporation(0.0), &soil, &grid, &times, &cfg).unwrap();
    let mut sq = 0.0;
    for d in 0..nd {
        for w in 0..n {
            for l in 0..n {
                let exact = exact_jet(grid.position(l, w, d), times.instant(1)).value;
                sq += (sim.head.get(1, l, w, d) - exact).powi(2);
            }
        }
    }
    (sq / grid.n_nodes() as f64).sqrt()
}

#[test]
fn manufactured_solution_converges_at_second_order_in_space() {
    // dt shrinks with h² so the time error falls at the same rate
    let e: Vec<f64> = [(5, 5, 8.0), (9, 9, 2.0), (17, 17, 0.5)].iter().map(|&(n, nd, dt)| rms_error(n, nd, dt)).collect();
    let orders: Vec<f64> = e.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    eprintln!("rms errors {e:?}, observed orders {orders:?}");
    assert!(orders.iter().all(|&p| p >= 1.5), "errors {e:?}, observed orders {orders:?}");
}
