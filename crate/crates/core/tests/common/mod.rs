#![allow(dead_code)]

pub mod oracle;

use drgp::bench::{make_box3d, make_multishape, make_sinr, SinrConfig};
use drgp::gp::AmbiguityKind;
use drgp::reformulate::{Coupling, RobustGP, SliceName, SmoothProgram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Benchmark instances accepted by the builder for `(kind, coupling)`.
pub fn instances(kind: AmbiguityKind, coupling: Coupling) -> Vec<RobustGP> {
    let eps = match kind {
        AmbiguityKind::TwoMoment => 0.15,
        AmbiguityKind::FirstMomentNonneg => 0.2,
    };
    let mut out = vec![
        make_box3d(eps, kind, coupling).unwrap(),
        make_multishape(5, eps, kind, coupling, 1).unwrap(),
    ];
    let mut sinr = make_sinr(3, true, eps, kind, 2, &SinrConfig::default()).unwrap();
    sinr.coupling = coupling;
    out.push(sinr);
    out
}

/// `count` random points at which the program evaluates without any guard engaged.
pub fn unguarded_points(sp: &SmoothProgram, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = sp.problem().epsilon;
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0;
    while points.len() < count {
        attempts += 1;
        assert!(attempts < 1000 * count, "{}: too few unguarded points", sp.name());
        let mut z = vec![0.0; sp.n()];
        for slice in sp.layout().slices() {
            let (lo, hi) = match slice.name {
                SliceName::R => (-1.5, 1.0),
                SliceName::X => ((1.0 - eps).ln(), -0.01),
                SliceName::Y => (1.0 - eps + 0.01, 0.99),
                SliceName::Lambda | SliceName::Beta | SliceName::Pi => (-1.0, 1.0),
            };
            for v in &mut z[slice.range()] {
                *v = rng.random_range(lo..hi);
            }
        }
        match sp.evaluate(&z) {
            Ok(ev) if !ev.guarded && ev.is_finite() => points.push(z),
            _ => {}
        }
    }
    points
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Best-so-far objective must never increase between outer iterations.
pub fn assert_monotone_history(history: &[f64]) {
    for (j, w) in history.windows(2).enumerate() {
        assert!(w[1] <= w[0], "best-so-far rose at iteration {}: {} -> {}", j + 1, w[0], w[1]);
    }
}
