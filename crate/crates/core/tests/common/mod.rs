//! Property suites shared by the `properties` tests and the acceptance run.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmchange::ifr::Ifr;
use mmchange::itff::Itff;
use mmchange::kernels::attention::{sdpa, softmax, SoftmaxAxis};
use mmchange::metrics::{confusion, ChangeMask, ConfusionCounts};
use mmchange::params::{ParamBuilder, ParamStore};
use mmchange::tde::Tde;
use mmchange::visualize::{overlay, overlay_counts};
use mmchange::{Shape, Tensor};

pub const CASES: u32 = 256;

pub type Suite = (&'static str, fn() -> Result<u32, String>);

pub const SUITES: [Suite; 8] = [
    ("tde offset invariance", tde_offset_invariance),
    ("ifr offset invariance", ifr_offset_invariance),
    ("tde zero difference", tde_zero_difference),
    ("itff sum dependence", itff_sum_dependence),
    ("attention gates in (0,1)", gates_in_unit_interval),
    ("softmax slices sum to one", softmax_sums),
    ("sdpa permutation equivariance", sdpa_equivariance),
    ("overlay matches confusion", overlay_bijection),
];

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Runs `check` on `CASES` inputs and returns the case count.
fn run<S: Strategy>(strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<u32, String> {
    runner().run(&strategy, check).map_err(|e| e.to_string())?;
    Ok(CASES)
}

/// Multiples of 1/16 in [-4, 4]: sums and differences of these are exact,
/// so offset invariance can be checked bit for bit.
pub fn dyadic(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-64i32..=64) as f64 / 16.0)
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> M) -> (M, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng));
    (m, store)
}

fn channels4() -> impl Strategy<Value = usize> {
    prop_oneof![Just(4usize), Just(8)]
}

pub fn tde_offset_invariance() -> Result<u32, String> {
    run((any::<u64>(), channels4(), 1usize..4, 1usize..4), |(seed, c, h, w)| {
        let (m, store) = build(seed, |pb| Tde::new(pb, "tde", c));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let s = Shape::new(1, c, h, w);
        let (a, b, off) = (dyadic(s, &mut rng), dyadic(s, &mut rng), dyadic(s, &mut rng));
        let y0 = m.apply(&store, &a, &b).map_err(|e| fail(e.to_string()))?;
        let y1 = m
            .apply(&store, &a.add(&off).unwrap(), &b.add(&off).unwrap())
            .map_err(|e| fail(e.to_string()))?;
        prop_assert!(y0 == y1, "outputs differ by {}", y0.max_abs_diff(&y1));
        Ok(())
    })
}

pub fn ifr_offset_invariance() -> Result<u32, String> {
    run((any::<u64>(), channels4(), 1usize..6, 1usize..6), |(seed, c, h, w)| {
        let (m, store) = build(seed, |pb| Ifr::new(pb, "ifr", c).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let s = Shape::new(1, c, h, w);
        let (a, b, off) = (dyadic(s, &mut rng), dyadic(s, &mut rng), dyadic(s, &mut rng));
        let y0 = m.apply(&store, &a, &b).map_err(|e| fail(e.to_string()))?;
        let y1 = m
            .apply(&store, &a.add(&off).unwrap(), &b.add(&off).unwrap())
            .map_err(|e| fail(e.to_string()))?;
        prop_assert!(y0 == y1, "outputs differ by {}", y0.max_abs_diff(&y1));
        Ok(())
    })
}

/// Fresh normalisation layers hold identity statistics.
pub fn tde_zero_difference() -> Result<u32, String> {
    run((any::<u64>(), channels4(), 1usize..4, 1usize..4), |(seed, c, h, w)| {
        let (m, store) = build(seed, |pb| Tde::new(pb, "tde", c));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let a = uniform(Shape::new(1, c, h, w), -3.0, 3.0, &mut rng);
        let y = m.apply(&store, &a, &a).map_err(|e| fail(e.to_string()))?;
        prop_assert!(y.data().iter().all(|&v| v == 0.0));
        Ok(())
    })
}

pub fn itff_sum_dependence() -> Result<u32, String> {
    run((any::<u64>(), channels4(), 1usize..6, 1usize..6), |(seed, c, h, w)| {
        let (m, store) = build(seed, |pb| Itff::new(pb, "itff", c).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let s = Shape::new(1, c, h, w);
        let (t, f, u) = (
            uniform(s, -2.0, 2.0, &mut rng),
            uniform(s, -2.0, 2.0, &mut rng),
            uniform(s, -2.0, 2.0, &mut rng),
        );
        let y = m.apply(&store, &t, &f).unwrap();
        prop_assert!(y == m.apply(&store, &f, &t).unwrap(), "swap changed the output");
        prop_assert!(y == m.apply(&store, &t.add(&f).unwrap(), &Tensor::zeros(s)).unwrap());
        // t + f = (t + u) + (f − u) up to rounding of the regrouped sum.
        let y2 = m.apply(&store, &t.add(&u).unwrap(), &f.sub(&u).unwrap()).unwrap();
        prop_assert!(y.max_abs_diff(&y2) < 1e-9, "regrouped sum moved output by {}", y.max_abs_diff(&y2));
        Ok(())
    })
}

pub fn gates_in_unit_interval() -> Result<u32, String> {
    run((any::<u64>(), channels4(), 1usize..8, 1usize..8), |(seed, c, h, w)| {
        let (m, store) = build(seed, |pb| Itff::new(pb, "itff", c).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let s = Shape::new(1, c, h, w);
        let maps = m
            .attention_maps(&store, &uniform(s, -3.0, 3.0, &mut rng), &uniform(s, -3.0, 3.0, &mut rng))
            .unwrap();
        let inside = |v: &f64| *v > 0.0 && *v < 1.0;
        prop_assert!(maps.channel.iter().all(inside));
        prop_assert!(maps.spatial.data().iter().all(inside));
        prop_assert!(maps.pixel.data().iter().all(inside));

        let (ifr, store) = build(seed, |pb| Ifr::new(pb, "ifr", c).unwrap());
        let (out, pre) = ifr
            .apply_parts(&store, &uniform(s, -3.0, 3.0, &mut rng), &uniform(s, -3.0, 3.0, &mut rng))
            .unwrap();
        for ch in 0..c {
            // Recover the per-channel gate wherever the pre-gate feature is non-zero.
            for (o, p) in out.plane(0, ch).iter().zip(pre.plane(0, ch)) {
                if p.abs() > 1e-9 {
                    let g = o / p;
                    prop_assert!(g > 0.0 && g < 1.0, "IFR gate {g}");
                }
            }
        }
        Ok(())
    })
}

pub fn softmax_sums() -> Result<u32, String> {
    let axis = prop_oneof![Just(SoftmaxAxis::Channel), Just(SoftmaxAxis::Spatial)];
    run((any::<u64>(), axis, 1usize..3, 1usize..9, 1usize..6, 1usize..6), |(seed, axis, n, c, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(n, c, h, w);
        let y = softmax(&uniform(s, -60.0, 60.0, &mut rng), axis);
        let sums: Vec<f64> = match axis {
            SoftmaxAxis::Channel => (0..n)
                .flat_map(|b| (0..h * w).map(move |p| (b, p)))
                .map(|(b, p)| (0..c).map(|ch| y.plane(b, ch)[p]).sum())
                .collect(),
            SoftmaxAxis::Spatial => (0..n)
                .flat_map(|b| (0..c).map(move |ch| (b, ch)))
                .map(|(b, ch)| y.plane(b, ch).iter().sum())
                .collect(),
        };
        for v in sums {
            prop_assert!((v - 1.0).abs() <= 1e-6, "slice sums to {v}");
        }
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        Ok(())
    })
}

pub fn sdpa_equivariance() -> Result<u32, String> {
    run((any::<u64>(), 1usize..6, 1usize..5, 1usize..5), |(seed, c, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, c, h, w);
        let x = uniform(s, -2.0, 2.0, &mut rng);
        let t = h * w;
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |m: &Tensor| Tensor::from_fn(s, |_, ch, y, xx| m.plane(0, ch)[perm[y * w + xx]]);
        let lhs = sdpa(&permute(&x)).0;
        let rhs = permute(&sdpa(&x).0);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12, "differs by {}", lhs.max_abs_diff(&rhs));
        Ok(())
    })
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ChangeMask {
    let p: f64 = rng.random_range(0.0..1.0);
    ChangeMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// Straightforward per-pixel tally.
pub fn brute_force_counts(pred: &ChangeMask, gt: &ChangeMask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

pub fn overlay_bijection() -> Result<u32, String> {
    run((any::<u64>(), 1usize..24, 1usize..24), |(seed, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = (random_mask(h, w, &mut rng), random_mask(h, w, &mut rng));
        let img = overlay(&pred, &gt).unwrap();
        let counts = overlay_counts(&img).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(counts, confusion(&pred, &gt).unwrap());
        prop_assert_eq!(counts, brute_force_counts(&pred, &gt));
        Ok(())
    })
}
