use std::sync::Arc;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use priorlab::autodiff::Graph;
use priorlab::baselines::{gauss_newton, map_linear, map_linear_information, MapConfig};
use priorlab::datagen::{generate, Affine, ScaleMode};
use priorlab::forward::{bend_ray, trace_straight_ray, ForwardModel, ProblemId, TomoGrid, WingModel};
use priorlab::networks::{clip_global_norm, Architecture, MlpSpec, Network, OutputActivation};
use priorlab::numerics::{cholesky, frobenius, norm2, solve_spd, Matrix, Vector};
use priorlab::oracle::{DiscretePrior, LinearOperator, OracleProblem};
use priorlab::priors::{build_covariance, PriorFamily, PriorSampler, PriorSpec};
use priorlab::rng::RngStream;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn vector(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vector> {
    prop::collection::vec(lo..hi, n).prop_map(Array1::from)
}

fn spd(n: usize) -> impl Strategy<Value = Matrix> {
    matrix(n, n, -1.0, 1.0).prop_map(move |b| b.t().dot(&b) + Array2::<f64>::eye(n) * 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cholesky_reconstructs(a in (1usize..40).prop_flat_map(spd)) {
        let l = cholesky(&a).unwrap();
        prop_assert!(frobenius(&(l.dot(&l.t()) - &a)) / frobenius(&a) <= 1e-10);
    }

    #[test]
    fn solve_spd_residual((a, b) in (1usize..60).prop_flat_map(|n| (spd(n), vector(n, -1.0, 1.0)))) {
        let x = solve_spd(&a, &b).unwrap();
        prop_assert!(norm2((a.dot(&x) - &b).view()) <= 1e-9 * norm2(b.view()).max(1e-300));
    }

    #[test]
    fn rng_streams_reproduce(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        let mut c = RngStream::new(seed, stream.wrapping_add(1));
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        prop_assert_eq!(&xa, &xb);
        prop_assert_ne!(xa, xc);
    }

    #[test]
    fn wing_is_linear(m1 in vector(50, -2.0, 2.0), m2 in vector(50, -2.0, 2.0), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let w = WingModel::new(50, 20);
        let lhs = w.evaluate(&(&m1 * a + &m2 * b)).unwrap();
        let rhs = w.evaluate(&m1).unwrap() * a + w.evaluate(&m2).unwrap() * b;
        prop_assert!((lhs - rhs).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn bending_never_slows_a_ray(
        speeds in prop::collection::vec(2000.0..4000.0f64, 49),
        zs in 0usize..7,
        zr in 0usize..7,
    ) {
        let g = TomoGrid { n: 7, size: 1600.0 };
        let m = Vector::from_iter(speeds.iter().map(|v| 1.0 / v));
        let h = g.cell();
        let straight = trace_straight_ray(&g, [0.0, (zs as f64 + 0.5) * h], [1600.0, (zr as f64 + 0.5) * h]);
        let bent = bend_ray(&g, &m, &straight, 50, 1e-4);
        prop_assert!(bent.traveltime(&m) <= straight.traveltime(&m) * (1.0 + 1e-12));
        prop_assert_eq!(bent.nodes[0], straight.nodes[0]);
        prop_assert_eq!(bent.nodes.last(), straight.nodes.last());
        let total: f64 = bent.cell_lengths.iter().sum();
        prop_assert!((total - bent.length()).abs() <= 1e-9 * total);
    }

    #[test]
    fn affine_round_trip(x in matrix(12, 5, -50.0, 50.0), full in any::<bool>()) {
        let mode = if full { ScaleMode::Full } else { ScaleMode::ScaleOnly };
        let t = Affine::fit(&x, mode).unwrap();
        prop_assert!(t.std.iter().all(|&s| s > 0.0));
        let back = t.invert(&t.apply(&x));
        prop_assert!((&back - &x).iter().all(|v| v.abs() <= 1e-12 * (1.0 + x.iter().fold(0.0f64, |a, b| a.max(b.abs())))));
    }

    #[test]
    fn adjoints_scale_linearly(x in matrix(3, 4, -2.0, 2.0), w in matrix(4, 2, -1.0, 1.0), alpha in 0.1..10.0f64) {
        let mut g = Graph::new();
        let xi = g.input(x);
        let wi = g.param(w);
        let h = g.matmul(xi, wi).unwrap();
        let a = g.gelu(h).unwrap();
        let t = g.input(Array2::zeros((3, 2)));
        let loss = g.mse(a, t).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let base = g.grad(wi).unwrap().clone();
        g.backward(loss).unwrap();
        prop_assert_eq!(&base, g.grad(wi).unwrap());
        g.backward_seeded(loss, alpha).unwrap();
        let scaled = g.grad(wi).unwrap();
        prop_assert!((scaled - &(&base * alpha)).iter().all(|v| v.abs() <= 1e-12 * (1.0 + alpha * base.iter().fold(0.0f64, |a, b| a.max(b.abs())))));
    }

    #[test]
    fn softplus_networks_are_nonnegative(z in matrix(64, 20, -5.0, 5.0), seed in any::<u64>()) {
        let arch = Architecture::Mlp(MlpSpec { hidden: vec![16, 16], ..MlpSpec::paper(OutputActivation::Softplus) });
        let net = Network::init(arch, 20, 50, seed).unwrap();
        prop_assert!(net.forward_standardized(&z).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn clipping_bounds_the_global_norm(v in prop::collection::vec(-100.0..100.0f64, 12)) {
        let mut grads = vec![Array2::from_shape_vec((3, 2), v[..6].to_vec()).unwrap(), Array2::from_shape_vec((2, 3), v[6..].to_vec()).unwrap()];
        let before = clip_global_norm(&mut grads, 1.0);
        let after = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        prop_assert!(after <= 1.0 + 1e-9);
        if before <= 1.0 {
            prop_assert!((after - before).abs() <= 1e-15);
        }
    }

    #[test]
    fn map_forms_agree(d in vector(20, 0.0, 0.3), sigma in 0.1..3.0f64, delta in 0.005..0.02f64) {
        let w = WingModel::new(50, 20);
        let spec = PriorSpec::new(PriorFamily::GaussianCorrelated, Vector::zeros(50), sigma, delta, w.grid()).unwrap();
        let cfg = MapConfig::new(0.01, build_covariance(&spec).unwrap(), Vector::zeros(50)).unwrap();
        let a = map_linear(&w.g, &d, &cfg).unwrap();
        let b = map_linear_information(&w.g, &d, &cfg).unwrap();
        prop_assert!(norm2((&a - &b).view()) <= 1e-8 * norm2(a.view()).max(1e-12));
        let gn = gauss_newton(&w, &d, &MapConfig { iters: 1, ..cfg }).unwrap();
        prop_assert!(norm2((&gn.m - &a).view()) <= 1e-8 * norm2(a.view()).max(1e-12));
    }

    #[test]
    fn covariance_is_symmetric_with_sigma_diagonal(sigma in 0.1..3.0f64, delta in 0.01..0.5f64) {
        let spec = PriorSpec::new(PriorFamily::GaussianCorrelated, Vector::zeros(30), sigma, delta, WingModel::new(30, 10).grid()).unwrap();
        let c = build_covariance(&spec).unwrap();
        prop_assert!((&c - &c.t()).iter().all(|v| *v == 0.0));
        prop_assert!(c.diag().iter().all(|v| (v - sigma * sigma).abs() <= 1e-12 * sigma * sigma));
        prop_assert!(cholesky(&c).is_ok() || priorlab::numerics::cholesky_jittered(&c).is_ok());
    }

    #[test]
    fn posteriors_are_normalized(d in vector(2, -3.0, 3.0), alpha in 0.0..50.0f64, per_axis in 2usize..10) {
        let p = OracleProblem::new(
            DiscretePrior::grid(2, per_axis, -1.5, 1.5).unwrap(),
            Arc::new(LinearOperator { a: ndarray::array![[1.0, 0.6], [0.6, 0.4]] }),
            0.2,
        ).unwrap();
        let post = p.posterior(&d, alpha);
        prop_assert!(post.probs.iter().all(|&w| w >= 0.0));
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_extend_by_prefix(seed in any::<u64>(), k in 1usize..20) {
        let w = WingModel::new(50, 20);
        let spec = PriorSpec::new(PriorFamily::Laplace, Vector::zeros(50), 1.0, 0.02, w.grid()).unwrap();
        let sampler = PriorSampler::new(&spec).unwrap();
        let small = generate(&w, ProblemId::Wing, &sampler, k, 0.01, seed).unwrap();
        let large = generate(&w, ProblemId::Wing, &sampler, k + 7, 0.01, seed).unwrap();
        prop_assert_eq!(small.m, large.m.slice(ndarray::s![..k, ..]).to_owned());
        prop_assert_eq!(small.d, large.d.slice(ndarray::s![..k, ..]).to_owned());
    }
}
