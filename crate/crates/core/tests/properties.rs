use depnet::linalg::{kron, rank, spd_factorize, unvec, vec, JitterPolicy, Matrix, DEFAULT_RANK_TOL};
use depnet::metrics::{ecdf, ks_distance};
use depnet::network::{
    forward, gaussian_log_likelihood, sample_layer_params, sample_prior_params, Activation, Architecture,
    LayerParams, NetworkParams,
};
use depnet::posterior::clamp_psi;
use depnet::random::{sample_poisson_points, RngStream, VarianceModel};
use depnet::wide_limit::{limit_posterior_params, marginal_log_likelihood};
use proptest::prelude::*;
use rand::RngCore;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn dims(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, n)
}

fn model() -> impl Strategy<Value = VarianceModel> {
    prop_oneof![
        Just(VarianceModel::Fixed),
        Just(VarianceModel::Model1),
        Just(VarianceModel::Model2)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kron_transpose_and_mixed_product(
        (a, a2, c, c2) in dims(6).prop_flat_map(|d| (matrix(d[0], d[1]), matrix(d[2], d[3]), matrix(d[1], d[4]), matrix(d[3], d[5])))
    ) {
        let t = kron(&a, &a2).transpose() - kron(&a.transpose(), &a2.transpose());
        prop_assert!(t.amax() < 1e-10);
        let m = kron(&a, &a2) * kron(&c, &c2) - kron(&(&a * &c), &(&a2 * &c2));
        prop_assert!(m.amax() < 1e-10);
    }

    #[test]
    fn trace_is_vec_inner_product((a, a2) in dims(2).prop_flat_map(|d| (matrix(d[0], d[1]), matrix(d[1], d[0])))) {
        let lhs = (&a * &a2).trace();
        let rhs = vec(&a.transpose()).dot(&vec(&a2));
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn vec_of_triple_product(
        (a, a2, at) in dims(4).prop_flat_map(|d| (matrix(d[0], d[1]), matrix(d[1], d[2]), matrix(d[2], d[3])))
    ) {
        let lhs = vec(&(&a * &a2 * &at));
        let rhs = kron(&at.transpose(), &a) * vec(&a2);
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn unvec_inverts_vec(a in dims(2).prop_flat_map(|d| matrix(d[0], d[1]))) {
        let v = vec(&a);
        prop_assert_eq!(v.len(), a.nrows() * a.ncols());
        prop_assert_eq!(unvec(&v, a.nrows(), a.ncols()).unwrap(), a);
    }

    #[test]
    fn spd_factor_reconstructs(b in (1usize..=6).prop_flat_map(|n| matrix(n, n))) {
        let n = b.nrows();
        let a = &b * b.transpose() + Matrix::identity(n, n);
        let f = spd_factorize(&a, JitterPolicy::Disabled).unwrap();
        prop_assert!((f.reconstruct() - &a).norm() <= 1e-10 * a.norm());
        prop_assert!(f.lower().diagonal().iter().all(|&x| x > 0.0));
    }

    // Σ cᵢ aᵢaᵢᵀ is positive definite iff the aᵢ span ℝᵖ.
    #[test]
    fn rank_one_sum_full_rank(
        (p, vecs, c) in (1usize..=5).prop_flat_map(|p| (Just(p), (p..=7).prop_flat_map(move |n| (matrix(p, n), prop::collection::vec(0.1..5.0f64, n)))))
            .prop_map(|(p, (v, c))| (p, v, c))
    ) {
        prop_assume!(rank(&vecs, DEFAULT_RANK_TOL) == p);
        let mut s = Matrix::zeros(p, p);
        for (i, col) in vecs.column_iter().enumerate() {
            s += col * col.transpose() * c[i];
        }
        prop_assert!(spd_factorize(&s, JitterPolicy::Disabled).is_ok());
    }

    // Deficient sets are built exactly: integer vectors confined to a proper
    // coordinate subspace, so the Gram sum has an exactly zero row.
    #[test]
    fn rank_one_sum_deficient(
        p in 2usize..=5,
        n in 1usize..=7,
        missing in 0usize..5,
        entries in prop::collection::vec(-4i32..=4, 35),
        c in prop::collection::vec(1u32..=5, 7),
    ) {
        let missing = missing % p;
        let vecs = Matrix::from_fn(p, n, |i, j| if i == missing { 0.0 } else { entries[i * 7 + j] as f64 });
        prop_assert!(rank(&vecs, DEFAULT_RANK_TOL) < p);
        let mut s = Matrix::zeros(p, p);
        for (j, col) in vecs.column_iter().enumerate() {
            s += col * col.transpose() * c[j] as f64;
        }
        prop_assert!(spd_factorize(&s, JitterPolicy::Disabled).is_err());
    }

    #[test]
    fn ks_symmetric_and_triangle(
        a in prop::collection::vec(-5.0..5.0f64, 1..40),
        b in prop::collection::vec(-5.0..5.0f64, 1..40),
        c in prop::collection::vec(-5.0..5.0f64, 1..40),
    ) {
        let ab = ks_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, ks_distance(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        let ac = ks_distance(&a, &c).unwrap();
        let cb = ks_distance(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn ks_against_doubled_sample_is_zero(a in prop::collection::vec(-5.0..5.0f64, 1..40)) {
        let doubled: Vec<f64> = a.iter().chain(a.iter()).copied().collect();
        prop_assert_eq!(ks_distance(&a, &doubled).unwrap(), 0.0);
    }

    #[test]
    fn ecdf_is_nondecreasing(a in prop::collection::vec(-5.0..5.0f64, 1..60)) {
        let curve = ecdf(&a).unwrap();
        prop_assert!(curve.heights.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.heights.last().unwrap(), 1.0);
    }

    #[test]
    fn clamp_stays_in_band(psi in 0.0..=1.0f64, delta in 0.5001..0.9999f64) {
        let c = clamp_psi(psi, delta);
        prop_assert!(c >= 1.0 - delta && c <= delta);
    }

    #[test]
    fn log_likelihood_nonpositive(xi in matrix(2, 3), y in matrix(2, 3)) {
        prop_assert!(gaussian_log_likelihood(&xi, &y).unwrap() <= 0.0);
        prop_assert_eq!(gaussian_log_likelihood(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn marginal_likelihood_nonpositive(b in matrix(3, 3), y in matrix(2, 3)) {
        let k = &b * b.transpose();
        prop_assert!(marginal_log_likelihood(&k, &y).unwrap() <= 0.0);
    }

    #[test]
    fn limit_precision_is_2i_plus_inverse(b in (1usize..=4).prop_flat_map(|n| matrix(n, n))) {
        let n = b.nrows();
        let k = &b * b.transpose() + Matrix::identity(n, n) * 0.5;
        let y = Matrix::from_element(1, n, 1.0);
        let post = limit_posterior_params(&k, &y).unwrap();
        let k_inv = k.clone().try_inverse().unwrap();
        let gap = &post.d - Matrix::identity(n, n) * 2.0 - &k_inv;
        prop_assert!(gap.amax() <= 1e-9 * k_inv.amax().max(1.0));
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        for _ in 0..8 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn variance_draws_positive(seed in any::<u64>(), m in model(), n in 1usize..50) {
        let mut rng = RngStream::new(seed, 0);
        for _ in 0..50 {
            let v = m.draw(&mut rng, n);
            prop_assert!(v > 0.0 && v.is_finite());
        }
    }

    #[test]
    fn poisson_points_decreasing_above_eps(seed in any::<u64>(), eps in 1e-4..0.5f64) {
        let s = sample_poisson_points(&mut RngStream::new(seed, 0), eps);
        prop_assert!(s.points.iter().all(|&t| t >= eps));
        prop_assert!(s.points.windows(2).all(|w| w[0] > w[1]));
    }

    // W_hj / N_hj is the same for every h: one V_j per input column.
    #[test]
    fn weight_columns_share_variance(seed in any::<u64>(), m in model(), width in 1usize..6) {
        let arch = Architecture::uniform(2, 2, width, 1, 1.0, 1.0, Activation::Relu, m).unwrap();
        let p = sample_layer_params(&mut RngStream::new(seed, 0), &arch, 2);
        for j in 0..width {
            let root = p.variances[j].sqrt();
            for h in 0..width {
                let w = p.weights[(h, j)];
                prop_assert!((w - root * p.normals[(h, j)]).abs() <= 1e-12 * w.abs().max(1e-300));
            }
        }
    }

    // Relabelling hidden units (rows of one layer, columns of the next)
    // leaves the output unchanged.
    #[test]
    fn forward_invariant_under_hidden_permutation(seed in any::<u64>(), shift in 1usize..4) {
        let arch = Architecture::uniform(3, 2, 4, 2, 1.0, 1.0, Activation::Relu, VarianceModel::Model1).unwrap();
        let mut rng = RngStream::new(seed, 0);
        let params = sample_prior_params(&mut rng, &arch);
        let x = depnet::random::std_normal_matrix(&mut rng, 3, 2);
        let out = forward(&params, &x, arch.activation()).unwrap().pop().unwrap();

        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let mut layers = params.layers.clone();
        let l1 = &params.layers[1];
        layers[1] = LayerParams::from_parts(
            l1.bias.select_rows(&perm),
            l1.variances.clone(),
            l1.normals.select_rows(&perm),
        );
        let l2 = &params.layers[2];
        layers[2] = LayerParams::from_parts(
            l2.bias.clone(),
            l2.variances.select_rows(&perm),
            l2.normals.select_columns(&perm),
        );
        let permuted = NetworkParams { layers };
        let out2 = forward(&permuted, &x, arch.activation()).unwrap().pop().unwrap();
        prop_assert!((&out - &out2).amax() <= 1e-10 * (1.0 + out2.amax()));
    }
}
