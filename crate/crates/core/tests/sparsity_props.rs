use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegan::sparsity::{
    self, ista, lasso_oracle, project_dictionary, sparse_objective, sparsity_net_forward, Gates,
    SparsityConfig, SparsityVars,
};
use sparsegan::{Graph, ParamStore, Tensor};

struct Problem {
    h: Tensor<f64>,
    w: Tensor<f64>,
    lambda: f64,
}

fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.random_range(1..=4);
    let c = rng.random_range(1..=6);
    let mut w = Tensor::randn(&[a, c], 1.0, &mut rng);
    project_dictionary(&mut w, &mut rng).unwrap();
    Problem {
        h: Tensor::randn(&[1, c, 1, 1], 1.0, &mut rng),
        w,
        lambda: rng.random_range(0.05..1.0),
    }
}

fn oracle_objective(p: &Problem) -> f64 {
    let s = lasso_oracle(p.h.data(), &p.w, p.lambda).unwrap();
    let a = p.w.shape()[0];
    let code = Tensor::from_f64(&[1, a, 1, 1], &s).unwrap();
    sparse_objective(&p.h, &p.w, &code, p.lambda).unwrap()
}

/// Open-gate net with the ISTA step and threshold; returns its objective.
fn open_net_objective(p: &Problem, steps: usize, theta: f64) -> f64 {
    let eta = 1.0 / sparsity::lipschitz(&p.w).unwrap();
    let a = p.w.shape()[0];
    let mut store = ParamStore::<f64>::new();
    store.push(sparsity::DICTIONARY, p.w.clone()).unwrap();
    store.push(sparsity::FORGET_WEIGHT, Tensor::zeros(&[a, a])).unwrap();
    store.push(sparsity::FORGET_BIAS, Tensor::zeros(&[a])).unwrap();
    store.push(sparsity::INPUT_WEIGHT, Tensor::zeros(&[a, a])).unwrap();
    store.push(sparsity::INPUT_BIAS, Tensor::zeros(&[a])).unwrap();
    store.push(sparsity::LOG_THETA, Tensor::scalar(theta.ln()).reshape(&[1]).unwrap()).unwrap();
    store.push(sparsity::LOG_ETA, Tensor::scalar(eta.ln()).reshape(&[1]).unwrap()).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let vars = SparsityVars::lookup(&store, &bound).unwrap();
    let h = g.input(p.h.clone());
    let out = sparsity_net_forward(&mut g, h, &vars, steps, Gates::Open, p.lambda).unwrap();
    sparse_objective(&p.h, &p.w, g.value(out.code), p.lambda).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn ista_is_monotone(seed in any::<u64>()) {
        let p = problem(seed);
        let r = ista(&p.h, &p.w, p.lambda, 300).unwrap();
        for pair in r.objectives.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn ista_reaches_oracle(seed in any::<u64>()) {
        let p = problem(seed);
        let r = ista(&p.h, &p.w, p.lambda, 2000).unwrap();
        let best = oracle_objective(&p);
        prop_assert!(r.objective() - best <= 1e-5, "ista {} oracle {}", r.objective(), best);
        prop_assert!(best <= r.objective() + 1e-9, "oracle above ista: {} vs {}", best, r.objective());
    }

    #[test]
    fn open_gates_reduce_to_ista(seed in any::<u64>()) {
        let p = problem(seed);
        let r = ista(&p.h, &p.w, p.lambda, 300).unwrap();
        let theta = p.lambda * r.step / 2.0;
        let net = open_net_objective(&p, 300, theta);
        prop_assert!((net - r.objective()).abs() <= 1e-5, "net {} ista {}", net, r.objective());
    }

    // Holds exactly for one unrolled step, where the pre-threshold cell does
    // not depend on theta. With more steps the support can grow with theta,
    // as it can along the LASSO path itself.
    #[test]
    fn larger_threshold_never_grows_support(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store: ParamStore<f64> =
            sparsity::init_params(&SparsityConfig { atoms: 8, ..SparsityConfig::for_latent(4) }, 4, &mut rng)
                .unwrap()
                .cast();
        let h = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let mut last = usize::MAX;
        for theta in [0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0] {
            let mut s = store.clone();
            let i = s.index_of(sparsity::LOG_THETA).unwrap();
            s.get_mut(i).data_mut()[0] = f64::ln(theta);
            let mut g = Graph::new();
            let bound = s.bind(&mut g);
            let vars = SparsityVars::lookup(&s, &bound).unwrap();
            let hv = g.input(h.clone());
            let out = sparsity_net_forward(&mut g, hv, &vars, 1, Gates::Learned, 1.0).unwrap();
            let nnz = g.value(out.code).data().iter().filter(|&&v| v != 0.0).count();
            prop_assert!(nnz <= last, "theta {}: {} nonzeros after {}", theta, nnz, last);
            last = nnz;
        }
    }

    #[test]
    fn regularizer_is_nonnegative(seed in any::<u64>(), scale in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store: ParamStore<f64> =
            sparsity::init_params(&SparsityConfig { atoms: 6, ..SparsityConfig::for_latent(3) }, 3, &mut rng)
                .unwrap()
                .cast();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vars = SparsityVars::lookup(&store, &bound).unwrap();
        let h = g.input(Tensor::randn(&[2, 3, 2, 2], scale, &mut rng));
        let out = sparsity_net_forward(&mut g, h, &vars, 3, Gates::Learned, 1.0).unwrap();
        let loss = g.value(out.loss).item();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, scale == 0.0);
    }
}

#[test]
fn vanishing_threshold_approaches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        // Near-orthonormal square dictionaries are well conditioned.
        let mut w = Tensor::<f64>::randn(&[4, 4], 0.1, &mut rng);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] += 1.0;
        }
        project_dictionary(&mut w, &mut rng).unwrap();
        let p = Problem {
            h: Tensor::randn(&[1, 4, 1, 1], 1.0, &mut rng),
            w,
            lambda: 0.0,
        };
        // Least squares fits exactly, so the optimum is zero.
        let gap = open_net_objective(&p, 500, 1e-12);
        assert!(gap < 1e-4, "gap {gap}");
    }
}

#[test]
fn support_can_grow_with_threshold_after_several_steps() {
    // Counterexample found by the property test above when run at three steps.
    let mut rng = ChaCha8Rng::seed_from_u64(16656059763849869194);
    let store: ParamStore<f64> =
        sparsity::init_params(&SparsityConfig { atoms: 8, ..SparsityConfig::for_latent(4) }, 4, &mut rng)
            .unwrap()
            .cast();
    let h = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
    let nnz = |theta: f64| {
        let mut s = store.clone();
        let i = s.index_of(sparsity::LOG_THETA).unwrap();
        s.get_mut(i).data_mut()[0] = theta.ln();
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let vars = SparsityVars::lookup(&s, &bound).unwrap();
        let hv = g.input(h.clone());
        let out = sparsity_net_forward(&mut g, hv, &vars, 3, Gates::Learned, 1.0).unwrap();
        g.value(out.code).data().iter().filter(|&&v| v != 0.0).count()
    };
    assert!(nnz(0.01) > nnz(0.001));
    assert_eq!(nnz(100.0), 0);
}
