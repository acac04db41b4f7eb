use advcomm::diffcore::{grad_check, GradCheckConfig, Graph, ParamTree, Tensor};
use advcomm::graphnet::{
    agnn_forward, graph_conv, graph_conv_on, hetero_graph_conv, local_node_execute, run_decentralized, FilterBank,
    GraphError, GraphShiftOperator, HeteroFilterBank, Nonlinearity, Normalization, ShiftConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_bank(k: usize, f: usize, fo: usize, rng: &mut ChaCha8Rng) -> FilterBank {
    FilterBank::new((0..=k).map(|_| rand_t(&[f, fo], rng)).collect()).unwrap()
}

fn rand_edges(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                e.push((i, j));
            }
        }
    }
    e
}

fn dm(t: &Tensor<f64>) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn sm(s: &GraphShiftOperator) -> DMatrix<f64> {
    let n = s.n_agents();
    DMatrix::from_row_slice(n, n, s.matrix())
}

// Σ_k S^k X H_k with explicit matrix powers
fn oracle_conv(x: &DMatrix<f64>, s: &DMatrix<f64>, bank: &FilterBank) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), bank.f_out());
    let mut sk = DMatrix::identity(s.nrows(), s.ncols());
    for tap in bank.taps() {
        out += &sk * x * dm(tap);
        sk = &sk * s;
    }
    out
}

// row i taken from the oracle run with agent i's bank
fn oracle_hetero(x: &DMatrix<f64>, s: &DMatrix<f64>, banks: &HeteroFilterBank) -> DMatrix<f64> {
    let f = banks.bank_of(0).f_out();
    let mut out = DMatrix::zeros(x.nrows(), f);
    for i in 0..x.nrows() {
        let full = oracle_conv(x, s, banks.bank_of(i));
        out.set_row(i, &full.row(i));
    }
    out
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

#[test]
fn shift_operator_examples() {
    let z = GraphShiftOperator::build(&[], 3, ShiftConfig::binary()).unwrap();
    assert!(z.matrix().iter().all(|&v| v == 0.0));

    let two = GraphShiftOperator::build(&[(0, 1)], 2, ShiftConfig::default()).unwrap();
    for &v in two.matrix() {
        assert!((v - 0.5).abs() < 1e-15);
    }

    let rs = ShiftConfig {
        normalization: Normalization::RowStochastic,
        self_loops: false,
    };
    let k3 = GraphShiftOperator::build(&[(0, 1), (1, 2), (0, 2)], 3, rs).unwrap();
    for i in 0..3 {
        assert!(((0..3).map(|j| k3.get(i, j)).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    assert!(matches!(
        GraphShiftOperator::build(&[(0, 3)], 3, ShiftConfig::default()),
        Err(GraphError::AgentOutOfRange { agent: 3, n: 3 })
    ));
}

#[test]
fn spectral_radius_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let e = rand_edges(n, 0.5, &mut rng);
        let s = GraphShiftOperator::build(&e, n, ShiftConfig::default()).unwrap();
        let eig = sm(&s).symmetric_eigen();
        assert!(eig.eigenvalues.amax() <= 1.0 + 1e-6);
        for (i, j) in (0..n).flat_map(|i| (0..n).map(move |j| (i, j))) {
            if s.get(i, j) != 0.0 {
                assert!(i == j || e.contains(&(i.min(j), i.max(j))));
            }
        }
        let rs = ShiftConfig {
            normalization: Normalization::RowStochastic,
            self_loops: true,
        };
        let r = GraphShiftOperator::build(&e, n, rs).unwrap();
        // the ∞-norm bounds the spectral radius
        assert!(sm(&r).row_iter().map(|row| row.abs().sum()).fold(0.0, f64::max) <= 1.0 + 1e-12);
    }
}

#[test]
fn graph_conv_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&[4, 3], &mut rng);
    let s = GraphShiftOperator::build(&[(0, 1), (2, 3)], 4, ShiftConfig::default()).unwrap();
    let k0 = rand_bank(0, 3, 2, &mut rng);
    let want = dm(&x) * dm(&k0.taps()[0]);
    assert!(max_abs(&dm(&graph_conv(&x, &s, &k0).unwrap()), &want) < 1e-12);

    let k2 = rand_bank(2, 3, 2, &mut rng);
    let want = dm(&x) * dm(&k2.taps()[0]);
    let y = graph_conv(&x, &GraphShiftOperator::zero(4), &k2).unwrap();
    assert!(max_abs(&dm(&y), &want) < 1e-12);
}

#[test]
fn graph_conv_matches_matrix_powers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&[4, 3], &mut rng);
    let s = GraphShiftOperator::build(&rand_edges(4, 0.6, &mut rng), 4, ShiftConfig::default()).unwrap();
    let bank = rand_bank(2, 3, 3, &mut rng);
    let y = graph_conv(&x, &s, &bank).unwrap();
    assert!(max_abs(&dm(&y), &oracle_conv(&dm(&x), &sm(&s), &bank)) < 1e-6);
}

#[test]
fn hetero_conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&[3, 2], &mut rng);
    let s = GraphShiftOperator::build(&[(0, 1), (1, 2)], 3, ShiftConfig::default()).unwrap();
    let a = rand_bank(2, 2, 3, &mut rng);
    let b = rand_bank(2, 2, 3, &mut rng);

    let shared = hetero_graph_conv(&x, &s, &HeteroFilterBank::shared(a.clone(), 3)).unwrap();
    assert_eq!(shared, graph_conv(&x, &s, &a).unwrap());

    let two = HeteroFilterBank::new(vec![a.clone(), b.clone()], vec![0, 0, 1]).unwrap();
    let y = hetero_graph_conv(&x, &s, &two).unwrap();
    assert!(max_abs(&dm(&y), &oracle_hetero(&dm(&x), &sm(&s), &two)) < 1e-6);

    let zeroed = HeteroFilterBank::new(vec![a.clone(), b.zeroed()], vec![0, 0, 1]).unwrap();
    let z = hetero_graph_conv(&x, &s, &zeroed).unwrap();
    assert!(z.row(2).iter().all(|&v| v == 0.0));
    assert_eq!(z.row(0), y.row(0));
    assert_eq!(z.row(1), y.row(1));
}

fn leaky(m: DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.01 * v })
}

#[test]
fn agnn_cascade() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[4, 3], &mut rng);
    let s = GraphShiftOperator::build(&rand_edges(4, 0.7, &mut rng), 4, ShiftConfig::default()).unwrap();
    let l1 = rand_bank(2, 3, 4, &mut rng);
    let l2 = rand_bank(1, 4, 2, &mut rng);

    let one = agnn_forward(&x, &s, &[HeteroFilterBank::shared(l1.clone(), 4)], Nonlinearity::Identity).unwrap();
    assert_eq!(one, graph_conv(&x, &s, &l1).unwrap());

    let layers = [HeteroFilterBank::shared(l1.clone(), 4), HeteroFilterBank::shared(l2.clone(), 4)];
    let y = agnn_forward(&x, &s, &layers, Nonlinearity::LeakyRelu).unwrap();
    let sd = sm(&s);
    let want = leaky(oracle_conv(&leaky(oracle_conv(&dm(&x), &sd, &l1)), &sd, &l2));
    assert!(max_abs(&dm(&y), &want) < 1e-5);

    let zero = agnn_forward(&Tensor::zeros(&[4, 3]), &s, &layers, Nonlinearity::LeakyRelu).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decentralized_equivalence_on_100_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(0..=3);
        let f = rng.gen_range(1..=4);
        let fo = rng.gen_range(1..=4);
        let s = GraphShiftOperator::build(&rand_edges(n, 0.4, &mut rng), n, ShiftConfig::default()).unwrap();
        let nb = rng.gen_range(1..=2.min(n));
        let banks: Vec<_> = (0..nb).map(|_| rand_bank(k, f, fo, &mut rng)).collect();
        let assign: Vec<usize> = (0..n).map(|i| if i + 1 == n { nb - 1 } else { 0 }).collect();
        let hb = HeteroFilterBank::new(banks, assign).unwrap();
        let x = rand_t(&[n, f], &mut rng);
        let central = hetero_graph_conv(&x, &s, &hb).unwrap();
        let dec = run_decentralized(&x, &s, &hb).unwrap();
        assert!(max_abs(&dm(&central), &dm(&dec)) < 1e-6);
    }
}

#[test]
fn local_rounds_by_hand() {
    // explicit message rounds built from each node's outbox
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 5;
    let s = GraphShiftOperator::build(&[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)], n, ShiftConfig::default()).unwrap();
    let bank = rand_bank(3, 2, 2, &mut rng);
    let x = rand_t(&[n, 2], &mut rng);
    let mut agg: Vec<Vec<Vec<f64>>> = (0..n).map(|i| vec![x.row(i).to_vec()]).collect();
    for k in 1..=3 {
        for i in 0..n {
            let y: Vec<f64> = (0..2)
                .map(|c| s.in_neighbors(i).iter().map(|&j| s.get(i, j) * agg[j][k - 1][c]).sum())
                .collect();
            agg[i].push(y);
        }
    }
    let central = graph_conv(&x, &s, &bank).unwrap();
    for i in 0..n {
        let inbox: Vec<Vec<(usize, Vec<f64>)>> = (1..=3)
            .map(|k| s.in_neighbors(i).into_iter().map(|j| (j, agg[j][k - 1].clone())).collect())
            .collect();
        let out = local_node_execute(i, x.row(i), &s, &inbox, &bank).unwrap();
        for (a, b) in out.row.iter().zip(central.row(i)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out.outbox.len(), 4);
    }
}

#[test]
fn mask_outgoing_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = GraphShiftOperator::build(&[(0, 1)], 3, ShiftConfig::default()).unwrap();
    assert_eq!(s.mask_outgoing(2).unwrap(), s);

    let full = GraphShiftOperator::build(&[(0, 1), (1, 2), (0, 2)], 3, ShiftConfig::default()).unwrap();
    let m = full.mask_outgoing(0).unwrap();
    let bank = rand_bank(1, 2, 2, &mut rng);
    let x = rand_t(&[3, 2], &mut rng);
    let mut x2 = x.clone();
    x2.data_mut()[0] += 1.0;
    x2.data_mut()[1] -= 2.0;
    let (a, b) = (graph_conv(&x, &m, &bank).unwrap(), graph_conv(&x2, &m, &bank).unwrap());
    assert_eq!(a.row(1), b.row(1));
    assert_eq!(a.row(2), b.row(2));
    assert_ne!(a.row(0), b.row(0));

    let chain = GraphShiftOperator::build(&[(0, 1), (1, 2)], 3, ShiftConfig::default()).unwrap();
    let masked = chain.mask_outgoing(1).unwrap();
    let apart = GraphShiftOperator::build(&[], 3, ShiftConfig::default()).unwrap();
    let bank = rand_bank(2, 2, 3, &mut rng);
    let ym = graph_conv(&x, &masked, &bank).unwrap();
    let ya = graph_conv(&x, &apart, &bank).unwrap();
    let om = oracle_conv(&dm(&x), &sm(&masked), &bank);
    let oa = oracle_conv(&dm(&x), &sm(&apart), &bank);
    for i in [0, 2] {
        assert!((om.row(i) - oa.row(i)).amax() < 1e-12);
        for (p, q) in ym.row(i).iter().zip(ya.row(i)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn tap_gradients_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 5;
    let s = GraphShiftOperator::build(&rand_edges(n, 0.5, &mut rng), n, ShiftConfig::default()).unwrap();
    let x = rand_t(&[n, 3], &mut rng);
    let mut p = ParamTree::new();
    for k in 0..=3 {
        p.insert(format!("gnn.tap.k{}", k), rand_t(&[3, 4], &mut rng));
    }
    let r = grad_check(
        &p,
        |g: &mut Graph<f64>, t| {
            let xv = g.input(x.clone());
            let sv = g.input(Tensor::new(vec![1, n, n], s.matrix().to_vec()).unwrap());
            let taps = (0..=3)
                .map(|k| g.param_from(t, &format!("gnn.tap.k{}", k)))
                .collect::<Result<Vec<_>, _>>()?;
            let y = graph_conv_on(g, xv, sv, &taps).map_err(|e| match e {
                GraphError::Diff(d) => d,
                other => panic!("{}", other),
            })?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_err);
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    // row perm[i] of the output is row i of the input
    let f = x.shape()[1];
    let mut out = Tensor::zeros(x.shape());
    for (i, &p) in perm.iter().enumerate() {
        out.data_mut()[p * f..(p + 1) * f].copy_from_slice(x.row(i));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_equivariance(seed in 0u64..10_000, n in 2usize..8, k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = rand_edges(n, 0.5, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let s = GraphShiftOperator::build(&edges, n, ShiftConfig::default()).unwrap();
        let pe: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let ps = GraphShiftOperator::build(&pe, n, ShiftConfig::default()).unwrap();
        let bank = rand_bank(k, 3, 2, &mut rng);
        let x = rand_t(&[n, 3], &mut rng);
        let lhs = graph_conv(&permute_rows(&x, &perm), &ps, &bank).unwrap();
        let rhs = permute_rows(&graph_conv(&x, &s, &bank).unwrap(), &perm);
        prop_assert!(max_abs(&dm(&lhs), &dm(&rhs)) < 1e-6);
    }

    #[test]
    fn identical_banks_reduce_to_homogeneous(seed in 0u64..10_000, n in 2usize..8, k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GraphShiftOperator::build(&rand_edges(n, 0.5, &mut rng), n, ShiftConfig::default()).unwrap();
        let bank = rand_bank(k, 3, 3, &mut rng);
        let assign: Vec<usize> = (0..n).map(|i| (i % 2 == 1) as usize).collect();
        let hb = HeteroFilterBank::new(vec![bank.clone(), bank.clone()], assign).unwrap();
        let x = rand_t(&[n, 3], &mut rng);
        let a = hetero_graph_conv(&x, &s, &hb).unwrap();
        let b = graph_conv(&x, &s, &bank).unwrap();
        prop_assert!(max_abs(&dm(&a), &dm(&b)) < 1e-9);
    }

    #[test]
    fn k_hop_locality(seed in 0u64..10_000, n in 3usize..9, k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GraphShiftOperator::build(&rand_edges(n, 0.3, &mut rng), n, ShiftConfig::default()).unwrap();
        let bank = rand_bank(k, 2, 2, &mut rng);
        let x = rand_t(&[n, 2], &mut rng);
        let base = graph_conv(&x, &s, &bank).unwrap();
        for far in 0..n {
            let mut x2 = x.clone();
            x2.data_mut()[far * 2] += 3.0;
            x2.data_mut()[far * 2 + 1] -= 1.5;
            let y = graph_conv(&x2, &s, &bank).unwrap();
            for i in 0..n {
                if s.hop_distance(far, i).map_or(true, |d| d > k) {
                    prop_assert_eq!(y.row(i), base.row(i));
                }
            }
        }
    }
}
