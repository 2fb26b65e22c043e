use itt_core::model::{Decoder, ForwardOptions, Model, ModelConfig, Variant};
use itt_core::tensor::{Tape, Tensor};
use itt_core::thinking::{select_tokens, selected_count, Normalization, Selection};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn small_model(variant: Variant, steps: usize, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        mlp_hidden: 32,
        n_layers: 3,
        max_seq_len: 24,
        itt_interval: 1,
        ..ModelConfig::toy()
    }
    .with_variant(variant, steps);
    let mut m = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for tp in m.params.thinking.iter_mut().flatten() {
        for phi in tp.step_encodings.iter_mut().skip(1) {
            *phi = Tensor::randn(phi.shape(), 0.5, &mut rng);
        }
        for r in &mut tp.routers {
            r.weight = Tensor::randn(r.weight.shape(), 1.0, &mut rng);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x0 = tensor(&[4, 5], seed);
        let w0 = tensor(&[5, 3], seed + 1);
        let grads = |ca: f64, cb: f64| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let w = tape.constant(w0.clone());
            let h = x.matmul(&w).unwrap();
            let l1 = h.tanh().unwrap().sum().unwrap();
            let l2 = h.softmax().unwrap().mul(&h).unwrap().sum().unwrap();
            let loss = l1.scale(ca).unwrap().add(&l2.scale(cb).unwrap()).unwrap();
            tape.backward(loss).unwrap();
            x.grad().unwrap()
        };
        let (g1, g2, g) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for i in 0..g.numel() {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn gather_and_scatter_add_are_adjoint(
        seed in 0u64..1000,
        idx in proptest::collection::vec(0usize..7, 1..12),
    ) {
        let x = tensor(&[7, 3], seed);
        let y = tensor(&[idx.len(), 3], seed + 7);
        let tape = Tape::new();
        let gathered = tape.constant(x.clone()).gather_rows(&idx).unwrap().value();
        let scattered = tape.constant(y.clone()).scatter_add_rows(&idx, 7).unwrap().value();
        let lhs = dot(gathered.data(), y.data());
        let rhs = dot(x.data(), scattered.data());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in 0u64..1000) {
        let a = tensor(&[m, k], seed);
        let b = tensor(&[k, n], seed + 3);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                prop_assert!((c.data()[i * n + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn capacity_selection_invariants(
        weights in proptest::collection::vec(0.0f64..1.0, 1..64),
        capacity in 0.01f64..=1.0,
    ) {
        let n = weights.len();
        let sel = select_tokens(&weights, Selection::CapacityPercentile, Normalization::Sigmoid, capacity, 0.5);
        let k = selected_count(capacity, n);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 >= capacity * n as f64 - 1e-9);
        prop_assert_eq!(sel.len(), k);
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let floor = sel.iter().map(|&i| weights[i]).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|i| !sel.contains(i)) {
            prop_assert!(weights[i] <= floor);
        }
    }

    #[test]
    fn threshold_and_top_p_invariants(
        weights in proptest::collection::vec(0.0f64..1.0, 1..64),
        top_p in 0.05f64..1.0,
    ) {
        let th = select_tokens(&weights, Selection::Threshold, Normalization::Sigmoid, 1.0, top_p);
        prop_assert!(th.iter().all(|&i| weights[i] > 0.5));
        prop_assert_eq!(th.len(), weights.iter().filter(|&&w| w > 0.5).count());

        let total: f64 = weights.iter().sum();
        let tp = select_tokens(&weights, Selection::TopP, Normalization::Sigmoid, 1.0, top_p);
        if total > 0.0 {
            let mass: f64 = tp.iter().map(|&i| weights[i]).sum::<f64>() / total;
            prop_assert!(mass >= top_p - 1e-12 || tp.len() == weights.len());
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let tokens: Vec<usize> = b"determinism".iter().map(|&b| b as usize).collect();
    for variant in [Variant::Vanilla, Variant::Loop, Variant::Itt] {
        let a = small_model(variant, 3, 9);
        let b = small_model(variant, 3, 9);
        let (la, ta) = a.logits(&tokens, &ForwardOptions::default()).unwrap();
        let (lb, tb) = b.logits(&tokens, &ForwardOptions::default()).unwrap();
        assert!(la.bitwise_eq(&lb));
        assert_eq!(ta, tb);
    }
}

#[test]
fn decoding_matches_full_forward_under_threshold_gating() {
    let tokens: Vec<usize> = b"incremental decode".iter().map(|&b| b as usize).collect();
    for (variant, steps) in [(Variant::Vanilla, 1), (Variant::Loop, 3), (Variant::Itt, 2), (Variant::Itt, 4)] {
        let m = small_model(variant, steps, 21);
        let (full, _) = m.logits(&tokens, &ForwardOptions::threshold()).unwrap();
        let mut dec = Decoder::new(&m);
        for (i, &t) in tokens.iter().enumerate() {
            let (row, _) = dec.feed(&[t]).unwrap();
            for (a, b) in row.row(0).iter().zip(full.row(i)) {
                assert!((a - b).abs() <= 1e-10, "{variant:?} x{steps} position {i}");
            }
        }
        assert_eq!(dec.position(), tokens.len());
    }
}

#[test]
fn chunked_feeding_matches_single_feed() {
    let tokens: Vec<usize> = b"chunked prefix".iter().map(|&b| b as usize).collect();
    let m = small_model(Variant::Itt, 3, 4);
    let (full, _) = m.logits(&tokens, &ForwardOptions::threshold()).unwrap();
    let mut dec = Decoder::new(&m);
    let (a, _) = dec.feed(&tokens[..5]).unwrap();
    let (b, _) = dec.feed(&tokens[5..]).unwrap();
    for i in 0..tokens.len() {
        let row = if i < 5 { a.row(i) } else { b.row(i - 5) };
        for (x, y) in row.iter().zip(full.row(i)) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}
