//! Dense tensors, a reverse-mode tape, and seeded randomness.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::max_gradient_error;
pub use rng::{rand_signs, rand_uniform, randn, Rng};
pub use tape::{sigmoid, softplus, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use proptest::prelude::*;
    use super::Rng;

    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;

    #[test]
    fn matmul_gradient_matches_ones_times_bt() {
        let mut rng = Rng::new(3);
        let a = randn(&mut rng, [5, 7]);
        let b = randn(&mut rng, [7, 3]);
        let mut tape = Tape::new();
        let va = tape.param(a.clone());
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let expected = Tensor::ones([5, 3]).matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in g.get(va).unwrap().data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let err = max_gradient_error(&[a, b], H, FLOOR, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tanh_gradient_at_point_three() {
        let x = Tensor::scalar(0.3);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.tanh(v).unwrap();
        let g = tape.backward(y).unwrap().get(v).unwrap().item().unwrap();
        let numeric = ((0.3 + H).tanh() - (0.3 - H).tanh()) / (2.0 * H);
        assert!((g - numeric).abs() < 1e-7);
    }

    fn two_layer_loss(t: &mut Tape, v: &[Var]) -> Result<Var> {
        // v = [x, w1, b1, w2, b2, y]
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_bias(h, v[2])?;
        let h = t.silu(h)?;
        let o = t.matmul(h, v[3])?;
        let o = t.add_bias(o, v[4])?;
        let d = t.sub(o, v[5])?;
        let sq = t.square(d)?;
        Ok(t.mean(sq))
    }

    #[test]
    fn two_layer_mlp_gradients() {
        let mut rng = Rng::new(5);
        let inputs = vec![
            randn(&mut rng, [4, 3]),
            randn(&mut rng, [3, 6]),
            randn(&mut rng, [6]),
            randn(&mut rng, [6, 2]),
            randn(&mut rng, [2]),
            randn(&mut rng, [4, 2]),
        ];
        let err = max_gradient_error(&inputs, H, FLOOR, two_layer_loss).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn backward_is_linear_over_independent_graphs() {
        let mut rng = Rng::new(9);
        let a = randn(&mut rng, [3, 4]);
        let b = randn(&mut rng, [4, 1]);

        let single = |use_a: bool| {
            let mut t = Tape::new();
            let va = t.param(a.clone());
            let vb = t.param(b.clone());
            let root = if use_a {
                let s = t.square(va).unwrap();
                t.sum(s)
            } else {
                let s = t.tanh(vb).unwrap();
                t.sum(s)
            };
            let g = t.backward(root).unwrap();
            (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone())
        };
        let (ga, _) = single(true);
        let (_, gb) = single(false);

        let mut t = Tape::new();
        let va = t.param(a.clone());
        let vb = t.param(b.clone());
        let sa = t.square(va).unwrap();
        let sa = t.sum(sa);
        let sb = t.tanh(vb).unwrap();
        let sb = t.sum(sb);
        let root = t.add(sa, sb).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(va).unwrap(), &ga);
        assert_eq!(g.get(vb).unwrap(), &gb);
    }

    #[test]
    fn repeated_evaluation_is_bitwise_equal() {
        let mut rng = Rng::new(21);
        let inputs = [randn(&mut rng, [4, 3]),
            randn(&mut rng, [3, 6]),
            randn(&mut rng, [6]),
            randn(&mut rng, [6, 2]),
            randn(&mut rng, [2]),
            randn(&mut rng, [4, 2])];
        let run = || {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
            let root = two_layer_loss(&mut t, &v).unwrap();
            let g = t.backward(root).unwrap();
            (t.value(root).clone(), g.get(v[1]).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    fn unary_kinds() -> impl Strategy<Value = Unary> {
        prop_oneof![
            Just(Unary::Silu),
            Just(Unary::Sigmoid),
            Just(Unary::Tanh),
            Just(Unary::Log),
            Just(Unary::Square),
            Just(Unary::Softplus),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn unary_primitives_match_finite_differences(
            kind in unary_kinds(),
            seed in any::<u64>(),
            n in 1usize..8,
        ) {
            let mut rng = Rng::new(seed);
            let mut x = randn(&mut rng, [n]);
            if kind == Unary::Log {
                x = x.map(|v| v.abs() + 0.5);
            }
            let w = randn(&mut rng, [n]);
            let err = max_gradient_error(&[x, w], H, FLOOR, |t, v| {
                let y = t.unary(kind, v[0])?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }).unwrap();
            prop_assert!(err < 1e-4, "{:?}: {}", kind, err);
        }

        #[test]
        fn structural_primitives_match_finite_differences(
            seed in any::<u64>(),
            rows in 1usize..5,
            cols in 1usize..5,
        ) {
            let mut rng = Rng::new(seed);
            let a = randn(&mut rng, [rows, cols]);
            let b = randn(&mut rng, [rows, cols]);
            let bias = randn(&mut rng, [cols]);
            let row = randn(&mut rng, [1, cols]);
            let s = randn(&mut rng, [1]).reshape(Vec::<usize>::new()).unwrap();
            let err = max_gradient_error(&[a, b, bias, row, s], H, FLOOR, |t, v| {
                let x = t.sub(v[0], v[1])?;
                let x = t.mul(x, v[0])?;
                let x = t.add_bias(x, v[2])?;
                let r = t.repeat_rows(v[3], rows)?;
                let x = t.add(x, r)?;
                let x = t.mul(x, v[4])?;
                let x = t.scale(x, 0.7);
                Ok(t.mean(x))
            }).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }

        #[test]
        fn fused_primitives_match_finite_differences(
            seed in any::<u64>(),
            rows in 1usize..5,
            inner in 1usize..5,
            cols in 1usize..5,
            shared_gate in any::<bool>(),
        ) {
            let mut rng = Rng::new(seed);
            let x = randn(&mut rng, [rows, inner]);
            let w = randn(&mut rng, [inner, cols]);
            let b = randn(&mut rng, [cols]);
            let gate = randn(&mut rng, [if shared_gate { 1 } else { rows }, cols]);
            let err = max_gradient_error(&[x, w, b, gate], H, FLOOR, |t, v| {
                let pre = t.linear(v[0], v[1], v[2])?;
                let y = t.gated_silu(pre, v[3])?;
                let sq = t.square(y)?;
                Ok(t.sum(sq))
            }).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }

        #[test]
        fn fused_primitives_equal_their_compositions(
            seed in any::<u64>(),
            rows in 1usize..6,
            cols in 1usize..6,
        ) {
            let mut rng = Rng::new(seed);
            let x = randn(&mut rng, [rows, 3]);
            let w = randn(&mut rng, [3, cols]);
            let b = randn(&mut rng, [cols]);
            let gate = randn(&mut rng, [1, cols]);
            let mut t = Tape::new();
            let v: Vec<Var> = [&x, &w, &b, &gate].iter().map(|a| t.param((*a).clone())).collect();
            let fused = t.linear(v[0], v[1], v[2]).unwrap();
            let fused = t.gated_silu(fused, v[3]).unwrap();
            let m = t.matmul(v[0], v[1]).unwrap();
            let m = t.add_bias(m, v[2]).unwrap();
            let m = t.silu(m).unwrap();
            let g = t.repeat_rows(v[3], rows).unwrap();
            let plain = t.mul(m, g).unwrap();
            for (a, c) in t.value(fused).data().iter().zip(t.value(plain).data()) {
                prop_assert!((a - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }
}
