//! Differentiable-array substrate: row-major f64 arrays, a reverse-mode
//! tape, and the finite-difference gradient oracle.
//!
//! Convention: forward math runs at 64-bit precision everywhere; trainable
//! state is rounded through f32 after initialization and after each optimizer
//! update so checkpoints (stored as raw f32) round-trip bit-exactly and a
//! resumed run replays the uninterrupted trajectory.

pub mod array;
pub mod gradcheck;
pub mod rope;
pub mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport, InputCheck};
pub use rope::RopePlan;
pub use tape::{AttnSpec, Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MumError;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let id = t.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = t.constant(arr(&[2, 2], &[3.0, -1.0, 2.0, 5.0]));
        let out = t.matmul(id, m).unwrap();
        assert_eq!(t.value(out).data(), t.value(m).data());
    }

    #[test]
    fn matmul_forced_by_definition() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(arr(&[2, 1], &[0.0, 1.0]));
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(MumError::DimensionMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transpose() {
        // d(sum(a·b))/da = 1·bᵀ, checked against the finite-difference oracle
        let mut rng = crate::rng::Rng::new(5);
        let a = Array::from_fn(&[3, 4], |_| rng.normal());
        let b = Array::from_fn(&[4, 2], |_| rng.normal());

        let mut t = Tape::new();
        let av = t.leaf(a.clone(), true);
        let bv = t.constant(b.clone());
        let prod = t.matmul(av, bv).unwrap();
        let root = t.sum_all(prod);
        let grads = t.backward(root).unwrap();
        let da = grads.get(av).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|c| b.at2(j, c)).sum();
                assert!((da.at2(i, j) - expect).abs() < 1e-12);
            }
        }

        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let p = t.matmul(vs[0], vs[1])?;
                Ok(t.sum_all(p))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let big = t.constant(arr(&[2], &[1000.0, 0.0]));
        let y2 = t.softmax(big, 0).unwrap();
        let d = t.value(y2).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one_and_grad_checks() {
        let mut rng = crate::rng::Rng::new(9);
        let x = Array::from_fn(&[5], |_| rng.uniform_in(-3.0, 3.0));
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.softmax(xv, 0).unwrap();
        let sum: f64 = t.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        // scalar through a random fixed projection to exercise the jacobian
        let w = Array::from_fn(&[5], |i| ((i * 7 + 3) % 11) as f64 / 11.0);
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let y = t.softmax(vs[0], 0)?;
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum_all(p))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn layer_norm_zero_variance_row_and_normalized_row() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 4], &[2.5, 2.5, 2.5, 2.5]));
        let g = t.constant(Array::full(&[4], 1.0));
        let b = t.constant(Array::zeros(&[4]));
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        for v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }

        let x2 = t.constant(arr(&[1, 2], &[-1.0, 1.0]));
        let g2 = t.constant(Array::full(&[2], 1.0));
        let b2 = t.constant(Array::zeros(&[2]));
        let y2 = t.layer_norm(x2, g2, b2, 1e-6).unwrap();
        let d = t.value(y2).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_grad_checks() {
        let mut rng = crate::rng::Rng::new(2);
        let x = Array::from_fn(&[2, 8], |_| rng.normal());
        let g = Array::from_fn(&[8], |_| 1.0 + 0.1 * rng.normal());
        let b = Array::from_fn(&[8], |_| 0.1 * rng.normal());
        let w = Array::from_fn(&[2, 8], |i| ((i * 5 + 1) % 13) as f64 / 13.0 - 0.4);
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-6)?;
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum_all(p))
            },
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let sq = t.mul(vs[0], vs[0])?;
                Ok(t.sum_all(sq))
            },
            &[arr(&[2], &[1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report}");

        // analytic gradient is [2, 4]
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let root = t.sum_all(sq);
        let grads = t.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let err = grad_check(
            &|t: &mut Tape, vs: &[Var]| t.mul(vs[0], vs[0]),
            &[arr(&[2], &[1.0, 2.0])],
            1e-5,
        );
        assert!(matches!(err, Err(MumError::Contract { .. })));
    }

    #[test]
    fn grad_check_flags_discontinuity() {
        // |x| has a kink at 0: one-sided differences disagree there
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let a = t.abs(vs[0]);
                Ok(t.sum_all(a))
            },
            &[arr(&[3], &[0.0, 1.0, -2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.inputs[0].non_checkable, vec![0]);
        assert!(report.inputs[0].max_rel_err < 1e-6, "{report}");
    }

    #[test]
    fn attention_grad_checks_with_groups_and_rope() {
        let mut rng = crate::rng::Rng::new(13);
        let t_tokens = 6;
        let w = 8; // 2 heads × head_dim 4
        let q = Array::from_fn(&[t_tokens, w], |_| rng.normal() * 0.5);
        let k = Array::from_fn(&[t_tokens, w], |_| rng.normal() * 0.5);
        let v = Array::from_fn(&[t_tokens, w], |_| rng.normal() * 0.5);
        let positions: Vec<(u32, u32)> = (0..t_tokens as u32).map(|i| (i / 3, i % 3)).collect();
        let wgt = Array::from_fn(&[t_tokens, w], |i| ((i * 3 + 2) % 7) as f64 / 7.0 - 0.5);
        for groups in [vec![(0, 6)], vec![(0, 3), (3, 3)]] {
            let groups_c = groups.clone();
            let positions_c = positions.clone();
            let wgt_c = wgt.clone();
            let report = grad_check(
                &move |t: &mut Tape, vs: &[Var]| {
                    let spec = AttnSpec {
                        heads: 2,
                        groups: groups_c.clone(),
                        rope: Some(RopePlan::new(&positions_c, 4, 100.0)?),
                    };
                    let o = t.attention(vs[0], vs[1], vs[2], &spec)?;
                    let w = t.constant(wgt_c.clone());
                    let p = t.mul(o, w)?;
                    Ok(t.sum_all(p))
                },
                &[q.clone(), k.clone(), v.clone()],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "groups {groups:?}: {report}");
        }
    }

    #[test]
    fn attention_forward_matches_primitive_composition() {
        // one head, one group, no rope: attention must equal
        // softmax(q·kᵀ/√d)·v built from the primitive ops
        let mut rng = crate::rng::Rng::new(41);
        let t_tokens = 5;
        let d = 4;
        let q = Array::from_fn(&[t_tokens, d], |_| rng.normal());
        let k = Array::from_fn(&[t_tokens, d], |_| rng.normal());
        let v = Array::from_fn(&[t_tokens, d], |_| rng.normal());

        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let spec = AttnSpec {
            heads: 1,
            groups: vec![(0, t_tokens)],
            rope: None,
        };
        let fused = tape.attention(qv, kv, vv, &spec).unwrap();

        let s = tape.matmul_nt(qv, kv).unwrap();
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let p = tape.softmax(s, 1).unwrap();
        let composed = tape.matmul(p, vv).unwrap();

        for (a, b) in tape
            .value(fused)
            .data()
            .iter()
            .zip(tape.value(composed).data())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // two heads equal two independent single-head runs on column halves
        let w = 8;
        let q2 = Array::from_fn(&[t_tokens, w], |_| rng.normal());
        let k2 = Array::from_fn(&[t_tokens, w], |_| rng.normal());
        let v2 = Array::from_fn(&[t_tokens, w], |_| rng.normal());
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q2.clone()),
            tape.constant(k2.clone()),
            tape.constant(v2.clone()),
        );
        let spec2 = AttnSpec {
            heads: 2,
            groups: vec![(0, t_tokens)],
            rope: None,
        };
        let fused2 = tape.attention(qv, kv, vv, &spec2).unwrap();
        let out = tape.value(fused2).clone();
        for head in 0..2 {
            let cols = |src: &Array| {
                Array::from_fn(&[t_tokens, 4], |i| {
                    let (r, c) = (i / 4, i % 4);
                    src.data()[r * w + head * 4 + c]
                })
            };
            let mut solo = Tape::new();
            let (qs, ks, vs) = (
                solo.constant(cols(&q2)),
                solo.constant(cols(&k2)),
                solo.constant(cols(&v2)),
            );
            let spec1 = AttnSpec {
                heads: 1,
                groups: vec![(0, t_tokens)],
                rope: None,
            };
            let one = solo.attention(qs, ks, vs, &spec1).unwrap();
            for r in 0..t_tokens {
                for c in 0..4 {
                    let a = out.data()[r * w + head * 4 + c];
                    let b = solo.value(one).data()[r * 4 + c];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rope_equals_pre_rotated_inputs() {
        // rotating q/k inside the op must equal rotating them beforehand
        let mut rng = crate::rng::Rng::new(43);
        let t_tokens = 4;
        let w = 8; // 2 heads, head_dim 4
        let positions: Vec<(u32, u32)> = vec![(0, 0), (0, 3), (2, 1), (5, 5)];
        let q = Array::from_fn(&[t_tokens, w], |_| rng.normal());
        let k = Array::from_fn(&[t_tokens, w], |_| rng.normal());
        let v = Array::from_fn(&[t_tokens, w], |_| rng.normal());

        let plan = RopePlan::new(&positions, 4, 100.0).unwrap();
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let with_rope = tape
            .attention(
                qv,
                kv,
                vv,
                &AttnSpec {
                    heads: 2,
                    groups: vec![(0, t_tokens)],
                    rope: Some(plan.clone()),
                },
            )
            .unwrap();

        let mut qr = q.data().to_vec();
        let mut kr = k.data().to_vec();
        plan.apply(&mut qr, 2, false);
        plan.apply(&mut kr, 2, false);
        let (qv2, kv2) = (
            tape.constant(Array::from_vec(&[t_tokens, w], qr).unwrap()),
            tape.constant(Array::from_vec(&[t_tokens, w], kr).unwrap()),
        );
        let pre_rotated = tape
            .attention(
                qv2,
                kv2,
                vv,
                &AttnSpec {
                    heads: 2,
                    groups: vec![(0, t_tokens)],
                    rope: None,
                },
            )
            .unwrap();
        for (a, b) in tape
            .value(with_rope)
            .data()
            .iter()
            .zip(tape.value(pre_rotated).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn misc_op_grads_check() {
        let mut rng = crate::rng::Rng::new(21);
        let a = Array::from_fn(&[3, 4], |_| rng.normal());
        let b = Array::from_fn(&[4], |_| rng.normal());
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let x = t.add_row(vs[0], vs[1])?;
                let y = t.gelu(x);
                let g = t.gather_rows(y, &[2, 0, 2])?;
                let s = t.scale(g, 0.7);
                let q = t.mul(s, s)?;
                Ok(t.sum_all(q))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn insert_and_concat_grads_check() {
        let mut rng = crate::rng::Rng::new(22);
        let vis = Array::from_fn(&[2, 3], |_| rng.normal());
        let fill = Array::from_fn(&[3], |_| rng.normal());
        let other = Array::from_fn(&[2, 3], |_| rng.normal());
        let report = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let full = t.insert_rows(vs[0], vs[1], &[1, 3], 4)?;
                let cat = t.concat_rows(&[full, vs[2]])?;
                let sq = t.mul(cat, cat)?;
                Ok(t.sum_all(sq))
            },
            &[vis, fill, other],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn cross_entropy_grad_checks() {
        let mut rng = crate::rng::Rng::new(23);
        let logits = Array::from_fn(&[4, 5], |_| rng.normal());
        let targets = vec![Some(2), None, Some(0), Some(4)];
        let report = grad_check(
            &move |t: &mut Tape, vs: &[Var]| t.softmax_cross_entropy(vs[0], &targets),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = crate::rng::Rng::new(31);
        let x = Array::from_fn(&[4, 4], |_| rng.normal());
        let run = |x: &Array| -> Vec<f64> {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = t.softmax(v, 1).unwrap();
            let z = t.matmul(y, v).unwrap();
            t.value(z).data().to_vec()
        };
        assert_eq!(run(&x), run(&x));
    }

    #[test]
    fn constant_graph_has_no_gradients() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2], &[1.0, 2.0]));
        let s = t.sum_all(a);
        let grads = t.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
