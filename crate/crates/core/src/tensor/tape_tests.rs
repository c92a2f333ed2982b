use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, probe};
use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn assert_grad<G>(inputs: &[Tensor<f64>], f: G)
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = check(inputs, H, f).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(&t64(&[2, 2], &[1., 2., 3., 4.]));
    let b = t.leaf(&t64(&[2, 1], &[1., 1.]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c), &[3.0, 7.0]);

    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let eye = t64(&[4, 4], &(0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let xv = t.leaf(&x);
    let iv = t.leaf(&eye);
    let y = t.matmul(xv, iv).unwrap();
    assert_eq!(t.value(y), x.data());

    let bad = t.leaf(&Tensor::zeros(&[3, 2]));
    match t.matmul(a, bad) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 2]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients() {
    for s in 0..10 {
        let mut r = rng(100 + s);
        let a = Tensor::randn(&[3, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5, 2], 1.0, &mut r);
        let bt = Tensor::randn(&[4, 5], 1.0, &mut r);
        assert_grad(&[a.clone(), b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        });
        assert_grad(&[a, bt], |t, v| {
            let c = t.matmul_nt(v[0], v[1])?;
            probe(t, c, s)
        });
    }
}

#[test]
fn elementwise_gradients() {
    for s in 0..10 {
        let mut r = rng(200 + s);
        let a = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4, 3], 1.0, &mut r);
        let bias = Tensor::randn(&[3], 1.0, &mut r);
        assert_grad(&[a.clone(), b.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            probe(t, x, s)
        });
        assert_grad(&[a.clone(), b.clone()], |t, v| {
            let x = t.mul(v[0], v[1])?;
            probe(t, x, s)
        });
        assert_grad(&[a.clone()], |t, v| {
            let x = t.scale(v[0], 0.7);
            probe(t, x, s)
        });
        assert_grad(&[a.clone(), bias.clone()], |t, v| {
            let x = t.add_bias(v[0], v[1])?;
            probe(t, x, s)
        });
        assert_grad(&[a.clone()], |t, v| {
            let x = t.relu(v[0]);
            probe(t, x, s)
        });
        assert_grad(&[a.clone()], |t, v| {
            let x = t.silu(v[0]);
            probe(t, x, s)
        });
        assert_grad(&[a.clone(), bias.clone()], |t, v| {
            let x = t.rms_norm(v[0], v[1], 1e-6)?;
            probe(t, x, s)
        });
        assert_grad(&[a.clone(), b.clone()], |t, v| {
            let x = t.concat_rows(&[v[0], v[1]])?;
            let y = t.slice_rows(x, 2, 4)?;
            probe(t, y, s)
        });
    }
}

#[test]
fn structural_op_gradients() {
    for s in 0..10 {
        let mut r = rng(300 + s);
        let table = Tensor::randn(&[6, 4], 1.0, &mut r);
        assert_grad(&[table], |t, v| {
            let x = t.embedding(v[0], &[0, 3, 3, 5])?;
            probe(t, x, s)
        });
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        assert_grad(&[x.clone()], |t, v| {
            let y = t.rope(v[0], 2, &[0, 1, 2, 7, 11], 10_000.0)?;
            probe(t, y, s)
        });
        assert_grad(&[x.clone()], |t, v| {
            let y = t.stack_compress(v[0], 3)?;
            probe(t, y, s)
        });
        assert_grad(&[x], |t, v| {
            let y = t.softmax(v[0], 0.6)?;
            probe(t, y, s)
        });
    }
}

#[test]
fn attention_gradients() {
    for s in 0..10 {
        let mut r = rng(400 + s);
        let q = Tensor::randn(&[7, 8], 1.0, &mut r);
        let k = Tensor::randn(&[7, 8], 1.0, &mut r);
        let v = Tensor::randn(&[7, 8], 1.0, &mut r);
        let past = KvPast {
            k: Arc::new(Tensor::<f64>::randn(&[3, 8], 1.0, &mut r).data().to_vec()),
            v: Arc::new(Tensor::<f64>::randn(&[3, 8], 1.0, &mut r).data().to_vec()),
            len: 3,
        };
        for causal in [true, false] {
            let past = past.clone();
            assert_grad(&[q.clone(), k.clone(), v.clone()], |t, x| {
                let segs = vec![
                    AttnSegment::new(0, 4),
                    AttnSegment {
                        start: 4,
                        len: 3,
                        past: Some(past.clone()),
                    },
                ];
                let o = t.attention(x[0], x[1], x[2], 2, segs, causal)?;
                probe(t, o, s)
            });
        }
    }
}

#[test]
fn masked_cross_entropy_gradients() {
    for s in 0..10 {
        let mut r = rng(500 + s);
        let logits = Tensor::randn(&[5, 7], 2.0, &mut r);
        assert_grad(&[logits], |t, v| {
            t.masked_cross_entropy(v[0], &[1, 6, 0, 3, 3], &[true, false, true, true, false])
        });
    }
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let mut perfect = vec![0.0; 2 * 4];
    perfect[2] = 30.0;
    perfect[4 + 1] = 30.0;
    let l = t.constant(&[2, 4], perfect).unwrap();
    let loss = t.masked_cross_entropy(l, &[2, 1], &[true, true]).unwrap();
    assert!(t.value(loss)[0] < 1e-8);

    let u = t.constant(&[3, 32], vec![0.25; 96]).unwrap();
    let loss = t.masked_cross_entropy(u, &[0, 5, 31], &[true, true, false]).unwrap();
    assert!((t.value(loss)[0] - 32f64.ln()).abs() < 1e-12);
    assert!((t.value(loss)[0] - 3.4657).abs() < 1e-4);

    let mut r = rng(7);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
    let xv = t.leaf(&x);
    let a = t.masked_cross_entropy(xv, &[1, 2, 3, 4], &[true, false, true, true]).unwrap();
    let b = t.masked_cross_entropy(xv, &[1, 5, 3, 4], &[true, false, true, true]).unwrap();
    assert_eq!(t.value(a)[0].to_bits(), t.value(b)[0].to_bits());

    assert!(matches!(
        t.masked_cross_entropy(xv, &[1, 2, 3, 4], &[false; 4]),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn masked_positions_get_no_gradient() {
    let mut t = Tape::<f64>::new();
    let mut r = rng(9);
    let x = t.leaf(&Tensor::randn(&[3, 4], 1.0, &mut r).with_grad(true));
    let loss = t.masked_cross_entropy(x, &[0, 1, 2], &[true, false, true]).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    assert!(g[4..8].iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_properties() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 2], vec![0.0, 3f64.ln()]).unwrap();
    let p = t.softmax(x, 1.0).unwrap();
    let pv = t.value(p);
    assert!((pv[0] - 0.25).abs() < 1e-12 && (pv[1] - 0.75).abs() < 1e-12);
    assert!(matches!(t.softmax(x, 0.0), Err(Error::Param(_))));
    assert!(matches!(t.softmax(x, -1.0), Err(Error::Param(_))));

    let mut r = rng(11);
    for _ in 0..100 {
        let l = Tensor::<f64>::randn(&[1, 13], 3.0, &mut r);
        let lv = t.leaf(&l);
        let p = t.softmax(lv, 0.6).unwrap();
        let pv = t.value(p);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(pv), argmax(l.data()));
        assert!((pv.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(pv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::scalar(3.0).with_grad(true));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
    // Repeated calls accumulate.
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[12.0]);
    t.zero_grad();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);

    let m = t.constant(&[2, 2], vec![1.0; 4]).unwrap();
    assert!(matches!(t.backward(m), Err(Error::Contract(_))));
}

#[test]
fn frozen_leaves_get_no_grad() {
    let mut t = Tape::<f64>::new();
    let w = t.leaf(&t64(&[2, 2], &[1., 2., 3., 4.]));
    let x = t.leaf(&t64(&[1, 2], &[1., -1.]).with_grad(true));
    let y = t.matmul(x, w).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(w).is_none());
    assert_eq!(t.grad(x).unwrap(), &[3.0, 7.0]);
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = u·u + 3u with u = 2x, so f'(x) = (2u + 3)·2.
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::scalar(1.5).with_grad(true));
    let u = t.scale(x, 2.0);
    let uu = t.mul(u, u).unwrap();
    let u3 = t.scale(u, 3.0);
    let f = t.add(uu, u3).unwrap();
    t.backward(f).unwrap();
    assert!((t.grad(x).unwrap()[0] - (2.0 * 3.0 + 3.0) * 2.0).abs() < 1e-12);
}

#[test]
fn no_grad_tape_records_nothing() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.leaf(&Tensor::scalar(2.0).with_grad(true));
    let y = t.mul(x, x).unwrap();
    assert!(!t.requires_grad(y));
    t.backward(y).unwrap();
    assert!(t.grad(x).is_none());
}

#[test]
fn stack_compress_pads_tail() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[5, 1], vec![1., 2., 3., 4., 5.]).unwrap();
    let y = t.stack_compress(x, 2).unwrap();
    assert_eq!(t.shape(y), &[3, 2]);
    assert_eq!(t.value(y), &[1., 2., 3., 4., 5., 0.]);
    assert!(matches!(t.stack_compress(x, 0), Err(Error::Param(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(21);
    let mut t = Tape::<f64>::no_grad().keep_attention();
    let q = t.leaf(&Tensor::randn(&[6, 8], 1.0, &mut r));
    let k = t.leaf(&Tensor::randn(&[6, 8], 1.0, &mut r));
    let v = t.leaf(&Tensor::randn(&[6, 8], 1.0, &mut r));
    let o = t
        .attention(q, k, v, 4, vec![AttnSegment::new(0, 2), AttnSegment::new(2, 4)], true)
        .unwrap();
    let probs = t.attention_probs(o).unwrap();
    assert_eq!(probs.len(), 2 * 4);
    for (i, p) in probs.iter().enumerate() {
        let w = if i < 4 { 2 } else { 4 };
        for row in p.chunks(w) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
