use gram_core::numerics::gradcheck::{finite_diff_check, CheckConfig};
use gram_core::numerics::{AttentionBlock, ParamStore, RngStream, SwiGluBlock, Tape, Tensor, Var};
use gram_core::Result;

/// Gradient check of `build` over the given parameter tensors, in f64.
fn check(params: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<'_, f64>) -> Result<Var>) -> f64 {
    let grads = {
        let mut tape = Tape::new(&params);
        let loss = build(&mut tape).unwrap();
        tape.backward(loss).unwrap().into_param_grads(&params)
    };
    let mut params = params;
    let eval = |p: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let report = finite_diff_check(&mut params, &grads, eval, &CheckConfig::default()).unwrap();
    report.max_rel_err
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Contracts a tensor-valued output against fixed random weights so every
/// output element influences the scalar.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(RngStream::new(seed, 99).normal_tensor(&shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

#[test]
fn linear_weight_gradient() {
    let mut rng = RngStream::new(1, 0);
    let params = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2]), randn(&mut rng, &[2])];
    let err = check(params, |t| {
        let (x, w, b) = (t.param(0), t.param(1), t.param(2));
        let y = t.linear(x, w, Some(b))?;
        Ok(t.sum_all(y))
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn elementwise_primitives() {
    let mut rng = RngStream::new(2, 0);
    let params = vec![randn(&mut rng, &[3, 5]), randn(&mut rng, &[3, 5])];
    let err = check(params, |t| {
        let (a, b) = (t.param(0), t.param(1));
        let s = t.silu(a);
        let e = t.exp_scaled(b, 0.5);
        let m = t.mul(s, e)?;
        let d = t.sub(m, a)?;
        let c = t.clamp(d, -0.7, 0.9);
        let sc = t.scale(c, 1.7);
        let sum = t.add(sc, b)?;
        project(t, sum, 3)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn rms_norm_and_rope() {
    let mut rng = RngStream::new(3, 0);
    let params = vec![randn(&mut rng, &[5, 8]), randn(&mut rng, &[8])];
    let err = check(params, |t| {
        let (x, g) = (t.param(0), t.param(1));
        let n = t.rms_norm(x, g)?;
        let r = t.rope(n, 2, 10_000.0)?;
        project(t, r, 4)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn attention_primitive() {
    let mut rng = RngStream::new(4, 0);
    let params = vec![randn(&mut rng, &[4, 8]), randn(&mut rng, &[4, 8]), randn(&mut rng, &[4, 8])];
    let err = check(params, |t| {
        let (q, k, v) = (t.param(0), t.param(1), t.param(2));
        let a = t.attention(q, k, v, 2)?;
        project(t, a, 5)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn structural_primitives() {
    let mut rng = RngStream::new(5, 0);
    let params = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[2, 4]), randn(&mut rng, &[1, 4]), randn(&mut rng, &[6, 4])];
    let err = check(params, |t| {
        let (a, b, c, table) = (t.param(0), t.param(1), t.param(2), t.param(3));
        let rows = t.concat_rows(a, b)?;
        let rep = t.repeat_rows(c, 5)?;
        let cols = t.concat_cols(rows, rep)?;
        let sl = t.slice_rows(cols, 1, 4)?;
        let sc = t.slice_cols(cols, 2, 7)?;
        let sc = t.sum_all(sc);
        let g = t.gather(table, &[0, 5, 5])?;
        let g2 = t.concat_cols(g, g)?;
        let m = t.mul(sl, g2)?;
        let mean = t.mean_all(m);
        let sq = t.squared_error(sl, &[0.5; 24])?;
        let total = t.add(mean, sq)?;
        t.add(total, sc)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn loss_primitives() {
    let mut rng = RngStream::new(6, 0);
    let params = (0..5).map(|_| randn(&mut rng, &[3, 4])).collect();
    let err = check(params, |t| {
        let logits = t.param(0);
        let (ce, _) = t.softmax_cross_entropy(logits, &[Some(1), None, Some(3)])?;
        let (mq, lq, mp, lp) = (t.param(1), t.param(2), t.param(3), t.param(4));
        let kl = t.kl_diag(mq, lq, mp, lp, 1.0, 1.0)?;
        let bce = t.bce_logits(mq, &[0.0, 1.0, 0.3, 1.0, 0.0, 0.0, 1.0, 0.5, 0.2, 0.1, 0.9, 1.0])?;
        let s = t.add(ce, kl)?;
        t.add(s, bce)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::<f32>::new(&[]);
    let logits = tape.constant(Tensor::zeros(&[3, 11]));
    let (loss, ignored) = tape.softmax_cross_entropy(logits, &[Some(2), Some(0), Some(10)]).unwrap();
    assert!(!ignored);
    assert!((tape.value(loss).item() - 11f32.ln()).abs() < 1e-6);

    let mut prev = f32::INFINITY;
    for margin in [1.0, 5.0, 20.0] {
        let mut row = vec![0.0f32; 11];
        row[4] = margin;
        let l = tape.constant(Tensor::new(vec![1, 11], row).unwrap());
        let (loss, _) = tape.softmax_cross_entropy(l, &[Some(4)]).unwrap();
        let v = tape.value(loss).item();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-7);

    let (loss, ignored) = tape.softmax_cross_entropy(logits, &[None, None, None]).unwrap();
    assert!(ignored);
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn attention_block_gradient_d16_l4() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngStream::new(7, 0);
    let block = AttentionBlock::new(&mut store, "blk", 16, 4, 32, Some(10_000.0), &mut rng).unwrap();
    let x_idx = store.add("x", rng.normal_tensor(&[4, 16]), false);
    let params = store.tensors().to_vec();
    let err = check(params, |t| {
        let x = t.param(x_idx);
        let y = block.forward(t, x)?;
        project(t, y, 8)
    });
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn swiglu_block_gradient_d16() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngStream::new(8, 0);
    let block = SwiGluBlock::new(&mut store, "blk", 16, 32, &mut rng);
    let x_idx = store.add("x", rng.normal_tensor(&[4, 16]), false);
    let params = store.tensors().to_vec();
    let err = check(params, |t| {
        let x = t.param(x_idx);
        let y = block.forward(t, x)?;
        project(t, y, 9)
    });
    assert!(err < 1e-3, "rel err {err}");
}

fn run_block(block: &AttentionBlock, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::inference(store.tensors());
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

#[test]
fn attention_single_position_is_position_independent() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = RngStream::new(9, 0);
    let with_rope = AttentionBlock::new(&mut store, "a", 16, 4, 32, Some(10_000.0), &mut rng).unwrap();
    let without = AttentionBlock { rope_base: None, ..with_rope.clone() };
    let x = rng.normal_tensor::<f32>(&[1, 16]);
    // a lone token attends only to itself, and rotation at position 0 is the identity
    assert_eq!(run_block(&with_rope, &store, &x), run_block(&without, &store, &x));
}

#[test]
fn attention_without_rope_is_permutation_equivariant() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = RngStream::new(10, 0);
    let block = AttentionBlock::new(&mut store, "a", 16, 4, 32, None, &mut rng).unwrap();
    let x = rng.normal_tensor::<f32>(&[5, 16]);
    let perm = [3, 0, 4, 1, 2];
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let y = run_block(&block, &store, &x);
    let py = run_block(&block, &store, &px);
    for (r, &i) in perm.iter().enumerate() {
        for (a, b) in py.row(r).iter().zip(y.row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn swiglu_block_is_position_wise() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = RngStream::new(11, 0);
    let block = SwiGluBlock::new(&mut store, "s", 16, 32, &mut rng);
    let x = rng.normal_tensor::<f32>(&[4, 16]);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[2 * 16..3 * 16] {
        *v += 1.0;
    }
    let run = |x: &Tensor<f32>| {
        let mut tape = Tape::inference(store.tensors());
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv).unwrap();
        tape.value(y).clone()
    };
    let (y, y2) = (run(&x), run(&x2));
    for r in [0, 1, 3] {
        assert_eq!(y.row(r), y2.row(r));
    }
    assert_ne!(y.row(2), y2.row(2));
}

#[test]
fn stop_grad_blocks_upstream() {
    let params = vec![Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap()];
    let mut tape = Tape::new(&params);
    let p = tape.param(0);
    let a = tape.scale(p, 3.0);
    let s = tape.stop_grad(a);
    let b = tape.mul(s, p).unwrap();
    let loss = tape.sum_all(b);
    let g = tape.backward(loss).unwrap();
    // only the direct path survives: d/dp (stop(3p) * p) = 3p
    assert_eq!(g.param(0).unwrap().data(), &[3.0, 6.0]);
    assert!(g.wrt(a).is_none());
}

#[test]
fn reparam_sample_mean() {
    let n = 1_000_000;
    let mut rng = RngStream::new(12, 0);
    let mut tape = Tape::<f64>::inference(&[]);
    let mu = tape.constant(Tensor::full(&[n], 1.0));
    let lv = tape.constant(Tensor::zeros(&[n]));
    let out = gram_core::numerics::gaussian_reparam(&mut tape, mu, lv, &mut rng).unwrap();
    let mean = tape.value(out).sum_f64() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}
