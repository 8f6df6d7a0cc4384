mod common;

use common::{latent, perturbed, tiny, tokens};
use gram_core::model::{Guidance, LatentState, Mode, Model, ModelConfig};
use gram_core::numerics::gradcheck::{finite_diff_check, CheckConfig};
use gram_core::numerics::{RngStream, Tape, Tensor, Var};
use gram_core::objective::{self, DEFAULT_ALPHA};
use gram_core::Result;

struct Case {
    x: Vec<usize>,
    y: Vec<usize>,
    z: LatentState<f64>,
}

fn case(cfg: &ModelConfig, seed: u64) -> Case {
    let mut rng = RngStream::new(seed, 3);
    Case { x: tokens(&mut rng, cfg.seq_len, 1, 4), y: tokens(&mut rng, cfg.seq_len, 1, 4), z: latent(cfg, seed) }
}

/// Surrogate of one posterior-mode supervision step; the noise stream is
/// rebuilt from `noise_seed` on every call so the function is deterministic.
/// Uses the plain KL, whose gradient is the derivative of the value;
/// balancing deliberately reweights the gradient and is checked separately.
fn surrogate(model: &Model, c: &Case, tape: &mut Tape<'_, f64>, truncate: bool, noise_seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(noise_seed, 11);
    let e_x = model.encode(tape, Some(&c.x))?;
    let y_emb = model.embed_target(tape, &c.y)?;
    let h = tape.constant(c.z.h.clone());
    let l = tape.constant(c.z.l.clone());
    let step = model.supervision_step(tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, truncate)?;
    let dec = model.decode(tape, step.h)?;
    let last = step.transitions.last().expect("T >= 1");
    let (nll, _) = tape.softmax_cross_entropy(dec.logits, &objective::loss_targets(&c.y))?;
    let kl = objective::kl_raw(tape, last.posterior.expect("posterior"), last.prior.expect("prior"))?;
    let kl = tape.scale(kl, 0.5);
    tape.add(nll, kl)
}

fn grad_check(params: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<'_, f64>) -> Result<Var>) -> f64 {
    let grads = {
        let mut tape = Tape::new(&params);
        let loss = f(&mut tape).unwrap();
        tape.backward(loss).unwrap().into_param_grads(&params)
    };
    let mut params = params;
    let eval = |p: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let check = CheckConfig { samples: 256, step: 1e-5, ..CheckConfig::default() };
    let report = finite_diff_check(&mut params, &grads, eval, &check).unwrap();
    assert!(report.entries.len() >= 200);
    assert!(report.entries.iter().filter(|e| e.analytic != 0.0).count() > 100, "gradient mostly zero");
    report.max_rel_err
}

fn surrogate_grad_check(truncate: bool) -> f64 {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 5, 0.2);
    let c = case(&cfg, 6);
    if !truncate {
        return grad_check(store.tensors().to_vec(), |tape| surrogate(&model, &c, tape, false, 9));
    }
    // The truncated loss is, as a function of the parameters, the final
    // transition started from the state the earlier transitions reached
    // at the base point. Finite differences of that function are the
    // oracle for the truncated gradient.
    let base = store.tensors().to_vec();
    let detached = || -> Result<(LatentState<f64>, RngStream)> {
        let mut rng = RngStream::new(9, 11);
        let mut tape = Tape::inference(&base);
        let e_x = model.encode(&mut tape, Some(&c.x))?;
        let y_emb = model.embed_target(&mut tape, &c.y)?;
        let (h, l) = (tape.constant(c.z.h.clone()), tape.constant(c.z.l.clone()));
        let tr = model.latent_transition(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng)?;
        Ok((LatentState { h: tape.value(tr.h).clone(), l: tape.value(tr.l).clone() }, rng))
    };
    let analytic_ok = {
        // the truncated step and the detached final transition agree in value
        let mut t1 = Tape::new(&base);
        let a = surrogate(&model, &c, &mut t1, true, 9).unwrap();
        let (z1, mut rng) = detached().unwrap();
        let mut t2 = Tape::new(&base);
        let b = final_transition_loss(&model, &c, &mut t2, &z1, &mut rng).unwrap();
        t1.value(a).item() == t2.value(b).item()
    };
    assert!(analytic_ok);
    let grads = {
        let mut tape = Tape::new(&base);
        let loss = surrogate(&model, &c, &mut tape, true, 9).unwrap();
        tape.backward(loss).unwrap().into_param_grads(&base)
    };
    let mut params = base.clone();
    let eval = |p: &[Tensor<f64>]| -> Result<f64> {
        let (z1, mut rng) = detached()?;
        let mut tape = Tape::new(p);
        let loss = final_transition_loss(&model, &c, &mut tape, &z1, &mut rng)?;
        Ok(tape.value(loss).item())
    };
    let check = CheckConfig { samples: 256, step: 1e-5, ..CheckConfig::default() };
    let report = finite_diff_check(&mut params, &grads, eval, &check).unwrap();
    assert!(report.entries.len() >= 200);
    assert!(report.entries.iter().filter(|e| e.analytic != 0.0).count() > 100, "gradient mostly zero");
    report.max_rel_err
}

fn final_transition_loss(model: &Model, c: &Case, tape: &mut Tape<'_, f64>, z1: &LatentState<f64>, rng: &mut RngStream) -> Result<Var> {
    let e_x = model.encode(tape, Some(&c.x))?;
    let y_emb = model.embed_target(tape, &c.y)?;
    let (h, l) = (tape.constant(z1.h.clone()), tape.constant(z1.l.clone()));
    let tr = model.latent_transition(tape, h, l, e_x, Mode::Posterior, Some(y_emb), rng)?;
    let dec = model.decode(tape, tr.h)?;
    let (nll, _) = tape.softmax_cross_entropy(dec.logits, &objective::loss_targets(&c.y))?;
    let kl = objective::kl_raw(tape, tr.posterior.expect("posterior"), tr.prior.expect("prior"))?;
    let kl = tape.scale(kl, 0.5);
    tape.add(nll, kl)
}

#[test]
fn truncated_surrogate_matches_finite_differences() {
    let err = surrogate_grad_check(true);
    assert!(err < 1e-3, "max rel err {err}");
}

#[test]
fn untruncated_surrogate_matches_finite_differences() {
    let err = surrogate_grad_check(false);
    assert!(err < 1e-3, "max rel err {err}");
}

#[test]
fn balancing_scales_head_gradients() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 5, 0.2);
    let c = case(&cfg, 6);
    let params = store.tensors();
    // KL term of the final transition alone: the posterior head also
    // reaches the reconstruction through the sampled noise.
    let grads = |alpha| {
        let mut tape = Tape::new(params);
        let mut rng = RngStream::new(9, 11);
        let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
        let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
        let (h, l) = (tape.constant(c.z.h.clone()), tape.constant(c.z.l.clone()));
        let step = model.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, true).unwrap();
        let last = step.transitions.last().unwrap();
        let kl = objective::kl_balanced(&mut tape, last.posterior.unwrap(), last.prior.unwrap(), alpha).unwrap();
        tape.backward(kl).unwrap().into_param_grads(params)
    };
    let (g08, g1, g0) = (grads(DEFAULT_ALPHA), grads(1.0), grads(0.0));
    let (prior, posterior) = model.head_param_indices();
    for &i in &prior {
        for (a, b) in g08[i].data().iter().zip(g1[i].data()) {
            assert!((a - DEFAULT_ALPHA * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert!(g0[i].data().iter().all(|&x| x == 0.0));
    }
    for &i in &posterior {
        assert!(g1[i].data().iter().all(|&x| x == 0.0), "posterior head moved at alpha=1");
        for (a, b) in g08[i].data().iter().zip(g0[i].data()) {
            assert!((a - (1.0 - DEFAULT_ALPHA) * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
    assert!(prior.iter().any(|&i| g1[i].data().iter().any(|&x| x != 0.0)));
}

#[test]
fn truncation_equals_detached_final_transition() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 1, 0.2);
    let params = store.tensors();
    let c = case(&cfg, 2);

    let (truncated, non_final_grads) = {
        let mut tape = Tape::new(params);
        let mut rng = RngStream::new(4, 0);
        let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
        let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
        let (h, l) = (tape.constant(c.z.h.clone()), tape.constant(c.z.l.clone()));
        let step = model.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, true).unwrap();
        let dec = model.decode(&mut tape, step.h).unwrap();
        let loss = objective::surrogate_step_loss(&mut tape, &model, &step, dec.logits, &c.y, 1.0, DEFAULT_ALPHA).unwrap().loss;
        let grads = tape.backward(loss).unwrap();
        let first = &step.transitions[0];
        let non_final: Vec<bool> =
            [first.h, first.l, first.u, first.eps].iter().map(|&v| grads.wrt(v).is_some_and(|g| g.data().iter().any(|&x| x != 0.0))).collect();
        (grads.into_param_grads(params), non_final)
    };
    assert_eq!(non_final_grads, vec![false; 4]);

    // Same computation with the first transition run on a separate tape.
    let reference = {
        let mut rng = RngStream::new(4, 0);
        let mut first = Tape::inference(params);
        let e_x = model.encode(&mut first, Some(&c.x)).unwrap();
        let y_emb = model.embed_target(&mut first, &c.y).unwrap();
        let (h, l) = (first.constant(c.z.h.clone()), first.constant(c.z.l.clone()));
        let tr = model.latent_transition(&mut first, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng).unwrap();
        let (h1, l1) = (first.value(tr.h).clone(), first.value(tr.l).clone());

        let mut tape = Tape::new(params);
        let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
        let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
        let (h, l) = (tape.constant(h1), tape.constant(l1));
        let cfg1 = ModelConfig { t_high: 1, ..cfg.clone() };
        let single = Model::build::<f64>(cfg1, &mut RngStream::new(0, 0)).unwrap().0;
        let step = single.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, true).unwrap();
        let dec = single.decode(&mut tape, step.h).unwrap();
        let loss = objective::surrogate_step_loss(&mut tape, &single, &step, dec.logits, &c.y, 1.0, DEFAULT_ALPHA).unwrap().loss;
        tape.backward(loss).unwrap().into_param_grads(params)
    };
    for (a, b) in truncated.iter().zip(&reference) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn without_truncation_early_state_receives_gradient() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 1, 0.2);
    let c = case(&cfg, 2);
    let mut tape = Tape::new(store.tensors());
    let mut rng = RngStream::new(4, 0);
    let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
    let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
    let (h, l) = (tape.constant(c.z.h.clone()), tape.constant(c.z.l.clone()));
    let step = model.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, false).unwrap();
    let dec = model.decode(&mut tape, step.h).unwrap();
    let loss = objective::surrogate_step_loss(&mut tape, &model, &step, dec.logits, &c.y, 1.0, DEFAULT_ALPHA).unwrap().loss;
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(step.transitions[0].h).expect("early state on the graph");
    assert!(g.data().iter().any(|&x| x != 0.0));
}

#[test]
fn carried_state_blocks_gradient_across_steps() {
    // Two steps on one tape with the carried state detached: the second
    // step's loss must not reach the first step's transitions.
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 3, 0.2);
    let params = store.tensors();
    let c = case(&cfg, 4);
    let mut tape = Tape::new(params);
    let mut rng = RngStream::new(8, 0);
    let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
    let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
    let (h, l) = (tape.constant(c.z.h.clone()), tape.constant(c.z.l.clone()));
    let s1 = model.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), &mut rng, true).unwrap();
    let (h1, l1) = (tape.stop_grad(s1.h), tape.stop_grad(s1.l));
    let s2 = model.supervision_step(&mut tape, h1, l1, e_x, Mode::Posterior, Some(y_emb), &mut rng, true).unwrap();
    let dec = model.decode(&mut tape, s2.h).unwrap();
    let loss = objective::surrogate_step_loss(&mut tape, &model, &s2, dec.logits, &c.y, 1.0, DEFAULT_ALPHA).unwrap().loss;
    let grads = tape.backward(loss).unwrap();
    for tr in &s1.transitions {
        for v in [tr.h, tr.u, tr.eps] {
            assert!(grads.wrt(v).map_or(true, |g| g.data().iter().all(|&x| x == 0.0)));
        }
    }
}

#[test]
fn deterministic_mode_has_no_noise() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f32>(cfg.clone(), 2, 0.1);
    let z = latent::<f32>(&cfg, 1);
    let mut tape = Tape::inference(store.tensors());
    let (h, l) = (tape.constant(z.h), tape.constant(z.l));
    let tr = model.high_level_update(&mut tape, h, l, Mode::Deterministic, None, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(tape.value(tr.h), tape.value(tr.u));
}

#[test]
fn prior_and_posterior_share_the_transition() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f32>(cfg.clone(), 2, 0.1);
    let z = latent::<f32>(&cfg, 1);
    let c = case(&cfg, 5);
    let run = |mode: Mode, seed: u64| {
        let mut tape = Tape::inference(store.tensors());
        let e_x = model.encode(&mut tape, Some(&c.x)).unwrap();
        let y_emb = model.embed_target(&mut tape, &c.y).unwrap();
        let (h, l) = (tape.constant(z.h.clone()), tape.constant(z.l.clone()));
        let tr = model.latent_transition(&mut tape, h, l, e_x, mode, Some(y_emb), &mut RngStream::new(seed, 0)).unwrap();
        (tape.value(tr.u).clone(), tape.value(tr.l).clone(), tape.value(tr.h).clone())
    };
    let (u_p, l_p, h_p) = run(Mode::Prior, 1);
    let (u_q, l_q, _) = run(Mode::Posterior, 1);
    let (u_d, l_d, h_d) = run(Mode::Deterministic, 1);
    let (_, _, h_p2) = run(Mode::Prior, 2);
    assert_eq!(u_p, u_q);
    assert_eq!(u_p, u_d);
    assert_eq!(l_p, l_q);
    assert_eq!(l_p, l_d);
    assert_eq!(h_d, u_d);
    assert_ne!(h_p, h_p2);
}

#[test]
fn prior_noise_mean_matches_head_mean() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f64>(cfg.clone(), 8, 0.1);
    let z0 = latent::<f64>(&cfg, 2);
    let mut tape = Tape::inference(store.tensors());
    let (h, l) = (tape.constant(z0.h), tape.constant(z0.l));
    let u = {
        let mut rng = RngStream::new(0, 0);
        model.high_level_update(&mut tape, h, l, Mode::Prior, None, &mut rng).unwrap().u
    };
    let (mu, log_var) = model.prior_dist(&mut tape, u).unwrap().unwrap();
    let (mu, log_var) = (tape.value(mu).clone(), tape.value(log_var).clone());
    let trials = 100_000;
    let mut sums = vec![0.0; mu.len()];
    let mut rng = RngStream::new(4, 0);
    let z = latent::<f64>(&cfg, 2);
    for _ in 0..trials {
        let mut t = Tape::inference(store.tensors());
        let (h, l) = (t.constant(z.h.clone()), t.constant(z.l.clone()));
        let tr = model.high_level_update(&mut t, h, l, Mode::Prior, None, &mut rng).unwrap();
        for (s, v) in sums.iter_mut().zip(t.value(tr.eps).data()) {
            *s += v;
        }
    }
    let mut within = 0;
    for (i, s) in sums.iter().enumerate() {
        let sd = (log_var.data()[i] / 2.0).exp();
        if (s / trials as f64 - mu.data()[i]).abs() < 3.0 * sd / (trials as f64).sqrt() {
            within += 1;
        }
    }
    assert!(within as f64 >= 0.99 * mu.len() as f64, "{within} of {}", mu.len());
}

#[test]
fn decode_reads_only_h() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f32>(cfg.clone(), 2, 0.1);
    let z = latent::<f32>(&cfg, 1);
    let mut tape = Tape::inference(store.tensors());
    let h = tape.constant(z.h);
    let a = model.decode(&mut tape, h).unwrap();
    let b = model.decode(&mut tape, h).unwrap();
    assert_eq!(tape.shape(a.logits), &[cfg.seq_len, cfg.vocab]);
    assert_eq!(tape.shape(a.q), &[1, 2]);
    assert_eq!(tape.value(a.logits), tape.value(b.logits));
}

#[test]
fn encode_is_position_wise() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = Model::build::<f32>(cfg.clone(), &mut RngStream::new(0, 0)).unwrap();
    let mut tape = Tape::inference(store.tensors());
    let x1 = vec![1, 2, 3, 4, 1, 2, 3, 4];
    let mut x2 = x1.clone();
    x2[5] = 4;
    let a = model.encode(&mut tape, Some(&x1)).unwrap();
    let b = model.encode(&mut tape, Some(&x2)).unwrap();
    let (a, b) = (tape.value(a), tape.value(b));
    assert_eq!(a.shape(), &[cfg.positions(), cfg.d_model]);
    for r in 0..cfg.positions() {
        assert_eq!(a.row(r) == b.row(r), r != cfg.n_puzzle + 5, "row {r}");
    }
}

#[test]
fn low_level_refine_is_deterministic() {
    let cfg = tiny(Guidance::Full);
    let (model, store) = perturbed::<f32>(cfg.clone(), 2, 0.1);
    let z = latent::<f32>(&cfg, 1);
    let mut tape = Tape::inference(store.tensors());
    let e_x = model.encode(&mut tape, Some(&[1; 8])).unwrap();
    let (h, l) = (tape.constant(z.h), tape.constant(z.l));
    let a = model.low_level_refine(&mut tape, h, l, e_x).unwrap();
    let b = model.low_level_refine(&mut tape, h, l, e_x).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn parameter_count_is_stable() {
    let count = |seed| Model::build::<f32>(tiny(Guidance::Full), &mut RngStream::new(seed, 0)).unwrap().1.count();
    assert_eq!(count(0), count(1));
    let none = Model::build::<f32>(tiny(Guidance::None), &mut RngStream::new(0, 0)).unwrap().1.count();
    assert!(none < count(0));
}

#[test]
fn paper_config_is_about_ten_million_parameters() {
    let (_, store) = Model::build::<f32>(ModelConfig::paper(), &mut RngStream::new(0, 0)).unwrap();
    let n = store.count() as f64;
    assert!((n - 10.0e6).abs() <= 0.2 * 10.0e6, "{n} parameters");
}
