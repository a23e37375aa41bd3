use super::*;
use crate::net::NetConfig;
use crate::so3::{quat_exp, UnitQuat};
use crate::zmatrix::InternalCoords;
use std::f64::consts::PI;

fn small_net(seed: u64) -> NetConfig {
    NetConfig {
        hidden_dim: 16,
        num_layers: 2,
        time_embed_dim: 8,
        message_passing: true,
        seed,
    }
}

fn butane_states(n: usize, shift: Vector3<f64>, rng: &mut impl Rng) -> Vec<DecomposedState> {
    (0..n)
        .map(|_| {
            let mode = if rng.random::<bool>() { PI / 3.0 } else { -PI / 3.0 };
            DecomposedState {
                c: shift,
                q: quat_exp(&RotVec::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
                z: InternalCoords {
                    r: vec![1.54; 3],
                    theta: vec![111f64.to_radians(); 2],
                    phi: vec![mode + 0.1 * rng.random_range(-1.0..1.0)],
                },
            }
        })
        .collect()
}

fn butane(n: usize, seed: u64) -> TrainMolecule {
    let ctx = MolContext::new(&MolecularGraph::chain(6, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainMolecule {
        data: butane_states(n, Vector3::new(0.5, -0.3, 0.2), &mut rng),
        ctx,
    }
}

fn perturbed_model(config: NetConfig, seed: u64) -> Model {
    let mut m = Model::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..m.params.num_scalars() {
        let v = m.params.flat_get(k);
        m.params.flat_set(k, v + rng.random_range(-0.1..0.1));
    }
    m.log_sigma_sq = [0.3, -0.2, 0.1];
    m
}

#[test]
fn loss_hand_cases() {
    let t = Vector3::new(3.0, 4.0, 0.0);
    assert_eq!(loss_translation(&[t], &[t]), 0.0);
    assert_eq!(loss_translation(&[Vector3::zeros()], &[t]), 25.0);
    let w = RotVec::new(0.0, 0.0, PI);
    assert_eq!(loss_rotation(&[w], &[w]), 0.0);
    assert!((loss_rotation(&[RotVec::zeros()], &[w]) - PI * PI).abs() < 1e-15);
    assert_eq!(loss_conformation(&[vec![0.1, 0.2]], &[vec![0.1, 0.2]]), 0.0);
    assert!((loss_conformation(&[vec![0.0]], &[vec![-0.2832]]) - 0.0802).abs() < 1e-4);
    let target = vec![vec![Vector3::new(1.0, 0.0, 0.0); 5]];
    assert_eq!(loss_flow(&target, &target), 0.0);
    assert_eq!(loss_flow(&[vec![Vector3::zeros(); 5]], &target), 1.0);
}

#[test]
fn losses_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = || rng.random_range(-2.0..2.0);
    let b = 7;
    let v3 = |r: &mut dyn FnMut() -> f64| Vector3::new(r(), r(), r());
    let (pv, tv): (Vec<_>, Vec<_>) = (0..b).map(|_| (v3(&mut r), v3(&mut r))).unzip();
    let mut expect = 0.0;
    for i in 0..b {
        for k in 0..3 {
            expect += (pv[i][k] - tv[i][k]).powi(2);
        }
    }
    assert!((loss_translation(&pv, &tv) - expect / b as f64).abs() < 1e-12);

    let pw: Vec<RotVec> = pv.iter().map(|v| RotVec(*v)).collect();
    let tw: Vec<RotVec> = tv.iter().map(|v| RotVec(*v)).collect();
    let per: Vec<f64> = (0..b).map(|i| (0..3).map(|k| (pv[i][k] - tv[i][k]).powi(2)).sum()).collect();
    assert!((loss_rotation(&pw, &tw) - per.iter().sum::<f64>() / b as f64).abs() < 1e-12);

    let pc: Vec<Vec<f64>> = (0..b).map(|_| (0..5).map(|_| r()).collect()).collect();
    let tc: Vec<Vec<f64>> = (0..b).map(|_| (0..5).map(|_| r()).collect()).collect();
    let mut expect = 0.0;
    for i in 0..b {
        for k in 0..5 {
            expect += (pc[i][k] - tc[i][k]).powi(2);
        }
    }
    assert!((loss_conformation(&pc, &tc) - expect / b as f64).abs() < 1e-12);

    let n = 4;
    let pf: Vec<Vec<Vector3<f64>>> = (0..b).map(|_| (0..n).map(|_| v3(&mut r)).collect()).collect();
    let tf: Vec<Vec<Vector3<f64>>> = (0..b).map(|_| (0..n).map(|_| v3(&mut r)).collect()).collect();
    let mut expect = 0.0;
    for i in 0..b {
        let mut s = 0.0;
        for a in 0..n {
            for k in 0..3 {
                s += (pf[i][a][k] - tf[i][a][k]).powi(2);
            }
        }
        expect += s / n as f64;
    }
    assert!((loss_flow(&pf, &tf) - expect / b as f64).abs() < 1e-12);
}

#[test]
fn adaptive_weighting() {
    let l = [0.4, 2.0, 7.0];
    assert_eq!(adaptive_total(l, 0.0, [0.0; 3], 1.0), 0.5 * (0.4 + 2.0 + 7.0));
    let base = adaptive_total(l, 0.3, [0.1, 0.2, -0.4], 1.0);
    let doubled = adaptive_total(l, 0.3, [0.1, 0.2, -0.4], 2.0);
    assert!((doubled - base - 0.3).abs() < 1e-15);

    // isolated descent on log σ² reaches σ² = l/2
    let mut s = [0.0; 3];
    for _ in 0..1000 {
        let g = adaptive_gradient(l, s);
        for k in 0..3 {
            s[k] -= 0.1 * g[k];
        }
    }
    for k in 0..3 {
        let sigma_sq = s[k].exp();
        assert!((sigma_sq - l[k] / 2.0).abs() <= 0.01 * l[k] / 2.0, "{k}: {sigma_sq}");
    }
    // gradient against central differences
    let s0 = [0.3, -0.7, 1.1];
    let g = adaptive_gradient(l, s0);
    for k in 0..3 {
        let mut p = s0;
        let mut m = s0;
        p[k] += 1e-6;
        m[k] -= 1e-6;
        let fd = (adaptive_total(l, 0.0, p, 1.0) - adaptive_total(l, 0.0, m, 1.0)) / 2e-6;
        assert!((fd - g[k]).abs() < 1e-8);
    }
}

#[test]
fn constant_field_optimum_is_batch_mean() {
    // a fresh network is the constant field given by the output biases
    let mol = butane(1, 2);
    let model = Model::new(small_net(1)).unwrap();
    let opts = TrainOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = prepare_batch(&opts, &mol, 32, &mut rng).unwrap();
    let mean: Vector3<f64> = samples.iter().map(|s| s.target_v_trans).sum::<Vector3<f64>>() / 32.0;
    let step = flow_matching_step(&model, &mol.ctx, &samples, 1, 1.0).unwrap();
    let g = step.grads.get("trans.out.b").unwrap();
    for k in 0..3 {
        assert!((g[(0, k)] + 2.0 * mean[k]).abs() < 1e-12);
    }
    let mut at_mean = model.clone();
    let b = at_mean.params.get_mut("trans.out.b").unwrap();
    for k in 0..3 {
        b[(0, k)] = mean[k];
    }
    let step = flow_matching_step(&at_mean, &mol.ctx, &samples, 1, 1.0).unwrap();
    assert!(step.grads.get("trans.out.b").unwrap().abs().max() < 1e-12);
    let spread = loss_translation(&vec![mean; 32], &samples.iter().map(|s| s.target_v_trans).collect::<Vec<_>>());
    assert!((step.losses.l_trans - spread).abs() < 1e-12);
}

#[test]
fn losses_vanish_at_their_targets() {
    let mol = butane(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = prepare_batch(&TrainOptions::default(), &mol, 6, &mut rng).unwrap();
    let pv: Vec<_> = samples.iter().map(|s| s.target_v_trans).collect();
    let pw: Vec<_> = samples.iter().map(|s| s.target_omega).collect();
    let pc: Vec<_> = samples.iter().map(|s| s.target_v_conf.clone()).collect();
    assert_eq!(loss_translation(&pv, &pv), 0.0);
    assert_eq!(loss_rotation(&pw, &pw), 0.0);
    assert_eq!(loss_conformation(&pc, &pc), 0.0);
    let pf: Vec<_> = samples
        .iter()
        .map(|s| crate::paths::cartesian_target_velocity(s, &mol.ctx.zspec).unwrap())
        .collect();
    assert_eq!(loss_flow(&pf, &pf), 0.0);
}

fn probe_indices(params: &NetParams, count: usize) -> Vec<usize> {
    let total = params.num_scalars();
    (0..count).map(|p| (p * 7919 + 13) % total).collect()
}

#[test]
fn stage_two_gradients_match_finite_differences() {
    let mol = butane(8, 6);
    let model = perturbed_model(small_net(2), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = prepare_batch(&TrainOptions::default(), &mol, 5, &mut rng).unwrap();
    let step = flow_matching_step(&model, &mol.ctx, &samples, 2, 0.7).unwrap();
    assert!(step.losses.l_flow > 0.0);
    let objective = |p: &NetParams| -> Result<f64> {
        let m = Model { params: p.clone(), ..model.clone() };
        Ok(flow_matching_step(&m, &mol.ctx, &samples, 2, 0.7)?.losses.weighted_total)
    };
    for k in probe_indices(&model.params, 40) {
        let fd = finite_difference(&objective, &model.params, k, 1e-6).unwrap();
        let g = step.grads.flat_get(k);
        assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{:?}: fd {fd} vs {g}", model.params.flat_name(k));
    }
    for k in 0..3 {
        let mut p = model.clone();
        let mut m = model.clone();
        p.log_sigma_sq[k] += 1e-6;
        m.log_sigma_sq[k] -= 1e-6;
        let fd = (flow_matching_step(&p, &mol.ctx, &samples, 2, 0.7).unwrap().losses.weighted_total
            - flow_matching_step(&m, &mol.ctx, &samples, 2, 0.7).unwrap().losses.weighted_total)
            / 2e-6;
        assert!((fd - step.grad_log_sigma_sq[k]).abs() < 1e-6);
    }
}

#[test]
fn stage_one_gradients_match_finite_differences() {
    let mol = butane(8, 9);
    let model = perturbed_model(small_net(3), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = prepare_batch(&TrainOptions::default(), &mol, 5, &mut rng).unwrap();
    let step = flow_matching_step(&model, &mol.ctx, &samples, 1, 1.0).unwrap();
    let part = |p: &NetParams, trunk: bool| -> Result<f64> {
        let m = Model { params: p.clone(), ..model.clone() };
        let l = flow_matching_step(&m, &mol.ctx, &samples, 1, 1.0)?.losses;
        Ok(if trunk { l.l_conf } else { l.weighted_total })
    };
    for k in probe_indices(&model.params, 40) {
        let trunk = NetParams::group_of(model.params.flat_name(k).0) == ParamGroup::Trunk;
        let fd = finite_difference(&|p| part(p, trunk), &model.params, k, 1e-6).unwrap();
        let g = step.grads.flat_get(k);
        assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{:?}: fd {fd} vs {g}", model.params.flat_name(k));
    }
}

fn quick(stage: u8, epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        seed: 5,
        ..StageConfig::new(stage)
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let mol = butane(8, 12);
    let model = perturbed_model(small_net(4), 13);
    let out = train_stage(&quick(1, 0), &TrainOptions::default(), &[mol], &model).unwrap();
    assert_eq!(out.model.params, model.params);
    assert!(out.history.is_empty());
    assert!(quick(1, 0).validate().is_err());
}

#[test]
fn training_is_deterministic() {
    let mol = butane(16, 14);
    let model = Model::new(small_net(5)).unwrap();
    let opts = TrainOptions::default();
    let a = train_stage(&quick(1, 20), &opts, std::slice::from_ref(&mol), &model).unwrap();
    let b = train_stage(&quick(1, 20), &opts, std::slice::from_ref(&mol), &model).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history.len(), 40);
    assert_ne!(a.model.params, model.params);
    let c = train_stage(&StageConfig { seed: 6, ..quick(1, 20) }, &opts, &[mol], &model).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn stages_are_gated() {
    let mol = butane(8, 15);
    let model = Model::new(small_net(6)).unwrap();
    let opts = TrainOptions::default();
    let err = train_stage(&quick(2, 1), &opts, std::slice::from_ref(&mol), &model).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let err = train_stage(&quick(3, 1), &opts, std::slice::from_ref(&mol), &model).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let s1 = train_stage(&quick(1, 1), &opts, std::slice::from_ref(&mol), &model).unwrap().model;
    assert_eq!(s1.stage, 1);
    let s2 = train_stage(&quick(2, 2), &opts, std::slice::from_ref(&mol), &s1).unwrap();
    assert_eq!(s2.model.stage, 2);
    assert!(s2.history.iter().all(|r| r.l_flow.is_some()));
    assert_ne!(s2.model.log_sigma_sq, s1.log_sigma_sq);
    let s3 = train_stage(
        &StageConfig {
            batch_size: 2,
            probes: 2,
            ode_steps: 3,
            ..quick(3, 1)
        },
        &opts,
        &[mol],
        &s2.model,
    )
    .unwrap();
    assert_eq!(s3.model.stage, 3);
    assert!(s3.history.iter().all(|r| r.total.is_finite() && r.l_trans.is_none()));
}

#[test]
fn learns_a_constant_shift() {
    let shift = Vector3::new(2.0, -1.0, 0.5);
    let ctx = MolContext::new(&MolecularGraph::chain(6, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mol = TrainMolecule {
        data: butane_states(16, shift, &mut rng),
        ctx,
    };
    let opts = TrainOptions {
        prior: PriorSpec {
            sigma_trans: 1e-6,
            ..PriorSpec::default()
        },
        ..TrainOptions::default()
    };
    let cfg = StageConfig {
        epochs: 2000,
        batch_size: 16,
        seed: 1,
        ..StageConfig::new(1)
    };
    let out = train_stage(&cfg, &opts, &[mol], &Model::new(small_net(7)).unwrap()).unwrap();
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.l_trans.unwrap()).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.history[..20]), mean(&out.history[out.history.len() - 20..]));
    assert!(first / last >= 100.0, "{first} -> {last}");
}

#[test]
fn runaway_training_is_halted() {
    let mol = butane(16, 17);
    let model = Model::new(small_net(8)).unwrap();
    let cfg = StageConfig {
        learning_rate: 5.0,
        epochs: 200,
        ..quick(1, 0)
    };
    let err = train_stage(&cfg, &TrainOptions::default(), &[mol], &model).unwrap_err();
    assert!(matches!(err.exit_code(), 3 | 4), "{err}");
    assert!(err.to_string().contains("step") || err.to_string().contains("layer"), "{err}");
}

#[test]
fn guard_trips_on_growth() {
    let mut g = DivergenceGuard::new(3, 10.0);
    for (i, v) in [1.0, 1.0, 1.0, 0.5, 0.5, 0.5].iter().enumerate() {
        g.push(*v, false, i).unwrap();
    }
    g.push(10.0, false, 6).unwrap();
    let err = g.push(20.0, false, 7).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("step 7"));
}

#[test]
fn conformation_history_ignores_rigid_frame() {
    let mol = butane(16, 18);
    let r = quat_exp(&RotVec::new(0.3, -1.2, 0.8));
    let moved = TrainMolecule {
        ctx: mol.ctx.clone(),
        data: mol
            .data
            .iter()
            .map(|s| DecomposedState {
                c: r.rotate(&s.c) + Vector3::new(4.0, 1.0, -2.0),
                q: r * s.q,
                z: s.z.clone(),
            })
            .collect(),
    };
    let model = Model::new(small_net(9)).unwrap();
    let opts = TrainOptions::default();
    let a = train_stage(&quick(1, 15), &opts, &[mol], &model).unwrap();
    let b = train_stage(&quick(1, 15), &opts, &[moved], &model).unwrap();
    let la: Vec<f64> = a.history.iter().map(|x| x.l_conf.unwrap()).collect();
    let lb: Vec<f64> = b.history.iter().map(|x| x.l_conf.unwrap()).collect();
    assert_eq!(la, lb);
    assert_ne!(a.history[5].l_trans, b.history[5].l_trans);
    let _ = UnitQuat::IDENTITY;
}

#[test]
fn loss_csv_layout() {
    let rec = LossRecord {
        stage: 3,
        step: 0,
        l_trans: None,
        l_rot: None,
        l_conf: None,
        l_flow: None,
        total: 1.5,
    };
    let mut buf = Vec::new();
    write_loss_csv(&[rec], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "stage,step,l_trans,l_rot,l_conf,l_flow,total\n3,0,,,,,1.5e0\n");
}
