mod common;

use common::{perturb, rel_err, tiny, tiny_samples, total_loss_direction_errors};
use unlearn_core::latentops::AdjacencyOffsets;
use unlearn_core::losses::TermWeights;
use unlearn_core::nets::{Embedder, LatentCode};
use unlearn_core::rng::substream;
use unlearn_core::unlearn::{
    adjacency_unlearn_loss, global_preservation_loss, local_unlearn_loss, run_unlearning, total_loss,
    total_loss_and_grad, Mode, ObjectiveSamples, UnlearnConfig,
};

fn small_cfg() -> UnlearnConfig {
    UnlearnConfig {
        alpha_max: 0.7,
        lambda_l2: 0.3,
        lambda_id: 0.4,
        lambda_adj: 0.8,
        lambda_global: 1.3,
        ..UnlearnConfig::default()
    }
}

#[test]
fn total_gradient_matches_finite_differences_in_every_mode() {
    let base = small_cfg();
    let cases = [
        ("guide", base.clone()),
        ("baseline", UnlearnConfig { mode: Mode::Baseline, ..base.clone() }),
        ("no-id", base.clone().preset_no_id()),
        (
            "distinct adjacency weights",
            UnlearnConfig {
                adjacency_weights: Some(TermWeights { l2: 0.9, per: 0.2, id: 0.6 }),
                ..base.clone()
            },
        ),
    ];
    for (k, (name, cfg)) in cases.into_iter().enumerate() {
        let t = tiny(k as u64);
        let samples = tiny_samples(&t, &cfg, k as u64);
        for (fd, an) in total_loss_direction_errors(&t, &cfg, &samples, 10, 1e-5) {
            assert!(rel_err(fd, an) < 1e-4, "{name}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn adjacency_loss_is_the_mean_of_per_offset_local_losses() {
    let t = tiny(3);
    let cfg = small_cfg();
    let samples = tiny_samples(&t, &cfg, 3);
    let offsets = samples.offsets.unwrap();
    let w = cfg.local_weights();
    let got = adjacency_unlearn_loss(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, &offsets, w).unwrap();
    let by_hand: f64 = offsets
        .offsets
        .iter()
        .map(|d| {
            let shift = |w: &LatentCode| LatentCode(w.0.iter().zip(&d.0).map(|(a, b)| a + b).collect());
            local_unlearn_loss(&t.g_u, &t.g_s, &t.percep, &t.embedder, &shift(&t.w_u), &shift(&t.w_t), w).unwrap()
        })
        .sum::<f64>()
        / offsets.len() as f64;
    assert!((got - by_hand).abs() <= 1e-12 * by_hand.abs().max(1.0), "{got} vs {by_hand}");

    let zero = AdjacencyOffsets::zero(1, t.w_u.dim());
    let adj = adjacency_unlearn_loss(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, &zero, w).unwrap();
    let local = local_unlearn_loss(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, w).unwrap();
    assert_eq!(adj, local);
}

#[test]
fn total_matches_an_independent_recomputation() {
    let t = tiny(4);
    let cfg = small_cfg();
    let samples = tiny_samples(&t, &cfg, 4);
    let (parts, _) =
        total_loss_and_grad(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, &samples, &cfg, false).unwrap();
    let local = local_unlearn_loss(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, cfg.local_weights()).unwrap();
    let adj = adjacency_unlearn_loss(
        &t.g_u,
        &t.g_s,
        &t.percep,
        &t.embedder,
        &t.w_u,
        &t.w_t,
        samples.offsets.as_ref().unwrap(),
        cfg.adjacency_term_weights(),
    )
    .unwrap();
    let global = global_preservation_loss(&t.g_u, &t.g_s, &t.percep, samples.globals.as_ref().unwrap()).unwrap();
    let expected = local + cfg.lambda_adj * adj + cfg.lambda_global * global;
    let got = total_loss(parts, cfg.lambda_adj, cfg.lambda_global);
    assert!((got - expected).abs() <= 1e-7 * expected.abs(), "{got} vs {expected}");
    assert_eq!(total_loss(parts, 0.0, 0.0), parts.local);
}

#[test]
fn all_zero_weights_give_zero_loss_and_gradient() {
    let t = tiny(5);
    let cfg = UnlearnConfig {
        lambda_l2: 0.0,
        lambda_per: 0.0,
        lambda_id: 0.0,
        lambda_adj: 0.0,
        lambda_global: 0.0,
        alpha_max: 0.5,
        ..UnlearnConfig::default()
    };
    let samples = tiny_samples(&t, &cfg, 5);
    let (parts, grads) =
        total_loss_and_grad(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, &samples, &cfg, true).unwrap();
    assert_eq!(total_loss(parts, 0.0, 0.0), 0.0);
    assert!(grads.unwrap().iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn global_loss_grows_with_perturbation_scale_and_ignores_the_embedder() {
    let t = tiny(6);
    let globals: Vec<LatentCode> = tiny_samples(&t, &small_cfg(), 6).globals.unwrap();
    let at = |s: f64| {
        let mut g = t.g_s.clone_generator();
        perturb(&mut g.synthesis, s, 77);
        global_preservation_loss(&g, &t.g_s, &t.percep, &globals).unwrap()
    };
    assert_eq!(at(0.0), 0.0);
    let (small, large) = (at(1e-3), at(1e-2));
    assert!(small > 0.0 && large >= small, "{small} then {large}");

    let cfg = UnlearnConfig { lambda_adj: 0.0, ..small_cfg() };
    let samples = ObjectiveSamples {
        offsets: None,
        globals: Some(globals),
    };
    let other = Embedder::<f64>::new(&t.g_s.config, &mut substream(99, "other-embedder", 0));
    let eval = |e: &Embedder<f64>| {
        total_loss_and_grad(&t.g_u, &t.g_s, &t.percep, e, &t.w_u, &t.w_t, &samples, &cfg, false)
            .unwrap()
            .0
            .global
    };
    assert_eq!(eval(&t.embedder).to_bits(), eval(&other).to_bits());
}

#[test]
fn identical_operands_are_a_fixed_point_of_training() {
    let t = tiny(7);
    let g_u = t.g_s.clone_generator();
    let cfg = UnlearnConfig {
        alpha_max: 0.5,
        ..small_cfg()
    };
    let samples = tiny_samples(&t, &cfg, 7);
    let (parts, grads) =
        total_loss_and_grad(&g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_u, &samples, &cfg, true).unwrap();
    assert!(total_loss(parts, cfg.lambda_adj, cfg.lambda_global).abs() < 1e-15, "{parts:?}");
    let gmax = grads.unwrap().iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(gmax < 1e-12, "gradient {gmax}");

    // A full run whose target is the source: mean at the origin, d = -|w_u|.
    let mean = LatentCode(vec![0.0; t.w_u.dim()]);
    let cfg = UnlearnConfig {
        d: -t.w_u.norm(),
        margin: 0.1,
        iterations: 3,
        ..cfg
    };
    let out = run_unlearning(&t.g_s, &t.percep, &t.embedder, &t.w_u, Some(&mean), &cfg).unwrap();
    for row in &out.record.rows {
        assert!(row.l_total.abs() < 1e-12, "{row:?}");
    }
    // Adam rescales roundoff-level gradients, so a step may move a parameter by
    // at most about lr per iteration.
    let bound = cfg.lr * cfg.iterations as f64;
    let a = out.generator.synthesis.named_params();
    let b = t.g_s.synthesis.named_params();
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        for (p, q) in x.iter().zip(y.iter()) {
            assert!((p - q).abs() <= bound, "{name}: {p} vs {q}");
        }
    }
}

#[test]
fn runs_touch_only_the_synthesis_stage_and_are_deterministic() {
    let t = tiny(8);
    let cfg = UnlearnConfig {
        d: 2.0,
        alpha_max: 0.5,
        margin: 0.1,
        iterations: 4,
        mean_samples: 200,
        lr: 1e-2,
        ..UnlearnConfig::default()
    };
    let a = run_unlearning(&t.g_s, &t.percep, &t.embedder, &t.w_u, None, &cfg).unwrap();
    let b = run_unlearning(&t.g_s, &t.percep, &t.embedder, &t.w_u, None, &cfg).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.record.rows, b.record.rows);
    assert_eq!(a.generator.mapping, t.g_s.mapping);
    assert_eq!(a.generator.renderer, t.g_s.renderer);
    assert_ne!(a.generator.synthesis, t.g_s.synthesis);
    for r in &a.record.rows {
        let sum = r.l_local + cfg.lambda_adj * r.l_adj + cfg.lambda_global * r.l_global;
        assert!((r.l_total - sum).abs() <= 1e-12 * sum.abs().max(1e-300));
    }
}
