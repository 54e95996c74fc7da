use serde_json::json;

use zorba::config::ExperimentConfig;
use zorba::experiment::{build_federation, resolve_activation, rounds_to_target, run_experiment};
use zorba::federation::{replay_trace, Scheme};
use zorba::workloads::{Backend, Objective};
use zorba::Error;

fn quad_cfg(scheme: &str, rounds: usize) -> ExperimentConfig {
    serde_json::from_value(json!({
        "scheme": scheme,
        "model": {"backend": "quadratic", "blocks": 4, "block_dim": 8, "noise_sigma": 0.0},
        "clients": 4, "rounds": rounds, "q": 8, "pool_size": 1024, "eta": 4.0,
        "eval_interval": 1, "sweep_samples": 20, "trace": true
    }))
    .unwrap()
}

#[test]
fn desynchronized_client_is_a_protocol_violation() {
    let cfg = quad_cfg("zorba", 3);
    let a = resolve_activation(&cfg, None).unwrap();
    let (mut fed, _) = build_federation(&cfg, a).unwrap();
    fed.run_round(Scheme::Zorba).unwrap();
    fed.clients[2].params[5] += 1e-9;
    let err = fed.run_round(Scheme::Zorba).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation { round: 2, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn per_round_communication_by_scheme() {
    let (n, q, m, d) = (4u64, 8u64, 4u64, 32u64);
    let expect = [
        (Scheme::Zorba, n * q, q * m),
        (Scheme::Decomfl, n * q, q),
        (Scheme::Fedzo, n * d, d),
        (Scheme::Fedit, n * d, d),
    ];
    for (scheme, up, down) in expect {
        let mut cfg = quad_cfg(scheme.name(), 2);
        cfg.scheme = scheme;
        let a = resolve_activation(&cfg, None).unwrap();
        let (mut fed, _) = build_federation(&cfg, a).unwrap();
        let rec = fed.run_round(scheme).unwrap();
        assert_eq!((rec.comm.up_scalars, rec.comm.down_scalars), (up, down), "{scheme}");
    }
}

#[test]
fn trace_replays_from_seeds_and_scalars_alone() {
    let mut cfg = quad_cfg("zorba", 25);
    cfg.allocator.fixed = Some(vec!["1100".into(), "0110".into(), "0011".into(), "1001".into()]);
    let out = run_experiment(&cfg, None).unwrap();
    let layout = cfg.build_model().unwrap().layout().clone();
    let replayed = replay_trace(
        &layout,
        &out.initial_params,
        &out.trace,
        cfg.eta,
        cfg.perturbation,
        Some(&out.activation),
    )
    .unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&replayed), bits(&out.final_params));
}

/// Each block is pulled toward the mean target of the clients that activate
/// it. Other blocks' gradients leak into every scalar, so the iterates keep
/// fluctuating around that point; their running average settles on it.
#[test]
fn heterogeneous_activation_centers_on_the_activation_weighted_point() {
    let rows = ["1100", "0110", "0011", "1001"];
    let mut cfg = quad_cfg("zorba", 0);
    cfg.eta = 0.5;
    cfg.allocator.fixed = Some(rows.iter().map(|r| r.to_string()).collect());
    let a = resolve_activation(&cfg, None).unwrap();
    let (mut fed, _) = build_federation(&cfg, a.clone()).unwrap();
    let (burn_in, kept) = (1000, 4000);
    let mut mean = vec![0.0; fed.server.params.len()];
    for t in 0..burn_in + kept {
        fed.run_round(Scheme::Zorba).unwrap();
        if t >= burn_in {
            for (s, w) in mean.iter_mut().zip(&fed.server.params) {
                *s += w / kept as f64;
            }
        }
    }
    let Backend::Quadratic(q) = fed.model.backend() else { unreachable!() };
    let mut err2 = 0.0;
    let mut spread2 = 0.0;
    let global = q.mean_target();
    for (m, range) in q.layout().ranges().enumerate() {
        let active: Vec<usize> = (0..a.clients()).filter(|&n| a.get(m, n)).collect();
        for i in range {
            let expected = active.iter().map(|&n| q.targets()[n][i]).sum::<f64>() / active.len() as f64;
            err2 += (mean[i] - expected).powi(2);
            spread2 += (global[i] - expected).powi(2);
        }
    }
    // much closer to the activation-weighted point than that point is to the global optimum
    assert!(err2.sqrt() < 0.1 * spread2.sqrt(), "{} vs {}", err2.sqrt(), spread2.sqrt());
}

/// Golden run: `N = 4`, `d = 32`, full activation. Set `ZORBA_BLESS=1` to rewrite.
#[test]
fn golden_quadratic_run() {
    let cfg = quad_cfg("zorba", 120);
    let out = run_experiment(&cfg, None).unwrap();
    let fresh = json!({
        "rounds_to_1e-3": rounds_to_target(&out.rows, 1e-3, true),
        "final_digest": out.trace.last().unwrap().params_digest,
        "final_suboptimality": format!("{:.12e}", out.rows.last().unwrap().eval_metric.unwrap()),
    });
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/quadratic_run.json");
    if std::env::var_os("ZORBA_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&fresh).unwrap() + "\n").unwrap();
    }
    let golden: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(golden, fresh);
}
