// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Property checks (1-6) run in-process on small instances. The
//! quantitative checks (7-14) drive the real pipeline on the ETT data in
//! `FFNPROBE_DATA_DIR` (default `<workspace>/data`). Their artifacts are kept
//! under the cargo target directory and reused when their spec hash still
//! matches, so repeated runs only redo the determinism check; set
//! `FFNPROBE_ACCEPTANCE_FRESH=1` to start from scratch. The process exits
//! nonzero on a FAIL only when `FFNPROBE_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ffnprobe_cli::pipeline::{self, CellPaths, TrainSummary};
use ffnprobe_cli::spec::{ExperimentSpec, Stage};
use ffnprobe_cli::tune_allocator;
use ffnprobe_core::data::{DatasetRegistry, SplitRule};
use ffnprobe_core::forecaster::{
    error_sums, revin_denormalize, revin_normalize, ActivationHook, BoundParams, Forecaster, ForecasterConfig,
};
use ffnprobe_core::nn::gradcheck::check;
use ffnprobe_core::nn::{apply_rope, kernels, Graph, RopeTable, Tensor, Var, ROPE_BASE};
use ffnprobe_core::probes::{causal_intervention, dead_latent_rate, latent_stats, top_k, Amplification};
use ffnprobe_core::report::{CellKey, ProbeReport};
use ffnprobe_core::sae::{sae_loss_graph, train_sae, ActivationStore, SaeConfig, SaeParams, UNIT_NORM_TOL};
use ffnprobe_core::trainer::for_each_prediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;

struct Line {
    id: usize,
    pass: bool,
    name: &'static str,
    detail: String,
}

fn line(id: usize, name: &'static str, r: Result<(bool, String)>) -> Line {
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    let l = Line { id, pass, name, detail };
    println!("C{:<2} {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    l
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn data_dir() -> PathBuf {
    std::env::var_os("FFNPROBE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

// ---------------------------------------------------------------- C1

fn c1_gradients() -> Result<(bool, String)> {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> ffnprobe_core::Result<Var>>;
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = Vec::new();
    cases.push((
        "matmul",
        vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)],
        Box::new(|g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum_squares(c))
        }),
    ));
    cases.push((
        "batch_matmul",
        vec![rand_t(&[2, 3, 4], 3), rand_t(&[2, 5, 4], 4)],
        Box::new(|g, v| {
            let c = g.batch_matmul(v[0], v[1], true)?;
            Ok(g.sum_squares(c))
        }),
    ));
    cases.push((
        "bias/add/scale",
        vec![rand_t(&[3, 4], 5), rand_t(&[4], 6), rand_t(&[3, 4], 7)],
        Box::new(|g, v| {
            let a = g.add_bias(v[0], v[1])?;
            let b = g.add(a, v[2])?;
            let c = g.scale(b, 0.7);
            Ok(g.sum_squares(c))
        }),
    ));
    cases.push((
        "gelu",
        vec![rand_t(&[5, 3], 8)],
        Box::new(|g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum_squares(y))
        }),
    ));
    cases.push((
        "relu",
        vec![rand_t(&[5, 3], 9)],
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            Ok(g.sum_squares(y))
        }),
    ));
    let w = rand_t(&[6, 2], 11);
    cases.push((
        "rmsnorm",
        vec![rand_t(&[4, 6], 10), rand_t(&[6], 12)],
        Box::new(move |g, v| {
            let y = g.rmsnorm(v[0], v[1], 1e-6)?;
            let w = g.constant(w.clone());
            let z = g.matmul(y, w)?;
            Ok(g.sum_squares(z))
        }),
    ));
    let table = RopeTable::new(5, 4, ROPE_BASE)?;
    let w = rand_t(&[4, 3], 13);
    cases.push((
        "rope",
        vec![rand_t(&[2, 5, 4], 14)],
        Box::new(move |g, v| {
            let y = g.rope(v[0], &table)?;
            let w = g.constant(w.clone());
            let z = g.matmul(y, w)?;
            Ok(g.sum_squares(z))
        }),
    ));
    let w = rand_t(&[5, 2], 15);
    cases.push((
        "softmax",
        vec![rand_t(&[3, 5], 16)],
        Box::new(move |g, v| {
            let y = g.softmax(v[0]);
            let w = g.constant(w.clone());
            let z = g.matmul(y, w)?;
            Ok(g.sum_squares(z))
        }),
    ));
    let w = rand_t(&[4, 3], 17);
    cases.push((
        "patchify/permute/reshape",
        vec![rand_t(&[2, 12], 18)],
        Box::new(move |g, v| {
            let y = g.patchify(v[0], 4, 2)?;
            let y = g.permute(y, &[1, 0, 2])?;
            let y = g.reshape(y, &[10, 4])?;
            let w = g.constant(w.clone());
            let z = g.matmul(y, w)?;
            Ok(g.sum_squares(z))
        }),
    ));
    cases.push((
        "row/channel affine",
        vec![rand_t(&[4, 3], 19), rand_t(&[2], 20).map(|v| 1.0 + 0.3 * v), rand_t(&[2], 21)],
        Box::new(|g, v| {
            let y = g.row_affine(v[0], &[0.5, 2.0, -1.0, 1.5], &[1.0, 0.0, 3.0, -2.0])?;
            let y = g.channel_affine(y, v[1], v[2], false, 1e-5)?;
            let y = g.channel_affine(y, v[1], v[2], true, 1e-5)?;
            Ok(g.sum_squares(y))
        }),
    ));
    cases.push((
        "dropout",
        vec![rand_t(&[4, 5], 22)],
        Box::new(|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(v[0], 0.3, &mut rng);
            Ok(g.sum_squares(y))
        }),
    ));
    let target = rand_t(&[3, 4], 23);
    cases.push((
        "mse/sse/l1",
        vec![rand_t(&[3, 4], 24)],
        Box::new(move |g, v| {
            let a = g.mse_loss(v[0], &target)?;
            let b = g.row_sum_squared_error(v[0], &target)?;
            let c = g.mean_row_l1(v[0]);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }),
    ));

    // Full forecaster: d_model 4, d_ff 8, 2 windows, 2 patches, 2 channels,
    // with and without a dropout mask.
    for dropout in [false, true] {
        let cfg = ForecasterConfig {
            lookback: 16,
            patch_len: 8,
            stride: 8,
            revin_affine: true,
            ..ForecasterConfig::new(4, 3, 2)
        };
        let mut model = Forecaster::<f64>::new(cfg, 31)?;
        model.params.revin_w = Some(rand_t(&[2], 32).map(|v| 1.0 + 0.3 * v));
        model.params.revin_b = Some(rand_t(&[2], 33).map(|v| 0.2 * v));
        let x = rand_t(&[2, 16, 2], 34).map(|v| 3.0 * v + 1.0);
        let y = rand_t(&[2, 3, 2], 35);
        let params: Vec<Tensor<f64>> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
        cases.push((
            if dropout { "forecaster+dropout" } else { "forecaster" },
            params,
            Box::new(move |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(36);
                let rng = if dropout { Some(&mut rng) } else { None };
                let pred = model.forward_graph(g, &BoundParams(v.to_vec()), &x, None, rng)?;
                g.mse_loss(pred, &y)
            }),
        ));
    }
    let x = rand_t(&[5, 3], 37);
    cases.push((
        "sae loss",
        vec![rand_t(&[3, 4], 38), rand_t(&[4], 39), rand_t(&[4, 3], 40), rand_t(&[3], 41)],
        Box::new(move |g, v| sae_loss_graph(g, v, &x, 0.05)),
    ));

    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, params, build) in &cases {
        let r = check(params, 1e-4, 1e-6, |g, v| build(g, v))?;
        checked += r.checked;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }
    Ok((
        worst.0 < 1e-4,
        format!(
            "{} cases, {checked} gradient entries, max relative error {:.2e} ({})",
            cases.len(),
            worst.0,
            worst.1
        ),
    ))
}

// ---------------------------------------------------------------- C2

fn c2_revin_rope() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::uniform(&[4, 336, 3], 1.0, &mut rng).map(|v| 40.0 * v + 17.0);
    let (z, stats) = revin_normalize(&x)?;
    let back = revin_denormalize(&z, &stats)?;
    let revin_err = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| ((a - b).abs() / a.abs().max(1.0)) as f64)
        .fold(0.0, f64::max);

    let (positions, d) = (64, 8);
    let xr = Tensor::<f64>::uniform(&[positions, d], 1.0, &mut rng);
    let yr = apply_rope(&xr, ROPE_BASE)?;
    let norm_err = (0..positions)
        .map(|p| {
            let n = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n(xr.row(p)) - n(yr.row(p))).abs()
        })
        .fold(0.0, f64::max);
    let rope_at = |v: &[f64], p: usize| -> Result<Vec<f64>> {
        let mut data = vec![0.0; positions * d];
        data[p * d..(p + 1) * d].copy_from_slice(v);
        Ok(apply_rope(&Tensor::new(vec![positions, d], data)?, ROPE_BASE)?.row(p).to_vec())
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rel_err = 0.0f64;
    for shift in [1usize, 5, 17] {
        for _ in 0..20 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (p1, p2) = (rng.random_range(0..40), rng.random_range(0..40));
            let lhs = dot(&rope_at(&q, p1)?, &rope_at(&k, p2)?);
            let rhs = dot(&rope_at(&q, p1 + shift)?, &rope_at(&k, p2 + shift)?);
            rel_err = rel_err.max((lhs - rhs).abs());
        }
    }
    Ok((
        revin_err < 1e-5 && norm_err < 1e-6 && rel_err < 1e-5,
        format!("RevIN roundtrip {revin_err:.1e} (f32), RoPE norm {norm_err:.1e}, relative-position {rel_err:.1e}"),
    ))
}

// ---------------------------------------------------------------- C3

fn c3_self_substitution(model: &Forecaster<f32>, spec: &ExperimentSpec) -> Result<(bool, String)> {
    let ds = spec.registry()?.open("etth1", &spec.data_dir())?;
    let (mut batches, mut bad_record, mut bad_replace) = (0, 0, 0);
    for_each_prediction(model, &ds, ffnprobe_core::data::Partition::Test, 128, || None, |b, plain, _| {
        let mut rec = ActivationHook::record();
        let recorded = model.predict(&b.inputs, Some(&mut rec))?;
        let acts = rec.take_recorded().expect("record hook fires");
        let replaced = model.predict(&b.inputs, Some(&mut ActivationHook::Replace(acts)))?;
        batches += 1;
        bad_record += usize::from(recorded != *plain);
        bad_replace += usize::from(replaced != *plain);
        Ok(())
    })?;
    Ok((
        bad_record == 0 && bad_replace == 0 && batches > 0,
        format!(
            "ETTh1 H96 test set, {batches} batches: record differs in {bad_record}, replace differs in {bad_replace} (bitwise)"
        ),
    ))
}

// ---------------------------------------------------------------- C4

fn c4_unit_norm(store: &ActivationStore) -> Result<(bool, String)> {
    let mut cfg = SaeConfig::new(store.d_ff, 4.0, 0.01, 4);
    cfg.max_steps = Some(200);
    cfg.max_epochs = usize::MAX;
    cfg.patience = usize::MAX;
    let (sae, log) = train_sae::<f32>(store, &cfg)?;
    let dev = log.max_norm_deviation.max(sae.max_decoder_norm_deviation());
    Ok((
        log.steps == 200 && dev <= UNIT_NORM_TOL,
        format!("{} steps on the ETTh1 harvest, max |‖w_dec‖ − 1| = {dev:.2e}", log.steps),
    ))
}

// ---------------------------------------------------------------- C5

fn c5_amplification(model: &Forecaster<f32>, sae: &SaeParams<f32>, spec: &ExperimentSpec) -> Result<(bool, String)> {
    let ds = spec.registry()?.open("etth1", &spec.data_dir())?;
    let stats = latent_stats(model, sae, &ds)?;
    let top = top_k(&stats.sum, 3)?;
    let unit = causal_intervention(model, sae, &ds, &top, 1.0, Amplification::OneAtATime)?;
    let unit_ok = unit.latents.iter().all(|l| l.shift_vs_substitution == 0.0);

    let (sae_z, zero_latent, constructed) = match stats.max.iter().position(|&m| m == 0.0) {
        Some(i) => (sae.clone(), i, false),
        None => {
            let mut s = sae.clone();
            let h = s.d_hidden();
            for r in 0..s.d_ff() {
                s.w_enc.data_mut()[r * h] = 0.0;
            }
            s.b_enc.data_mut()[0] = -1.0;
            (s, 0, true)
        }
    };
    let zero = causal_intervention(model, &sae_z, &ds, &[zero_latent], 5.0, Amplification::OneAtATime)?;
    let zero_ok = zero.latents[0].shift_vs_substitution == 0.0;
    Ok((
        unit_ok && zero_ok,
        format!(
            "factor 1.0 on latents {top:?}: shift vs substitution {:?}; all-zero latent {zero_latent}{} ×5: {}",
            unit.latents.iter().map(|l| l.shift_vs_substitution).collect::<Vec<_>>(),
            if constructed { " (forced)" } else { " (dead in the 4.0x SAE)" },
            zero.latents[0].shift_vs_substitution
        ),
    ))
}

// ---------------------------------------------------------------- C6

fn selection_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    (0..k)
        .map(|_| {
            let mut best = usize::MAX;
            for i in 0..scores.len() {
                if !taken[i] && (best == usize::MAX || scores[i] > scores[best]) {
                    best = i;
                }
            }
            taken[best] = true;
            best
        })
        .collect()
}

fn c6_oracles() -> Result<(bool, String)> {
    const TRIALS: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fails = [0usize; 4];
    let pick = |rng: &mut ChaCha8Rng| -> f64 {
        match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1e-5,
            2 => 2.5,
            _ => rng.random_range(-3.0..3.0),
        }
    };
    for _ in 0..TRIALS {
        // dead-latent census
        let n = rng.random_range(1..60);
        let max: Vec<f64> = (0..n).map(|_| pick(&mut rng)).collect();
        let t = if rng.random_bool(0.5) { 1e-5 } else { rng.random_range(0.0..2.0) };
        let dead = max.iter().filter(|&&m| !(m > t)).count();
        fails[0] += usize::from(dead_latent_rate(&max, t) != 100.0 * dead as f64 / n as f64);

        // top-k ranking
        let k = rng.random_range(0..=n);
        fails[1] += usize::from(top_k(&max, k)? != selection_top_k(&max, k));

        // matmul (integer entries keep every partial sum exact)
        let (m, kk, nn) = (rng.random_range(1..13), rng.random_range(1..13), rng.random_range(1..21));
        let a: Vec<f32> = (0..m * kk).map(|_| rng.random_range(-16i32..16) as f32).collect();
        let b: Vec<f32> = (0..kk * nn).map(|_| rng.random_range(-16i32..16) as f32).collect();
        let mut oracle = vec![0.0f32; m * nn];
        for i in 0..m {
            for j in 0..nn {
                for p in 0..kk {
                    oracle[i * nn + j] += a[i * kk + p] * b[p * nn + j];
                }
            }
        }
        let mut c = vec![0.0f32; m * nn];
        kernels::gemm_nn(&mut c, &a, &b, m, kk, nn);
        let via_graph = ffnprobe_core::nn::matmul(
            &Tensor::new(vec![m, kk], a.clone())?,
            &Tensor::new(vec![kk, nn], b.clone())?,
        )?;
        fails[2] += usize::from(c != oracle || via_graph.data() != &oracle[..]);

        // metric reductions
        let len = rng.random_range(1..200);
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
        let q: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..len {
            se += (p[i] - q[i]) * (p[i] - q[i]);
            ae += (p[i] - q[i]).abs();
        }
        let got = error_sums(&Tensor::new(vec![len], p)?, &Tensor::new(vec![len], q)?)?;
        fails[3] += usize::from(got != (se, ae, len));
    }
    Ok((
        fails == [0; 4],
        format!("{TRIALS} trials each; mismatches census {} / top-k {} / matmul {} / metrics {}", fails[0], fails[1], fails[2], fails[3]),
    ))
}

// ---------------------------------------------------------------- quantitative

fn ett_spec(out: PathBuf, horizons: Vec<usize>, stages: Vec<Stage>) -> ExperimentSpec {
    ExperimentSpec {
        datasets: vec!["etth1".into()],
        horizons,
        seeds: vec![SEED],
        out,
        data_dir: Some(data_dir()),
        jobs: 1,
        stages,
        ..ExperimentSpec::default()
    }
}

fn run_spec(spec: &ExperimentSpec) -> Result<()> {
    let t0 = Instant::now();
    let s = pipeline::run(spec)?;
    if let Some((k, e)) = s.failures.first() {
        bail!("{} H{}: {e:#}", k.dataset, k.horizon);
    }
    let ran = s.cells.iter().flat_map(|c| &c.1).filter(|(_, o)| *o == pipeline::Outcome::Ran).count();
    eprintln!(
        "  pipeline {}: {} cells, {ran} stages ran, {:.0}s",
        spec.out.display(),
        s.cells.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn report_of(spec: &ExperimentSpec, dataset: &str, horizon: usize) -> Result<ProbeReport> {
    let key = CellKey {
        dataset: dataset.into(),
        horizon,
        seed: SEED,
    };
    pipeline::load_report(spec, &key)?.ok_or_else(|| anyhow!("no report for {dataset} H{horizon}"))
}

fn train_summary(spec: &ExperimentSpec, dataset: &str, horizon: usize) -> Result<TrainSummary> {
    let key = CellKey {
        dataset: dataset.into(),
        horizon,
        seed: SEED,
    };
    let path = CellPaths::new(&spec.out, &key).train_summary();
    Ok(serde_json::from_str(&std::fs::read_to_string(&path).with_context(|| path.display().to_string())?)?)
}

fn c7_determinism() -> Result<(bool, String)> {
    let mut outs = Vec::new();
    for run in ["det_a", "det_b"] {
        let dir = work_dir().join(run);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let mut s = ett_spec(dir, vec![96], Stage::ALL.to_vec());
        s.train.max_epochs = 2;
        s.harvest_cap = 50_000;
        s.sae.max_epochs = 3;
        run_spec(&s)?;
        outs.push(s);
    }
    let files = [
        "tables/bundle.json",
        "tables/scaling_raw.csv",
        "cells/etth1/h96/seed42/model.ckpt",
        "cells/etth1/h96/seed42/activations.bin",
        "cells/etth1/h96/seed42/probe.json",
        "cells/etth1/h96/seed42/sweep.json",
    ];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(outs[0].out.join(f))? != std::fs::read(outs[1].out.join(f))? {
            differing.push(f);
        }
    }
    let (a, b) = (train_summary(&outs[0], "etth1", 96)?, train_summary(&outs[1], "etth1", 96)?);
    let logs_equal = a.log.without_timing() == b.log.without_timing();
    Ok((
        differing.is_empty() && logs_equal,
        format!(
            "two fresh ETTh1 H96 runs (all stages, 2 forecaster epochs, 50k-row harvest, 3 SAE epochs, f32, 1 thread): {}",
            if differing.is_empty() && logs_equal {
                "reports, checkpoints, store and training log bit-identical".to_string()
            } else {
                format!("differ in {differing:?}, training logs equal: {logs_equal}")
            }
        ),
    ))
}

fn c8_etth1(summary: &TrainSummary) -> Result<(bool, String)> {
    let t = &summary.test;
    Ok((
        t.mse <= 0.42 && t.mae <= 0.44,
        format!(
            "ETTh1 H96 test MSE {:.4} (≤ 0.42), MAE {:.4} (≤ 0.44); {} epochs, best {}",
            t.mse,
            t.mae,
            summary.log.epochs.len(),
            summary.log.best_epoch
        ),
    ))
}

fn c9_ettm2() -> Result<(bool, String)> {
    let registry = DatasetRegistry::builtin();
    let entry = registry.get("ettm2")?;
    let path = data_dir().join(&entry.path);
    if !path.exists() {
        return Ok((false, format!("{} is not available; ETTm2 H96 cannot be evaluated", path.display())));
    }
    let mut spec = ett_spec(work_dir().join("ettm2"), vec![96], vec![Stage::Train]);
    spec.datasets = vec!["ettm2".into()];
    run_spec(&spec)?;
    let t = train_summary(&spec, "ettm2", 96)?.test;
    Ok((t.mse <= 0.19, format!("ETTm2 H96 test MSE {:.4} (≤ 0.19), MAE {:.4}", t.mse, t.mae)))
}

fn c10_fidelity(r: &ProbeReport) -> Result<(bool, String)> {
    let (s, b) = (
        r.scale(0.5).context("0.5x result")?,
        r.scale(4.0).context("4.0x result")?,
    );
    Ok((
        b.recon_mse < s.recon_mse && (2.0..=12.0).contains(&b.l0),
        format!(
            "recon MSE 4.0x {:.4} vs 0.5x {:.4}; L0 4.0x {:.2} (want [2, 12]), 0.5x {:.2}",
            b.recon_mse, s.recon_mse, b.l0, s.l0
        ),
    ))
}

fn c11_flatness(reports: &[ProbeReport], missing: &[String]) -> Result<(bool, String)> {
    let mut cells = Vec::new();
    for r in reports {
        let gap = r.scaling_gap().with_context(|| format!("{} H{} lacks a scale", r.dataset, r.horizon))?;
        cells.push((format!("{}/{}", r.dataset, r.horizon), gap));
    }
    if cells.is_empty() {
        bail!("no ETT cells available");
    }
    let mean = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    let worst = cells.iter().map(|c| c.1).fold(0.0, f64::max);
    let per: Vec<String> = cells.iter().map(|(k, g)| format!("{k} {g:.3}")).collect();
    let pass = worst < 2.0 && mean < 1.0 && missing.is_empty();
    let mut detail = format!("|deg 0.5x − deg 4.0x| per cell: {}; max {worst:.3} (< 2.0), mean {mean:.3} (< 1.0)", per.join(", "));
    if !missing.is_empty() {
        detail.push_str(&format!("; ETT data missing for {}", missing.join(", ")));
    }
    Ok((pass, detail))
}

fn c12_causal(r: &ProbeReport) -> Result<(bool, String)> {
    let c = r.causal.as_ref().context("causal result")?;
    Ok((
        c.mean_shift < 0.10,
        format!(
            "top-{} latents of the 4.0x SAE at ×{}: mean shift MAE {:.4} (< 0.10), max {:.4}",
            c.latents.len(),
            c.factor,
            c.mean_shift,
            c.max_shift
        ),
    ))
}

fn c13_ablation_sweep(r: &ProbeReport) -> Result<(bool, String)> {
    let z = r.zero_ablation.as_ref().context("zero-ablation result")?;
    let ablation_ok = z.degradation_pct > 0.0 && z.degradation_pct < 30.0;
    let mut sweep_ok = true;
    let mut parts = Vec::new();
    for scale in [0.5, 4.0] {
        let l0: Vec<f64> = [0.1, 0.01, 0.001, 0.0001]
            .iter()
            .map(|&l| r.sweep_l0(scale, l).context("sweep cell"))
            .collect::<Result<_>>()?;
        let ok = l0.windows(2).all(|w| w[1] > w[0] || (w[0] == 0.0 && w[1] == 0.0));
        sweep_ok &= ok;
        parts.push(format!(
            "{scale}x L0 {}",
            l0.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" → ")
        ));
    }
    Ok((
        ablation_ok && sweep_ok,
        format!(
            "ablation {:.4} → {:.4} ({:+.2}%, want (0, 30)); λ 0.1 → 0.0001: {}",
            r.base_mse,
            z.ablated_mse,
            z.degradation_pct,
            parts.join("; ")
        ),
    ))
}

fn c14_large() -> Result<(bool, String)> {
    let reg = DatasetRegistry::builtin();
    let mut notes = Vec::new();
    for name in ["weather", "electricity", "traffic"] {
        let e = reg.get(name)?;
        if e.split_rule != SplitRule::Ratio70_10_20 {
            bail!("{name} is not registered with the 70/10/20 split");
        }
        notes.push(format!("{name} (d_model {})", e.d_model));
    }
    let extended = env_flag("FFNPROBE_EXTENDED");
    if !extended {
        return Ok((
            true,
            format!(
                "registered: {}; excluded from the timed run (set FFNPROBE_EXTENDED=1 for Electricity H96)",
                notes.join(", ")
            ),
        ));
    }
    let path = data_dir().join(&reg.get("electricity")?.path);
    if !path.exists() {
        return Ok((false, format!("extended run requested but {} is missing", path.display())));
    }
    let mut spec = ett_spec(work_dir().join("electricity"), vec![96], vec![Stage::Train]);
    spec.datasets = vec!["electricity".into()];
    run_spec(&spec)?;
    let t = train_summary(&spec, "electricity", 96)?.test;
    Ok((t.mse <= 0.15, format!("Electricity H96 test MSE {:.4} (≤ 0.15)", t.mse)))
}

fn main() -> ExitCode {
    tune_allocator();
    let start = Instant::now();
    if env_flag("FFNPROBE_ACCEPTANCE_FRESH") && work_dir().exists() {
        std::fs::remove_dir_all(work_dir()).expect("clearing acceptance artifacts");
    }
    let mut lines = vec![
        line(1, "gradient checks", c1_gradients()),
        line(2, "RevIN and RoPE identities", c2_revin_rope()),
    ];

    // Full-budget ETTh1 H96 run with every stage; reused across runs.
    let main_spec = ett_spec(work_dir().join("main"), vec![96], Stage::ALL.to_vec());
    let main = run_spec(&main_spec).and_then(|_| {
        let key = CellKey {
            dataset: "etth1".into(),
            horizon: 96,
            seed: SEED,
        };
        let paths = CellPaths::new(&main_spec.out, &key);
        let model = Forecaster::<f32>::load(&paths.model())?;
        let store = ActivationStore::load(&paths.store())?;
        let sae = SaeParams::<f32>::load(&paths.sae(4.0, main_spec.lambda))?.0;
        let report = report_of(&main_spec, "etth1", 96)?;
        let summary = train_summary(&main_spec, "etth1", 96)?;
        Ok((model, store, sae, report, summary))
    });
    let main = main.map_err(|e| format!("{e:#}"));
    let need = |id, name, f: &dyn Fn() -> Result<(bool, String)>| match &main {
        Ok(_) => line(id, name, f()),
        Err(e) => line(id, name, Err(anyhow!("ETTh1 H96 pipeline failed: {e}"))),
    };
    let m = main.as_ref().ok();

    lines.push(need(3, "self-substitution identity", &|| {
        c3_self_substitution(&m.unwrap().0, &main_spec)
    }));
    lines.push(need(4, "unit-norm decoder over 200 steps", &|| c4_unit_norm(&m.unwrap().1)));
    lines.push(need(5, "identity amplification", &|| {
        c5_amplification(&m.unwrap().0, &m.unwrap().2, &main_spec)
    }));
    lines.push(line(6, "brute-force oracles", c6_oracles()));
    lines.push(line(7, "pipeline determinism", c7_determinism()));
    lines.push(need(8, "ETTh1 H96 forecaster accuracy", &|| c8_etth1(&m.unwrap().4)));
    lines.push(line(9, "ETTm2 H96 forecaster accuracy", c9_ettm2()));
    lines.push(need(10, "SAE fidelity ordering", &|| c10_fidelity(&m.unwrap().3)));

    // Flatness over every ETT cell available locally.
    let c11 = (|| -> Result<(bool, String)> {
        let reg = DatasetRegistry::builtin();
        let mut reports = vec![m.ok_or_else(|| anyhow!("ETTh1 H96 pipeline failed"))?.3.clone()];
        let mut missing = Vec::new();
        for ds in ["etth1", "etth2", "ettm1", "ettm2"] {
            if !data_dir().join(&reg.get(ds)?.path).exists() {
                missing.push(ds.to_string());
                continue;
            }
            let horizons: Vec<usize> = if ds == "etth1" { vec![192, 336, 720] } else { vec![96, 192, 336, 720] };
            let mut spec = ett_spec(
                work_dir().join("grid"),
                horizons.clone(),
                vec![Stage::Train, Stage::Harvest, Stage::Sae, Stage::Probe, Stage::Report],
            );
            spec.datasets = vec![ds.into()];
            spec.scales = vec![0.5, 4.0];
            run_spec(&spec)?;
            for h in horizons {
                reports.push(report_of(&spec, ds, h)?);
            }
        }
        c11_flatness(&reports, &missing)
    })();
    lines.push(line(11, "dictionary-scaling flatness", c11));
    lines.push(need(12, "causal shift", &|| c12_causal(&m.unwrap().3)));
    lines.push(need(13, "zero ablation and λ sweep", &|| c13_ablation_sweep(&m.unwrap().3)));
    lines.push(line(14, "large datasets", c14_large()));

    let passed = lines.iter().filter(|l| l.pass).count();
    println!(
        "acceptance: {passed}/{} passed in {:.0}s",
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    if passed < lines.len() && env_flag("FFNPROBE_ACCEPTANCE_STRICT") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
