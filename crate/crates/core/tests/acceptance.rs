//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use mulcon::attention::{att, att_with_weights, multi_att, MultiHeadParams};
use mulcon::data::{generate, read_dataset, save_dataset, write_dataset, GlyphDatasetConfig, Split};
use mulcon::eval::{average_precision, evaluate, label_embeddings, metrics};
use mulcon::gradcheck::{run_suite, MAX_RELATIVE_ERROR};
use mulcon::labels::LabelMatrix;
use mulcon::losses::{bce_loss, build_anchor_sets, mulcon_con_loss, supcon_image_loss};
use mulcon::model::{EncoderConfig, ModelConfig, Network};
use mulcon::params::ParamSet;
use mulcon::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Tape, Tensor};
use mulcon::training::{init_network, run_phase, run_variant, PhaseSpec, Session, TrainConfig, Variant};
use mulcon::Error;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = started.elapsed();
    check(t <= limit, format!("{what} took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let reports = run_suite(20, 2024).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for r in &reports {
        check(r.instances >= 20, format!("{}: only {} instances", r.name, r.instances))?;
        check(r.passed(), format!("{}: max relative error {:.3e}", r.name, r.max_error))?;
        worst = worst.max(r.max_error);
    }
    for needed in ["end_to_end_mulcon", "end_to_end_backbone", "conv2d", "multi_att_block", "mulcon_con_loss"] {
        check(reports.iter().any(|r| r.name == needed), format!("case {needed} missing"))?;
    }
    within(started, Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "{} cases x 20 instances, worst relative error {worst:.2e} < {MAX_RELATIVE_ERROR:e}, {:.1}s",
        reports.len(),
        started.elapsed().as_secs_f64()
    ))
}

fn loss_values(y: &LabelMatrix, probs: &[f64], z: &[f64], zi: &[f64], d: usize, tau: f64) -> (f64, f64, f64, usize, usize) {
    let (n, l) = (y.rows(), y.labels());
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(&[n, l], probs.to_vec()).unwrap());
    let bce = bce_loss(&mut tape, p, y).unwrap();
    let zv = tape.constant(Tensor::new(&[n, l, d], z.to_vec()).unwrap());
    let (con, cc) = mulcon_con_loss(&mut tape, zv, &build_anchor_sets(y), tau).unwrap();
    let ziv = tape.constant(Tensor::new(&[n, d], zi.to_vec()).unwrap());
    let (sup, sc) = supcon_image_loss(&mut tape, ziv, y, tau).unwrap();
    (tape.value(bce).item(), tape.value(con).item(), tape.value(sup).item(), cc.skipped, sc.skipped)
}

fn loss_oracles() -> Outcome {
    let started = Instant::now();
    let mut r = common::rng(77);
    let mut worst = 0.0f64;
    let mut with_empty_positives = 0;
    let instances = 60;
    for k in 0..instances {
        let n = r.random_range(1..=6);
        let l = r.random_range(1..=4);
        let d = r.random_range(1..=8);
        let tau = [0.2, 0.5, 1.0][k % 3];
        let y = match k {
            0 => LabelMatrix::zeros(n, l),
            1 => LabelMatrix::new(n, l, vec![1; n * l]).unwrap(),
            _ => common::random_labels(n, l, 0.4, &mut r),
        };
        let probs = common::uniform_vec(n * l, 0.0, 1.0, &mut r);
        let (z, zi) = if k % 10 == 2 {
            // every embedding identical
            let u = common::unit_rows(1, d, &mut r);
            (u.repeat(n * l), u.repeat(n))
        } else {
            (common::unit_rows(n * l, d, &mut r), common::unit_rows(n, d, &mut r))
        };
        let (bce, con, sup, cs, ss) = loss_values(&y, &probs, &z, &zi, d, tau);
        let (ocon, ocs) = common::mulcon(&z, &y, d, tau);
        let (osup, oss) = common::supcon(&zi, &y, d, tau);
        let errs = [(bce - common::bce(&probs, &y)).abs(), (con - ocon).abs(), (sup - osup).abs()];
        worst = errs.iter().copied().fold(worst, f64::max);
        check(errs.iter().all(|e| *e <= 1e-10), format!("instance {k} (N={n} L={l} d={d}): errors {errs:?}"))?;
        check(cs == ocs && ss == oss, format!("instance {k}: skipped anchors differ"))?;
        with_empty_positives += (ocs > 0) as usize;
    }
    check(with_empty_positives > 0, "no instance exercised an empty positive set")?;
    within(started, Duration::from_secs(60), "loss oracles")?;
    Ok(format!("{instances} instances, worst error {worst:.1e}, {with_empty_positives} with empty positive sets"))
}

fn attention_invariants() -> Outcome {
    let started = Instant::now();
    let mut r = common::rng(91);
    let (mut norm_err, mut perm_err, mut id_err) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..30 {
        let (nq, nv, d) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..6));
        let q = Tensor::new(&[nq, d], common::uniform_vec(nq * d, -2.0, 2.0, &mut r)).unwrap();
        let kk = Tensor::new(&[nv, d], common::uniform_vec(nv * d, -2.0, 2.0, &mut r)).unwrap();
        let v = Tensor::new(&[nv, d], common::uniform_vec(nv * d, -2.0, 2.0, &mut r)).unwrap();
        let scaled = k % 2 == 0;

        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(kk.clone()), tape.constant(v.clone()));
        let a = att_with_weights(&mut tape, qv, kv, vv, scaled).unwrap();
        for row in tape.value(a.weights).data().chunks(nv) {
            norm_err = norm_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let sm = tape.softmax(kv).unwrap();
        for row in tape.value(sm).data().chunks(d) {
            norm_err = norm_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let mut perm: Vec<usize> = (0..nv).collect();
        perm.rotate_left(k % nv.max(1));
        perm.reverse();
        let pick = |t: &Tensor| -> Tensor {
            let data = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
            Tensor::new(&[nv, d], data).unwrap()
        };
        let (kp, vp) = (tape.constant(pick(&kk)), tape.constant(pick(&v)));
        let permuted = att(&mut tape, qv, kp, vp, scaled).unwrap();
        perm_err = perm_err.max(common::max_abs_diff(tape.value(a.output).data(), tape.value(permuted).data()));

        let mut store = ParamSet::new();
        let p = MultiHeadParams::init(&mut store, "a", d, d, 1, scaled, &mut common::rng(k as u64)).unwrap();
        for id in [p.wq[0], p.wk[0], p.wv[0], p.wo] {
            store.get_mut(id).data_mut().copy_from_slice(Tensor::eye(d).data());
        }
        let vars = store.bind(&mut tape);
        let m = multi_att(&mut tape, qv, kv, vv, &p, &vars).unwrap();
        let oracle = common::att(q.data(), kk.data(), v.data(), nq, nv, d, d, scaled);
        id_err = id_err.max(common::max_abs_diff(tape.value(m).data(), &oracle));
    }
    check(norm_err <= 1e-12, format!("row sums off by {norm_err:e}"))?;
    check(perm_err <= 1e-12, format!("permutation changed output by {perm_err:e}"))?;
    check(id_err <= 1e-10, format!("identity single head differs by {id_err:e}"))?;
    within(started, Duration::from_secs(60), "attention invariants")?;
    Ok(format!("30 instances: row-sum error {norm_err:.1e}, permutation {perm_err:.1e}, h=1 identity {id_err:.1e}"))
}

fn anchor_set_oracle() -> Outcome {
    let started = Instant::now();
    let mut matrices = 0usize;
    for n in 1..=4 {
        for l in 1..=3 {
            let cells = n * l;
            for mask in 0u32..(1 << cells) {
                let data = (0..cells).map(|b| ((mask >> b) & 1) as u8).collect();
                let y = LabelMatrix::new(n, l, data).unwrap();
                let idx = build_anchor_sets(&y);
                let o = common::anchor_sets(&y);
                check(idx.anchors == o.anchors, format!("anchors differ for {n}x{l} mask {mask:b}"))?;
                for a in 0..idx.len() {
                    let pos: Vec<_> = idx.positives[a].iter().map(|&p| idx.anchors[p]).collect();
                    let cand: Vec<_> = idx.candidates(a).map(|b| idx.anchors[b]).collect();
                    check(pos == o.positives[a], format!("P differs for {n}x{l} mask {mask:b} anchor {a}"))?;
                    check(cand == o.candidates[a], format!("A differs for {n}x{l} mask {mask:b} anchor {a}"))?;
                }
                matrices += 1;
            }
        }
    }
    within(started, Duration::from_secs(60), "anchor set enumeration")?;
    Ok(format!("{matrices} label matrices enumerated"))
}

fn metric_oracles() -> Outcome {
    let ap = |s: &[f64], rel: &[bool]| average_precision(s, rel).unwrap().value;
    check((ap(&[0.9, 0.8, 0.7], &[true, true, false]) - 1.0).abs() <= 1e-12, "AP of a perfect ranking")?;
    check((ap(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]) - 5.0 / 6.0).abs() <= 1e-12, "AP 5/6 example")?;
    check((ap(&[0.9, 0.8, 0.7, 0.6], &[false, false, true, false]) - 1.0 / 3.0).abs() <= 1e-12, "AP 1/3 example")?;
    let y = LabelMatrix::from_rows(&[[1, 0, 0], [0, 1, 0], [1, 1, 0]]).unwrap();
    let s = Tensor::new(&[3, 3], vec![0.9, 0.2, 0.3, 0.6, 0.7, 0.1, 0.4, 0.8, 0.2]).unwrap();
    let m = metrics(&s, &y, 0.5).unwrap();
    check((m.map - 11.0 / 12.0).abs() <= 1e-12, format!("mAP {} != 11/12", m.map))?;
    check((m.cf1 - 0.75).abs() <= 1e-12 && (m.of1 - 0.75).abs() <= 1e-12, format!("CF1 {} OF1 {}", m.cf1, m.of1))?;
    check(m.excluded_classes == 1, "class without positives not excluded")?;

    let mut r = common::rng(123);
    for k in 0..100 {
        let (n, l) = (r.random_range(2..12), r.random_range(1..5));
        let y = common::random_labels(n, l, 0.4, &mut r);
        let scores = common::uniform_vec(n * l, -3.0, 3.0, &mut r);
        let sig: Vec<f64> = scores.iter().map(|&v| common::sigmoid(v)).collect();
        let base = metrics(&Tensor::new(&[n, l], sig.clone()).unwrap(), &y, 0.5).unwrap();
        // strictly increasing transform that keeps the 0.5 threshold in place
        let warped: Vec<f64> = sig.iter().map(|p| p * p / (p * p + (1.0 - p) * (1.0 - p))).collect();
        let mono = metrics(&Tensor::new(&[n, l], warped).unwrap(), &y, 0.5).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(k % n);
        perm.swap(0, n - 1);
        let sp: Vec<f64> = perm.iter().flat_map(|&i| sig[i * l..(i + 1) * l].to_vec()).collect();
        let permuted = metrics(&Tensor::new(&[n, l], sp).unwrap(), &y.select(&perm), 0.5).unwrap();
        for col in 0..l {
            let rel: Vec<bool> = (0..n).map(|i| y.get(i, col)).collect();
            let column: Vec<f64> = (0..n).map(|i| scores[i * l + col]).collect();
            if rel.iter().any(|&b| b) {
                check(
                    (ap(&column, &rel) - common::average_precision(&column, &rel)).abs() <= 1e-12,
                    format!("AP oracle mismatch on instance {k}"),
                )?;
                let shifted: Vec<f64> = column.iter().map(|v| 2.0 * v.exp() + 1.0).collect();
                check(ap(&column, &rel) == ap(&shifted, &rel), format!("AP not monotone-invariant on instance {k}"))?;
            }
        }
        for other in [&mono, &permuted] {
            check(
                (base.map - other.map).abs() <= 1e-12 && (base.cf1 - other.cf1).abs() <= 1e-12 && (base.of1 - other.of1).abs() <= 1e-12,
                format!("metrics changed under transform/permutation on instance {k}"),
            )?;
        }
    }
    Ok("hand examples exact; monotone and permutation invariance on 100 instances".into())
}

/// The standard benchmark: default data and model, three training seeds.
struct TrendRun {
    seed: u64,
    backbone: f64,
    bce_only: f64,
    full: f64,
    ratio_bce_only: f64,
    ratio_full: f64,
}

/// Mean pairwise distance between active label embeddings of the same label,
/// divided by the mean distance between those of different labels.
fn intra_inter_ratio(network: &Network, test: &Split) -> f64 {
    let model = network.as_mulcon().expect("mulcon network");
    let g = label_embeddings(model, test, 100).unwrap();
    let (l, d) = (g.shape()[1], g.shape()[2]);
    let mut rows: Vec<(usize, &[f64])> = Vec::new();
    for i in 0..test.len() {
        for j in (0..l).filter(|&j| test.labels().get(i, j)) {
            rows.push((j, &g.data()[(i * l + j) * d..(i * l + j + 1) * d]));
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let dist = rows[a].1.iter().zip(rows[b].1).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if rows[a].0 == rows[b].0 {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra as f64) / (inter / n_inter as f64)
}

fn trend_runs() -> Result<(Vec<TrendRun>, Duration), String> {
    let started = Instant::now();
    let data = GlyphDatasetConfig::default();
    let (train, test) = generate(&data).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let cfg = |variant| TrainConfig { variant, seed, data: data.clone(), ..TrainConfig::default() };
        let err = |e: Error| e.to_string();

        let backbone = run_variant(&cfg(Variant::BackboneBce), &train, Some(&test), None).map_err(err)?;
        let backbone_map = backbone.log.final_metrics.unwrap().map;

        // mulcon-bce-only is exactly the first step of mulcon-full, so step 2 continues from it
        let bce_only = run_variant(&cfg(Variant::MulconBceOnly), &train, Some(&test), None).map_err(err)?;
        let bce_only_map = bce_only.log.final_metrics.as_ref().unwrap().map;
        let full_cfg = cfg(Variant::MulconFull);
        let mut log = bce_only.log.clone();
        let full = run_phase(bce_only.network.clone(), PhaseSpec::finetune(&full_cfg), &train, None, 0, &mut log, None).map_err(err)?;
        let full_map = evaluate(&full, &test, 100).map_err(err)?.0.map;

        let run = TrendRun {
            seed,
            backbone: backbone_map,
            bce_only: bce_only_map,
            full: full_map,
            ratio_bce_only: intra_inter_ratio(&bce_only.network, &test),
            ratio_full: intra_inter_ratio(&full, &test),
        };
        println!(
            "  seed {}: mAP backbone-bce {:.4}, mulcon-bce-only {:.4}, mulcon-full {:.4}; intra/inter ratio {:.4} -> {:.4} ({:.0}s)",
            run.seed,
            run.backbone,
            run.bce_only,
            run.full,
            run.ratio_bce_only,
            run.ratio_full,
            started.elapsed().as_secs_f64()
        );
        runs.push(run);
    }
    Ok((runs, started.elapsed()))
}

fn table_trend(runs: &[TrendRun], elapsed: Duration) -> Outcome {
    let mean = |f: fn(&TrendRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (full, bce_only, backbone) = (mean(|r| r.full), mean(|r| r.bce_only), mean(|r| r.backbone));
    let summary = format!(
        "mean mAP mulcon-full {full:.4} >= mulcon-bce-only {bce_only:.4} >= backbone-bce {backbone:.4}, gap {:.4}, {:.0}s",
        full - backbone,
        elapsed.as_secs_f64()
    );
    check(full >= bce_only && bce_only >= backbone, format!("ordering violated: {summary}"))?;
    check(full - backbone >= 0.01, format!("gap below 0.01: {summary}"))?;
    check(full >= 0.90, format!("mulcon-full below 0.90: {summary}"))?;
    check(elapsed <= Duration::from_secs(45 * 60), format!("over the 45 min budget: {summary}"))?;
    Ok(summary)
}

fn distinctiveness(runs: &[TrendRun]) -> Outcome {
    for r in runs {
        check(
            r.ratio_full < r.ratio_bce_only,
            format!("seed {}: ratio {:.4} (mulcon-full) not below {:.4} (mulcon-bce-only)", r.seed, r.ratio_full, r.ratio_bce_only),
        )?;
    }
    let shown: Vec<String> = runs.iter().map(|r| format!("{:.4} < {:.4}", r.ratio_full, r.ratio_bce_only)).collect();
    Ok(format!("intra/inter distance ratio, mulcon-full vs mulcon-bce-only: {}", shown.join(", ")))
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
    cfg.data.train_count = 32;
    cfg.data.test_count = 8;
    cfg.model = ModelConfig {
        encoder: EncoderConfig { channels: vec![8, 8, 16, 16], ..EncoderConfig::default() },
        embed_dim: 16,
        heads: 2,
        proj_dim: 8,
        ..ModelConfig::default()
    };
    cfg.pretrain.epochs = 3;
    cfg.pretrain.batch_size = 8;
    cfg.finetune.epochs = 3;
    cfg.finetune.batch_size = 8;
    cfg
}

fn determinism_and_resume() -> Outcome {
    let err = |e: Error| e.to_string();
    let cfg = small_config();
    let (train, _) = generate(&cfg.data).map_err(err)?;
    let a = run_variant(&cfg, &train, None, None).map_err(err)?;
    let b = run_variant(&cfg, &train, None, None).map_err(err)?;
    check(a.log.steps == b.log.steps, "repeated runs logged different losses")?;
    check(a.network == b.network, "repeated runs ended with different parameters")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for spec in [PhaseSpec::pretrain(&cfg), PhaseSpec::finetune(&cfg)] {
        let network = init_network(&cfg).map_err(err)?;
        let mut whole = Session::new(network.clone(), spec.clone(), &train).map_err(err)?;
        let total = whole.total_steps();
        let mut uninterrupted = Vec::new();
        while !whole.is_finished() {
            uninterrupted.push(whole.step().map_err(err)?);
        }
        let mut first = Session::new(network, spec.clone(), &train).map_err(err)?;
        let mut resumed = Vec::new();
        for _ in 0..total / 2 {
            resumed.push(first.step().map_err(err)?);
        }
        let path = dir.path().join("mid.ckpt");
        first.checkpoint().save(&path).map_err(err)?;
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let mut second = Session::resume(init_network(&cfg).map_err(err)?, spec, &train, &ckpt).map_err(err)?;
        while !second.is_finished() {
            resumed.push(second.step().map_err(err)?);
        }
        check(uninterrupted == resumed, "resumed loss sequence differs")?;
        check(whole.network == second.network, "resumed parameters differ")?;
    }
    Ok(format!("{} logged steps identical across runs; Adam and SGD phases resume exactly", a.log.steps.len()))
}

fn format_round_trips() -> Outcome {
    let err = |e: Error| e.to_string();
    let cfg = small_config();
    let (train, _) = generate(&cfg.data).map_err(err)?;
    let mut first = Vec::new();
    write_dataset(&mut first, &train).map_err(err)?;
    let mut second = Vec::new();
    write_dataset(&mut second, &read_dataset(&mut first.as_slice()).map_err(err)?).map_err(err)?;
    check(first == second, "dataset bytes changed after a round trip")?;

    let mut session = Session::new(init_network(&cfg).map_err(err)?, PhaseSpec::finetune(&cfg), &train).map_err(err)?;
    session.step().map_err(err)?;
    let ckpt = session.checkpoint();
    let mut c1 = Vec::new();
    write_checkpoint(&mut c1, &ckpt).map_err(err)?;
    let loaded = read_checkpoint(&mut c1.as_slice()).map_err(err)?;
    let mut c2 = Vec::new();
    write_checkpoint(&mut c2, &loaded).map_err(err)?;
    check(c1 == c2 && loaded == ckpt, "checkpoint bytes changed after a round trip")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("train.mlgd");
    save_dataset(&train, &path).map_err(err)?;
    check(std::fs::read(&path).map_err(|e| e.to_string())? == first, "saved dataset differs from serialized bytes")?;

    let dataset = |b: &[u8]| read_dataset(&mut &b[..]).map(|_| ());
    let checkpoint = |b: &[u8]| read_checkpoint(&mut &b[..]).map(|_| ());
    let readers: [(&str, &Vec<u8>, &dyn Fn(&[u8]) -> mulcon::Result<()>); 2] =
        [("dataset", &first, &dataset), ("checkpoint", &c1, &checkpoint)];
    for (name, bytes, read) in readers {
        for corrupt in [0usize, 4] {
            let mut bad = bytes.clone();
            bad[corrupt] ^= 0x5a;
            check(matches!(read(&bad), Err(Error::Format(_))), format!("corrupted {name} byte {corrupt} not a format error"))?;
        }
        check(matches!(read(&bytes[..bytes.len() - 3]), Err(Error::Format(_))), format!("truncated {name} not a format error"))?;
    }
    Ok(format!("dataset ({} bytes) and checkpoint ({} bytes) round-trip exactly; corruption detected", first.len(), c1.len()))
}

fn report(id: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(msg) => println!("PASS {id} {name}: {msg}"),
        Err(msg) => {
            *failures += 1;
            println!("FAIL {id} {name}: {msg}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report(1, "gradient suite", gradient_suite(), &mut failures);
    report(2, "loss oracles", loss_oracles(), &mut failures);
    report(3, "attention invariants", attention_invariants(), &mut failures);
    report(4, "anchor set enumeration", anchor_set_oracle(), &mut failures);
    report(5, "metric oracles", metric_oracles(), &mut failures);
    println!("  training the desk-scale benchmark (3 seeds x backbone-bce, mulcon-bce-only, mulcon-full)");
    match trend_runs() {
        Ok((runs, elapsed)) => {
            report(6, "benchmark trend", table_trend(&runs, elapsed), &mut failures);
            report(7, "embedding distinctiveness", distinctiveness(&runs), &mut failures);
        }
        Err(e) => {
            report(6, "benchmark trend", Err(e.clone()), &mut failures);
            report(7, "embedding distinctiveness", Err(e), &mut failures);
        }
    }
    report(8, "determinism and resume", determinism_and_resume(), &mut failures);
    report(9, "format round trips", format_round_trips(), &mut failures);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
