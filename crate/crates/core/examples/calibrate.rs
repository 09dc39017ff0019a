// Scratch calibration runner (not part of the deliverable test suite):
// measures the desk-benchmark quantities the acceptance suite asserts.

use mvfuzz::config::RunConfig;
use mvfuzz::metrics::{division_rates, fpr95};
use mvfuzz::pipeline::*;

fn benchmark_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.views = 3;
    cfg.data.classes = 4;
    cfg.data.instances = 1200;
    let dim: usize = std::env::var("BENCH_DIM").ok().and_then(|v| v.parse().ok()).unwrap_or(24);
    let sep: f64 = std::env::var("BENCH_SEP").ok().and_then(|v| v.parse().ok()).unwrap_or(3.5);
    cfg.data.view_dims = vec![dim, dim, dim];
    cfg.data.separation = sep;
    cfg.data.corruption.misalign_rate = 0.4;
    cfg.data.corruption.noise_rate = 0.10;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("bench");

    if mode == "bench" {
        let separation: f64 = args
            .get(2)
            .map(|s| s.parse().unwrap())
            .unwrap_or(3.5);
        let stage4_epochs: usize = args
            .get(3)
            .map(|s| s.parse().unwrap())
            .unwrap_or(100);
        let stage4_warmup: usize = args
            .get(4)
            .map(|s| s.parse().unwrap())
            .unwrap_or(100);
        let detach: bool = args
            .get(5)
            .map(|s| s.parse().unwrap())
            .unwrap_or(false);
        let hidden: usize = args
            .get(6)
            .map(|s| s.parse().unwrap())
            .unwrap_or(64);
        for seed in [1u64, 2, 3] {
            let started = std::time::Instant::now();
            let mut cfg = benchmark_config(seed);
            cfg.data.separation = separation;
            cfg.stage4.epochs = stage4_epochs;
            cfg.stage4.warmup_epochs = stage4_warmup;
            cfg.fusion.detach_weights = detach;
            cfg.model.hidden_dims = vec![hidden];
            let (train, test) = build_datasets(&cfg).unwrap();

            // Full pipeline.
            let dir = tempfile::tempdir().unwrap();
            let manifest = run_pipeline(&train, &test, &cfg, dir.path()).unwrap();
            let pipeline_acc = manifest.final_eval.as_ref().unwrap().test_accuracy;
            let ensemble = TrainedEnsemble::load(&dir.path().join("stage4_model.json")).unwrap();
            let eval = ensemble.evaluate(&test).unwrap();
            let conflicting: Vec<bool> = {
                let c = test.conflicts.as_ref().unwrap();
                (0..test.instance_count())
                    .map(|i| c.is_instance_conflicting(i))
                    .collect()
            };
            let mean_u = |want: bool| {
                let vals: Vec<f64> = eval
                    .uncertainties
                    .iter()
                    .zip(&conflicting)
                    .filter(|&(_, &c)| c == want)
                    .map(|(&u, _)| u)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            let pipeline_fpr95 = fpr95(&eval.uncertainties, &conflicting).unwrap();

            // Division quality of the run.
            let division_text =
                std::fs::read_to_string(dir.path().join("division.csv")).unwrap();
            let division = mvfuzz::gmm::DivisionResult::from_csv(&division_text).unwrap();
            let rates = division_rates(&division, train.conflicts.as_ref().unwrap()).unwrap();

            // Control arm.
            let dir_c = tempfile::tempdir().unwrap();
            let manifest_c = run_control(&train, &test, &cfg, dir_c.path()).unwrap();
            let control_acc = manifest_c.final_eval.as_ref().unwrap().test_accuracy;
            let control = TrainedEnsemble::load(&dir_c.path().join("control_model.json")).unwrap();
            let eval_c = control.evaluate(&test).unwrap();
            let control_fpr95 = fpr95(&eval_c.uncertainties, &conflicting).unwrap();

            println!(
                "seed {seed}: pipeline_acc={pipeline_acc:.4} control_acc={control_acc:.4} \
                 u_clean={:.4} u_conf={:.4} fpr95_pipe={pipeline_fpr95:.4} fpr95_ctrl={control_fpr95:.4} \
                 div_fpr={:.4} div_fnr={:.4} div_avg={:.4} elapsed={:.1}s",
                mean_u(false),
                mean_u(true),
                rates.pooled_fpr.unwrap(),
                rates.pooled_fnr.unwrap(),
                rates.pooled_average.unwrap(),
                started.elapsed().as_secs_f64()
            );
        }
    }

    if mode == "diag" {
        let seed = 1u64;
        let cfg = benchmark_config(seed);
        let (train, test) = build_datasets(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&train, &test, &cfg, dir.path()).unwrap();
        let dir_c = tempfile::tempdir().unwrap();
        run_control(&train, &test, &cfg, dir_c.path()).unwrap();

        for (name, path) in [
            ("stage4", dir.path().join("stage4_model.json")),
            ("stage2", dir.path().join("stage2_model.json")),
            ("control", dir_c.path().join("control_model.json")),
        ] {
            let mut ensemble = TrainedEnsemble::load(&path).unwrap();
            for mode in [FusionMode::TestTime, FusionMode::Average, FusionMode::TrainTime] {
                ensemble.fusion_mode = mode;
                let eval = ensemble.evaluate(&test).unwrap();
                println!("{name} fusion={:?} acc={:.4}", mode, eval.accuracy);
            }
            // Per-view accuracies: argmax of each single view's membership.
            for v in 0..3 {
                let mut hits = 0;
                let mut clean_hits = 0;
                let mut clean_total = 0;
                for i in 0..test.instance_count() {
                    let (_, m) = ensemble.models[v].forward(test.views[v].row(i)).unwrap();
                    let pred = m
                        .values()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if pred == test.labels[i] {
                        hits += 1;
                    }
                    let c = test.conflicts.as_ref().unwrap();
                    if !c.is_view_conflicting(i, v) {
                        clean_total += 1;
                        if pred == test.labels[i] {
                            clean_hits += 1;
                        }
                    }
                }
                println!(
                    "  {name} view {v}: acc={:.4} clean-view acc={:.4}",
                    hits as f64 / test.instance_count() as f64,
                    clean_hits as f64 / clean_total as f64
                );
            }
        }
        for log in ["stage1_log.csv", "stage2_log.csv", "stage4_log.csv"] {
            let text = std::fs::read_to_string(dir.path().join(log)).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            println!("{log} first={} last={}", lines[1], lines[lines.len() - 1]);
        }
        let text = std::fs::read_to_string(dir_c.path().join("control_log.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        println!("control_log first={} last={}", lines[1], lines[lines.len() - 1]);
    }

    if mode == "isolate" {
        let seed = 1u64;
        let cfg = benchmark_config(seed);
        let (train, test) = build_datasets(&cfg).unwrap();
        let mut models = init_ensemble(&cfg, &train, 100).unwrap();
        stage1_pretrain(&mut models, &train, &test, &cfg).unwrap();
        let (trace, _) = stage2_cyclical_with_epochs(
            &mut models,
            &train,
            &test,
            &cfg,
            cfg.schedule.total_epochs(),
        )
        .unwrap();
        let division = stage3_divide(&trace, &cfg).unwrap();
        let truth = train.conflicts.as_ref().unwrap();
        let rates = mvfuzz::metrics::division_rates(&division, truth).unwrap();
        for r in &rates.per_view {
            println!(
                "view {}: fpr={:?} fnr={:?}",
                r.view, r.fpr, r.fnr
            );
        }
        // Importance stats per view.
        let imp = division.importance_by_view();
        for (v, d) in imp.iter().enumerate() {
            let ones = d.iter().filter(|&&x| x == 1.0).count();
            let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
            println!("view {v}: d=1 on {ones}/{} pairs, mean d={mean:.4}", d.len());
        }

        for (label, warmup, detach) in [
            ("normal", 10usize, false),
            ("no-fused (gamma~0)", 1_000_000, false),
            ("detached weights", 10, true),
        ] {
            let mut cfg4 = cfg.clone();
            cfg4.stage4.warmup_epochs = warmup;
            cfg4.fusion.detach_weights = detach;
            let (models4, log) = stage4_robust(&train, &test, &cfg4, &division).unwrap();
            let ensemble = TrainedEnsemble {
                models: models4,
                fusion_mode: FusionMode::TestTime,
                transform: mvfuzz::fusion::WeightTransform::Exp,
            };
            let eval = ensemble.evaluate(&test).unwrap();
            print!(
                "stage4 [{label}]: fused acc={:.4} last train_loss={:.4} per-view clean acc:",
                eval.accuracy,
                log.last().unwrap().train_loss
            );
            for v in 0..3 {
                let mut clean_hits = 0;
                let mut clean_total = 0;
                let c = test.conflicts.as_ref().unwrap();
                for i in 0..test.instance_count() {
                    if c.is_view_conflicting(i, v) {
                        continue;
                    }
                    let (_, m) = ensemble.models[v].forward(test.views[v].row(i)).unwrap();
                    let pred = m
                        .values()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    clean_total += 1;
                    if pred == test.labels[i] {
                        clean_hits += 1;
                    }
                }
                print!(" {:.4}", clean_hits as f64 / clean_total as f64);
            }
            println!();
        }
    }

    if mode == "probe" {
        // Pure per-view training on clean data: how trainable is the
        // credibility head at various learning rates and epochs?
        for (lr, epochs) in [(3e-3, 50usize), (1e-3, 50), (1e-2, 50), (3e-3, 200), (1e-2, 200)] {
            let mut cfg = benchmark_config(1);
            cfg.data.corruption.misalign_rate = 0.0;
            cfg.data.corruption.noise_rate = 0.0;
            cfg.stage4.warmup_epochs = 1_000_000; // fused branch ~off
            cfg.stage4.epochs = epochs;
            cfg.stage4.learning_rate = Some(lr);
            let (train, test) = build_datasets(&cfg).unwrap();
            let n = train.instance_count();
            let mut text = String::from(
                "instance_id,view_id,avg_loss,posterior_clean,is_clean,importance_weight\n",
            );
            for i in 0..n {
                for v in 0..3 {
                    text.push_str(&format!("{i},{v},0.1,0.9,true,1.0\n"));
                }
            }
            let division = mvfuzz::gmm::DivisionResult::from_csv(&text).unwrap();
            let (models4, log) = stage4_robust(&train, &test, &cfg, &division).unwrap();
            print!(
                "lr={lr} epochs={epochs}: last loss={:.4} per-view test acc:",
                log.last().unwrap().train_loss
            );
            for v in 0..3 {
                let mut hits = 0;
                for i in 0..test.instance_count() {
                    let (_, m) = models4[v].forward(test.views[v].row(i)).unwrap();
                    let pred = m
                        .values()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if pred == test.labels[i] {
                        hits += 1;
                    }
                }
                print!(" {:.4}", hits as f64 / test.instance_count() as f64);
            }
            // Dead-sample census on view 1: training rows whose logits are
            // all negative (zero gradient).
            let mut dead = 0;
            for i in 0..n {
                let (logits, _) = models4[1].forward(train.views[1].row(i)).unwrap();
                if logits.iter().all(|&a| a <= 0.0) {
                    dead += 1;
                }
            }
            println!("  dead-train-rows(view1)={dead}/{n}");
        }
    }

    if mode == "linacc" {
        // Linear-oracle accuracy per view on the clean benchmark blobs.
        for seed in [1u64, 2, 3] {
            let mut cfg = benchmark_config(seed);
            cfg.data.corruption.misalign_rate = 0.0;
            cfg.data.corruption.noise_rate = 0.0;
            let (train, _) = build_datasets(&cfg).unwrap();
            // One-vs-all least squares, same as the integration oracle.
            print!("seed {seed}: linear accs");
            for v in 0..3 {
                let acc = linacc(&train.views[v], &train.labels, train.class_count);
                print!(" {acc:.4}");
            }
            println!();
        }
    }

    if mode == "cycles" {
        // Division quality as the cycle count grows, via trace prefixes.
        let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
        let stage1_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
        let mut cfg = benchmark_config(seed);
        cfg.stage1.epochs = stage1_epochs;
        let (train, test) = build_datasets(&cfg).unwrap();
        let started = std::time::Instant::now();
        let mut models = init_ensemble(&cfg, &train, 100).unwrap();
        stage1_pretrain(&mut models, &train, &test, &cfg).unwrap();
        let (trace, _) = stage2_cyclical_with_epochs(
            &mut models,
            &train,
            &test,
            &cfg,
            cfg.schedule.total_epochs(),
        )
        .unwrap();
        println!("stage1+stage2 took {:.1}s", started.elapsed().as_secs_f64());
        for cycles in 1..=10usize {
            let prefix = trace.prefix(cycles * cfg.schedule.cycle_length).unwrap();
            let division = stage3_divide(&prefix, &cfg).unwrap();
            let rates = division_rates(&division, train.conflicts.as_ref().unwrap()).unwrap();
            println!(
                "cycles={cycles}: div_fpr={:.4} div_fnr={:.4} div_avg={:.4} clean_frac={:.4}",
                rates.pooled_fpr.unwrap(),
                rates.pooled_fnr.unwrap(),
                rates.pooled_average.unwrap(),
                division.clean_fraction()
            );
        }
    }
}

fn linacc(view: &mvfuzz::data::Matrix, labels: &[usize], class_count: usize) -> f64 {
    let n = view.rows();
    let d = view.cols() + 1;
    let mut xtx = vec![vec![0.0f64; d]; d];
    let mut xty = vec![vec![0.0f64; class_count]; d];
    for i in 0..n {
        let mut row = view.row(i).to_vec();
        row.push(1.0);
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += row[a] * row[b];
            }
            xty[a][labels[i]] += row[a];
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += 1e-8;
    }
    // Gaussian elimination.
    let m = d;
    let k = class_count;
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| xtx[x][col].abs().partial_cmp(&xtx[y][col].abs()).unwrap())
            .unwrap();
        xtx.swap(col, pivot);
        xty.swap(col, pivot);
        let diag = xtx[col][col];
        for row in (col + 1)..m {
            let factor = xtx[row][col] / diag;
            for c in col..m {
                xtx[row][c] -= factor * xtx[col][c];
            }
            for c in 0..k {
                xty[row][c] -= factor * xty[col][c];
            }
        }
    }
    let mut w = vec![vec![0.0f64; k]; m];
    for row in (0..m).rev() {
        for c in 0..k {
            let mut acc = xty[row][c];
            for col in (row + 1)..m {
                acc -= xtx[row][col] * w[col][c];
            }
            w[row][c] = acc / xtx[row][row];
        }
    }
    let mut hits = 0;
    for i in 0..n {
        let mut row = view.row(i).to_vec();
        row.push(1.0);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..k {
            let score: f64 = (0..m).map(|a| row[a] * w[a][c]).sum();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
