// Throwaway calibration probe; deleted before finalizing.
use rulcast_core::dataio::*;
use rulcast_core::hs::*;
use rulcast_core::train::TrainConfig;

fn eval(noise: f64, required: usize, threshold: f64, corpus_seed: u64, model_seed: u64) {
    let corpus = generate_synthetic(&SynthSpec {
        n_cells: 10, eol_min: 400, eol_max: 800, noise, seed: corpus_seed, ..SynthSpec::default()
    }).unwrap();
    let n_w = 40;
    let cells: Vec<&CellSeries> = corpus.iter().map(|c| &c.series).collect();
    let norm = fit_norm(&cells).unwrap();
    let mut windows: Vec<WindowSample> = vec![];
    for c in &corpus {
        let mut w = make_windows(&norm.apply_cell(&c.series).unwrap(), n_w, 1).unwrap();
        attach_hs_labels(&mut w, &label_hs(&c.series, 0.1).unwrap());
        windows.extend(w.into_iter().filter(|x| x.hs_label.is_some()));
    }
    let mut model = HsClassifier::new(HsConfig { n_f: 7, n_w, hidden: 16 }, model_seed);
    let cfg = TrainConfig { batch_size: 8, epochs: 25, patience: 25, lr: 1e-3, beta1: 0.9, beta2: 0.99, seed: model_seed + 1, val_fraction: 0.1, label_smoothing: 0.0 };
    let hist = train_hs(&mut model, &windows, &cfg).unwrap();
    let trigger = TriggerConfig { consecutive_required: required, unhealthy_threshold: threshold, mct_fraction: 0.1 };
    let mut gaps = vec![]; let mut caps = vec![]; let mut untrig = 0;
    for c in &corpus {
        let w = make_windows(&norm.apply_cell(&c.series).unwrap(), n_w, 1).unwrap();
        let probs = cycle_probabilities(&model, &w).unwrap();
        match decide_fpc(c.series.cell_id(), &probs, c.series.eol() as f64, &trigger) {
            Some(r) => { gaps.push((r.fpc_cycle as f64 - c.knee_cycle as f64).abs() / c.series.eol() as f64);
                         caps.push(fpc_capacity_pct(&c.series, r.fpc_cycle)); }
            None => untrig += 1,
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    eprintln!("noise={noise} req={required} thr={threshold} corpus_seed={corpus_seed}: val={:.4}, untrig={untrig}, mean_gap={:.3} max_gap={:.3} mean_cap={:.2}",
        hist.best_val_loss, mean(&gaps), gaps.iter().cloned().fold(0.0, f64::max), mean(&caps));
}

#[test]
fn sweep() {
    for (noise, req, thr) in [(1.0, 30, 0.5), (0.5, 5, 0.5), (0.5, 30, 0.5), (1.0, 30, 0.6)] {
        eval(noise, req, thr, 41, 9);
    }
    eval(1.0, 30, 0.5, 123, 9);
    eval(1.0, 30, 0.5, 77, 21);
}
