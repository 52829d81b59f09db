use dtpdt_core::cdt::CdtParams;
use dtpdt_core::losses::TverskyParams;
use dtpdt_core::metrics;
use dtpdt_core::model::ToyUNetConfig;
use dtpdt_core::report;
use dtpdt_core::synth::{synth_sample, RenderParams, SynthParams, Sample};
use dtpdt_core::train::*;
use std::time::Instant;

fn dataset(seed0: u64, n: usize) -> Vec<Sample> {
    (0..n).map(|i| synth_sample(&SynthParams { seed: seed0 + i as u64, ..SynthParams::default() },
        &RenderParams::default()).unwrap()).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(18);
    let warmup: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let crops: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let base: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);
    let t0 = Instant::now();
    let train_set = dataset(1000, 20);
    let val_set = dataset(2000, 5);
    let test_set = dataset(3000, 5);
    println!("synth done {:?}", t0.elapsed());

    let model_cfg = ToyUNetConfig { levels: 2, base_channels: base, crop: (32, 32, 32), instance_norm: true, seed: 42 };
    let mk_cfg = |mode: LossMode| TrainConfig {
        epochs, warmup_epochs: warmup, crops_per_epoch: crops,
        lr: 0.002, lr_drop_epoch: (epochs * 5) / 6, lr_drop_factor: 10.0,
        seed: 42, loss_mode: mode,
        cdt: CdtParams::new(-0.3, 7).unwrap(),
        tversky: TverskyParams::new(0.3, 0.7).unwrap(),
        val_stride: 32,
        ..TrainConfig::default()
    };

    for (name, mode) in [("dtpdt", LossMode::Dtpdt), ("dice-only", LossMode::DiceOnly)] {
        let t = Instant::now();
        let result = fit(&train_set, &val_set, model_cfg.clone(), mk_cfg(mode)).unwrap();
        let model = dtpdt_core::model::ToyUNet { cfg: model_cfg.clone(), params: result.best_params.clone() };
        let mut reps = Vec::new();
        for s in &test_set {
            let prob = predict_volume(&model, &s.input, (32, 32, 32), 16).unwrap();
            reps.push(metrics::evaluate(&prob, &s.bundle, 0.5, 0.8, false).unwrap());
        }
        let agg = report::aggregate(&reps);
        println!("== {name}: {:?}  best val dsc {:.4} @ {}", t.elapsed(), result.best_val_dsc, result.best_epoch);
        for row in result.log.iter().step_by(3) {
            println!("   ep {:2} com {:.4} cor {:+.4} cdt {:.4} | val dsc {:.4} td {:.4} bd {:.4} fpr {:.5}",
                row.epoch, row.l_topo_com, row.l_topo_cor, row.l_cdt, row.val_dsc, row.val_td, row.val_bd, row.val_fpr);
        }
        println!("   TEST dsc {:.4}±{:.4} td {:.4}±{:.4} bd {:.4}±{:.4} fpr {:.5}",
            agg.dsc.mean, agg.dsc.std, agg.td.mean, agg.td.std, agg.bd.mean, agg.bd.std, agg.fpr.mean);
    }
    println!("total {:?}", t0.elapsed());
}
