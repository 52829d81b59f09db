use dtpdt_core::cdt::CdtParams;
use dtpdt_core::model::ToyUNetConfig;
use dtpdt_core::synth::{synth_sample, RenderParams, SynthParams};
use dtpdt_core::train::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let sample = synth_sample(&SynthParams { seed: 1, ..SynthParams::default() }, &RenderParams::default()).unwrap();
    println!("synth 64^3: {:?}", t0.elapsed());

    for base in [4usize, 6, 8] {
        let model_cfg = ToyUNetConfig { levels: 2, base_channels: base, crop: (32, 32, 32), instance_norm: true, seed: 0 };
        let cfg = TrainConfig { cdt: CdtParams::new(-0.3, 7).unwrap(), ..TrainConfig::default() };
        let mut tr = Trainer::new(model_cfg, cfg).unwrap();
        let batch = CropBatch {
            input: sample.input.crop((16, 16, 16), (32, 32, 32)).unwrap(),
            mask: sample.bundle.mask.crop((16, 16, 16), (32, 32, 32)).unwrap(),
            dc_map: sample.bundle.dc_map.crop((16, 16, 16), (32, 32, 32)).unwrap(),
            dc_max: sample.bundle.dc_max,
        };
        let t = Instant::now();
        for _ in 0..3 { tr.train_step(&batch, Phase::Warmup, 1e-3).unwrap(); }
        let warm = t.elapsed() / 3;
        let t = Instant::now();
        for _ in 0..3 { tr.train_step(&batch, Phase::Joint, 1e-3).unwrap(); }
        let joint = t.elapsed() / 3;
        let model = &tr.model;
        let t = Instant::now();
        let _ = predict_volume(model, &sample.input, (32, 32, 32), 32).unwrap();
        println!("base {base}: warmup {warm:?}/step, joint {joint:?}/step, predict 64^3 tiled {:?}", t.elapsed());
    }
}
