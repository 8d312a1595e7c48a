use slotseg_core::autodiff::Graph;
use slotseg_core::checkpoint::Checkpoint;
use slotseg_core::data::load_external_dataset;
use slotseg_core::model::{extract_outputs, forward_clip, inference_partners};
use slotseg_core::rng::RngState;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cp = Checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let data = load_external_dataset(std::path::Path::new(&args[2])).unwrap();
    let trainer = cp.into_trainer().unwrap();
    let cfg = &trainer.cfg;
    let vi: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let video = &data[vi];
    let frames = &video.frames[..4.min(video.frames.len())];
    let partners = inference_partners(frames.len());
    let mut g = Graph::no_grad();
    let fwd = forward_clip(&mut g, &trainer.teacher, &trainer.model, cfg, frames, &partners, &RngState::new(1)).unwrap();
    let out = extract_outputs(&g, &fwd, cfg).unwrap();
    let masks = &out.masks[0];
    let hw = masks.cols();
    let n = masks.rows();
    // Column max distribution
    let mut col_max = vec![0.0f64; hw];
    let mut col_arg = vec![0usize; hw];
    for i in 0..hw {
        for s in 0..n {
            if masks.at2(s, i) > col_max[i] { col_max[i] = masks.at2(s, i); col_arg[i] = s; }
        }
    }
    let mean_max: f64 = col_max.iter().sum::<f64>() / hw as f64;
    let above: usize = col_max.iter().filter(|&&v| v > cfg.slots.tau).count();
    println!("mean col-max {:.3}, cols above tau {}/{}", mean_max, above, hw);
    // Per-semantic binarized area + validity
    for s in 0..n {
        let area: f64 = (0..hw).map(|i| if masks.at2(s, i) > cfg.slots.tau {1.0} else {0.0}).sum::<f64>() / hw as f64;
        let soft_area: f64 = (0..hw).map(|i| masks.at2(s, i)).sum::<f64>() / hw as f64;
        let valid: usize = (0..cfg.slots.p).filter(|&p| out.validity[0].is_valid(s, p)).count();
        if soft_area > 0.02 {
            println!("sem {s}: soft-area {:.3} bin-area {:.3} valid-instances {}", soft_area, area, valid);
        }
    }
    // GT fg fraction
    let fg: usize = video.gt_instance[0].iter().filter(|&&v| v > 0).count();
    println!("gt fg fraction {:.3}", fg as f64 / video.gt_instance[0].len() as f64);
    // owner histogram: which semantic owns each gt region
    println!("owner of fg pixels (patch-level argmax):");
    let grid = cfg.encoder.grid();
    let patch = cfg.encoder.patch_size;
    let res = cfg.encoder.resolution;
    let mut fg_own = std::collections::BTreeMap::new();
    let mut bg_own = std::collections::BTreeMap::new();
    for i in 0..hw {
        let (gy, gx) = (i / grid, i % grid);
        let cy = gy * patch + patch / 2;
        let cx = gx * patch + patch / 2;
        let is_fg = video.gt_instance[0][cy * res + cx] > 0;
        *(if is_fg { &mut fg_own } else { &mut bg_own }).entry(col_arg[i]).or_insert(0usize) += 1;
    }
    println!("  fg patches by semantic: {:?}", fg_own);
    println!("  bg patches by semantic: {:?}", bg_own);
}
