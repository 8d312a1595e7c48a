use slotseg_core::checkpoint::Checkpoint;
use slotseg_core::data::load_external_dataset;
use slotseg_core::evaluation::{infer_video, upsample_mask};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cp = Checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let data = load_external_dataset(std::path::Path::new(&args[2])).unwrap();
    let trainer = cp.into_trainer().unwrap();
    let cfg = &trainer.cfg;
    let hw = cfg.encoder.tokens();
    println!("video  fgcov  bginc  ncand  iou");
    for (vi, video) in data.iter().take(10).enumerate() {
        let inf = infer_video(&video.frames, &trainer.teacher, &trainer.model, cfg, cfg.seed ^ vi as u64).unwrap();
        let mut fgcov = 0.0; let mut bginc = 0.0; let mut iou_sum = 0.0; let mut ncand = 0.0;
        let frames = video.frames.len();
        for t in 0..frames {
            let fg_patches = inf.per_frame[t].foreground(hw);
            let pred = upsample_mask(&fg_patches, inf.grid, inf.patch_size);
            let gt: Vec<bool> = video.gt_instance[t].iter().map(|&v| v > 0).collect();
            let fg_total = gt.iter().filter(|&&v| v).count().max(1);
            let bg_total = gt.iter().filter(|&&v| !v).count().max(1);
            let cov = pred.iter().zip(&gt).filter(|(&p, &g)| p && g).count();
            let inc = pred.iter().zip(&gt).filter(|(&p, &g)| p && !g).count();
            let uni = pred.iter().zip(&gt).filter(|(&p, &g)| p || g).count().max(1);
            fgcov += cov as f64 / fg_total as f64 / frames as f64;
            bginc += inc as f64 / bg_total as f64 / frames as f64;
            iou_sum += cov as f64 / uni as f64 / frames as f64;
            ncand += inf.per_frame[t].list.len() as f64 / frames as f64;
        }
        println!("{vi:>5}  {fgcov:.3}  {bginc:.3}  {ncand:.1}  {iou_sum:.3}");
    }
}
