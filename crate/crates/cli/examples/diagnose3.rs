use slotseg_core::checkpoint::Checkpoint;
use slotseg_core::data::load_external_dataset;
use slotseg_core::evaluation::{infer_video, upsample_mask};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cp = Checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let data = load_external_dataset(std::path::Path::new(&args[2])).unwrap();
    let vi: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let trainer = cp.into_trainer().unwrap();
    let cfg = &trainer.cfg;
    let video = &data[vi];
    let inf = infer_video(&video.frames, &trainer.teacher, &trainer.model, cfg, cfg.seed ^ vi as u64).unwrap();
    let t = 0;
    let gt = &video.gt_instance[t];
    println!("video {vi}: gt instances {:?} (classes {:?})", video.visibility[t], video.gt_semantic);
    for c in &inf.per_frame[t].list {
        let px = upsample_mask(&c.mask, inf.grid, inf.patch_size);
        let size = px.iter().filter(|&&v| v).count();
        // overlap with each gt instance
        let mut overlaps = vec![0usize; video.gt_semantic.len() + 1];
        for (i, &p) in px.iter().enumerate() {
            if p { overlaps[gt[i] as usize] += 1; }
        }
        println!("  cand (sem {}, inst {}): {size} px, overlap bg/inst: {:?}", c.semantic, c.instance, overlaps);
    }
}
