//! The image front end: edge-based RoI detection, the RoI patch grid with its
//! frozen features, and pixel patches.

use acebert::synth::gen_catalog;
use acebert::vision::{detect_roi, pixel_patchify, unpatchify, FrontEnd, VisionConfig};

fn main() -> acebert::Result<()> {
    let cfg = VisionConfig::default();
    let front = FrontEnd::new(cfg.clone())?;
    let catalog = gen_catalog(200, 8, 64, 11)?;

    let ious: Vec<f64> = catalog
        .iter()
        .map(|p| detect_roi(&p.image, cfg.edge_percentile, cfg.roi_margin).iou(&p.truth_box))
        .collect();
    let hits = ious.iter().filter(|&&v| v >= 0.5).count();
    println!(
        "RoI detection: mean IoU {:.3}, IoU >= 0.5 on {hits}/{} images",
        ious.iter().sum::<f64>() / ious.len() as f64,
        ious.len()
    );

    let p = &catalog[0];
    let f = front.process(&p.image)?;
    println!("detected {:?} vs truth {:?}", f.roi, p.truth_box);
    println!(
        "{} RoI patches x {} features, {} pixel patches x {} values",
        f.patch_features.rows(),
        f.patch_features.cols(),
        f.pixel_vectors.rows(),
        f.pixel_vectors.cols()
    );

    let set = pixel_patchify(&p.image, 64, 64, 16, 16)?;
    let back = unpatchify(&set)?;
    println!("{} patches of 16x16, reassembled exactly: {}", set.count(), back == p.image);

    if let Some(dir) = std::env::args().nth(1) {
        let path = std::path::Path::new(&dir).join("product0.png");
        p.image.save_png(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
