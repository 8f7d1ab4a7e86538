//! Fine-tune the dual encoder under each input setting, from one shared
//! pretrained model, and compare retrieval quality.
//!
//!     cargo run --release --example ablation

use acebert::assembly::Modalities;
use acebert::config::RunConfig;
use acebert::finetune::domain_probe_accuracy;
use acebert::pipeline::{self, Prepared};

fn main() -> acebert::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("small.toml"))?;
    let data = Prepared::generate(&cfg)?;
    let (base, _) = pipeline::run_pretrain(&cfg, &data, &mut std::io::sink())?;

    let settings = [
        ("text", Modalities::text_only(), false),
        ("+roi", Modalities { use_roi: true, use_pixel: false, use_hot_query: false }, false),
        ("+pixel", Modalities { use_roi: true, use_pixel: true, use_hot_query: false }, false),
        ("+hot query", Modalities::default(), false),
        ("+adversarial", Modalities::default(), true),
    ];
    println!("{:<13} {:>8} {:>8} {:>8} {:>7} {:>6}", "setting", "R@10", "R@50", "R@100", "GAUC", "probe");
    for (name, modalities, adversarial) in settings {
        let mut c = cfg.clone();
        c.modalities = modalities;
        c.finetune.use_adversarial = adversarial;
        let mut model = base.clone();
        pipeline::run_finetune(&c, &data, &mut model, &mut std::io::sink())?;
        let report = pipeline::run_eval(&c, &data, &model)?;
        let (q, p) = pipeline::domain_embeddings(&c, &data, &model)?;
        let r = |k| report.recall(k).unwrap_or(f64::NAN);
        println!(
            "{name:<13} {:>8.4} {:>8.4} {:>8.4} {:>7.4} {:>6.3}",
            r(10),
            r(50),
            r(100),
            report.gauc().unwrap_or(f64::NAN),
            domain_probe_accuracy(&q, &p, c.seed)?
        );
    }
    let random = pipeline::run_eval(&cfg, &data, &base)?.random_recall(10).unwrap_or(f64::NAN);
    println!("random ranking R@10 {random:.4}");
    Ok(())
}
