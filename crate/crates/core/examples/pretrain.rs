//! Joint MLM, MPM and TIP pretraining on the small config, then a
//! checkpoint roundtrip.

use acebert::config::RunConfig;
use acebert::encoder::{Checkpoint, Model};
use acebert::pipeline::{self, Prepared};

fn main() -> acebert::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = RunConfig::from_toml(include_str!("small.toml"))?;
    let data = Prepared::generate(&cfg)?;
    let (model, history) = pipeline::run_pretrain(&cfg, &data, &mut std::io::sink())?;

    println!("{:>5} {:>8} {:>8} {:>8}", "step", "mlm", "mpm", "tip");
    for (i, l) in history.iter().enumerate().step_by(10) {
        println!("{i:>5} {:>8.4} {:>8.4} {:>8.4}", l.mlm, l.mpm, l.tip);
    }

    let path = std::env::temp_dir().join("acebert-pretrain.ckpt");
    model.to_checkpoint().save(&path)?;
    let back = Model::from_checkpoint(&Checkpoint::load(&path)?)?;
    let ids: Vec<_> = model.store.ids().collect();
    println!(
        "checkpoint {} reloads identically: {}",
        path.display(),
        back.store.fingerprint(&ids) == model.store.fingerprint(&ids)
    );
    Ok(())
}
