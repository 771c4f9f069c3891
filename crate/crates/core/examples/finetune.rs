//! Fine-tunes one downstream task (nc, ns or mnc) from a random
//! initialization and prints the validation history and the test metric.
//!
//! cargo run --release --example finetune -- [task] [proportion] [epochs]

use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::finetune::{evaluate, FinetuneConfig, Task};
use multiview_ssl::models::EncoderConfig;

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let task: Task = args.next().as_deref().unwrap_or("ns").parse()?;
    let proportion = args.next().and_then(|a| a.parse().ok()).unwrap_or(100);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(15);

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let cfg = FinetuneConfig { task, proportion, epochs, ..Default::default() };
    let encoder = EncoderConfig::desk();
    let out = cohort.finetune(&cfg, &encoder, &AugmentSpec::default(), None)?;
    for r in &out.history {
        println!("epoch {:>3}  loss {:.4}  val {} {:.4}", r.epoch, r.train_loss, task.metric(), r.val_metric);
    }
    let test = evaluate(&out.model, &cohort.data.patients, &cohort.splits.test)?;
    println!(
        "{} at {proportion}%: best epoch {}, test {} {:.4}",
        task.name(),
        out.best_epoch,
        task.metric(),
        test
    );
    Ok(())
}
