//! Desk-scale run: synthetic corpus, both training stages, test metrics.
//!
//! `cargo run --release -p docvqa-core --example desk_run [docs]`

use std::time::Instant;

use docvqa::data::{gen_synthetic, split};
use docvqa::eval::gold_page_anls;
use docvqa::training::{train_stage1, train_stage2, EpochEvent};
use docvqa::{Model, ModelConfig, Pipeline, Scorer, ScorerConfig, SynthConfig, TrainConfig};

fn main() -> docvqa::Result<()> {
    let docs: usize = std::env::args().nth(1).map_or(200, |s| s.parse().expect("document count"));
    let t0 = Instant::now();
    let corpus = gen_synthetic(&SynthConfig {
        n_documents: docs,
        ..SynthConfig::default()
    })?;
    let [train, valid, test] = split(&corpus, [0.8, 0.1, 0.1], 7)?;
    println!("questions: train {} valid {} test {}", train.len(), valid.len(), test.len());

    let mut model = Model::new(ModelConfig {
        max_patches: 64,
        ..ModelConfig::default()
    })?;
    let mut log = |e: &EpochEvent<'_, f64>| {
        println!(
            "epoch {:>3} loss {:.4} valid {:.4}{} ({:.1}s, total {:.0}s)",
            e.record.epoch,
            e.record.train_loss,
            e.record.valid_metric,
            if e.is_best { " *" } else { "" },
            e.seconds,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    };
    train_stage1(&mut model, &train, &valid, &TrainConfig::stage1(), &mut log)?;
    println!("test ANLS (gold page): {:.4}", gold_page_anls(&model, &test)?);

    let mut scorer = Scorer::new(ScorerConfig::for_width(model.config().d_model), model.config().d_model)?;
    train_stage2(&model, &mut scorer, &train, &valid, &TrainConfig::stage2(), &mut log)?;
    let pipe = Pipeline::new(&model, &scorer)?;
    let results = pipe.evaluate(&test)?;
    println!("{}", docvqa::MetricsReport::from_results(&results)?);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
