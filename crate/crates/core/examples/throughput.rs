//! Times training steps at the trend-experiment model size.

use std::time::Instant;

use harpe_core::attention::PositionalStrategy;
use harpe_core::corpus::CorpusSpec;
use harpe_core::model::train::batch_gradient;
use harpe_core::model::{ModelConfig, Params, Transformer};

fn main() {
    let ctx: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let cfg = ModelConfig::new(64, 128, 4, 8, 4096, PositionalStrategy::Abf { base: 5e4 }, 0).unwrap();
    let model = Transformer::new(cfg.clone(), Params::<f32>::init(&cfg), ctx).unwrap();
    let corpus = CorpusSpec::Niah { tasks: None, min_doc_frac: 0.25 }.build().unwrap();
    let batch: Vec<Vec<u32>> = (0..4).map(|i| corpus.stream(ctx + 1, i)).collect();
    let t = Instant::now();
    let (loss, _) = batch_gradient(&model, &batch).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("ctx {ctx}: loss {loss:.3}, {:.0} tok/s train", (4 * ctx) as f64 / dt);
    let t = Instant::now();
    model.forward(&batch[0][..ctx]).unwrap();
    println!("forward {:.0} tok/s", ctx as f64 / t.elapsed().as_secs_f64());
}
