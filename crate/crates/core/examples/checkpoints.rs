//! Saving and restoring a model: restored predictions are bit-identical.

use mtpsl::harness::{checkpoint_bytes, model_from_checkpoint_bytes, toy_batch, toy_model};
use mtpsl::xtask::Strategy;

fn main() -> mtpsl::Result<()> {
    let model = toy_model(Strategy::Ours, true, 9)?;
    let bytes = checkpoint_bytes(&model, &serde_json::json!({"example": true}), 0)?;
    let (restored, header) = model_from_checkpoint_bytes(&bytes)?;
    println!("{} bytes, strategy {}, {} tensors", bytes.len(), header.model.strategy, restored.store.len());

    let sample = &toy_batch(0)?[0];
    for (a, b) in model.predict(sample)?.iter().zip(restored.predict(sample)?) {
        assert_eq!(a, &b);
    }
    println!("log variances {:?}", restored.log_var_values());
    println!("predictions identical after restore");
    Ok(())
}
