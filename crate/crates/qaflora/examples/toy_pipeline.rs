//! Container round-trip: generate a toy model and adapter, write them as
//! `.lmt`/`.lat` files, reload, and confirm the reloaded pair reproduces
//! the original capture trace bit for bit.
//!
//! ```bash
//! cargo run -p qaflora --example toy_pipeline
//! ```

use qaflora::*;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("qaflora_toy_pipeline");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;

    let config = toy_config(2, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let adapter = make_toy_adapter("demo", 11, &model, 4, 16.0, None, 1.0)?;

    let model_path = dir.join("toy.lmt");
    let adapter_path = dir.join("demo.lat");
    save_model(&model_path, &model)?;
    save_adapter(&adapter_path, &adapter)?;
    println!("wrote {}", model_path.display());
    println!("wrote {}", adapter_path.display());

    let model2 = load_model(&model_path)?;
    let adapter2 = load_adapter(&adapter_path)?;
    let tokens = ByteTokenizer::new().encode_str("round trip check");
    let before = model.forward_capture(&tokens, Some(&adapter), None, Granularity::AllTokens)?;
    let after = model2.forward_capture(&tokens, Some(&adapter2), None, Granularity::AllTokens)?;
    assert_eq!(before, after);
    println!("reloaded model + adapter reproduce the capture trace exactly");

    for report in AdapterRegistry::new(vec![adapter2])?.rank_report() {
        println!(
            "adapter {:?}: {} layers, ranks {:?}..{:?}",
            report.adapter_id,
            report.entries.len(),
            report.min_rank,
            report.max_rank
        );
    }
    Ok(())
}
