//! Export the mean normalized layer profile over a query set: the per-layer
//! relevance pattern of each adapter, averaged across queries and normalized
//! so every layer row sums to 1. The CSV is ready for plotting.
//!
//! ```bash
//! cargo run -p qaflora --example layer_profile
//! ```

use qaflora::*;

fn main() -> Result<()> {
    let config = toy_config(6, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let math = make_toy_adapter("math", 11, &model, 4, 16.0, None, 1.0)?;
    let lang = make_toy_adapter("lang", 22, &model, 8, 16.0, None, 0.6)?;
    let registry = AdapterRegistry::new(vec![math, lang])?;

    let tokenizer = ByteTokenizer::new();
    let queries = [
        "Solve 12 * 7.",
        "Cuanto es la raiz de 81?",
        "Explain long division briefly.",
        "Suma 3 y 4, por favor.",
    ];
    let profiles = queries
        .iter()
        .map(|q| {
            divergence_profile(
                &model,
                &registry,
                &tokenizer.encode_str(q),
                Measure::Kl,
                Granularity::LastToken,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_normalized_profile(&profiles)?;

    println!("mean normalized profile over {} queries:", queries.len());
    for (l, row) in mean.values.iter().enumerate() {
        println!("layer {l}: math={:.4} lang={:.4}", row[0], row[1]);
    }

    let path = std::env::temp_dir().join("qaflora_mean_profile.csv");
    export_profile(&mean, &path, ExportFormat::Csv)?;
    println!("\nwrote {}", path.display());
    Ok(())
}
