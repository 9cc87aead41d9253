//! The centroid-similarity baseline: build per-adapter centroids from
//! representative samples, then route a query by cosine similarity.
//! Unlike the divergence route, this needs domain data and produces one
//! weight row replicated across all layers.
//!
//! ```bash
//! cargo run -p qaflora --example centroid_routing
//! ```

use std::collections::BTreeMap;

use qaflora::*;

fn main() -> Result<()> {
    let config = toy_config(2, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let math = make_toy_adapter("math", 11, &model, 4, 16.0, None, 1.0)?;
    let lang = make_toy_adapter("lang", 22, &model, 8, 16.0, None, 0.6)?;
    let registry = AdapterRegistry::new(vec![math, lang])?;

    let tokenizer = ByteTokenizer::new();
    let samples: BTreeMap<String, Vec<Vec<u32>>> = [
        (
            "math".to_string(),
            vec![
                tokenizer.encode_str("compute 3 plus 4"),
                tokenizer.encode_str("twelve times seven equals"),
            ],
        ),
        (
            "lang".to_string(),
            vec![
                tokenizer.encode_str("hola, como estas?"),
                tokenizer.encode_str("el gato duerme en la silla"),
            ],
        ),
    ]
    .into();
    let centroids = build_centroids(&model, &registry, &samples, Pooling::Mean)?;

    let path = std::env::temp_dir().join("qaflora_demo.cen.json");
    save_centroids(&path, &centroids)?;
    println!("centroids from {:?} samples written to {}", centroids.sample_counts, path.display());

    for query in ["dividir 84 entre 7", "el perro corre rapido"] {
        let tokens = tokenizer.encode_str(query);
        let weights = centroid_weights(&model, &centroids, &tokens, 1.0)?;
        println!("{query:?} -> math={:.4} lang={:.4}", weights.alphas[0][0], weights.alphas[0][1]);
    }
    Ok(())
}
