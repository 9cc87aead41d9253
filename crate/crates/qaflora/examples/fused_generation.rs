//! Generate text with the weighted adapter mixture, comparing
//! query-adaptive weights against the static 1/k baseline.
//!
//! ```bash
//! cargo run -p qaflora --example fused_generation
//! ```

use qaflora::*;

fn main() -> Result<()> {
    let config = toy_config(2, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let a = make_toy_adapter("math", 11, &model, 4, 16.0, None, 1.0)?;
    let b = make_toy_adapter("lang", 22, &model, 8, 16.0, None, 0.6)?;
    let registry = AdapterRegistry::new(vec![a, b])?;

    let tokenizer = ByteTokenizer::new();
    let prompt = tokenizer.encode_str("Cuanto es 12 por 7?");
    let params = GenParams {
        max_new_tokens: 32,
        ..GenParams::default()
    };

    let profile =
        divergence_profile(&model, &registry, &prompt, Measure::Kl, Granularity::LastToken)?;
    let adaptive = qa_flora_weights(&profile, NORM_EPSILON_DEFAULT)?;
    let uniform = static_weights(model.config().n_layers, registry.ids())?;

    let out_adaptive = generate(&model, &registry, &adaptive, &prompt, &params)?;
    let out_static = generate(&model, &registry, &uniform, &prompt, &params)?;

    println!("adaptive weights, layer 0: {:?}", adaptive.alphas[0]);
    println!("static weights,   layer 0: {:?}\n", uniform.alphas[0]);
    println!("adaptive continuation ({} tokens): {:?}", out_adaptive.len(),
        String::from_utf8_lossy(&tokenizer.decode(&out_adaptive)));
    println!("static continuation   ({} tokens): {:?}", out_static.len(),
        String::from_utf8_lossy(&tokenizer.decode(&out_static)));
    Ok(())
}
