//! Compute query-adaptive per-layer fusion weights for a prompt.
//!
//! Runs one capture pass through the base model and one per adapter,
//! projects each layer's last-token hidden state through the LM head,
//! and turns the per-layer KL divergences into normalized weights.
//!
//! ```bash
//! cargo run -p qaflora --example adaptive_weights
//! ```

use qaflora::*;

fn main() -> Result<()> {
    let config = toy_config(4, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let math = make_toy_adapter("math", 11, &model, 4, 16.0, None, 1.0)?;
    let lang = make_toy_adapter("lang", 22, &model, 8, 16.0, None, 0.6)?;
    let registry = AdapterRegistry::new(vec![math, lang])?;

    let tokenizer = ByteTokenizer::new();
    let query = "Solve 12 * 7 and explain the steps.";
    let tokens = tokenizer.encode_str(query);

    let profile = divergence_profile(&model, &registry, &tokens, Measure::Kl, Granularity::LastToken)?;
    let weights = qa_flora_weights(&profile, NORM_EPSILON_DEFAULT)?;

    println!("query: {query}\n");
    println!("per-layer KL divergence (nats) and fusion weights:");
    println!("{:>5} {:>12} {:>12} {:>10} {:>10}", "layer", "div(math)", "div(lang)", "w(math)", "w(lang)");
    for l in 0..profile.n_layers() {
        println!(
            "{l:>5} {:>12.6} {:>12.6} {:>10.4} {:>10.4}",
            profile.values[l][0], profile.values[l][1], weights.alphas[l][0], weights.alphas[l][1]
        );
    }
    Ok(())
}
