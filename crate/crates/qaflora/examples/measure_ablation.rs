//! The two ablation axes side by side: divergence measure (KL on lens
//! distributions vs cosine/euclidean on raw hidden states) and token
//! granularity (last token vs mean over all positions).
//!
//! ```bash
//! cargo run -p qaflora --example measure_ablation
//! ```

use qaflora::*;

fn weights_for(
    model: &BaseModel,
    registry: &AdapterRegistry,
    tokens: &[u32],
    measure: Measure,
    granularity: Granularity,
) -> Result<FusionWeights> {
    let profile = divergence_profile(model, registry, tokens, measure, granularity)?;
    qa_flora_weights(&profile, NORM_EPSILON_DEFAULT)
}

fn main() -> Result<()> {
    let config = toy_config(4, 32, 4, 64, 259, 256);
    let model = make_toy_model(7, &config)?;
    let a = make_toy_adapter("math", 11, &model, 4, 16.0, None, 1.0)?;
    let b = make_toy_adapter("lang", 22, &model, 8, 16.0, None, 0.6)?;
    let registry = AdapterRegistry::new(vec![a, b])?;
    let tokens = ByteTokenizer::new().encode_str("Resuelve 12*7 y explica en espanol.");

    println!("adapter-0 weight per layer under each configuration:\n");
    println!(
        "{:>5} {:>10} {:>10} {:>10} {:>10}",
        "layer", "kl/last", "cos/last", "euc/last", "kl/all"
    );
    let kl = weights_for(&model, &registry, &tokens, Measure::Kl, Granularity::LastToken)?;
    let cos = weights_for(&model, &registry, &tokens, Measure::Cosine, Granularity::LastToken)?;
    let euc = weights_for(&model, &registry, &tokens, Measure::Euclidean, Granularity::LastToken)?;
    let kl_all = weights_for(&model, &registry, &tokens, Measure::Kl, Granularity::AllTokens)?;
    for l in 0..model.config().n_layers {
        println!(
            "{l:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            kl.alphas[l][0], cos.alphas[l][0], euc.alphas[l][0], kl_all.alphas[l][0]
        );
    }
    Ok(())
}
