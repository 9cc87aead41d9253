//! Timing the two inference phases: fusion-weight computation (one capture
//! pass per adapter, parallelizable) and fused decoding. Serial and
//! parallel scoring produce identical weights; only the wall time differs.
//!
//! ```bash
//! cargo run --release -p qaflora --example latency_bench
//! ```

use qaflora::*;

fn main() -> Result<()> {
    let config = toy_config(4, 64, 4, 128, 259, 512);
    let model = make_toy_model(7, &config)?;
    let adapters = (0..4)
        .map(|j| make_toy_adapter(format!("adapter{j}"), 40 + j, &model, 8, 16.0, None, 0.8))
        .collect::<Result<Vec<_>>>()?;
    let registry = AdapterRegistry::new(adapters)?;

    let tokenizer = ByteTokenizer::new();
    let queries: Vec<Vec<u32>> = (0..4)
        .map(|i| tokenizer.encode_str(&format!("benchmark query number {i} with a bit of text")))
        .collect();

    for parallel in [false, true] {
        let options = BenchOptions {
            parallel,
            decode_tokens: 16,
            ..BenchOptions::default()
        };
        let report = bench_latency(&model, &registry, &queries, &options)?;
        println!(
            "parallel={:<5} weight {:.3} ms/query/adapter, prefill {:.3} ms, decode {:.3} ms/token (k={})",
            report.parallel,
            report.weight_compute_ms_per_adapter,
            report.prefill_ms,
            report.decode_ms_per_token,
            report.k
        );
    }
    Ok(())
}
