//! Answer extraction and exact-match scoring.
//!
//! ```bash
//! cargo run -p qaflora --example scoring
//! ```

use qaflora::*;

fn main() -> Result<()> {
    for text in ["the answer is 42.", "first 3, then 4.5", "totals 1,234,567", "no digits"] {
        println!("extract_number({text:?}) = {:?}", extract_number(text));
    }
    println!();

    let predictions: Vec<String> = [
        "After simplifying, the result is 84.",
        "I believe the answer is 12",
        "B) the mitochondria",
        "option C looks right",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let golds: Vec<String> = ["84", "13", "B", "D"].iter().map(|s| s.to_string()).collect();

    let numeric = score_set(&predictions[..2], &golds[..2], MatchMode::Numeric)?;
    println!("numeric: {}/{} correct, accuracy {:.2}", numeric.n_correct, numeric.n_items, numeric.accuracy);

    let letters = score_set(&predictions[2..], &golds[2..], MatchMode::OptionLetter)?;
    println!("option letter: {}/{} correct, accuracy {:.2}", letters.n_correct, letters.n_items, letters.accuracy);
    Ok(())
}
