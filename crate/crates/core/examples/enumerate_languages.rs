//! Language sizes and a peek at the strings.
//!
//! cargo run --release --example enumerate_languages

use philab::{Grammar, GrammarSpec};

fn main() -> philab::Result<()> {
    let specs = [
        GrammarSpec::Dyck { depth: 3, length: 12 },
        GrammarSpec::Dyck { depth: 3, length: 16 },
        GrammarSpec::BudgetDfa { n: 20, k: 10 },
        GrammarSpec::FiniteTrie { strings: ["{}", "[]", "[1]", "{\"a\":1}"].map(String::from).to_vec() },
    ];
    for spec in specs {
        let g = Grammar::new(spec.clone())?;
        let cap = g.max_length();
        let count = g.count_language(cap);
        println!("{spec:?}");
        println!("  strings: {count}, matcher states: {}", g.state_count()?);
        if count <= 1000 {
            let words = g.enumerate_language(cap)?;
            let preview: Vec<String> = words.iter().take(6).map(|w| format!("{:?}", g.vocab().render(w))).collect();
            println!("  first: {}", preview.join(" "));
        }
    }
    Ok(())
}
