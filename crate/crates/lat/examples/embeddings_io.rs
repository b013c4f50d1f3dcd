//! Load a word-vector file, look tokens up, embed multi-word labels, and
//! probe the cosine geometry that makes the synonym bridge work.
//!
//! ```bash
//! cargo run -p lat --example embeddings_io
//! ```

use std::io::Cursor;

use lat::embedding::{cosine, EmbeddingTable};

const DEMO_VECTORS: &str = "\
car 0.9 0.1 0.0 0.1
sedan 0.85 0.2 0.05 0.1
dog -0.1 0.9 0.2 0.0
puppy -0.05 0.88 0.25 0.02
traffic 0.3 0.0 0.9 0.1
light 0.2 0.1 0.85 0.2
";

fn main() -> lat::Result<()> {
    let table = EmbeddingTable::load(Cursor::new(DEMO_VECTORS), None)?;
    println!("loaded {} tokens of dimension {}", table.len(), table.dim());

    let (car, known) = table.lookup("CAR");
    println!("lookup 'CAR' (case-folded): known = {known}, v = {car:?}");
    let (oov, known) = table.lookup("zebra");
    println!("lookup 'zebra': known = {known}, zero = {}", oov.iter().all(|v| *v == 0.0));

    // multi-word labels average their word vectors
    let tl = table.embed_label("traffic light")?;
    println!("embed_label('traffic light') = {tl:?}");

    // the synonym bridge: sedan sits next to car, puppy next to dog
    let sedan = table.embed_label("sedan")?;
    let dog = table.embed_label("dog")?;
    println!("cos(car, sedan) = {:.4}", cosine(&car, &sedan));
    println!("cos(car, dog)   = {:.4}", cosine(&car, &dog));

    // questions embed into a padded, masked matrix
    let tokens: Vec<String> =
        ["how", "many", "sedans"].iter().map(|s| s.to_string()).collect();
    let q = table.embed_question(&tokens, 14)?;
    println!(
        "question matrix: {} rows x {} dims, {} real tokens",
        q.rows,
        q.dim,
        q.real_tokens()
    );

    // round trip through the text format is exact
    let mut buf = Vec::new();
    table.save(&mut buf)?;
    let reloaded = EmbeddingTable::load(Cursor::new(buf), None)?;
    let identical = table
        .tokens()
        .all(|t| table.lookup(t).0 == reloaded.lookup(t).0);
    println!("text round trip vector-identical: {identical}");
    Ok(())
}
