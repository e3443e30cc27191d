//! Writes the bundled synthetic disease corpus.
//!
//! `cargo run -p fedmesh-core --example synth_corpus -- <out_dir>`

use std::path::PathBuf;

use fedmesh_core::data::synthetic_corpus;

fn main() {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "data/synthetic-disease".into()),
    );
    std::fs::create_dir_all(&out).expect("create output dir");
    for (name, n, seed) in [("train", 5000, 1), ("dev", 500, 3), ("test", 1000, 2)] {
        let corpus = synthetic_corpus(n, seed);
        let path = out.join(format!("{name}.conll"));
        std::fs::write(&path, corpus.to_conll()).expect("write corpus");
        let stats = corpus.stats();
        println!(
            "{}: {} sentences, {} entities",
            path.display(),
            stats.sentences,
            stats.entities
        );
    }
}
