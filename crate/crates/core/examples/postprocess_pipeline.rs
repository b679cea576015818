//! Dedup, TF-IDF, truncated SVD, minibatch k-means, round-robin selection
//! and n-gram decontamination on toy questions.

use softsrv::grammar::{make_toy_corpus, ToyGrammar};
use softsrv::postprocess::{decontaminate, select_diverse, PostprocessConfig};

fn main() -> softsrv::error::Result<()> {
    let corpus = make_toy_corpus(&ToyGrammar::arithmetic(), 600, 4)?;
    let mut docs: Vec<String> = corpus.train.iter().map(|e| e.question.clone()).collect();
    docs.extend(docs[..100].to_vec());

    let cfg = PostprocessConfig { svd_dims: 12, clusters: 10, batch: 32, iters: 40, n_s: 50 };
    let sel = select_diverse(&docs, &cfg, 9)?;
    println!("{} docs, {} unique, {} selected", docs.len(), sel.unique.len(), sel.selected.len());

    let reference: Vec<String> = corpus.test.iter().map(|e| e.full_text()).collect();
    let mut cands: Vec<String> = sel.selected.iter().map(|&i| docs[i].clone()).collect();
    cands.push(reference[0].clone());
    let d = decontaminate(&cands, &reference, 13)?;
    println!("decontamination kept {} and removed {}", d.kept.len(), d.removed.len());
    if let Some(r) = d.removed.last() {
        println!("e.g. #{} shares \"{}\"", r.index, r.ngram);
    }
    Ok(())
}
