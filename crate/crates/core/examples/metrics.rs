//! Corpus BLEU, ROUGE-L, CIDEr-D and AUC on a toy set of reports.
//!
//! cargo run --release --example metrics

use asgk::data::tokenize;
use asgk::metrics::{auc, bleu_all, cider_d, rouge_l_corpus, Tokens};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let refs = [
        "the heart is normal in size. a nodule is seen.",
        "the lungs are clear. no focal abnormality is seen.",
        "a small effusion is seen at the left base.",
    ];
    let cands = [
        "the heart is normal in size. a mass is seen.",
        "the lungs are clear. no focal abnormality is seen.",
        "an effusion is seen at the base.",
    ];
    let references: Vec<Vec<Tokens>> = refs.iter().map(|r| vec![tokenize(r)]).collect();
    let candidates: Vec<Tokens> = cands.iter().map(|c| tokenize(c)).collect();

    let bleu = bleu_all(&candidates, &references, 4)?;
    for (n, b) in bleu.iter().enumerate() {
        println!("BLEU-{}  {b:.4}", n + 1);
    }
    println!("ROUGE-L {:.4}", rouge_l_corpus(&candidates, &references)?);
    let cider = cider_d(&candidates, &references)?;
    println!("CIDEr-D {:.4} per sample {:?}", cider.score, cider.per_sample);

    let scores = [0.9, 0.8, 0.35, 0.6, 0.2, 0.1];
    let labels = [true, true, false, true, false, false];
    println!("AUC     {:.4}", auc(&scores, &labels)?);
    Ok(())
}
