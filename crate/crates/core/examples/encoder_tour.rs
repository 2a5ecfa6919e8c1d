//! Builds a tiny encoder, reads contextual word vectors and sentence
//! scores, takes one gradient step and round-trips a checkpoint.

use pairdebias::encoder::{checkpoint, EncoderConfig, EncoderModel, Tape, Tokenizer};

pub fn run_example() -> pairdebias::Result<()> {
    let texts = ["the nurse said he was late .", "the nurse said she was late ."];
    let tokenizer = Tokenizer::build(texts);
    let cfg = EncoderConfig {
        d_model: 16,
        heads: 2,
        max_len: 16,
        seed: 1,
        ..EncoderConfig::default()
    };
    let mut model = EncoderModel::new(cfg, tokenizer)?;
    println!("{} tensors, {} scalars", model.n_params(), model.n_scalars());

    let he = model.word_in_context_repr(texts[0], "nurse")?;
    let she = model.word_in_context_repr(texts[1], "nurse")?;
    let shift: f64 = he.iter().zip(&she).map(|(a, b)| (a - b).abs()).sum();
    println!("context shift of \"nurse\": {shift:.4}");
    for t in texts {
        println!("PLL {:>8.4}  {t}", model.pseudo_log_likelihood(t)?);
    }

    // one masked-LM step on position 3
    let ids = model.token_ids(texts[0])?;
    let grads = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mut masked = ids.clone();
        masked[3] = Tokenizer::MASK_ID;
        let h = model.forward(&mut tape, &bound, &masked);
        let logits = model.mlm_logits(&mut tape, &bound, h, &[3]);
        let loss = tape.cross_entropy(logits, &[ids[3]]);
        println!("mlm loss {:.4}", tape.scalar(loss));
        model.gradients(&tape, loss)?
    };
    model.sgd_step(&grads, 0.1)?;

    let bytes = checkpoint::to_bytes(&model);
    let back = checkpoint::from_bytes(&bytes)?;
    println!("checkpoint {} bytes, identical: {}", bytes.len(), back == model);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
