use soft_forge::data::{tokenize, BOS_ID, EOS_ID, VOCAB_SIZE};
use soft_forge::inference::{generate, GenerationRequest, HeadChoice};
use soft_forge::model::ops::argmax;
use soft_forge::model::{forward_single, ExitSet, ModelConfig, Parameters, TokenBatch};
use soft_forge::Error;

fn byte_model(seed: u64) -> Parameters<f64> {
    let cfg = ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_heads: 2,
        n_blocks: 4,
        ffn_hidden: 24,
        max_seq_len: 32,
        ..ModelConfig::tiny()
    };
    Parameters::init(&cfg, seed).unwrap()
}

fn request(prompt: &str, exit: usize, max_new: usize) -> GenerationRequest {
    GenerationRequest {
        prompt: prompt.into(),
        exit_depth: exit,
        max_new_tokens: max_new,
        head_source: HeadChoice::Shared,
    }
}

#[test]
fn eos_dominated_head_stops_after_one_token() {
    let mut p = byte_model(1);
    let exits = ExitSet::new(vec![2, 4], 4).unwrap();
    let (d, v) = (16, VOCAB_SIZE);
    // Identity blocks, a final norm that keeps only component 0, and an
    // embedding whose component 0 is always 1: every position scores
    // head row 0, whose EOS entry dominates.
    p.final_norm.data_mut().iter_mut().for_each(|g| *g = 0.0);
    p.final_norm.data_mut()[0] = 1.0;
    p.head.data_mut()[EOS_ID as usize] = 1e3;
    for b in &mut p.blocks {
        b.wo.fill(0.0);
        b.w_down.fill(0.0);
    }
    for t in 0..v {
        p.token_embedding.data_mut()[t * d] = 1.0;
    }
    let out = generate(&p, &exits, None, &request("hello", 2, 50)).unwrap();
    assert_eq!(out.tokens, vec![EOS_ID]);
    assert_eq!(out.text, "");
}

#[test]
fn full_exit_matches_manual_greedy_loop() {
    let p = byte_model(2);
    let exits = ExitSet::new(vec![2, 4], 4).unwrap();
    let out = generate(&p, &exits, None, &request("ab", 4, 6)).unwrap();

    let mut seq = vec![BOS_ID];
    seq.extend(tokenize("ab"));
    let mut want = Vec::new();
    while want.len() < 6 {
        let (logits, _) = forward_single(&p, 4, &TokenBatch::from_rows(&[seq.clone()]).unwrap()).unwrap();
        let last = &logits.data()[(seq.len() - 1) * VOCAB_SIZE..];
        let next = argmax(last) as u32;
        want.push(next);
        seq.push(next);
        if next == EOS_ID {
            break;
        }
    }
    assert_eq!(out.tokens, want);
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let p = byte_model(3);
    let exits = ExitSet::new(vec![2, 4], 4).unwrap();
    let a = generate(&p, &exits, None, &request("xyz", 2, 5)).unwrap();
    let b = generate(&p, &exits, None, &request("xyz", 2, 5)).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 5);
    // The context limit caps the continuation.
    let long = "a".repeat(28);
    let c = generate(&p, &exits, None, &request(&long, 2, 100)).unwrap();
    assert!(c.tokens.len() <= 32 - 29);
}

#[test]
fn invalid_requests() {
    let p = byte_model(4);
    let exits = ExitSet::new(vec![2, 4], 4).unwrap();
    match generate(&p, &exits, None, &request("a", 3, 5)) {
        Err(Error::InvalidDepth { depth, valid }) => {
            assert_eq!(depth, 3);
            assert_eq!(valid, vec![2, 4]);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        generate(&p, &exits, None, &request("a", 2, 0)),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        generate(&p, &exits, None, &request(&"a".repeat(40), 2, 1)),
        Err(Error::SequenceTooLong { .. })
    ));
    let adapted = GenerationRequest {
        head_source: HeadChoice::Adapted,
        ..request("a", 2, 1)
    };
    assert!(matches!(generate(&p, &exits, None, &adapted), Err(Error::Config(_))));
}
