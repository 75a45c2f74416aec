//! Instruction records, prompt templates, the byte tokenizer and batch assembly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
/// 256 byte values plus BOS and EOS.
pub const VOCAB_SIZE: usize = 258;

pub const TEMPLATE_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n";
pub const TEMPLATE_NO_INPUT: &str = "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n";

/// One Alpaca-style record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    instruction: Option<String>,
    input: Option<String>,
    output: Option<String>,
}

/// Which template a record renders with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    WithInput,
    NoInput,
}

impl InstructionRecord {
    pub fn template(&self) -> TemplateId {
        if self.input.is_empty() {
            TemplateId::NoInput
        } else {
            TemplateId::WithInput
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.instruction.is_empty() {
            return Err("instruction is empty".into());
        }
        if self.output.is_empty() {
            return Err("output is empty".into());
        }
        Ok(())
    }
}

fn parse_lines(text: &str, require_output: bool) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
            if e.is_data() {
                Error::Schema {
                    line: line_no,
                    message: e.to_string(),
                }
            } else {
                Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                }
            }
        })?;
        let missing = |field: &str| Error::Schema {
            line: line_no,
            message: format!("missing required field `{field}`"),
        };
        let instruction = raw.instruction.ok_or_else(|| missing("instruction"))?;
        let output = match (raw.output, require_output) {
            (Some(o), _) => o,
            (None, true) => return Err(missing("output")),
            (None, false) => String::new(),
        };
        let rec = InstructionRecord {
            instruction,
            input: raw.input.unwrap_or_default(),
            output,
        };
        let check = if require_output {
            rec.validate()
        } else if rec.instruction.is_empty() {
            Err("instruction is empty".into())
        } else {
            Ok(())
        };
        check.map_err(|message| Error::Schema { line: line_no, message })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a line-delimited JSON file of records, preserving order.
pub fn load_instruction_dataset(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lines(&text, true)
}

/// Like [`load_instruction_dataset`] but `output` may be absent (prompt-only files).
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lines(&text, false)
}

pub fn parse_instruction_dataset(text: &str) -> Result<Vec<InstructionRecord>> {
    parse_lines(text, true)
}

pub fn render_prompt(record: &InstructionRecord, template: TemplateId) -> String {
    match template {
        TemplateId::WithInput => TEMPLATE_WITH_INPUT
            .replacen("{instruction}", &record.instruction, 1)
            .replacen("{input}", &record.input, 1),
        TemplateId::NoInput => TEMPLATE_NO_INPUT.replacen("{instruction}", &record.instruction, 1),
    }
}

/// Renders with the template the record selects (no-input when `input` is empty).
pub fn render(record: &InstructionRecord) -> String {
    render_prompt(record, record.template())
}

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Bytes of the ids below 256; specials are dropped.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

/// `BOS + prompt bytes`: the context a model conditions on before responding.
pub fn prompt_ids(record: &InstructionRecord) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenize(&render(record)));
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    /// BOS plus the rendered prompt.
    pub prompt_len: usize,
}

impl TokenizedExample {
    pub fn from_record(record: &InstructionRecord, mask_prompt: bool) -> Self {
        let mut token_ids = prompt_ids(record);
        let prompt_len = token_ids.len();
        token_ids.extend(tokenize(&record.output));
        token_ids.push(EOS_ID);
        let loss_mask = (0..token_ids.len())
            .map(|i| u8::from(!mask_prompt || i >= prompt_len))
            .collect();
        Self {
            token_ids,
            loss_mask,
            prompt_len,
        }
    }
}

pub fn tokenize_records(records: &[InstructionRecord], mask_prompt: bool) -> Vec<TokenizedExample> {
    records
        .iter()
        .map(|r| TokenizedExample::from_record(r, mask_prompt))
        .collect()
}

/// A padded `[rows × seq_len]` training batch. `targets` are `inputs`
/// shifted left by one; `mask` selects the target positions that count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<u8>,
    /// Number of non-pad input positions in each row.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn row_inputs(&self, r: usize) -> &[u32] {
        &self.inputs[r * self.seq_len..r * self.seq_len + self.lengths[r]]
    }

    pub fn row_targets(&self, r: usize) -> &[u32] {
        &self.targets[r * self.seq_len..r * self.seq_len + self.lengths[r]]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.seq_len..r * self.seq_len + self.lengths[r]]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSet {
    pub batches: Vec<Batch>,
    /// Examples whose prompt alone did not fit.
    pub dropped: usize,
}

/// Truncates on the right to `max_seq_len + 1` tokens (so inputs fit the
/// context), shifts targets, pads with `pad_id`. Examples whose prompt alone
/// overflows are dropped and counted.
pub fn build_batches(
    examples: &[TokenizedExample],
    max_seq_len: usize,
    batch_size: usize,
    pad_id: u32,
    mask_prompt: bool,
) -> Result<BatchSet> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if max_seq_len == 0 {
        return Err(Error::InvalidArgument("max_seq_len must be >= 1".into()));
    }
    let mut kept = Vec::with_capacity(examples.len());
    let mut dropped = 0;
    for ex in examples {
        if ex.prompt_len > max_seq_len || ex.token_ids.len() < 2 {
            dropped += 1;
        } else {
            kept.push(ex);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} example(s) whose prompt exceeds max_seq_len {max_seq_len}");
    }

    let mut batches = Vec::new();
    for chunk in kept.chunks(batch_size) {
        let rows = chunk.len();
        let mut b = Batch {
            rows,
            seq_len: max_seq_len,
            inputs: vec![pad_id; rows * max_seq_len],
            targets: vec![pad_id; rows * max_seq_len],
            mask: vec![0; rows * max_seq_len],
            lengths: Vec::with_capacity(rows),
        };
        for (r, ex) in chunk.iter().enumerate() {
            let n = ex.token_ids.len().min(max_seq_len + 1);
            let len = n - 1;
            let base = r * max_seq_len;
            b.inputs[base..base + len].copy_from_slice(&ex.token_ids[..len]);
            b.targets[base..base + len].copy_from_slice(&ex.token_ids[1..n]);
            for t in 0..len {
                let target_idx = t + 1;
                let selected = ex.loss_mask[target_idx] == 1 && (!mask_prompt || target_idx >= ex.prompt_len);
                b.mask[base + t] = u8::from(selected);
            }
            b.lengths.push(len);
        }
        batches.push(b);
    }
    Ok(BatchSet { batches, dropped })
}

/// Deterministic permutation of `items` for the given seed and epoch.
pub fn shuffled<T: Clone>(items: &[T], seed: u64, epoch: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut out = items.to_vec();
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(instruction: &str, input: &str, output: &str) -> InstructionRecord {
        InstructionRecord {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        }
    }

    #[test]
    fn loads_records_in_order() {
        assert!(parse_instruction_dataset("").unwrap().is_empty());
        let one = parse_instruction_dataset(r#"{"instruction":"a","input":"","output":"b"}"#).unwrap();
        assert_eq!(one, vec![rec("a", "", "b")]);
        let text = "{\"instruction\":\"1\",\"output\":\"x\"}\n{\"instruction\":\"2\",\"input\":\"i\",\"output\":\"y\"}\n{\"instruction\":\"3\",\"output\":\"z\"}\n";
        let three = parse_instruction_dataset(text).unwrap();
        let order: Vec<&str> = three.iter().map(|r| r.instruction.as_str()).collect();
        assert_eq!(order, ["1", "2", "3"]);
    }

    #[test]
    fn malformed_and_missing_fields() {
        let err = parse_instruction_dataset("{\"instruction\":\"a\",\"output\":\"b\"}\n{oops").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        let err = parse_instruction_dataset("{\"instruction\":\"a\"}").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }), "{err:?}");
        let err = parse_instruction_dataset("{\"instruction\":\"\",\"output\":\"b\"}").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn template_selection_and_golden_render() {
        let r = rec("Reverse the word.", "", "x");
        assert_eq!(r.template(), TemplateId::NoInput);
        assert_eq!(render(&r), render(&r));
        let golden = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\nReverse the word.\n\n### Input:\nstone\n\n### Response:\n";
        assert_eq!(render(&rec("Reverse the word.", "stone", "enots")), golden);
        let golden_no_input = "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n### Instruction:\nName a color.\n\n### Response:\n";
        assert_eq!(render(&rec("Name a color.", "", "red")), golden_no_input);
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        assert_eq!(detokenize(&[BOS_ID, 97, EOS_ID]), "a");
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let ids = tokenize_bytes(&bytes);
            prop_assert!(ids.iter().all(|&i| i < 256));
            prop_assert_eq!(detokenize_bytes(&ids), bytes);
        }
    }

    #[test]
    fn padding_and_masking() {
        let ex = TokenizedExample::from_record(&rec("i", "", "ok"), true);
        let total = ex.token_ids.len();
        let set = build_batches(std::slice::from_ref(&ex), total + 10, 1, 0, true).unwrap();
        let b = &set.batches[0];
        assert_eq!(b.lengths[0], total - 1);
        // pads carry mask 0
        assert!(b.mask[total - 1..].iter().all(|&m| m == 0));
        // prompt targets are masked; response ("ok" + EOS) is selected
        assert_eq!(b.masked_count(), 3);
        assert_eq!(&b.targets[total - 2..total - 1], &[EOS_ID]);
        for t in 0..total - 1 {
            assert_eq!(b.mask[t] == 1, t + 1 >= ex.prompt_len);
            assert_eq!(b.targets[t], ex.token_ids[t + 1]);
            assert_eq!(b.inputs[t], ex.token_ids[t]);
        }
    }

    #[test]
    fn no_pads_when_full_and_overflow_dropped() {
        let ex = TokenizedExample::from_record(&rec("i", "", "ok"), true);
        let n = ex.token_ids.len() - 1;
        let set = build_batches(&[ex.clone(), ex.clone()], n, 2, 0, true).unwrap();
        let b = &set.batches[0];
        assert_eq!(b.lengths, vec![n, n]);
        assert!(b.inputs.iter().all(|&t| t != 0));

        let set = build_batches(std::slice::from_ref(&ex), ex.prompt_len - 1, 1, 0, true).unwrap();
        assert_eq!(set.dropped, 1);
        assert!(set.batches.is_empty());
        // right truncation keeps the prompt head
        let set = build_batches(std::slice::from_ref(&ex), ex.prompt_len, 1, 0, true).unwrap();
        assert_eq!(set.batches[0].masked_count(), 1);
        assert_eq!(set.batches[0].inputs[..ex.prompt_len], ex.token_ids[..ex.prompt_len]);
    }

    #[test]
    fn unmasked_prompt_counts_every_target() {
        let ex = TokenizedExample::from_record(&rec("i", "", "ok"), false);
        let set = build_batches(std::slice::from_ref(&ex), 512, 1, 0, false).unwrap();
        assert_eq!(set.batches[0].masked_count(), ex.token_ids.len() - 1);
    }

    #[test]
    fn shuffle_is_seeded() {
        let xs: Vec<u32> = (0..50).collect();
        assert_eq!(shuffled(&xs, 3, 0), shuffled(&xs, 3, 0));
        assert_ne!(shuffled(&xs, 3, 0), shuffled(&xs, 3, 1));
        let mut s = shuffled(&xs, 3, 0);
        s.sort();
        assert_eq!(s, xs);
    }
}
