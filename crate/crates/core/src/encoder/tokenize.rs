//! Encoder input construction and training-time augmentations.

use rand::Rng;

use super::vocab::{Vocabulary, CLS_ID, MASK_ID, M_END_ID, M_START_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::mention_gen::MentionExample;
use crate::ontology::{entity_reference_tokens, Entity, EntityCatalog};

/// How many left and right context tokens survive when `budget` positions
/// are available. The longer side is trimmed from its outer end first; once
/// both sides exceed half the budget the left keeps `budget / 2`.
pub fn trim_counts(left: usize, right: usize, budget: usize) -> (usize, usize) {
    if left + right <= budget {
        return (left, right);
    }
    let half = budget / 2;
    if left <= half {
        (left, budget - left)
    } else if right <= budget - half {
        (budget - right, right)
    } else {
        (half, budget - half)
    }
}

fn ids<'a>(vocab: &Vocabulary, tokens: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
    tokens.into_iter().map(|t| vocab.id(t)).collect()
}

/// Token pieces of one marked mention before any trimming.
struct Marked {
    left: Vec<u32>,
    mention: Vec<u32>,
    right: Vec<u32>,
}

impl Marked {
    fn new(example: &MentionExample, vocab: &Vocabulary) -> Self {
        Marked {
            left: ids(vocab, example.ctx_l.iter().map(String::as_str)),
            mention: ids(vocab, example.mention_tokens()),
            right: ids(vocab, example.ctx_r.iter().map(String::as_str)),
        }
    }

    fn context_len(&self) -> usize {
        self.left.len() + self.right.len()
    }

    /// `ctx_l [M_s] mention [M_e] ctx_r [SEP]` keeping `budget` context tokens.
    fn emit(&self, budget: usize, out: &mut Vec<u32>) {
        let (keep_l, keep_r) = trim_counts(self.left.len(), self.right.len(), budget);
        out.extend_from_slice(&self.left[self.left.len() - keep_l..]);
        out.push(M_START_ID);
        out.extend_from_slice(&self.mention);
        out.push(M_END_ID);
        out.extend_from_slice(&self.right[..keep_r]);
        out.push(SEP_ID);
    }
}

/// `[CLS] ctx_l [M_s] mention [M_e] ctx_r [SEP]`, context trimmed from the
/// outer ends to fit `max_len`.
pub fn tokenize_mention(
    example: &MentionExample,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<u32>> {
    let marked = Marked::new(example, vocab);
    let skeleton = 4 + marked.mention.len();
    if skeleton > max_len {
        return Err(Error::MentionTooLong {
            needed: skeleton,
            max_len,
        });
    }
    let mut out = Vec::with_capacity(max_len.min(skeleton + marked.context_len()));
    out.push(CLS_ID);
    marked.emit(max_len - skeleton, &mut out);
    Ok(out)
}

/// Query sequence followed by the candidate sequence without its `[CLS]`.
/// The context budget is split evenly between the two halves (unused share
/// passes to the other half), then each half trims its own outer context.
pub fn build_cross_input(
    query: &MentionExample,
    candidate: &MentionExample,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<u32>> {
    let q = Marked::new(query, vocab);
    let c = Marked::new(candidate, vocab);
    let skeleton = 4 + q.mention.len() + 3 + c.mention.len();
    if skeleton > max_len {
        return Err(Error::MentionTooLong {
            needed: skeleton,
            max_len,
        });
    }
    let (q_budget, c_budget) = trim_counts(q.context_len(), c.context_len(), max_len - skeleton);
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS_ID);
    q.emit(q_budget, &mut out);
    c.emit(c_budget, &mut out);
    Ok(out)
}

/// Reference-encoder input for an entity, truncated to `max_len` with a
/// closing `[SEP]` kept.
pub fn tokenize_reference(
    entity: &Entity,
    vocab: &Vocabulary,
    max_len: usize,
    include_description: bool,
) -> Vec<u32> {
    let mut out = ids(
        vocab,
        entity_reference_tokens(entity, include_description)
            .iter()
            .map(String::as_str),
    );
    if out.len() > max_len {
        out.truncate(max_len - 1);
        out.push(SEP_ID);
    }
    out
}

/// With probability `p_mask`, every token strictly between the first
/// `[M_s]` and the following `[M_e]` becomes `[MASK]`. One uniform draw is
/// consumed per call.
pub fn apply_mask_augmentation<R: Rng + ?Sized>(
    mut sequence: Vec<u32>,
    p_mask: f64,
    rng: &mut R,
) -> Vec<u32> {
    let fire = rng.gen::<f64>() < p_mask;
    if !fire {
        return sequence;
    }
    if let Some(start) = sequence.iter().position(|&t| t == M_START_ID) {
        if let Some(len) = sequence[start + 1..].iter().position(|&t| t == M_END_ID) {
            sequence[start + 1..start + 1 + len].fill(MASK_ID);
        }
    }
    sequence
}

/// With probability `p_replace`, swaps the mention for a uniformly chosen
/// other surface (name or alias) of the same entity. Contexts and the
/// entity id are untouched. One uniform draw is always consumed, plus one
/// index draw when a swap happens.
pub fn apply_replacement_augmentation<R: Rng + ?Sized>(
    example: &MentionExample,
    catalog: &EntityCatalog,
    p_replace: f64,
    rng: &mut R,
) -> Result<MentionExample> {
    let entity = catalog.get(&example.entity_id)?;
    let fire = rng.gen::<f64>() < p_replace;
    if !fire {
        return Ok(example.clone());
    }
    let options: Vec<&str> = entity
        .surfaces()
        .filter(|s| *s != example.mention)
        .collect();
    if options.is_empty() {
        return Ok(example.clone());
    }
    let pick = options[rng.gen_range(0..options.len())];
    let mut out = example.clone();
    out.mention = pick.to_string();
    out.end_char = out.start_char + pick.chars().count();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mention_gen::MentionSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(left: &[&str], mention: &str, right: &[&str]) -> MentionExample {
        MentionExample {
            doc_id: "d".into(),
            entity_id: "E".into(),
            mention: mention.into(),
            start_char: 0,
            end_char: mention.chars().count(),
            ctx_l: left.iter().map(|s| s.to_string()).collect(),
            ctx_r: right.iter().map(|s| s.to_string()).collect(),
            source: MentionSource::SelfSupervised,
        }
    }

    fn vocab_for(words: &[&str]) -> Vocabulary {
        Vocabulary::build(
            std::iter::empty(),
            1,
            words.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
        )
    }

    fn render(vocab: &Vocabulary, seq: &[u32]) -> String {
        seq.iter()
            .map(|&i| vocab.token(i).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn template_order() {
        let v = vocab_for(&["a", "b", "x"]);
        let seq = tokenize_mention(&example(&["a"], "x", &["b"]), &v, 32).unwrap();
        assert_eq!(render(&v, &seq), "[CLS] a [M_s] x [M_e] b [SEP]");
    }

    #[test]
    fn empty_contexts() {
        let v = vocab_for(&["tumor"]);
        let seq = tokenize_mention(&example(&[], "big tumor", &[]), &v, 32).unwrap();
        assert_eq!(seq.len(), 4 + 2);
        assert_eq!(render(&v, &seq), "[CLS] [M_s] [UNK] tumor [M_e] [SEP]");
    }

    #[test]
    fn symmetric_outer_trim() {
        let left: Vec<String> = (0..40).map(|i| format!("l{i}")).collect();
        let right: Vec<String> = (0..40).map(|i| format!("r{i}")).collect();
        let l: Vec<&str> = left.iter().map(String::as_str).collect();
        let r: Vec<&str> = right.iter().map(String::as_str).collect();
        let mut words = l.clone();
        words.extend(&r);
        words.push("m");
        let v = vocab_for(&words);
        let seq = tokenize_mention(&example(&l, "m", &r), &v, 32).unwrap();
        assert_eq!(seq.len(), 32);

        // hand trim: drop one token at a time from the outer end of the
        // longer side (left on ties) until 27 context tokens remain
        let (mut hl, mut hr) = (l.clone(), r.clone());
        while hl.len() + hr.len() > 32 - 5 {
            if hl.len() >= hr.len() {
                hl.remove(0);
            } else {
                hr.pop();
            }
        }
        let expected = format!("[CLS] {} [M_s] m [M_e] {} [SEP]", hl.join(" "), hr.join(" "));
        assert_eq!(render(&v, &seq), expected);
    }

    #[test]
    fn skeleton_too_long() {
        let v = vocab_for(&[]);
        let long = vec!["w"; 10].join(" ");
        assert!(matches!(
            tokenize_mention(&example(&[], &long, &[]), &v, 8),
            Err(Error::MentionTooLong { needed: 14, .. })
        ));
    }

    #[test]
    fn cross_input_template() {
        let v = vocab_for(&["a", "b", "c", "d", "x", "y"]);
        let q = example(&["a"], "x", &["b"]);
        let c = example(&["c"], "y", &["d"]);
        let seq = build_cross_input(&q, &c, &v, 64).unwrap();
        assert_eq!(
            render(&v, &seq),
            "[CLS] a [M_s] x [M_e] b [SEP] c [M_s] y [M_e] d [SEP]"
        );
    }

    #[test]
    fn cross_input_truncated() {
        let v = vocab_for(&["a", "b", "c", "d", "x", "y"]);
        let q = example(&["a"; 10], "x", &["b"; 10]);
        let c = example(&["c"; 10], "y", &["d"; 2]);
        // skeleton 5 + 4 = 9, budget 20 - 9 = 11 context tokens:
        // query half gets 5 (l2, r3), candidate half 6 (l4, r2)
        let seq = build_cross_input(&q, &c, &v, 20).unwrap();
        assert_eq!(
            render(&v, &seq),
            "[CLS] a a [M_s] x [M_e] b b b [SEP] c c c c [M_s] y [M_e] d d [SEP]"
        );
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = vec![CLS_ID, 9, M_START_ID, 10, 11, M_END_ID, 12, SEP_ID];
        for _ in 0..100 {
            assert_eq!(apply_mask_augmentation(seq.clone(), 0.0, &mut rng), seq);
        }
        let masked = apply_mask_augmentation(seq.clone(), 1.0, &mut rng);
        assert_eq!(
            masked,
            vec![CLS_ID, 9, M_START_ID, MASK_ID, MASK_ID, M_END_ID, 12, SEP_ID]
        );
    }

    #[test]
    fn mask_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = vec![CLS_ID, M_START_ID, 10, 11, M_END_ID, SEP_ID];
        let n = 10_000;
        let masked = (0..n)
            .filter(|_| apply_mask_augmentation(seq.clone(), 0.2, &mut rng)[2] == MASK_ID)
            .count();
        let frac = masked as f64 / n as f64;
        assert!((frac - 0.2).abs() <= 0.02, "masked fraction {frac}");
    }

    #[test]
    fn replacement() {
        let catalog = EntityCatalog::from_entities([
            Entity::new("E", "tumor").with_aliases(["neoplasm"]),
            Entity::new("Z", "zebra"),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = example(&["a"], "tumor", &["b"]);
        let out = apply_replacement_augmentation(&ex, &catalog, 1.0, &mut rng).unwrap();
        assert_eq!(out.mention, "neoplasm");
        assert_eq!(out.entity_id, "E");
        assert_eq!(out.ctx_l, ex.ctx_l);
        assert_eq!(out.ctx_r, ex.ctx_r);

        let mut z = example(&[], "zebra", &[]);
        z.entity_id = "Z".into();
        for _ in 0..20 {
            assert_eq!(
                apply_replacement_augmentation(&z, &catalog, 1.0, &mut rng).unwrap(),
                z
            );
        }
    }

    #[test]
    fn trim_counts_cases() {
        assert_eq!(trim_counts(3, 4, 10), (3, 4));
        assert_eq!(trim_counts(2, 40, 10), (2, 8));
        assert_eq!(trim_counts(40, 2, 10), (8, 2));
        assert_eq!(trim_counts(40, 40, 27), (13, 14));
    }
}
