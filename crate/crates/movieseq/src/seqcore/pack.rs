//! Flattening an interleaved sample into the slot/mask layout the model
//! consumes: `USER:` ∥ context ∥ question ∥ newline `MovieSeq:` ∥ answer ∥ EOS,
//! with the loss mask true exactly on the answer tokens and the final EOS.

use std::ops::Range;

use super::{
    InterleavedSample, Segment, SegmentPayload, SegmentTag, SeqError, TokenId, Vocabulary, EOS,
    SCAFFOLD_ASSISTANT, SCAFFOLD_USER,
};
use crate::encoders::FrameRef;

/// One position of a packed sequence: a token id, or an index into
/// `PackedSequence::visual_slots`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    Visual(usize),
}

#[derive(Debug, Clone)]
pub struct PackedSequence {
    pub slots: Vec<Slot>,
    pub loss_mask: Vec<bool>,
    /// One entry per frame, flattened over visual segments in context order.
    pub visual_slots: Vec<FrameRef>,
    /// Contiguous runs of `visual_slots`, one per visual segment; the
    /// projector treats each run as one temporal sequence.
    pub visual_groups: Vec<Range<usize>>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Token at a position, if that position holds a token.
    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        match self.slots.get(pos) {
            Some(Slot::Token(t)) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    Head,
    Tail,
}

/// Clamp a token list to `max` tokens, keeping the head or the tail.
pub fn truncate_context(tokens: &[TokenId], max: usize, keep: Keep) -> Vec<TokenId> {
    if tokens.len() <= max {
        return tokens.to_vec();
    }
    match keep {
        Keep::Head => tokens[..max].to_vec(),
        Keep::Tail => tokens[tokens.len() - max..].to_vec(),
    }
}

/// Pack a training sample. The answer must be non-empty; the loss mask covers
/// the answer tokens plus the terminating EOS and nothing else.
pub fn pack(
    sample: &InterleavedSample,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PackedSequence, SeqError> {
    if sample.answer.is_empty() {
        return Err(SeqError::EmptyAnswer);
    }
    pack_inner(sample, vocab, max_len, true)
}

/// Pack a generation prefix: same layout but ending right after the
/// assistant tag, with an all-false loss mask.
pub fn pack_prefix(
    sample: &InterleavedSample,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PackedSequence, SeqError> {
    pack_inner(sample, vocab, max_len, false)
}

enum Item {
    Text {
        tag: SegmentTag,
        tokens: Vec<TokenId>,
    },
    Visual {
        tag: SegmentTag,
        frames: Vec<FrameRef>,
    },
}

impl Item {
    fn len(&self) -> usize {
        match self {
            Item::Text { tokens, .. } => tokens.len(),
            Item::Visual { frames, .. } => frames.len(),
        }
    }
}

fn context_item(seg: &Segment) -> Item {
    match &seg.payload {
        SegmentPayload::Text(tokens) => Item::Text {
            tag: seg.tag,
            tokens: tokens.clone(),
        },
        SegmentPayload::Visual(p) => Item::Visual {
            tag: seg.tag,
            frames: p.frames.clone(),
        },
    }
}

fn pack_inner(
    sample: &InterleavedSample,
    vocab: &Vocabulary,
    max_len: usize,
    with_answer: bool,
) -> Result<PackedSequence, SeqError> {
    let user = vocab.tokenize(SCAFFOLD_USER);
    let assistant = vocab.tokenize(SCAFFOLD_ASSISTANT);
    let newline = vocab.byte_id(b'\n');

    let mut ctx: Vec<Item> = sample.context.iter().map(context_item).collect();

    let fixed_len = user.len()
        + sample.question.len()
        + 1 // newline
        + assistant.len()
        + if with_answer { sample.answer.len() + 1 } else { 0 };
    let ctx_len: usize = ctx.iter().map(Item::len).sum();
    let total = fixed_len + ctx_len;

    if total > max_len {
        let mut overflow = total - max_len;
        shrink_text(&mut ctx, SegmentTag::Plot, Keep::Head, &mut overflow);
        shrink_text(&mut ctx, SegmentTag::Subtitle, Keep::Tail, &mut overflow);
        drop_history_pairs(&mut ctx, &mut overflow);
        if overflow > 0 {
            let needed: usize = fixed_len + ctx.iter().map(Item::len).sum::<usize>();
            return Err(SeqError::OverLength {
                needed,
                max: max_len,
            });
        }
    }

    let mut slots = Vec::with_capacity(max_len.min(total));
    let mut visual_slots: Vec<FrameRef> = Vec::new();
    let mut visual_groups: Vec<Range<usize>> = Vec::new();

    let push_tokens = |slots: &mut Vec<Slot>, tokens: &[TokenId]| {
        slots.extend(tokens.iter().map(|&t| Slot::Token(t)));
    };

    push_tokens(&mut slots, &user);
    for item in &ctx {
        match item {
            Item::Text { tokens, .. } => push_tokens(&mut slots, tokens),
            Item::Visual { frames, .. } => {
                let start = visual_slots.len();
                for frame in frames {
                    slots.push(Slot::Visual(visual_slots.len()));
                    visual_slots.push(frame.clone());
                }
                visual_groups.push(start..visual_slots.len());
            }
        }
    }
    push_tokens(&mut slots, &sample.question);
    slots.push(Slot::Token(newline));
    push_tokens(&mut slots, &assistant);

    let answer_start = slots.len();
    if with_answer {
        push_tokens(&mut slots, &sample.answer);
        slots.push(Slot::Token(EOS));
    }

    let mut loss_mask = vec![false; slots.len()];
    for m in loss_mask.iter_mut().skip(answer_start) {
        *m = true;
    }

    Ok(PackedSequence {
        slots,
        loss_mask,
        visual_slots,
        visual_groups,
    })
}

fn shrink_text(ctx: &mut [Item], tag: SegmentTag, keep: Keep, overflow: &mut usize) {
    for item in ctx.iter_mut() {
        if *overflow == 0 {
            return;
        }
        if let Item::Text {
            tag: item_tag,
            tokens,
        } = item
        {
            if *item_tag == tag {
                let cut = (*overflow).min(tokens.len());
                *tokens = truncate_context(tokens, tokens.len() - cut, keep);
                *overflow -= cut;
            }
        }
    }
}

/// Drop whole (history clip, narration) pairs oldest-first. A pair is a
/// history-tagged visual item immediately followed by a history-tagged text
/// item; the leading counting sentence is text without a preceding clip and
/// is left alone.
fn drop_history_pairs(ctx: &mut Vec<Item>, overflow: &mut usize) {
    while *overflow > 0 {
        let mut pair_at = None;
        for i in 0..ctx.len().saturating_sub(1) {
            let clip = matches!(
                ctx[i],
                Item::Visual {
                    tag: SegmentTag::History,
                    ..
                }
            );
            let cap = matches!(
                ctx[i + 1],
                Item::Text {
                    tag: SegmentTag::History,
                    ..
                }
            );
            if clip && cap {
                pair_at = Some(i);
                break;
            }
        }
        let Some(i) = pair_at else { return };
        let freed = ctx[i].len() + ctx[i + 1].len();
        ctx.drain(i..=i + 1);
        *overflow = overflow.saturating_sub(freed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VisualPayload;
    use crate::seqcore::Role;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["what is in the clip a b c d e one two three"])
    }

    fn video(tag: SegmentTag, seed: u64, frames: usize) -> Segment {
        Segment::video(Role::Context, tag, VisualPayload::synthetic(seed, frames)).unwrap()
    }

    fn image(tag: SegmentTag, seed: u64) -> Segment {
        Segment::image(Role::Context, tag, VisualPayload::synthetic(seed, 1)).unwrap()
    }

    fn sample(context: Vec<Segment>, answer_len: usize) -> InterleavedSample {
        let v = vocab();
        let q = v.tokenize("what is in the clip");
        let answer: Vec<TokenId> = v.tokenize("a b c d e")[..answer_len].to_vec();
        InterleavedSample::new("t", context, q, answer)
    }

    #[test]
    fn mask_counts_answer_plus_eos() {
        let v = vocab();
        let packed = pack(&sample(vec![video(SegmentTag::General, 1, 4)], 5), &v, 512).unwrap();
        assert_eq!(packed.loss_mask.iter().filter(|&&m| m).count(), 6);
    }

    #[test]
    fn visual_slots_count_frames_in_order() {
        let v = vocab();
        let ctx = vec![image(SegmentTag::Character, 9), video(SegmentTag::General, 1, 8)];
        let packed = pack(&sample(ctx, 2), &v, 512).unwrap();
        assert_eq!(packed.visual_slots.len(), 9);
        assert_eq!(packed.visual_groups, vec![0..1, 1..9]);
    }

    #[test]
    fn permuting_context_keeps_mask_count() {
        let v = vocab();
        let a = || image(SegmentTag::Character, 9);
        let b = || video(SegmentTag::General, 1, 3);
        let p1 = pack(&sample(vec![a(), b()], 3), &v, 512).unwrap();
        let p2 = pack(&sample(vec![b(), a()], 3), &v, 512).unwrap();
        assert_ne!(p1.visual_slots, p2.visual_slots);
        assert_ne!(p1.visual_groups, p2.visual_groups);
        assert_eq!(
            p1.loss_mask.iter().filter(|&&m| m).count(),
            p2.loss_mask.iter().filter(|&&m| m).count()
        );
    }

    #[test]
    fn mask_is_contiguous_tail_ending_at_eos() {
        let v = vocab();
        let packed = pack(&sample(vec![video(SegmentTag::General, 1, 2)], 4), &v, 512).unwrap();
        let first = packed.loss_mask.iter().position(|&m| m).unwrap();
        assert!(packed.loss_mask[first..].iter().all(|&m| m));
        assert_eq!(packed.token_at(packed.len() - 1), Some(EOS));
    }

    #[test]
    fn empty_answer_is_rejected_in_training() {
        let v = vocab();
        let s = sample(vec![], 0);
        assert!(matches!(pack(&s, &v, 512), Err(SeqError::EmptyAnswer)));
        assert!(pack_prefix(&s, &v, 512).is_ok());
    }

    #[test]
    fn prefix_ends_after_assistant_tag() {
        let v = vocab();
        let s = sample(vec![video(SegmentTag::General, 1, 2)], 3);
        let prefix = pack_prefix(&s, &v, 512).unwrap();
        let full = pack(&s, &v, 512).unwrap();
        assert_eq!(full.slots[..prefix.len()], prefix.slots[..]);
        assert_eq!(full.len(), prefix.len() + 4); // 3 answer tokens + EOS
        assert!(prefix.loss_mask.iter().all(|&m| !m));
    }

    #[test]
    fn pack_is_deterministic() {
        let v = vocab();
        let s = sample(vec![image(SegmentTag::Character, 3), video(SegmentTag::General, 1, 5)], 2);
        let p1 = pack(&s, &v, 512).unwrap();
        let p2 = pack(&s, &v, 512).unwrap();
        assert_eq!(p1.slots, p2.slots);
        assert_eq!(p1.loss_mask, p2.loss_mask);
        assert_eq!(p1.visual_slots, p2.visual_slots);
    }

    #[test]
    fn plot_truncates_before_subtitles() {
        let v = vocab();
        let plot_tokens = v.tokenize("one two three one two three one two");
        let sub_tokens = v.tokenize("a b c d e");
        let ctx = vec![
            Segment::text(Role::Context, SegmentTag::Plot, plot_tokens.clone()),
            Segment::text(Role::Context, SegmentTag::Subtitle, sub_tokens.clone()),
        ];
        let s = sample(ctx, 2);
        let fixed = pack(&sample(vec![], 2), &v, 512).unwrap().len();
        // Allow room for everything except three plot tokens.
        let max = fixed + plot_tokens.len() - 3 + sub_tokens.len();
        let packed = pack(&s, &v, max).unwrap();
        assert_eq!(packed.len(), max);
        // Plot keeps its head: first plot token still present right after "USER:".
        assert_eq!(packed.token_at(1), Some(plot_tokens[0]));
        // Subtitles intact.
        let slots: Vec<_> = (0..packed.len()).filter_map(|i| packed.token_at(i)).collect();
        for t in &sub_tokens {
            assert!(slots.contains(t));
        }
    }

    #[test]
    fn subtitles_keep_tail_when_truncated() {
        let v = vocab();
        let sub_tokens = v.tokenize("one two three a b c");
        let ctx = vec![Segment::text(Role::Context, SegmentTag::Subtitle, sub_tokens.clone())];
        let s = sample(ctx, 2);
        let fixed = pack(&sample(vec![], 2), &v, 512).unwrap().len();
        let max = fixed + 2;
        let packed = pack(&s, &v, max).unwrap();
        // The two surviving subtitle tokens are the last two.
        assert_eq!(packed.token_at(1), Some(sub_tokens[4]));
        assert_eq!(packed.token_at(2), Some(sub_tokens[5]));
    }

    #[test]
    fn history_pairs_drop_oldest_first() {
        let v = vocab();
        let cap1 = v.tokenize("one two");
        let cap2 = v.tokenize("three a");
        let ctx = vec![
            Segment::text(Role::Context, SegmentTag::History, v.tokenize("two clips")),
            video(SegmentTag::History, 1, 4),
            Segment::text(Role::Context, SegmentTag::History, cap1.clone()),
            video(SegmentTag::History, 2, 4),
            Segment::text(Role::Context, SegmentTag::History, cap2.clone()),
            video(SegmentTag::General, 3, 4),
        ];
        let s = sample(ctx, 2);
        let full = pack(&s, &v, 512).unwrap();
        let max = full.len() - 3; // force dropping exactly one pair
        let packed = pack(&s, &v, max).unwrap();
        assert_eq!(packed.visual_slots.len(), 8); // oldest history clip gone
        let slots: Vec<_> = (0..packed.len()).filter_map(|i| packed.token_at(i)).collect();
        assert!(!slots.contains(&cap1[0]));
        assert!(slots.contains(&cap2[0]));
    }

    #[test]
    fn overlength_without_recourse_errors() {
        let v = vocab();
        let s = sample(vec![video(SegmentTag::General, 1, 40)], 3);
        assert!(matches!(
            pack(&s, &v, 16),
            Err(SeqError::OverLength { .. })
        ));
    }

    #[test]
    fn truncate_context_cases() {
        let toks: Vec<TokenId> = (0..600).collect();
        let head = truncate_context(&toks, 512, Keep::Head);
        assert_eq!(head.len(), 512);
        assert_eq!(head[0], 0);
        let tail = truncate_context(&toks, 512, Keep::Tail);
        assert_eq!(tail[0], 88);
        assert_eq!(tail.len(), 512);
        let short: Vec<TokenId> = (0..100).collect();
        assert_eq!(truncate_context(&short, 512, Keep::Head), short);
    }
}
