//! Text-similarity metrics over raw byte strings.
//!
//! All metrics tokenize on ASCII whitespace and compare tokens as byte
//! slices. Identical strings score exactly 1.0 under every metric here;
//! that identity is load-bearing for the no-op-perturbation checks, so the
//! implementations avoid any floating-point path that could round it away.

use std::collections::HashMap;

/// Whitespace-trimmed byte equality.
pub fn exact_match(candidate: &[u8], reference: &[u8]) -> bool {
    trim(candidate) == trim(reference)
}

/// Substring containment of the (trimmed) target in the candidate. An empty
/// target is contained in anything, matching the convention that a vacuous
/// goal is always met.
pub fn contains_target(candidate: &[u8], target: &[u8]) -> bool {
    let needle = trim(target);
    if needle.is_empty() {
        return true;
    }
    candidate.windows(needle.len()).any(|w| w == needle)
}

/// BLEU with up to 4-gram precision and the standard brevity penalty.
///
/// Orders longer than the candidate contribute nothing (they are excluded
/// from the geometric mean rather than zeroing it), and an attainable order
/// with zero matches is floored at 1e-9 so the geometric mean stays finite.
/// Both sides empty scores 1.0; exactly one side empty scores 0.0.
pub fn bleu4(candidate: &[u8], reference: &[u8]) -> f64 {
    let c_tok = tokens(candidate);
    let r_tok = tokens(reference);
    match (c_tok.is_empty(), r_tok.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let max_order = c_tok.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let mut ref_counts: HashMap<&[&[u8]], usize> = HashMap::new();
        for gram in r_tok.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
        let mut cand_counts: HashMap<&[&[u8]], usize> = HashMap::new();
        for gram in c_tok.windows(n) {
            *cand_counts.entry(gram).or_insert(0) += 1;
        }
        let total = c_tok.len() + 1 - n;
        let mut clipped = 0usize;
        for (gram, count) in &cand_counts {
            clipped += (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        let p = if clipped == 0 {
            1e-9
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / max_order as f64).exp();
    let (c, r) = (c_tok.len() as f64, r_tok.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * precision
}

/// ROUGE-L: F1 over the longest common token subsequence (equal weight to
/// precision and recall). Zero when there is no common token; 1.0 when both
/// sides are empty.
pub fn rouge_l(candidate: &[u8], reference: &[u8]) -> f64 {
    let c_tok = tokens(candidate);
    let r_tok = tokens(reference);
    match (c_tok.is_empty(), r_tok.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&c_tok, &r_tok);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c_tok.len() as f64;
    let r = lcs as f64 / r_tok.len() as f64;
    2.0 * p * r / (p + r)
}

fn trim(bytes: &[u8]) -> &[u8] {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace());
    match start {
        None => &[],
        Some(s) => {
            let end = bytes.iter().rposition(|b| !b.is_ascii_whitespace()).unwrap();
            &bytes[s..=end]
        }
    }
}

fn tokens(bytes: &[u8]) -> Vec<&[u8]> {
    bytes
        .split(|b| b.is_ascii_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Classic O(c·r) dynamic program, rows rolled to keep memory at O(r).
fn lcs_len(a: &[&[u8]], b: &[&[u8]]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_ignores_surrounding_whitespace_only() {
        assert!(exact_match(b"  a red square \n", b"a red square"));
        assert!(!exact_match(b"a red  square", b"a red square"));
        assert!(exact_match(b"", b"   "));
    }

    #[test]
    fn containment_finds_substrings_and_is_weaker_than_equality() {
        assert!(contains_target(b"well, I want X now", b"I want X"));
        assert!(!contains_target(b"I want Y", b"I want X"));
        assert!(contains_target(b"anything", b""));
        // Equality implies containment.
        assert!(contains_target(b"I want X", b" I want X "));
    }

    #[test]
    fn bleu_of_identical_strings_is_exactly_one() {
        let s = b"there is a red square at row 2 column 3";
        assert_eq!(bleu4(s, s), 1.0);
    }

    #[test]
    fn bleu_brevity_penalty_matches_hand_computation() {
        // candidate "the cat sat" (3 tokens) vs reference "the cat sat down"
        // (4 tokens): every attainable order has perfect precision, so the
        // score is the brevity penalty alone, exp(1 - 4/3).
        let got = bleu4(b"the cat sat", b"the cat sat down");
        let want = (1.0f64 - 4.0 / 3.0).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn bleu_zero_overlap_is_tiny_but_finite() {
        let got = bleu4(b"alpha beta", b"gamma delta");
        assert!(got > 0.0 && got < 1e-6);
    }

    #[test]
    fn bleu_clips_repeated_candidate_ngrams() {
        // "the the the" vs "the cat": unigram matches clip at the reference
        // count (1), so p1 = 1/3 rather than 3/3. Bigrams and trigrams are
        // attainable for the candidate but find no match, so both floor.
        let got = bleu4(b"the the the", b"the cat");
        let p1: f64 = 1.0 / 3.0;
        let floor: f64 = 1e-9;
        let precision = ((p1.ln() + 2.0 * floor.ln()) / 3.0).exp();
        assert!((got - precision).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bleu_empty_conventions() {
        assert_eq!(bleu4(b"", b""), 1.0);
        assert_eq!(bleu4(b"", b"a"), 0.0);
        assert_eq!(bleu4(b"a", b""), 0.0);
    }

    #[test]
    fn rouge_of_identical_strings_is_exactly_one() {
        let s = b"no, there is no blue circle";
        assert_eq!(rouge_l(s, s), 1.0);
    }

    #[test]
    fn rouge_matches_hand_lcs_f1() {
        // candidate "a b c d" vs reference "a c e": LCS = "a c" (2).
        // P = 2/4, R = 2/3, F1 = 2PR/(P+R) = 4/7.
        let got = rouge_l(b"a b c d", b"a c e");
        assert!((got - 4.0 / 7.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rouge_zero_when_no_token_in_common() {
        assert_eq!(rouge_l(b"x y", b"u v w"), 0.0);
        assert_eq!(rouge_l(b"", b""), 1.0);
        assert_eq!(rouge_l(b"x", b""), 0.0);
    }

    #[test]
    fn lcs_respects_order_not_just_membership() {
        // Tokens shared but reversed: LCS is 1, not 2.
        let got = rouge_l(b"b a", b"a b");
        let p = 0.5;
        let f1 = 2.0 * p * p / (p + p);
        assert!((got - f1).abs() < 1e-12);
    }
}
