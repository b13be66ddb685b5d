//! Position mapping between two tokenizations of the same text.
//!
//! Two cursors walk the original and extended id sequences. Equal original ids
//! form similar pairs; on a mismatch the smallest look-ahead offsets that
//! resynchronise the sequences delimit one divergent group.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

/// Default look-ahead window.
pub const DEFAULT_WINDOW: usize = 20;

/// Contiguous spans of both sequences covering the same text with different
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivergentGroup {
    pub orig: Range<usize>,
    pub ext: Range<usize>,
}

impl DivergentGroup {
    pub fn orig_positions(&self) -> Vec<usize> {
        self.orig.clone().collect()
    }

    pub fn ext_positions(&self) -> Vec<usize> {
        self.ext.clone().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignmentMap {
    pub similar: Vec<(usize, usize)>,
    pub divergent: Vec<DivergentGroup>,
}

/// Paired logit columns: `orig_cols[k]` in the teacher matrix corresponds to
/// `ext_cols[k]` in the student matrix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ColumnSelection {
    pub orig_cols: Vec<usize>,
    pub ext_cols: Vec<usize>,
}

impl ColumnSelection {
    pub fn len(&self) -> usize {
        self.ext_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ext_cols.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.orig_cols.iter().copied().zip(self.ext_cols.iter().copied())
    }
}

/// Maps positions with the default window of 20.
pub fn map_token_sequences(orig: &[TokenId], ext: &[TokenId], vocab_split: usize) -> AlignmentMap {
    map_token_sequences_with_window(orig, ext, vocab_split, DEFAULT_WINDOW)
}

/// Maps positions between the original (`orig`) and extended (`ext`)
/// tokenizations.
///
/// Ids at or above `vocab_split` never match. On a mismatch at `(i, j)` the
/// first resynchronisation point `orig[i + d] == ext[j + d']` with
/// `1 <= d, d' <= window` is taken, minimising `d + d'` and then `d`. The end
/// of both sequences counts as a resynchronisation point when it lies inside
/// the window. If nothing resynchronises, `(i, j)` becomes a one-to-one
/// divergent group. Leftovers after either sequence ends form a final
/// divergent group.
pub fn map_token_sequences_with_window(
    orig: &[TokenId],
    ext: &[TokenId],
    vocab_split: usize,
    window: usize,
) -> AlignmentMap {
    walk(orig, ext, vocab_split, window, None)
}

/// Like [`map_token_sequences`], but a resynchronisation point only counts
/// when both cursors sit at the same byte offset of the text.
///
/// Repeated ids can otherwise resynchronise at the wrong place, for example
/// `c|ab|ab` against `cab|ab`. When no id match is found in the window the
/// group extends to the nearest shared token boundary, so every divergent
/// group spells the same bytes on both sides.
pub fn map_token_texts<A: Tokenizer, B: Tokenizer>(
    orig: &[TokenId],
    ext: &[TokenId],
    orig_tok: &A,
    ext_tok: &B,
) -> Result<AlignmentMap> {
    map_token_texts_with_window(orig, ext, orig_tok, ext_tok, DEFAULT_WINDOW)
}

pub fn map_token_texts_with_window<A: Tokenizer, B: Tokenizer>(
    orig: &[TokenId],
    ext: &[TokenId],
    orig_tok: &A,
    ext_tok: &B,
    window: usize,
) -> Result<AlignmentMap> {
    let (a, b) = (offsets(orig, orig_tok)?, offsets(ext, ext_tok)?);
    if a.last() != b.last() {
        return Err(Error::Shape(format!(
            "tokenizations cover {} and {} bytes",
            a.last().unwrap_or(&0),
            b.last().unwrap_or(&0)
        )));
    }
    Ok(walk(orig, ext, orig_tok.vocab_size(), window, Some((&a, &b))))
}

fn offsets<T: Tokenizer>(ids: &[TokenId], tok: &T) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(0);
    for &t in ids {
        let len = tok.token_bytes(t).map(<[u8]>::len).ok_or(Error::IdOutOfRange {
            id: t,
            vocab_size: tok.vocab_size(),
        })?;
        out.push(out.last().unwrap() + len);
    }
    Ok(out)
}

type Offsets<'a> = Option<(&'a [usize], &'a [usize])>;

fn walk(orig: &[TokenId], ext: &[TokenId], vocab_split: usize, window: usize, at: Offsets<'_>) -> AlignmentMap {
    let same = |a: TokenId, b: TokenId| a == b && (a as usize) < vocab_split;
    let mut map = AlignmentMap::default();
    let (mut i, mut j) = (0, 0);
    while i < orig.len() && j < ext.len() {
        if same(orig[i], ext[j]) {
            map.similar.push((i, j));
            i += 1;
            j += 1;
            continue;
        }
        let (d, dp) = resync(orig, ext, i, j, window, at, same)
            .or_else(|| at.and_then(|(a, b)| shared_boundary(a, b, i, j)))
            .unwrap_or((1, 1));
        map.divergent.push(DivergentGroup {
            orig: i..i + d,
            ext: j..j + dp,
        });
        i += d;
        j += dp;
    }
    if i < orig.len() || j < ext.len() {
        map.divergent.push(DivergentGroup {
            orig: i..orig.len(),
            ext: j..ext.len(),
        });
    }
    map
}

fn resync(
    orig: &[TokenId],
    ext: &[TokenId],
    i: usize,
    j: usize,
    window: usize,
    at: Offsets<'_>,
    same: impl Fn(TokenId, TokenId) -> bool,
) -> Option<(usize, usize)> {
    let aligned = |d: usize, dp: usize| at.is_none_or(|(a, b)| a[i + d] == b[j + dp]);
    for total in 2..=2 * window {
        let lo = total.saturating_sub(window).max(1);
        let hi = window.min(total - 1);
        for d in lo..=hi {
            let dp = total - d;
            if i + d < orig.len() && j + dp < ext.len() && same(orig[i + d], ext[j + dp]) && aligned(d, dp) {
                return Some((d, dp));
            }
        }
    }
    let (rest_o, rest_e) = (orig.len() - i, ext.len() - j);
    (rest_o <= window && rest_e <= window).then_some((rest_o, rest_e))
}

/// Smallest `(d, d')`, both positive, with equal byte offsets.
fn shared_boundary(a: &[usize], b: &[usize], i: usize, j: usize) -> Option<(usize, usize)> {
    let (mut d, mut dp) = (1, 1);
    while i + d < a.len() && j + dp < b.len() {
        match a[i + d].cmp(&b[j + dp]) {
            std::cmp::Ordering::Equal => return Some((d, dp)),
            std::cmp::Ordering::Less => d += 1,
            std::cmp::Ordering::Greater => dp += 1,
        }
    }
    None
}

/// Keeps every similar pair plus the first position of each divergent group,
/// ordered by extended position. Groups with an empty side contribute nothing.
pub fn select_training_positions(align: &AlignmentMap) -> ColumnSelection {
    let mut pairs: Vec<(usize, usize)> = align
        .similar
        .iter()
        .copied()
        .chain(
            align
                .divergent
                .iter()
                .filter(|g| !g.orig.is_empty() && !g.ext.is_empty())
                .map(|g| (g.orig.start, g.ext.start)),
        )
        .collect();
    pairs.sort_by_key(|&(o, e)| (e, o));
    ColumnSelection {
        orig_cols: pairs.iter().map(|p| p.0).collect(),
        ext_cols: pairs.iter().map(|p| p.1).collect(),
    }
}

impl AlignmentMap {
    /// Checks that both coordinate sets are partitioned exactly once and that
    /// entries appear in increasing order.
    pub fn check_partition(&self, orig_len: usize, ext_len: usize) -> Result<()> {
        let mut entries: Vec<(Range<usize>, Range<usize>)> = self
            .similar
            .iter()
            .map(|&(o, e)| (o..o + 1, e..e + 1))
            .chain(self.divergent.iter().map(|g| (g.orig.clone(), g.ext.clone())))
            .collect();
        entries.sort_by_key(|(o, e)| (o.start, e.start));
        let (mut next_o, mut next_e) = (0, 0);
        for (o, e) in &entries {
            if o.start != next_o || e.start != next_e {
                return Err(Error::Shape(format!(
                    "alignment entry ({o:?}, {e:?}) does not continue at ({next_o}, {next_e})"
                )));
            }
            next_o = o.end;
            next_e = e.end;
        }
        if next_o != orig_len || next_e != ext_len {
            return Err(Error::Shape(format!(
                "alignment covers ({next_o}, {next_e}) of ({orig_len}, {ext_len})"
            )));
        }
        Ok(())
    }

    /// Checks the partition and that each divergent group spells the same
    /// bytes on both sides.
    pub fn verify<A: Tokenizer, B: Tokenizer>(
        &self,
        orig: &[TokenId],
        ext: &[TokenId],
        orig_tok: &A,
        ext_tok: &B,
    ) -> Result<()> {
        self.check_partition(orig.len(), ext.len())?;
        for g in &self.divergent {
            let a = orig_tok.decode_bytes(&orig[g.orig.clone()])?;
            let b = ext_tok.decode_bytes(&ext[g.ext.clone()])?;
            if a != b {
                return Err(Error::Shape(format!(
                    "divergent group {g:?} spells {:?} vs {:?}",
                    String::from_utf8_lossy(&a),
                    String::from_utf8_lossy(&b)
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for AlignmentMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let similar: Vec<String> = self.similar.iter().map(|(o, e)| format!("({o}, {e})")).collect();
        writeln!(f, "Similar mappings: ")?;
        writeln!(f, "[{}]", similar.join(", "))?;
        writeln!(f)?;
        let join = |r: &Range<usize>| r.clone().map(|p| p.to_string()).collect::<Vec<_>>().join(", ");
        let groups: Vec<String> = self
            .divergent
            .iter()
            .map(|g| format!("([{}], [{}])", join(&g.orig), join(&g.ext)))
            .collect();
        writeln!(f, "Divergent mappings: ")?;
        writeln!(f, "[{}]", groups.join(", "))
    }
}
