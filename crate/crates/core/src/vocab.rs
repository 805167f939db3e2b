//! Fixed byte-level vocabulary.
//!
//! Token ids 0..=255 are bytes. The first few control bytes never occur in
//! task text and are reserved: padding, begin/end of sequence, and one
//! instruction marker per synthetic task (used only when pretraining the
//! frozen model).

pub const VOCAB_SIZE: usize = 256;
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First task-marker id; task `i` (in [`crate::tasks::TaskKind::ALL`]
/// order) uses `TASK_MARKER_BASE + i`.
pub const TASK_MARKER_BASE: usize = 3;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Lossy inverse of [`encode`]; reserved ids and non-UTF-8 sequences are
/// rendered with the replacement character.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .map(|&id| if id > 8 && id < 256 { id as u8 } else { 0xFF })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Token ids sorted by descending frequency, ties broken by lower id.
pub fn most_frequent<'a>(sequences: impl IntoIterator<Item = &'a [usize]>, top: usize) -> Vec<usize> {
    let mut counts = vec![0usize; VOCAB_SIZE];
    for seq in sequences {
        for &id in seq {
            if id < VOCAB_SIZE {
                counts[id] += 1;
            }
        }
    }
    let mut ids: Vec<usize> = (0..VOCAB_SIZE).filter(|&i| counts[i] > 0).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ids.truncate(top);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_ascii() {
        assert_eq!(decode(&encode("ab|7")), "ab|7");
    }

    #[test]
    fn frequency_ties_prefer_lower_id() {
        let a = encode("bbaacd");
        let top = most_frequent([a.as_slice()], 3);
        assert_eq!(top, vec![b'a' as usize, b'b' as usize, b'c' as usize]);
    }
}
