use std::hash::Hasher;

use fnv::FnvHasher;

/// Bucket reserved for a missing categorical value.
pub const MISSING_BUCKET: usize = 0;

/// Maps `(field, token)` to a feature index in `[1, buckets)`; the empty
/// token maps to [`MISSING_BUCKET`].
///
/// The key is the UTF-8 text `"{field}:{token}"` hashed with 64-bit FNV-1a
/// and reduced modulo `buckets - 1`, so indices are identical across
/// processes, platforms and languages.
pub fn hash_feature(field: usize, token: &str, buckets: usize) -> usize {
    debug_assert!(buckets >= 2, "need at least one bucket besides the missing one");
    if token.is_empty() {
        return MISSING_BUCKET;
    }
    let mut h = FnvHasher::default();
    h.write(field.to_string().as_bytes());
    h.write(b":");
    h.write(token.as_bytes());
    1 + (h.finish() % (buckets as u64 - 1)) as usize
}
