// Seeded per-identity sort keys.
//
// Sampling k items uniformly without replacement is done by giving every item
// an independent uniform key and keeping the k smallest. Keys depend only on
// (seed, identity), so the selected identity set does not depend on the order
// the candidates are presented in.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key generator for one (seed, stream) pair.
#[derive(Clone, Copy)]
pub(crate) struct KeyStream(u64);

impl KeyStream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        Self(splitmix64(seed ^ stream.rotate_left(32)))
    }

    #[inline]
    pub(crate) fn key(self, id: u64) -> u64 {
        splitmix64(self.0 ^ id)
    }
}

#[cfg(test)]
fn identity_key(seed: u64, stream: u64, id: u64) -> u64 {
    KeyStream::new(seed, stream).key(id)
}

/// Keeps the `k` entries with the smallest keys, returned in ascending key order.
pub(crate) fn take_smallest<T: Copy>(mut keyed: Vec<(u64, T)>, k: usize) -> Vec<T> {
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by_key(k - 1, |e| e.0);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by_key(|e| e.0);
    keyed.into_iter().map(|e| e.1).collect()
}
