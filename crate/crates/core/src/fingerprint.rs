//! 64-bit FNV-1a fingerprints used for staleness detection between
//! artifacts (model, vocabulary, datastore, transforms).

use std::hash::Hasher;

use fnv::FnvHasher;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Incremental variant for artifacts spread over several buffers.
#[derive(Default)]
pub struct Fingerprinter(FnvHasher);

impl Fingerprinter {
    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.write(bytes);
        self
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

pub fn to_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn incremental_matches_one_shot() {
        let mut f = Fingerprinter::default();
        f.update(b"foo").update(b"bar");
        assert_eq!(f.finish(), fnv1a(b"foobar"));
    }
}
