use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

/// Source of fresh annotation/run/archive identifiers.
///
/// Production code uses random v4 ids; the simulator seeds a ChaCha stream so
/// repeated runs produce the same ids and therefore byte-identical exports.
pub trait IdSource: Send {
    fn next_id(&mut self) -> Uuid;
}

#[derive(Debug, Default)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&mut self) -> Uuid {
        Uuid::new_v4()
    }
}

#[derive(Debug)]
pub struct SeededIds(ChaCha8Rng);

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        SeededIds(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl IdSource for SeededIds {
    fn next_id(&mut self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.0.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_ids_repeat() {
        let a: Vec<_> = (0..4).map({
            let mut s = SeededIds::new(7);
            move |_| s.next_id()
        }).collect();
        let mut s = SeededIds::new(7);
        let b: Vec<_> = (0..4).map(|_| s.next_id()).collect();
        assert_eq!(a, b);
        assert_eq!(a[0].get_version_num(), 4);
    }
}
