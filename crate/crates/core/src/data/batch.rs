//! Species-interleaved batch serving.
//!
//! Batches are single-species; the stream cycles species S_1..S_M so every
//! window of M consecutive batches covers each species exactly once. In
//! `Balanced` mode each species' epoch is padded to the majority count by
//! resampling, so smaller species contribute as many samples per epoch as
//! the largest one.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::encode::one_hot;
use super::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Alternating,
    Balanced,
}

impl BatchMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alternating" => Some(BatchMode::Alternating),
            "balanced" => Some(BatchMode::Balanced),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::Alternating => "alternating",
            BatchMode::Balanced => "balanced",
        }
    }
}

/// One single-species mini-batch.
#[derive(Debug, Clone)]
pub struct SpeciesBatch<T: Scalar> {
    pub species: usize,
    /// [B, 4, seq_len] one-hot.
    pub x: Tensor<T>,
    /// [B, C_m, L] counts.
    pub targets: Tensor<T>,
    pub records: Vec<usize>,
}

pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    mode: BatchMode,
    seed: u64,
    next_species: usize,
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    epochs: Vec<u64>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        mode: BatchMode,
        seed: u64,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch_size must be >= 1".to_string()));
        }
        if dataset.per_species.is_empty()
            || dataset.per_species.iter().any(|s| s.sequences.is_empty())
        {
            return Err(DataError::Invalid("empty dataset".to_string()));
        }
        let m = dataset.schema.n_species();
        let mut s = BatchStream {
            dataset,
            batch_size,
            mode,
            seed,
            next_species: 0,
            queues: vec![Vec::new(); m],
            cursors: vec![0; m],
            epochs: vec![0; m],
        };
        for sp in 0..m {
            s.refill(sp);
        }
        Ok(s)
    }

    fn refill(&mut self, m: usize) {
        let n = self.dataset.n_records(m);
        let epoch = self.epochs[m];
        let mut order: Vec<usize> = (0..n).collect();
        if self.mode == BatchMode::Balanced {
            let n_max =
                (0..self.dataset.schema.n_species()).map(|s| self.dataset.n_records(s)).max().unwrap();
            let mut aug = Rng::stream(self.seed, "augment", ((m as u64) << 32) | epoch);
            while order.len() < n_max {
                order.push(aug.below(n));
            }
        }
        let mut rng = Rng::stream(self.seed, "shuffle", ((m as u64) << 32) | epoch);
        rng.shuffle(&mut order);
        self.queues[m] = order;
        self.cursors[m] = 0;
        self.epochs[m] += 1;
    }

    fn draw_records(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursors[m] == self.queues[m].len() {
                self.refill(m);
            }
            out.push(self.queues[m][self.cursors[m]]);
            self.cursors[m] += 1;
        }
        out
    }

    /// Next single-species batch; the stream is infinite and cycles species
    /// in index order.
    pub fn next_batch<T: Scalar>(&mut self) -> SpeciesBatch<T> {
        let m = self.next_species;
        self.next_species = (self.next_species + 1) % self.dataset.schema.n_species();
        let records = self.draw_records(m);
        batch_from_records(self.dataset, m, &records)
    }
}

/// Assemble a batch from explicit record indices (also used by evaluation).
pub fn batch_from_records<T: Scalar>(
    dataset: &Dataset,
    m: usize,
    records: &[usize],
) -> SpeciesBatch<T> {
    let b = records.len();
    let seq_len = dataset.seq_len;
    let c = dataset.schema.species[m].n_tracks();
    let l = dataset.bins();
    let mut x = Tensor::zeros(&[b, 4, seq_len]);
    let mut t = Tensor::zeros(&[b, c, l]);
    for (bi, &r) in records.iter().enumerate() {
        let oh: Tensor<T> =
            one_hot(&dataset.per_species[m].sequences[r]).expect("generated sequences are clean");
        x.data_mut()[bi * 4 * seq_len..(bi + 1) * 4 * seq_len].copy_from_slice(oh.data());
        let src = &dataset.per_species[m].targets.data()[r * c * l..(r + 1) * c * l];
        for (dst, &v) in
            t.data_mut()[bi * c * l..(bi + 1) * c * l].iter_mut().zip(src.iter())
        {
            *dst = T::from_f64(v as f64);
        }
    }
    SpeciesBatch { species: m, x, targets: t, records: records.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema_from_counts;
    use crate::data::synth::SynthParams;

    fn dataset(n_human: usize, n_mouse: usize) -> Dataset {
        let schema = schema_from_counts(&[("human", [1, 0, 0, 0]), ("mouse", [1, 0, 0, 0])]);
        let mut ds =
            Dataset::generate(&schema, n_human.max(n_mouse), 64, 32, 2, &SynthParams::default())
                .unwrap();
        // Trim to the requested per-species counts.
        for (m, n) in [(0usize, n_human), (1usize, n_mouse)] {
            ds.per_species[m].sequences.truncate(n);
            let c = ds.schema.species[m].n_tracks();
            let l = ds.bins();
            let data = ds.per_species[m].targets.data()[..n * c * l].to_vec();
            ds.per_species[m].targets = Tensor::new(vec![n, c, l], data).unwrap();
        }
        ds
    }

    #[test]
    fn alternating_species_order() {
        let ds = dataset(8, 8);
        let mut stream = BatchStream::new(&ds, 2, BatchMode::Alternating, 1).unwrap();
        let species: Vec<usize> = (0..4).map(|_| stream.next_batch::<f32>().species).collect();
        assert_eq!(species, vec![0, 1, 0, 1]);
    }

    #[test]
    fn balanced_mode_resamples_minority_per_epoch() {
        let ds = dataset(100, 60);
        let mut stream = BatchStream::new(&ds, 10, BatchMode::Balanced, 3).unwrap();
        let mut counts = [0usize; 2];
        // One balanced epoch: 100 samples per species = 10 batches each.
        for _ in 0..20 {
            let b = stream.next_batch::<f32>();
            counts[b.species] += b.records.len();
        }
        assert_eq!(counts, [100, 100]);
    }

    #[test]
    fn same_seed_same_order() {
        let ds = dataset(16, 16);
        let mut s1 = BatchStream::new(&ds, 4, BatchMode::Alternating, 9).unwrap();
        let mut s2 = BatchStream::new(&ds, 4, BatchMode::Alternating, 9).unwrap();
        for _ in 0..10 {
            assert_eq!(s1.next_batch::<f32>().records, s2.next_batch::<f32>().records);
        }
    }

    #[test]
    fn every_window_covers_all_species_once() {
        let ds = dataset(12, 12);
        let mut stream = BatchStream::new(&ds, 3, BatchMode::Alternating, 5).unwrap();
        for _ in 0..6 {
            let mut seen = [0; 2];
            for _ in 0..2 {
                seen[stream.next_batch::<f32>().species] += 1;
            }
            assert_eq!(seen, [1, 1]);
        }
    }

    #[test]
    fn one_hot_columns_in_batch() {
        let ds = dataset(4, 4);
        let mut stream = BatchStream::new(&ds, 2, BatchMode::Alternating, 7).unwrap();
        let b = stream.next_batch::<f32>();
        let seq_len = ds.seq_len;
        for bi in 0..2 {
            for pos in 0..seq_len {
                let col: f32 =
                    (0..4).map(|r| b.x.data()[(bi * 4 + r) * seq_len + pos]).sum();
                assert!(col == 1.0 || col == 0.0);
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = dataset(0, 4);
        assert!(BatchStream::new(&ds, 2, BatchMode::Alternating, 1).is_err());
    }
}
