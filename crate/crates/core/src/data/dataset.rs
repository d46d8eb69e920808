//! On-disk dataset layout and the in-memory view.
//!
//! Directory layout (all multi-byte values little-endian):
//!   manifest.json            species, tracks with assay_type, seq_len,
//!                            bin_size, seed, record counts
//!   <species>/sequences.txt  one uppercase sequence per line
//!   <species>/targets.f32    raw f32 array, row-major [n, C_m, L], no header
//!   <species>/tracks.csv     track_id,assay_type

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::synth::{build_rules, generate_record, map_indexed, SynthParams};
use super::{io_err, AssayType, DataError, ProfileSchema, SpeciesSchema, TrackDef};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTrack {
    pub track_id: String,
    pub assay_type: AssayType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSpecies {
    pub id: String,
    pub n_records: usize,
    pub tracks: Vec<ManifestTrack>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seq_len: usize,
    pub bin_size: usize,
    pub seed: u64,
    pub species: Vec<ManifestSpecies>,
}

impl Manifest {
    pub fn schema(&self) -> ProfileSchema {
        ProfileSchema {
            species: self
                .species
                .iter()
                .map(|s| SpeciesSchema {
                    id: s.id.clone(),
                    tracks: s
                        .tracks
                        .iter()
                        .map(|t| TrackDef { id: t.track_id.clone(), assay: t.assay_type })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpeciesData {
    pub sequences: Vec<String>,
    /// [n_records, C_m, L]
    pub targets: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: ProfileSchema,
    pub seq_len: usize,
    pub bin_size: usize,
    pub seed: u64,
    pub per_species: Vec<SpeciesData>,
}

impl Dataset {
    pub fn bins(&self) -> usize {
        self.seq_len / self.bin_size
    }

    pub fn n_records(&self, m: usize) -> usize {
        self.per_species[m].sequences.len()
    }

    /// Generate a full synthetic dataset. Deterministic in `seed`; record
    /// synthesis parallelizes across records because every record derives
    /// its own stream from (seed, species, index).
    pub fn generate(
        schema: &ProfileSchema,
        n_per_species: usize,
        seq_len: usize,
        bin_size: usize,
        seed: u64,
        params: &SynthParams,
    ) -> Result<Dataset, DataError> {
        schema.validate()?;
        if bin_size == 0 || seq_len % bin_size != 0 {
            return Err(DataError::Invalid(format!(
                "seq_len {seq_len} not divisible by bin_size {bin_size}"
            )));
        }
        if n_per_species == 0 {
            return Err(DataError::Invalid("n_per_species must be >= 1".to_string()));
        }
        let rules = build_rules(schema, params, seed);
        let bins = seq_len / bin_size;
        let per_species = schema
            .species
            .iter()
            .enumerate()
            .map(|(m, sp)| {
                let c = sp.n_tracks();
                let records = map_indexed(n_per_species, |i| {
                    generate_record(schema, &rules[m], params, seq_len, bin_size, seed, m, i)
                });
                let mut targets = vec![0.0f32; n_per_species * c * bins];
                let mut sequences = Vec::with_capacity(n_per_species);
                for (i, rec) in records.into_iter().enumerate() {
                    targets[i * c * bins..(i + 1) * c * bins].copy_from_slice(&rec.targets);
                    sequences.push(rec.sequence);
                }
                SpeciesData {
                    sequences,
                    targets: Tensor::new(vec![n_per_species, c, bins], targets)
                        .expect("consistent target shape"),
                }
            })
            .collect();
        Ok(Dataset {
            schema: schema.clone(),
            seq_len,
            bin_size,
            seed,
            per_species,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            seq_len: self.seq_len,
            bin_size: self.bin_size,
            seed: self.seed,
            species: self
                .schema
                .species
                .iter()
                .enumerate()
                .map(|(m, sp)| ManifestSpecies {
                    id: sp.id.clone(),
                    n_records: self.n_records(m),
                    tracks: sp
                        .tracks
                        .iter()
                        .map(|t| ManifestTrack { track_id: t.id.clone(), assay_type: t.assay })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| DataError::Format(e.to_string()))?;
        std::fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

        for (m, sp) in self.schema.species.iter().enumerate() {
            let sp_dir = dir.join(&sp.id);
            std::fs::create_dir_all(&sp_dir).map_err(io_err(&sp_dir))?;

            let seq_path = sp_dir.join("sequences.txt");
            let mut buf = String::new();
            for s in &self.per_species[m].sequences {
                buf.push_str(s);
                buf.push('\n');
            }
            std::fs::write(&seq_path, buf).map_err(io_err(&seq_path))?;

            let tgt_path = sp_dir.join("targets.f32");
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(&tgt_path).map_err(io_err(&tgt_path))?,
            );
            for &v in self.per_species[m].targets.data() {
                f.write_all(&v.to_le_bytes()).map_err(io_err(&tgt_path))?;
            }
            f.flush().map_err(io_err(&tgt_path))?;

            let csv_path = sp_dir.join("tracks.csv");
            let mut csv = String::from("track_id,assay_type\n");
            for t in &sp.tracks {
                csv.push_str(&format!("{},{}\n", t.id, t.assay.as_str()));
            }
            std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| DataError::Format(e.to_string()))?;
        let schema = manifest.schema();
        schema.validate()?;
        if manifest.bin_size == 0 || manifest.seq_len % manifest.bin_size != 0 {
            return Err(DataError::Format("seq_len not divisible by bin_size".to_string()));
        }
        let bins = manifest.seq_len / manifest.bin_size;

        let mut per_species = Vec::new();
        for msp in &manifest.species {
            let sp_dir = dir.join(&msp.id);
            let seq_path = sp_dir.join("sequences.txt");
            let text = std::fs::read_to_string(&seq_path).map_err(io_err(&seq_path))?;
            let sequences: Vec<String> = text.lines().map(|l| l.to_string()).collect();
            if sequences.len() != msp.n_records {
                return Err(DataError::Format(format!(
                    "species {}: manifest says {} records, sequences.txt has {}",
                    msp.id,
                    msp.n_records,
                    sequences.len()
                )));
            }
            for (i, s) in sequences.iter().enumerate() {
                if s.len() != manifest.seq_len {
                    return Err(DataError::Format(format!(
                        "species {} record {i}: sequence length {} != {}",
                        msp.id,
                        s.len(),
                        manifest.seq_len
                    )));
                }
            }
            let c = msp.tracks.len();
            let tgt_path = sp_dir.join("targets.f32");
            let mut bytes = Vec::new();
            std::fs::File::open(&tgt_path)
                .map_err(io_err(&tgt_path))?
                .read_to_end(&mut bytes)
                .map_err(io_err(&tgt_path))?;
            let expect = msp.n_records * c * bins * 4;
            if bytes.len() != expect {
                return Err(DataError::Format(format!(
                    "species {}: targets.f32 has {} bytes, expected {expect}",
                    msp.id,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            per_species.push(SpeciesData {
                sequences,
                targets: Tensor::new(vec![msp.n_records, c, bins], data)
                    .expect("verified length"),
            });
        }
        Ok(Dataset {
            schema,
            seq_len: manifest.seq_len,
            bin_size: manifest.bin_size,
            seed: manifest.seed,
            per_species,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema_from_counts;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!(
            "space-ds-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn small() -> Dataset {
        let schema = schema_from_counts(&[("human", [1, 1, 0, 0]), ("mouse", [1, 0, 1, 0])]);
        Dataset::generate(&schema, 6, 128, 32, 11, &SynthParams::default()).unwrap()
    }

    #[test]
    fn same_seed_byte_identical_files() {
        let d1 = tmpdir("a");
        let d2 = tmpdir("b");
        small().save(&d1).unwrap();
        small().save(&d2).unwrap();
        for rel in
            ["manifest.json", "human/sequences.txt", "human/targets.f32", "human/tracks.csv"]
        {
            let a = std::fs::read(d1.join(rel)).unwrap();
            let b = std::fs::read(d2.join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between same-seed generations");
        }
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn roundtrip_load() {
        let ds = small();
        let dir = tmpdir("rt");
        ds.save(&dir).unwrap();
        let back = Dataset::load(&dir).unwrap();
        assert_eq!(back.schema, ds.schema);
        assert_eq!(back.per_species[0].sequences, ds.per_species[0].sequences);
        assert_eq!(back.per_species[1].targets.data(), ds.per_species[1].targets.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn targets_are_nonnegative_integers() {
        let ds = small();
        for sp in &ds.per_species {
            for &v in sp.targets.data() {
                assert!(v >= 0.0);
                assert_eq!(v, v.round());
            }
        }
    }

    #[test]
    fn indivisible_seq_len_rejected() {
        let schema = schema_from_counts(&[("x", [1, 0, 0, 0])]);
        let err =
            Dataset::generate(&schema, 2, 100, 32, 1, &SynthParams::default()).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }
}
