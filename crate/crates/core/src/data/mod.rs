//! Dataset schema, synthetic generation, on-disk layout and batching.

pub mod batch;
pub mod dataset;
pub mod encode;
pub mod synth;

pub use batch::{batch_from_records, BatchMode, BatchStream, SpeciesBatch};
pub use dataset::{Dataset, Manifest};
pub use encode::one_hot;
pub use synth::{MotifRule, SynthParams};

use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum DataError {
    Invalid(String),
    Io { path: std::path::PathBuf, source: std::io::Error },
    Format(String),
}

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataError::Invalid(m) => write!(f, "invalid data configuration: {m}"),
            DataError::Io { path, source } => write!(f, "io error at {}: {source}", path.display()),
            DataError::Format(m) => write!(f, "malformed dataset: {m}"),
        }
    }
}

impl std::error::Error for DataError {}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Experimental assay family of a profile track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssayType {
    #[serde(rename = "DNASE_ATAC")]
    DnaseAtac,
    #[serde(rename = "TF_CHIP")]
    TfChip,
    #[serde(rename = "HISTONE_CHIP")]
    HistoneChip,
    #[serde(rename = "CAGE")]
    Cage,
}

impl AssayType {
    pub const ALL: [AssayType; 4] =
        [AssayType::DnaseAtac, AssayType::TfChip, AssayType::HistoneChip, AssayType::Cage];

    pub fn as_str(self) -> &'static str {
        match self {
            AssayType::DnaseAtac => "DNASE_ATAC",
            AssayType::TfChip => "TF_CHIP",
            AssayType::HistoneChip => "HISTONE_CHIP",
            AssayType::Cage => "CAGE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl std::fmt::Display for AssayType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackDef {
    pub id: String,
    pub assay: AssayType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeciesSchema {
    pub id: String,
    pub tracks: Vec<TrackDef>,
}

impl SpeciesSchema {
    pub fn n_tracks(&self) -> usize {
        self.tracks.len()
    }
}

/// Catalog of output tracks per species, with the profile-type
/// categorization permutation (phi) and its inverse (psi).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSchema {
    pub species: Vec<SpeciesSchema>,
}

impl ProfileSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.species.is_empty() {
            return Err(DataError::Invalid("schema has no species".to_string()));
        }
        let mut ids = std::collections::HashSet::new();
        for sp in &self.species {
            if !ids.insert(&sp.id) {
                return Err(DataError::Invalid(format!("duplicate species id {}", sp.id)));
            }
            if sp.tracks.is_empty() {
                return Err(DataError::Invalid(format!("species {} has no tracks", sp.id)));
            }
            let mut tids = std::collections::HashSet::new();
            for t in &sp.tracks {
                if !tids.insert(&t.id) {
                    return Err(DataError::Invalid(format!(
                        "duplicate track id {} in species {}",
                        t.id, sp.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn species_index(&self, id: &str) -> Option<usize> {
        self.species.iter().position(|s| s.id == id)
    }

    /// Distinct assay types present in any species, in fixed enum order.
    pub fn assay_types_present(&self) -> Vec<AssayType> {
        AssayType::ALL
            .into_iter()
            .filter(|a| self.species.iter().any(|s| s.tracks.iter().any(|t| t.assay == *a)))
            .collect()
    }

    pub fn n_profile_types(&self) -> usize {
        self.assay_types_present().len()
    }

    /// Per present assay type, the number of species-`m` tracks of that
    /// type (d_q; may be zero for a species that lacks the assay).
    pub fn group_sizes(&self, m: usize) -> Vec<(AssayType, usize)> {
        self.assay_types_present()
            .into_iter()
            .map(|a| (a, self.species[m].tracks.iter().filter(|t| t.assay == a).count()))
            .collect()
    }

    /// Categorization permutation: track indices of species `m` grouped by
    /// assay type (types in global order, stable within a type).
    pub fn phi(&self, m: usize) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.species[m].tracks.len());
        for a in self.assay_types_present() {
            for (i, t) in self.species[m].tracks.iter().enumerate() {
                if t.assay == a {
                    order.push(i);
                }
            }
        }
        order
    }

    /// Inverse of [`Self::phi`]: psi[phi[i]] == i.
    pub fn psi(&self, m: usize) -> Vec<usize> {
        let phi = self.phi(m);
        let mut inv = vec![0usize; phi.len()];
        for (pos, &src) in phi.iter().enumerate() {
            inv[src] = pos;
        }
        inv
    }
}

/// Shorthand constructor used across tests and the synthetic pipeline:
/// per species, a count of tracks per assay type in enum order.
pub fn schema_from_counts(species: &[(&str, [usize; 4])]) -> ProfileSchema {
    ProfileSchema {
        species: species
            .iter()
            .map(|(id, counts)| SpeciesSchema {
                id: id.to_string(),
                tracks: AssayType::ALL
                    .into_iter()
                    .zip(counts.iter())
                    .flat_map(|(a, &n)| {
                        (0..n).map(move |i| TrackDef {
                            id: format!("{}_{}", a.as_str().to_lowercase(), i),
                            assay: a,
                        })
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toy() -> ProfileSchema {
        schema_from_counts(&[("human", [2, 1, 0, 1]), ("mouse", [1, 1, 1, 1])])
    }

    #[test]
    fn group_sizes_sum_to_track_count() {
        let s = toy();
        for m in 0..s.n_species() {
            let total: usize = s.group_sizes(m).iter().map(|(_, d)| d).sum();
            assert_eq!(total, s.species[m].n_tracks());
        }
    }

    #[test]
    fn phi_psi_roundtrip() {
        let s = toy();
        let mut rng = Rng::new(4);
        for m in 0..s.n_species() {
            let c = s.species[m].n_tracks();
            let phi = s.phi(m);
            let psi = s.psi(m);
            let v: Vec<f64> = (0..c).map(|_| rng.next_f64()).collect();
            let gathered: Vec<f64> = phi.iter().map(|&i| v[i]).collect();
            let restored: Vec<f64> = psi.iter().map(|&i| gathered[i]).collect();
            assert_eq!(restored, v);
        }
    }

    #[test]
    fn every_track_has_one_assay_type() {
        let s = toy();
        for sp in &s.species {
            for t in &sp.tracks {
                assert!(AssayType::ALL.contains(&t.assay));
            }
        }
    }

    #[test]
    fn types_present_in_enum_order() {
        let s = schema_from_counts(&[("a", [0, 2, 0, 3])]);
        assert_eq!(s.assay_types_present(), vec![AssayType::TfChip, AssayType::Cage]);
    }

    #[test]
    fn validation_catches_duplicates() {
        let mut s = toy();
        s.species[1].id = "human".to_string();
        assert!(s.validate().is_err());
    }
}
