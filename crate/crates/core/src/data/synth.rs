//! Synthetic multi-species planted-motif data.
//!
//! Each track's expected signal is a base rate plus, for every occurrence
//! of a rule's motif in the sequence, the rule amplitude spread over
//! neighboring bins by a triangular kernel. Observed targets are Poisson
//! samples of that rate. Rules are built so that tracks of one assay type
//! share most of their motifs and homologous assay types reuse the same
//! motifs across species, which plants the cross-profile and cross-species
//! structure the model is meant to exploit.

use crate::rng::Rng;

use super::{AssayType, DataError, ProfileSchema};

const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

#[derive(Debug, Clone)]
pub struct MotifRule {
    pub motif: String,
    pub amplitude: f64,
    /// Spatial footprint in bins (odd).
    pub kernel_width: usize,
    pub shared_across_species: bool,
    /// Track indices (within the owning species) the rule contributes to.
    pub tracks: Vec<usize>,
}

impl MotifRule {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.amplitude <= 0.0 {
            return Err(DataError::Invalid(format!(
                "rule amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if !(4..=12).contains(&self.motif.len()) {
            return Err(DataError::Invalid(format!(
                "motif length {} outside [4, 12]",
                self.motif.len()
            )));
        }
        if self.motif.chars().any(|c| !BASES.contains(&c)) {
            return Err(DataError::Invalid(format!("motif {} has non-ACGT characters", self.motif)));
        }
        if self.kernel_width % 2 == 0 {
            return Err(DataError::Invalid("kernel width must be odd".to_string()));
        }
        Ok(())
    }

    /// Triangular kernel weights over bin offsets −h..=h, peak 1 at center.
    pub fn kernel(&self) -> Vec<(isize, f64)> {
        let h = (self.kernel_width as isize - 1) / 2;
        (-h..=h).map(|o| (o, 1.0 - o.abs() as f64 / (h as f64 + 1.0))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub base_rate: f64,
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub kernel_widths: Vec<usize>,
    pub motif_len_lo: usize,
    pub motif_len_hi: usize,
    /// Rules shared by every track of an assay type (and, for the same
    /// type, by every species).
    pub type_pool: usize,
    /// Additional private rules per track.
    pub per_track_extra: usize,
    /// Planted motif occurrences per present assay type per sequence.
    pub plants_lo: usize,
    pub plants_hi: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            base_rate: 0.75,
            amp_lo: 12.0,
            amp_hi: 22.0,
            kernel_widths: vec![3, 5],
            motif_len_lo: 4,
            motif_len_hi: 6,
            type_pool: 2,
            per_track_extra: 1,
            plants_lo: 2,
            plants_hi: 3,
        }
    }
}

fn random_motif(rng: &mut Rng, lo: usize, hi: usize) -> String {
    let len = lo + rng.below(hi - lo + 1);
    (0..len).map(|_| BASES[rng.below(4)]).collect()
}

fn draw_rule_body(rng: &mut Rng, p: &SynthParams) -> (String, f64, usize) {
    let motif = random_motif(rng, p.motif_len_lo, p.motif_len_hi);
    let amp = rng.uniform(p.amp_lo, p.amp_hi);
    let width = p.kernel_widths[rng.below(p.kernel_widths.len())];
    (motif, amp, width)
}

/// Per-species rule sets. Within an assay type every track carries the
/// full shared pool plus its own extras, so any two same-type tracks share
/// `type_pool / (type_pool + per_track_extra)` of their rules; the shared
/// pool is drawn once per type and reused verbatim across species.
pub fn build_rules(schema: &ProfileSchema, params: &SynthParams, seed: u64) -> Vec<Vec<MotifRule>> {
    let present = schema.assay_types_present();
    let mut pools: Vec<(AssayType, Vec<(String, f64, usize)>)> = Vec::new();
    for (qi, &a) in present.iter().enumerate() {
        let mut rng = Rng::stream(seed, "type-pool", qi as u64);
        let pool = (0..params.type_pool).map(|_| draw_rule_body(&mut rng, params)).collect();
        pools.push((a, pool));
    }

    schema
        .species
        .iter()
        .enumerate()
        .map(|(m, sp)| {
            let mut rules = Vec::new();
            for (a, pool) in &pools {
                let tracks: Vec<usize> = sp
                    .tracks
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.assay == *a)
                    .map(|(i, _)| i)
                    .collect();
                if tracks.is_empty() {
                    continue;
                }
                for (motif, amp, width) in pool {
                    rules.push(MotifRule {
                        motif: motif.clone(),
                        amplitude: *amp,
                        kernel_width: *width,
                        shared_across_species: true,
                        tracks: tracks.clone(),
                    });
                }
            }
            for (ti, _t) in sp.tracks.iter().enumerate() {
                let mut rng =
                    Rng::stream(seed, "track-extra", ((m as u64) << 32) | ti as u64);
                for _ in 0..params.per_track_extra {
                    let (motif, amp, width) = draw_rule_body(&mut rng, params);
                    rules.push(MotifRule {
                        motif,
                        amplitude: amp,
                        kernel_width: width,
                        shared_across_species: false,
                        tracks: vec![ti],
                    });
                }
            }
            rules
        })
        .collect()
}

/// Expected rate per (track, bin) for a sequence under a rule set.
pub fn lambda_profile(
    seq: &str,
    rules: &[MotifRule],
    n_tracks: usize,
    bin_size: usize,
    base_rate: f64,
) -> Vec<f64> {
    let bins = seq.len() / bin_size;
    let mut lambda = vec![base_rate; n_tracks * bins];
    let bytes = seq.as_bytes();
    for rule in rules {
        let motif = rule.motif.as_bytes();
        let kernel = rule.kernel();
        if motif.len() > bytes.len() {
            continue;
        }
        for p in 0..=(bytes.len() - motif.len()) {
            if &bytes[p..p + motif.len()] == motif {
                let center = (p / bin_size) as isize;
                for &(off, w) in &kernel {
                    let b = center + off;
                    if b >= 0 && (b as usize) < bins {
                        for &t in &rule.tracks {
                            lambda[t * bins + b as usize] += rule.amplitude * w;
                        }
                    }
                }
            }
        }
    }
    lambda
}

/// One generated record: sequence plus integer count targets [C, L].
pub struct Record {
    pub sequence: String,
    pub targets: Vec<f32>,
}

/// Generate record `index` of species `m` deterministically from
/// `(seed, m, index)`; safe to call from parallel workers in any order.
pub fn generate_record(
    schema: &ProfileSchema,
    rules: &[MotifRule],
    params: &SynthParams,
    seq_len: usize,
    bin_size: usize,
    seed: u64,
    m: usize,
    index: usize,
) -> Record {
    let mut rng = Rng::stream(seed, "record", ((m as u64) << 40) | index as u64);
    let mut seq: Vec<char> = (0..seq_len).map(|_| BASES[rng.below(4)]).collect();

    // Plant motif occurrences per present assay type so signal bins exist
    // in every record.
    for a in schema.assay_types_present() {
        let candidates: Vec<&MotifRule> = rules
            .iter()
            .filter(|r| {
                r.tracks.iter().any(|&t| schema.species[m].tracks[t].assay == a)
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let n_plants = params.plants_lo + rng.below(params.plants_hi - params.plants_lo + 1);
        for _ in 0..n_plants {
            let rule = candidates[rng.below(candidates.len())];
            let span = rule.motif.len();
            if span > seq_len {
                continue;
            }
            let pos = rng.below(seq_len - span + 1);
            for (i, ch) in rule.motif.chars().enumerate() {
                seq[pos + i] = ch;
            }
        }
    }

    let sequence: String = seq.into_iter().collect();
    let n_tracks = schema.species[m].n_tracks();
    let lambda =
        lambda_profile(&sequence, rules, n_tracks, bin_size, params.base_rate);
    let targets = lambda.iter().map(|&l| rng.poisson(l) as f32).collect();
    Record { sequence, targets }
}

/// Map `0..n` through `f`, in parallel when available; output order is
/// index order either way.
pub(crate) fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
