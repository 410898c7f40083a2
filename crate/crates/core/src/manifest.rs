//! Run manifests: the provenance record every pipeline stage writes.
//!
//! A manifest captures everything needed to reproduce or audit a run — the
//! root seed and every derived stage seed, the RNG algorithm identifier, the
//! nonlinearity and learning-rate schedule shapes, template-table versions,
//! input checksums, and an echo of the fully resolved configuration.
//! Manifests are TOML and contain no timestamps or host details, so the
//! same run produces byte-identical manifests every time.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::seeding::RNG_ALGORITHM;

/// Form of the GELU nonlinearity used by the encoder.
pub const GELU_FORM: &str = "erf";

/// Shape of the learning-rate schedule.
pub const LR_SCHEDULE_SHAPE: &str = "linear warmup 0 to peak, then linear decay peak to 0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// The subcommand or stage that produced this manifest.
    pub command: String,
    /// Root seed the run was invoked with.
    pub seed: u64,
    /// Seeds derived from the root for each stage that consumed randomness,
    /// keyed by stage name (sorted for stable serialization).
    pub stage_seeds: BTreeMap<String, u64>,
    pub rng_algorithm: String,
    pub gelu: String,
    pub lr_schedule: String,
    /// Version of the sentence-pattern table used for corpus rendering.
    pub train_templates_version: Option<u32>,
    /// Version of the paraphrase table used for probe synthesis.
    pub probe_templates_version: Option<u32>,
    /// SHA-256 of the training corpus consumed or produced, hex-encoded.
    pub corpus_sha256: Option<String>,
    /// The fully resolved configuration the run actually used.
    pub config: PipelineConfig,
}

impl RunManifest {
    /// Starts a manifest for `command` with the invariant fields filled in.
    pub fn for_run(command: impl Into<String>, config: &PipelineConfig) -> Self {
        RunManifest {
            command: command.into(),
            seed: config.seed,
            stage_seeds: BTreeMap::new(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            gelu: GELU_FORM.to_string(),
            lr_schedule: LR_SCHEDULE_SHAPE.to_string(),
            train_templates_version: None,
            probe_templates_version: None,
            corpus_sha256: None,
            config: config.clone(),
        }
    }

    pub fn record_stage_seed(&mut self, stage: impl Into<String>, seed: u64) -> &mut Self {
        self.stage_seeds.insert(stage.into(), seed);
        self
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::data(format!("manifest: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string())
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn populated() -> RunManifest {
        let cfg = PipelineConfig::default();
        let mut m = RunManifest::for_run("demo", &cfg);
        m.record_stage_seed("walk", 101)
            .record_stage_seed("mask", 102)
            .record_stage_seed("pretrain", 103);
        m.train_templates_version = Some(1);
        m.probe_templates_version = Some(1);
        m.corpus_sha256 = Some(sha256_hex(b"corpus bytes"));
        m
    }

    #[test]
    fn round_trips_through_toml() {
        let m = populated();
        let text = m.to_toml_string();
        let back = RunManifest::from_toml_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn records_the_invariant_identifiers() {
        let m = populated();
        assert_eq!(m.rng_algorithm, RNG_ALGORITHM);
        assert_eq!(m.gelu, "erf");
        assert_eq!(m.lr_schedule, LR_SCHEDULE_SHAPE);
        assert_eq!(m.seed, m.config.seed);
        let text = m.to_toml_string();
        for needle in ["rng_algorithm", "gelu", "lr_schedule", "corpus_sha256", "[config.train]"] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn serialization_is_deterministic_and_timeless() {
        let a = populated().to_toml_string();
        let b = populated().to_toml_string();
        assert_eq!(a, b);
        for forbidden in ["time", "date", "host"] {
            assert!(
                !a.to_lowercase().contains(forbidden),
                "manifest should not record {forbidden}"
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = populated().to_toml_string();
        text.push_str("\nwall_clock = \"2024-01-01\"\n");
        assert!(RunManifest::from_toml_str(&text).is_err());
    }

    #[test]
    fn sha256_matches_the_published_test_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn file_round_trip_and_checksum() {
        let dir = std::env::temp_dir();
        let manifest_path = dir.join(format!("kginject-man-{}.toml", std::process::id()));
        let corpus_path = dir.join(format!("kginject-cor-{}.txt", std::process::id()));
        std::fs::write(&corpus_path, "a line\n").unwrap();

        let mut m = populated();
        m.corpus_sha256 = Some(sha256_file(&corpus_path).unwrap());
        m.save(&manifest_path).unwrap();
        let back = RunManifest::load(&manifest_path).unwrap();
        std::fs::remove_file(&manifest_path).ok();
        std::fs::remove_file(&corpus_path).ok();

        assert_eq!(m, back);
        assert_eq!(back.corpus_sha256.unwrap(), sha256_hex(b"a line\n"));
    }
}
