//! Single-file persistence for a trained hypernetwork.
//!
//! Layout: magic `DHF1`, format version, a length-prefixed JSON header
//! (config, network spec, token layout, normalizer stats, noise schedule,
//! tensor schema, zoo-manifest hash, training metadata), then two
//! length-prefixed little-endian f64 blobs: the live weights and the EMA
//! weights. Everything a sampler needs travels in this one file, so a
//! model can never be paired with the wrong normalization or layout.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::dit::{DiT, DiTConfig};
use super::params::Schema;
use super::schedule::DDPMSchedule;
use crate::codec::{NormalizerStats, TokenLayout};
use crate::error::{Error, Result};
use crate::zoo::net::MainNetSpec;

const MAGIC: &[u8; 4] = b"DHF1";
const VERSION: u32 = 1;

/// Summary of the training run that produced a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps_run: usize,
    pub plateau_reached: bool,
    /// Mean training loss over the final smoothing window.
    pub final_window_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    config: DiTConfig,
    spec: MainNetSpec,
    layout: TokenLayout,
    stats: NormalizerStats,
    schedule: DDPMSchedule,
    schema: Schema,
    /// SHA-256 of the zoo manifest the model was trained on.
    zoo_manifest_hash: String,
    train_meta: TrainMeta,
}

fn write_blob(w: &mut impl Write, data: &[f64]) -> Result<()> {
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_blob(r: &mut impl Read, expect_len: usize) -> Result<Vec<f64>> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    if n != expect_len {
        return Err(Error::format(format!(
            "weight blob has {n} values, schema expects {expect_len}"
        )));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes the model, its EMA weights, and all reconstruction metadata.
pub fn save_model(
    dit: &DiT,
    train_meta: &TrainMeta,
    zoo_manifest_hash: &str,
    path: &Path,
) -> Result<()> {
    let header = ArchiveHeader {
        config: dit.config.clone(),
        spec: dit.spec.clone(),
        layout: dit.layout.clone(),
        stats: dit.stats.clone(),
        schedule: dit.schedule.clone(),
        schema: dit.schema.clone(),
        zoo_manifest_hash: zoo_manifest_hash.to_string(),
        train_meta: train_meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    write_blob(&mut w, &dit.params)?;
    write_blob(&mut w, &dit.ema)?;
    w.flush()?;
    Ok(())
}

/// A model restored from disk.
pub struct LoadedModel {
    pub dit: DiT,
    pub train_meta: TrainMeta,
    pub zoo_manifest_hash: String,
}

/// Reads an archive and rebuilds the model with its stored weights.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a model archive (bad magic)"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported archive version {version}"
        )));
    }
    r.read_exact(&mut v4)?;
    let header_len = u32::from_le_bytes(v4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: ArchiveHeader = serde_json::from_slice(&header_bytes)?;

    // Rebuild the model structurally, then install the stored weights.
    let mut dit = DiT::new(header.config, &header.spec, header.stats, 0)?;
    if dit.schema != header.schema {
        return Err(Error::format(
            "archive schema does not match this build's model structure",
        ));
    }
    if dit.schedule != header.schedule {
        return Err(Error::format(
            "archived noise schedule disagrees with its own config",
        ));
    }
    if dit.layout != header.layout {
        return Err(Error::format(
            "archived token layout disagrees with its network spec",
        ));
    }
    dit.params = read_blob(&mut r, dit.schema.len)?;
    dit.ema = read_blob(&mut r, dit.schema.len)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(format!(
            "{} trailing bytes after EMA weights",
            rest.len()
        )));
    }
    Ok(LoadedModel {
        dit,
        train_meta: header.train_meta,
        zoo_manifest_hash: header.zoo_manifest_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::build_layout;
    use crate::diffusion::dit::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_model(seed: u64) -> DiT {
        let spec = MainNetSpec::new(6, vec![3], 4).unwrap();
        let layout = build_layout(&spec, 8).unwrap();
        let stats = NormalizerStats {
            mean: vec![0.1; layout.groups.len()],
            std: vec![0.9; layout.groups.len()],
        };
        let config = DiTConfig {
            model_width: 32,
            depth: 1,
            heads: 4,
            max_token_len: 8,
            diffusion_steps: 10,
            freq_pairs: 4,
            ..DiTConfig::desk_scale(Variant::V1, 4)
        };
        DiT::new(config, &spec, stats, seed).unwrap()
    }

    #[test]
    fn schedule_json_round_trip_probe() {
        let dit = small_model(5);
        let json = serde_json::to_vec(&dit.schedule).unwrap();
        let back: DDPMSchedule = serde_json::from_slice(&json).unwrap();
        assert_eq!(back.kind, dit.schedule.kind, "kind");
        assert_eq!(back.t_max, dit.schedule.t_max, "t_max");
        assert_eq!(back.betas, dit.schedule.betas, "betas");
        assert_eq!(back.alphas, dit.schedule.alphas, "alphas");
        assert_eq!(back.alpha_bars, dit.schedule.alpha_bars, "alpha_bars");
        assert_eq!(back.posterior_var, dit.schedule.posterior_var, "posterior_var");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dhf");
        let mut dit = small_model(5);
        // Make params and EMA visibly different.
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for v in dit.ema.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let meta = TrainMeta {
            steps_run: 42,
            plateau_reached: true,
            final_window_mean: 0.123,
        };
        save_model(&dit, &meta, "abc123", &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.dit.params, dit.params);
        assert_eq!(loaded.dit.ema, dit.ema);
        assert_eq!(loaded.dit.config, dit.config);
        assert_eq!(loaded.dit.stats, dit.stats);
        assert_eq!(loaded.dit.layout, dit.layout);
        assert_eq!(loaded.train_meta, meta);
        assert_eq!(loaded.zoo_manifest_hash, "abc123");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dhf");
        let dit = small_model(7);
        let meta = TrainMeta {
            steps_run: 1,
            plateau_reached: false,
            final_window_mean: 1.0,
        };
        save_model(&dit, &meta, "h", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path).is_err());

        // Unsupported version.
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path).is_err());

        // Truncated weights.
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_model(&path).is_err());

        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path).is_err());
    }
}
