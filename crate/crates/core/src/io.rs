//! On-disk formats: datasets, weight checkpoints and JSON reports.
//!
//! Both binary formats share one layout: an 8-byte magic, a little-endian
//! `u32` version, a little-endian `u64` length followed by a JSON header of
//! that length, and then raw little-endian `f64` payload.
//!
//! Dataset payload: the `2k × d` dictionary, then per sample
//! `label: u32`, `view: u8` (0 multi, 1 single with slot 0 dominant, 2 single
//! with slot 1 dominant), `active: u32` followed by `class, slot, count: u32`
//! and `count` patch indices per active feature, then `z` (`P` values),
//! `alpha` (`P × 2k`) and the patches (`P × d`).
//!
//! Checkpoint payload: the kernels (`km × d`), then the head (`k × km`) when
//! the header says one is present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ActiveFeature, DataParams, Dataset, FeatureDictionary, FeatureId, LabeledSample, View,
};
use crate::error::{LabError, Result};
use crate::network::{EncoderWeights, HeadWeights};

pub const DATASET_MAGIC: &[u8; 8] = b"MRPDATA\0";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"MRPWGHT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    params: DataParams,
    n: usize,
    rejected_draws: usize,
    /// Seed the dictionary was drawn from, when known.
    dictionary_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub sigma0: f64,
    pub has_head: bool,
    /// Iteration the weights were taken at, when meaningful.
    pub iteration: Option<usize>,
}

fn write_preamble<W: Write>(out: &mut W, magic: &[u8; 8], header: &impl Serialize) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(header)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    Ok(())
}

fn read_preamble<R: Read, H: for<'de> Deserialize<'de>>(input: &mut R, magic: &[u8; 8]) -> Result<H> {
    let mut got = [0u8; 8];
    input.read_exact(&mut got)?;
    if &got != magic {
        return Err(LabError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(LabError::Format(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let len = read_u64(input)?;
    if len > 1 << 24 {
        return Err(LabError::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64s<'a, W: Write>(out: &mut W, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    input.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| LabError::Format(e.to_string()))
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LabError::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn write_dataset<W: Write>(
    out: W,
    dataset: &Dataset,
    dict: &FeatureDictionary,
    dictionary_seed: Option<u64>,
) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = DatasetHeader {
        params: dataset.params.clone(),
        n: dataset.len(),
        rejected_draws: dataset.summary.rejected_draws,
        dictionary_seed,
    };
    write_preamble(&mut out, DATASET_MAGIC, &header)?;
    write_f64s(&mut out, dict.matrix().iter())?;
    for x in &dataset.samples {
        out.write_all(&u32_of(x.label, "label")?.to_le_bytes())?;
        let view: u8 = match x.view {
            View::Multi => 0,
            View::Single { main_slot } => 1 + main_slot as u8,
        };
        out.write_all(&[view])?;
        out.write_all(&u32_of(x.active.len(), "active count")?.to_le_bytes())?;
        for a in &x.active {
            out.write_all(&u32_of(a.feature.class, "class")?.to_le_bytes())?;
            out.write_all(&u32_of(a.feature.slot, "slot")?.to_le_bytes())?;
            out.write_all(&u32_of(a.patches.len(), "patch count")?.to_le_bytes())?;
            for &p in &a.patches {
                out.write_all(&u32_of(p, "patch index")?.to_le_bytes())?;
            }
        }
        write_f64s(&mut out, x.z.iter())?;
        write_f64s(&mut out, x.alpha.iter())?;
        write_f64s(&mut out, x.patches.iter())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset and its dictionary back, bit for bit.
pub fn read_dataset<R: Read>(input: R) -> Result<(Dataset, FeatureDictionary, Option<u64>)> {
    let mut input = BufReader::new(input);
    let header: DatasetHeader = read_preamble(&mut input, DATASET_MAGIC)?;
    let params = header.params;
    params.validate()?;
    let (k, d, p) = (params.k, params.d, params.num_patches);
    let dict = FeatureDictionary::from_rows(read_matrix(&mut input, 2 * k, d)?)?;
    let mut samples = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let label = read_u32(&mut input)? as usize;
        if label >= k {
            return Err(LabError::Format(format!("label {label} out of range")));
        }
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let view = match tag[0] {
            0 => View::Multi,
            1 | 2 => View::Single {
                main_slot: (tag[0] - 1) as usize,
            },
            t => return Err(LabError::Format(format!("unknown view tag {t}"))),
        };
        let n_active = read_u32(&mut input)? as usize;
        if n_active > 2 * k {
            return Err(LabError::Format(format!("{n_active} active features for k = {k}")));
        }
        let mut active = Vec::with_capacity(n_active);
        for _ in 0..n_active {
            let class = read_u32(&mut input)? as usize;
            let slot = read_u32(&mut input)? as usize;
            if class >= k || slot > 1 {
                return Err(LabError::Format(format!("bad feature ({class}, {slot})")));
            }
            let count = read_u32(&mut input)? as usize;
            if count > p {
                return Err(LabError::Format(format!("{count} patches for one feature")));
            }
            let mut patches = Vec::with_capacity(count);
            for _ in 0..count {
                let idx = read_u32(&mut input)? as usize;
                if idx >= p {
                    return Err(LabError::Format(format!("patch index {idx} ≥ P = {p}")));
                }
                patches.push(idx);
            }
            active.push(ActiveFeature {
                feature: FeatureId::new(class, slot),
                patches,
            });
        }
        let z = read_matrix(&mut input, 1, p)?.into_raw_vec_and_offset().0;
        let alpha = read_matrix(&mut input, p, 2 * k)?;
        let patches = read_matrix(&mut input, p, d)?;
        samples.push(LabeledSample {
            patches,
            label,
            view,
            active,
            z,
            alpha,
        });
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(LabError::Format("trailing bytes after the last sample".into()));
    }
    Ok((
        Dataset::new(params, samples, header.rejected_draws),
        dict,
        header.dictionary_seed,
    ))
}

pub fn save_dataset(
    path: &Path,
    dataset: &Dataset,
    dict: &FeatureDictionary,
    dictionary_seed: Option<u64>,
) -> Result<()> {
    write_dataset(File::create(path)?, dataset, dict, dictionary_seed)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, FeatureDictionary, Option<u64>)> {
    read_dataset(File::open(path)?)
}

pub fn write_checkpoint<W: Write>(
    out: W,
    w: &EncoderWeights,
    head: Option<&HeadWeights>,
    iteration: Option<usize>,
) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = CheckpointHeader {
        k: w.k(),
        m: w.m,
        d: w.dim(),
        sigma0: w.sigma0,
        has_head: head.is_some(),
        iteration,
    };
    write_preamble(&mut out, WEIGHTS_MAGIC, &header)?;
    write_f64s(&mut out, w.kernels.iter())?;
    if let Some(h) = head {
        crate::error::dim_check("head width", w.num_kernels(), h.u.ncols())?;
        write_f64s(&mut out, h.u.iter())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(
    input: R,
) -> Result<(EncoderWeights, Option<HeadWeights>, CheckpointHeader)> {
    let mut input = BufReader::new(input);
    let header: CheckpointHeader = read_preamble(&mut input, WEIGHTS_MAGIC)?;
    let km = header.k * header.m;
    let kernels = read_matrix(&mut input, km, header.d)?;
    let w = EncoderWeights::new(kernels, header.m, header.sigma0)?;
    let head = if header.has_head {
        Some(HeadWeights {
            u: read_matrix(&mut input, header.k, km)?,
        })
    } else {
        None
    };
    Ok((w, head, header))
}

pub fn save_checkpoint(
    path: &Path,
    w: &EncoderWeights,
    head: Option<&HeadWeights>,
    iteration: Option<usize>,
) -> Result<()> {
    write_checkpoint(File::create(path)?, w, head, iteration)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderWeights, Option<HeadWeights>, CheckpointHeader)> {
    read_checkpoint(File::open(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_feature_dictionary, sample_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dataset_round_trip() {
        let params = DataParams {
            k: 3,
            d: 16,
            num_patches: 12,
            s: 1.0,
            ..DataParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dict = build_feature_dictionary(3, 16, &mut rng).unwrap();
        let data = sample_dataset(9, &dict, &params, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &dict, Some(5)).unwrap();
        let (back, dict2, seed) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(seed, Some(5));
        assert_eq!(dict2, dict);
        assert_eq!(back.samples, data.samples);
        assert_eq!(back.summary, data.summary);

        buf[0] = b'X';
        assert!(matches!(read_dataset(buf.as_slice()), Err(LabError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = EncoderWeights::gaussian(3, 2, 8, 0.3, &mut rng);
        let mut head = HeadWeights::zeros(3, 6);
        head.u[[1, 4]] = -0.75;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w, Some(&head), Some(12)).unwrap();
        let (w2, h2, hdr) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(w2, w);
        assert_eq!(h2, Some(head));
        assert_eq!(hdr.iteration, Some(12));

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w, None, None).unwrap();
        let (_, h3, _) = read_checkpoint(buf.as_slice()).unwrap();
        assert!(h3.is_none());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
