// On-disk dataset layout:
//
//   manifest.json      format_version, num_classes, modalities[], labels_file,
//                      availability_file, splits_file
//   <modality>.crsd    "CRSD", u32 version, u32 N, u32 T, u32 C,
//                      N*T*C little-endian f64, u32 CRC32 of preceding bytes
//   labels.txt         one label per line, "-" for a hidden label
//   availability.txt   one line per sample, M comma-separated 0/1 flags
//   splits.txt         one of train/val/test per line

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::model::ModalityConfig;
use crate::numkernel::Tensor;

pub const PAYLOAD_MAGIC: &[u8; 4] = b"CRSD";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    modalities: Vec<ManifestModality>,
    labels_file: Option<String>,
    availability_file: String,
    splits_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModality {
    name: String,
    channels: usize,
    window_len: usize,
    sampling_rate: f64,
    payload_file: String,
}

fn encode_payload(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + t.len() * 8);
    buf.extend_from_slice(PAYLOAD_MAGIC);
    buf.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn decode_payload(bytes: &[u8], field: &str) -> Result<Tensor> {
    let err = |reason: String| Error::load(field, reason);
    if bytes.len() < 24 {
        return Err(err(format!("payload truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != PAYLOAD_MAGIC {
        return Err(err("bad payload magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(4) as u32 != DATASET_FORMAT_VERSION {
        return Err(err(format!("unsupported payload version {}", u32_at(4))));
    }
    let (n, t, c) = (u32_at(8), u32_at(12), u32_at(16));
    let count = n * t * c;
    let expected = 20 + count * 8 + 4;
    if bytes.len() != expected {
        return Err(err(format!("payload has {} bytes, header implies {expected}", bytes.len())));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let values = bytes[20..body_end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![n, t, c], values)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn payload_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.crsd")
}

/// Writes `manifest.json` plus payload and text files into `dir`.
pub fn save_dataset(dataset: &MultimodalDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modalities = Vec::new();
    for (cfg, w) in dataset.modalities.iter().zip(&dataset.windows) {
        let file = payload_name(&cfg.name);
        write(&dir.join(&file), encode_payload(w))?;
        modalities.push(ManifestModality {
            name: cfg.name.clone(),
            channels: cfg.channels,
            window_len: cfg.window_len,
            sampling_rate: cfg.sampling_rate,
            payload_file: file,
        });
    }
    let labels_file = match &dataset.labels {
        Some(labels) => {
            let text: String = labels
                .iter()
                .zip(&dataset.labeled)
                .map(|(l, &k)| if k { format!("{l}\n") } else { "-\n".to_string() })
                .collect();
            write(&dir.join("labels.txt"), text)?;
            Some("labels.txt".to_string())
        }
        None => None,
    };
    let m = dataset.num_modalities();
    let avail: String = dataset
        .availability
        .chunks(m)
        .map(|row| {
            let flags: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
            format!("{}\n", flags.join(","))
        })
        .collect();
    write(&dir.join("availability.txt"), avail)?;
    let splits: String = dataset.splits.iter().map(|s| format!("{}\n", s.as_str())).collect();
    write(&dir.join("splits.txt"), splits)?;

    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        num_classes: dataset.num_classes,
        modalities,
        labels_file,
        availability_file: "availability.txt".into(),
        splits_file: "splits.txt".into(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&path, text + "\n")?;
    Ok(path)
}

/// Loads a dataset from a manifest path or from the directory holding it.
pub fn load_dataset(manifest_path: &Path) -> Result<MultimodalDataset> {
    let manifest_path =
        if manifest_path.is_dir() { manifest_path.join("manifest.json") } else { manifest_path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = read_text(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::load("format_version", format!("unsupported version {}", manifest.format_version)));
    }

    let mut modalities = Vec::new();
    let mut windows = Vec::new();
    for mm in &manifest.modalities {
        let path = dir.join(&mm.payload_file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let field = format!("modalities.{}.payload_file", mm.name);
        let t = decode_payload(&bytes, &field)?;
        if t.dim(1) != mm.window_len {
            return Err(Error::load(
                format!("modalities.{}.window_len", mm.name),
                format!("manifest declares {} but payload has {}", mm.window_len, t.dim(1)),
            ));
        }
        if t.dim(2) != mm.channels {
            return Err(Error::load(
                format!("modalities.{}.channels", mm.name),
                format!("manifest declares {} but payload has {}", mm.channels, t.dim(2)),
            ));
        }
        modalities.push(ModalityConfig {
            name: mm.name.clone(),
            channels: mm.channels,
            window_len: mm.window_len,
            sampling_rate: mm.sampling_rate,
        });
        windows.push(t);
    }
    let n = windows.first().map_or(0, |w| w.dim(0));
    if let Some((mm, w)) = manifest.modalities.iter().zip(&windows).find(|(_, w)| w.dim(0) != n) {
        return Err(Error::load(
            format!("modalities.{}.payload_file", mm.name),
            format!("{} samples, first modality has {n}", w.dim(0)),
        ));
    }

    let lines = |file: &str, field: &str| -> Result<Vec<String>> {
        let text = read_text(&dir.join(file))?;
        let rows: Vec<String> = text.lines().map(str::to_owned).collect();
        if rows.len() != n {
            return Err(Error::load(field, format!("{} records, expected {n}", rows.len())));
        }
        Ok(rows)
    };

    let (labels, labeled) = match &manifest.labels_file {
        Some(file) => {
            let mut labels = Vec::with_capacity(n);
            let mut labeled = Vec::with_capacity(n);
            for (i, row) in lines(file, "labels_file")?.iter().enumerate() {
                if row.trim() == "-" {
                    labels.push(0);
                    labeled.push(false);
                    continue;
                }
                let l: usize = row
                    .trim()
                    .parse()
                    .map_err(|_| Error::load("labels_file", format!("line {}: `{row}` is not a label", i + 1)))?;
                if l >= manifest.num_classes {
                    return Err(Error::load(
                        "labels_file",
                        format!("line {}: label {l} outside [0, {})", i + 1, manifest.num_classes),
                    ));
                }
                labels.push(l);
                labeled.push(true);
            }
            (Some(labels), labeled)
        }
        None => (None, vec![false; n]),
    };

    let m = modalities.len();
    let mut availability = Vec::with_capacity(n * m);
    for (i, row) in lines(&manifest.availability_file, "availability_file")?.iter().enumerate() {
        let flags: Vec<&str> = row.trim().split(',').collect();
        if flags.len() != m {
            return Err(Error::load("availability_file", format!("line {}: {} flags, expected {m}", i + 1, flags.len())));
        }
        for f in flags {
            availability.push(match f.trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::load("availability_file", format!("line {}: bad flag `{other}`", i + 1)))
                }
            });
        }
    }
    let splits = lines(&manifest.splits_file, "splits_file")?
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Split::parse(row.trim())
                .ok_or_else(|| Error::load("splits_file", format!("line {}: unknown split `{row}`", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = MultimodalDataset {
        modalities,
        windows,
        labels,
        labeled,
        availability,
        splits,
        num_classes: manifest.num_classes,
    };
    dataset.validate()?;
    Ok(dataset)
}
