//! On-disk dataset layout: a directory holding a human-readable manifest
//! (spec, seed, per-file checksums) plus raw little-endian arrays.
//!
//! Files: `manifest.txt`, `videos.f32` (all samples, `[N,T,C,H,W]` order),
//! `labels.u32`, `sources.u32`, `hard.u8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use heterovid_core::tensor::{Tensor, VideoBatch};

use crate::synth::{Dataset, Sample, SourceStyle, SyntheticSpec};
use crate::{HarnessError, Result};

const FORMAT: &str = "heterovid-dataset-v1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn videos_bytes(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for s in &data.samples {
        for &v in s.video.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_bytes(values: impl Iterator<Item = u32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let videos = videos_bytes(data);
    let labels = u32_bytes(data.samples.iter().map(|s| s.label as u32));
    let sources = u32_bytes(data.samples.iter().map(|s| s.source as u32));
    let hard: Vec<u8> = data.samples.iter().map(|s| u8::from(s.hard)).collect();

    let spec = &data.spec;
    let mut m = String::new();
    m.push_str(&format!("format {FORMAT}\n"));
    m.push_str(&format!("seed {}\n", spec.seed));
    m.push_str(&format!("num_classes {}\n", spec.num_classes));
    m.push_str(&format!(
        "per_class {}\n",
        spec.per_class.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    ));
    m.push_str(&format!("time_steps {}\n", spec.time_steps));
    m.push_str(&format!("channels {}\n", spec.channels));
    m.push_str(&format!("height {}\n", spec.height));
    m.push_str(&format!("width {}\n", spec.width));
    m.push_str(&format!("num_sources {}\n", spec.num_sources));
    m.push_str(&format!("style_shift {}\n", spec.style_shift));
    m.push_str(&format!(
        "styles {}\n",
        spec.styles
            .iter()
            .map(|s| format!("{}:{}:{}:{}", s.contrast, s.brightness, s.noise, s.blur))
            .collect::<Vec<_>>()
            .join(",")
    ));
    m.push_str(&format!("temporal_drift {}\n", spec.temporal_drift));
    m.push_str(&format!("hard_fraction {}\n", spec.hard_fraction));
    m.push_str(&format!("checksum.videos fnv1a:{:016x}\n", fnv1a(&videos)));
    m.push_str(&format!("checksum.labels fnv1a:{:016x}\n", fnv1a(&labels)));
    m.push_str(&format!("checksum.sources fnv1a:{:016x}\n", fnv1a(&sources)));
    m.push_str(&format!("checksum.hard fnv1a:{:016x}\n", fnv1a(&hard)));

    fs::write(dir.join("manifest.txt"), m)?;
    fs::write(dir.join("videos.f32"), videos)?;
    fs::write(dir.join("labels.u32"), labels)?;
    fs::write(dir.join("sources.u32"), sources)?;
    fs::write(dir.join("hard.u8"), hard)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| HarnessError::Data(format!("malformed manifest line '{line}'")))?;
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn req<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| HarnessError::Data(format!("manifest missing '{key}'")))
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    req(map, key)?
        .parse()
        .map_err(|_| HarnessError::Data(format!("manifest value for '{key}' is invalid")))
}

fn check(map: &BTreeMap<String, String>, key: &str, bytes: &[u8]) -> Result<()> {
    let want = req(map, key)?;
    let got = format!("fnv1a:{:016x}", fnv1a(bytes));
    if want != got {
        return Err(HarnessError::Data(format!("checksum mismatch for {key}: {want} vs {got}")));
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let map = parse_manifest(&manifest)?;
    if req(&map, "format")? != FORMAT {
        return Err(HarnessError::Data(format!("unsupported format '{}'", req(&map, "format")?)));
    }
    let per_class: Vec<usize> = req(&map, "per_class")?
        .split(',')
        .map(|v| v.parse().map_err(|_| HarnessError::Data("bad per_class entry".into())))
        .collect::<Result<_>>()?;
    let styles: Vec<SourceStyle> = req(&map, "styles")?
        .split(',')
        .map(|triple| {
            let parts: Vec<&str> = triple.split(':').collect();
            if parts.len() != 4 {
                return Err(HarnessError::Data(format!("bad style entry '{triple}'")));
            }
            let get = |i: usize| -> Result<f64> {
                parts[i]
                    .parse()
                    .map_err(|_| HarnessError::Data(format!("bad style value '{}'", parts[i])))
            };
            Ok(SourceStyle { contrast: get(0)?, brightness: get(1)?, noise: get(2)?, blur: get(3)? })
        })
        .collect::<Result<_>>()?;
    let spec = SyntheticSpec {
        num_classes: parse(&map, "num_classes")?,
        per_class,
        time_steps: parse(&map, "time_steps")?,
        channels: parse(&map, "channels")?,
        height: parse(&map, "height")?,
        width: parse(&map, "width")?,
        num_sources: parse(&map, "num_sources")?,
        style_shift: parse(&map, "style_shift")?,
        styles,
        temporal_drift: parse(&map, "temporal_drift")?,
        hard_fraction: parse(&map, "hard_fraction")?,
        seed: parse(&map, "seed")?,
    };
    spec.validate()?;

    let videos = fs::read(dir.join("videos.f32"))?;
    let labels = fs::read(dir.join("labels.u32"))?;
    let sources = fs::read(dir.join("sources.u32"))?;
    let hard = fs::read(dir.join("hard.u8"))?;
    check(&map, "checksum.videos", &videos)?;
    check(&map, "checksum.labels", &labels)?;
    check(&map, "checksum.sources", &sources)?;
    check(&map, "checksum.hard", &hard)?;

    let n = spec.total_samples();
    let per_sample = spec.time_steps * spec.channels * spec.height * spec.width;
    if videos.len() != n * per_sample * 4 || labels.len() != n * 4 || sources.len() != n * 4 || hard.len() != n
    {
        return Err(HarnessError::Data("array sizes disagree with the manifest".into()));
    }
    let shape = [spec.time_steps, spec.channels, spec.height, spec.width];
    let samples = (0..n)
        .map(|i| {
            let base = i * per_sample * 4;
            let data: Vec<f32> = (0..per_sample)
                .map(|j| {
                    let o = base + j * 4;
                    f32::from_le_bytes([videos[o], videos[o + 1], videos[o + 2], videos[o + 3]])
                })
                .collect();
            let label = u32::from_le_bytes(labels[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
            let source =
                u32::from_le_bytes(sources[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
            Sample {
                video: Tensor::from_vec(&shape, data),
                label,
                source,
                hard: hard[i] != 0,
            }
        })
        .collect();
    Ok(Dataset { spec, samples })
}

/// Stacks a set of samples into one `[B, T, C, H, W]` batch with labels.
pub fn stack(data: &Dataset, indices: &[usize]) -> (VideoBatch<f32>, Vec<usize>) {
    let shape = data.samples[indices[0]].video.shape();
    let per = data.samples[indices[0]].video.numel();
    let mut out = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        out.extend_from_slice(data.samples[i].video.data());
        labels.push(data.samples[i].label);
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(shape);
    (VideoBatch::new(Tensor::from_vec(&full, out)), labels)
}
