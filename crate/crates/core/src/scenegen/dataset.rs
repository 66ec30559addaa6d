//! On-disk dataset layout: `manifest.txt` with `key: value` lines and
//! `samples.bin` holding length-prefixed, CRC-checked little-endian records.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geom::Trajectory;
use crate::raster::RasterImage;

use super::{Maneuver, Sample};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const RECORDS: &str = "samples.bin";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("dataset format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: String, expected: u32 },
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("sample {index} does not match the dataset shape: {reason}")]
    ShapeMismatch { index: usize, reason: String },
}

/// Shape information shared by every record.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub horizon: usize,
    pub dt: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
}

impl DatasetMeta {
    fn raster_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn payload_len(&self) -> usize {
        4 * self.raster_len() + 4 * 3 + 4 * 2 * self.horizon + 1 + 8
    }

    fn check(&self, index: usize, s: &Sample) -> Result<(), DatasetError> {
        let r = &s.raster;
        let reason = if (r.channels, r.height, r.width) != (self.channels, self.height, self.width) {
            Some(format!(
                "raster {}x{}x{} vs {}x{}x{}",
                r.channels, r.height, r.width, self.channels, self.height, self.width
            ))
        } else if s.ground_truth.horizon() != self.horizon {
            Some(format!("horizon {} vs {}", s.ground_truth.horizon(), self.horizon))
        } else if s.ground_truth.dt() != self.dt {
            Some(format!("dt {} vs {}", s.ground_truth.dt(), self.dt))
        } else if r.resolution != self.resolution {
            Some(format!("resolution {} vs {}", r.resolution, self.resolution))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(DatasetError::ShapeMismatch { index, reason }),
            None => Ok(()),
        }
    }

    fn manifest(&self, count: usize) -> String {
        format!(
            "format_version: {FORMAT_VERSION}\ncount: {count}\nhorizon: {}\ndt: {}\nraster_channels: {}\nraster_height: {}\nraster_width: {}\nresolution: {}\n",
            self.horizon, self.dt, self.channels, self.height, self.width, self.resolution
        )
    }
}

fn encode(sample: &Sample, buf: &mut Vec<u8>) {
    buf.clear();
    for v in &sample.raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.state_features {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for p in sample.ground_truth.points() {
        buf.extend_from_slice(&(p.x as f32).to_le_bytes());
        buf.extend_from_slice(&(p.y as f32).to_le_bytes());
    }
    buf.push(sample.maneuver.code());
    let lane = sample.followed_lane_id.map_or(-1, i64::from);
    buf.extend_from_slice(&lane.to_le_bytes());
}

/// Writes `samples` under directory `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, samples: &[Sample]) -> Result<String, DatasetError> {
    for (i, s) in samples.iter().enumerate() {
        meta.check(i, s)?;
    }
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(RECORDS))?);
    let mut buf = Vec::with_capacity(meta.payload_len());
    for s in samples {
        encode(s, &mut buf);
        out.write_all(&(buf.len() as u64).to_le_bytes())?;
        out.write_all(&buf)?;
        out.write_all(&crc32fast::hash(&buf).to_le_bytes())?;
    }
    out.flush()?;
    let manifest = meta.manifest(samples.len());
    fs::write(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn parse_manifest(text: &str) -> Result<(DatasetMeta, usize), DatasetError> {
    let get = |key: &str| -> Result<String, DatasetError> {
        text.lines()
            .filter_map(|l| l.split_once(':'))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| DatasetError::Manifest(format!("missing key '{key}'")))
    };
    let version = get("format_version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(DatasetError::FormatVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T, DatasetError> {
        v.parse()
            .map_err(|_| DatasetError::Manifest(format!("bad value for '{key}': {v}")))
    }
    let meta = DatasetMeta {
        horizon: num("horizon", get("horizon")?)?,
        dt: num("dt", get("dt")?)?,
        channels: num("raster_channels", get("raster_channels")?)?,
        height: num("raster_height", get("raster_height")?)?,
        width: num("raster_width", get("raster_width")?)?,
        resolution: num("resolution", get("resolution")?)?,
    };
    let count = num("count", get("count")?)?;
    Ok((meta, count))
}

fn f32_at(b: &[u8], i: usize) -> f32 {
    f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().expect("4 bytes"))
}

fn decode(meta: &DatasetMeta, index: usize, payload: &[u8]) -> Result<Sample, DatasetError> {
    let corrupt = |reason: String| DatasetError::CorruptRecord { index, reason };
    let n = meta.raster_len();
    let data: Vec<f32> = (0..n).map(|i| f32_at(payload, i)).collect();
    let feat = |k: usize| f32_at(payload, n + k) as f64;
    let state_features = [feat(0), feat(1), feat(2)];
    let flat: Vec<f64> = (0..2 * meta.horizon)
        .map(|k| f32_at(payload, n + 3 + k) as f64)
        .collect();
    let tail = 4 * (n + 3 + 2 * meta.horizon);
    let maneuver = Maneuver::from_code(payload[tail])
        .ok_or_else(|| corrupt(format!("bad maneuver code {}", payload[tail])))?;
    let lane = i64::from_le_bytes(payload[tail + 1..tail + 9].try_into().expect("8 bytes"));
    let followed_lane_id = match lane {
        -1 => None,
        l => Some(u32::try_from(l).map_err(|_| corrupt(format!("bad lane id {l}")))?),
    };
    let ground_truth = Trajectory::from_flat(&flat, meta.dt).map_err(|e| corrupt(e.to_string()))?;
    let raster = RasterImage::from_parts(meta.channels, meta.height, meta.width, meta.resolution, data)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(Sample {
        raster,
        state_features,
        ground_truth,
        followed_lane_id,
        maneuver,
    })
}

/// Reads a dataset written by [`write_dataset`], verifying every checksum.
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<Sample>), DatasetError> {
    let (meta, count) = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join(RECORDS))?.read_to_end(&mut bytes)?;
    let expected = meta.payload_len();
    let mut samples = Vec::with_capacity(count);
    let mut at = 0usize;
    for index in 0..count {
        let corrupt = |reason: &str| DatasetError::CorruptRecord {
            index,
            reason: reason.to_string(),
        };
        let len_bytes = bytes.get(at..at + 8).ok_or_else(|| corrupt("truncated length"))?;
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        if len != expected {
            return Err(corrupt(&format!("record length {len}, expected {expected}")));
        }
        let payload = bytes
            .get(at + 8..at + 8 + len)
            .ok_or_else(|| corrupt("truncated payload"))?;
        let crc_bytes = bytes
            .get(at + 8 + len..at + 12 + len)
            .ok_or_else(|| corrupt("truncated checksum"))?;
        let crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc != crc32fast::hash(payload) {
            return Err(corrupt("checksum mismatch"));
        }
        samples.push(decode(&meta, index, payload)?);
        at += len + 12;
    }
    if at != bytes.len() {
        return Err(DatasetError::CorruptRecord {
            index: count,
            reason: format!("{} trailing bytes", bytes.len() - at),
        });
    }
    Ok((meta, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            horizon: 4,
            dt: 0.1,
            channels: 2,
            height: 3,
            width: 3,
            resolution: 0.5,
        }
    }

    fn sample(i: usize) -> Sample {
        let data = (0..18).map(|k| ((k + i) % 2) as f32).collect();
        let pts = (0..4)
            .map(|h| Vec2::new(f64::from((h + i) as f32 * 0.37), f64::from(-(h as f32) * 0.11)))
            .collect();
        Sample {
            raster: RasterImage::from_parts(2, 3, 3, 0.5, data).unwrap(),
            state_features: [10.25, -0.5, 0.125],
            ground_truth: Trajectory::new(pts, 0.1).unwrap(),
            followed_lane_id: if i % 2 == 0 { Some(i as u32) } else { None },
            maneuver: Maneuver::from_code((i % 3) as u8).unwrap(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..100).map(sample).collect();
        write_dataset(dir.path(), &meta(), &samples).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.raster.data, b.raster.data);
            assert_eq!(a.ground_truth, b.ground_truth);
            assert_eq!(a.state_features, b.state_features);
            assert_eq!(a.maneuver, b.maneuver);
            assert_eq!(a.followed_lane_id, b.followed_lane_id);
        }
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &meta(), &[]).unwrap();
        assert!(manifest.contains("count: 0"));
        let (_, back) = read_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..5).map(sample).collect();
        write_dataset(dir.path(), &meta(), &samples).unwrap();
        let path = dir.path().join(RECORDS);
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::CorruptRecord { index: 4, .. })
        ));

        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::CorruptRecord { index: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &meta(), &[sample(0)]).unwrap();
        let m = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        fs::write(dir.path().join(MANIFEST), m.replace("format_version: 1", "format_version: 9")).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::FormatVersionMismatch { .. })
        ));
    }

    #[test]
    fn shape_checked_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = meta();
        m.horizon = 5;
        assert!(matches!(
            write_dataset(dir.path(), &m, &[sample(0)]),
            Err(DatasetError::ShapeMismatch { index: 0, .. })
        ));
    }
}
