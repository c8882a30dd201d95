//! File codecs: detections and sequence JSON, event CSV and packed
//! binary, PGM frames, and voxel-grid sidecars.

use crate::detect::{Detection, Modality};
use crate::enhance::GrayFrame;
use crate::events::{Event, VoxelGrid};
use crate::mask::{rle_from_string, rle_to_string, Box2D, MaskError, RleMask};
use crate::metrics::{GtInstance, GtSequence, PredInstance, PredSequence};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid mask in {path}: {source}")]
    Mask { path: String, source: MaskError },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Whether RLE masks are written in compressed-string or counts-array form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RleFormat {
    String,
    Array,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RleJson {
    /// [height, width]
    pub size: [u64; 2],
    pub counts: CountsJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountsJson {
    Text(String),
    Array(Vec<u32>),
}

impl RleJson {
    pub fn to_mask(&self) -> Result<RleMask, MaskError> {
        let size = (self.size[0] as usize, self.size[1] as usize);
        let rle = match &self.counts {
            CountsJson::Text(s) => rle_from_string(s, size)?,
            CountsJson::Array(counts) => {
                let rle = RleMask {
                    size,
                    counts: counts.clone(),
                };
                rle.validate()?;
                rle
            }
        };
        Ok(rle)
    }

    pub fn from_mask(rle: &RleMask, format: RleFormat) -> Result<Self, MaskError> {
        let counts = match format {
            RleFormat::String => CountsJson::Text(rle_to_string(rle)?),
            RleFormat::Array => CountsJson::Array(rle.counts.clone()),
        };
        Ok(Self {
            size: [rle.size.0 as u64, rle.size.1 as u64],
            counts,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionJson {
    pub frame: u64,
    /// [x, y, w, h]
    pub bbox: [f64; 4],
    pub score: f64,
    pub modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<RleJson>,
}

impl DetectionJson {
    pub fn to_detection(&self) -> Result<Detection, MaskError> {
        let mask = match &self.segmentation {
            Some(r) => Some(r.to_mask()?),
            None => None,
        };
        Ok(Detection {
            frame_index: self.frame,
            bbox: Box2D::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]),
            score: self.score,
            mask,
            modality: self.modality,
        })
    }

    pub fn from_detection(det: &Detection, format: RleFormat) -> Result<Self, MaskError> {
        Ok(Self {
            frame: det.frame_index,
            bbox: [det.bbox.x, det.bbox.y, det.bbox.w, det.bbox.h],
            score: det.score,
            modality: det.modality,
            segmentation: match &det.mask {
                Some(m) => Some(RleJson::from_mask(m, format)?),
                None => None,
            },
        })
    }
}

/// Read a per-sequence detections file: a JSON list of detection records.
/// The mask consistency rule (decoded mask bounds within the box expanded
/// by 2 px) is checked at warn level.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let records: Vec<DetectionJson> = serde_json::from_str(&text).map_err(|e| FormatError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut dets = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&record.score) {
            return Err(FormatError::Parse {
                path: path.display().to_string(),
                line: i,
                message: format!("score {} outside [0, 1]", record.score),
            });
        }
        if record.bbox[2] <= 0.0 || record.bbox[3] <= 0.0 {
            return Err(FormatError::Parse {
                path: path.display().to_string(),
                line: i,
                message: "box width and height must be positive".into(),
            });
        }
        let det = record.to_detection().map_err(|e| FormatError::Mask {
            path: path.display().to_string(),
            source: e,
        })?;
        if let Some(mask) = &det.mask {
            if let Ok(decoded) = crate::mask::decode_rle(mask) {
                if let Ok(mb) = crate::mask::box_from_mask(&decoded) {
                    let slack = 2.0;
                    if mb.x < det.bbox.x - slack
                        || mb.y < det.bbox.y - slack
                        || mb.x + mb.w > det.bbox.x + det.bbox.w + slack
                        || mb.y + mb.h > det.bbox.y + det.bbox.h + slack
                    {
                        log::warn!(
                            "{} record {i}: mask bounds exceed box by more than 2 px",
                            path.display()
                        );
                    }
                }
            }
        }
        dets.push(det);
    }
    Ok(dets)
}

pub fn write_detections(
    path: &Path,
    dets: &[Detection],
    format: RleFormat,
) -> Result<(), FormatError> {
    let records: Result<Vec<DetectionJson>, MaskError> = dets
        .iter()
        .map(|d| DetectionJson::from_detection(d, format))
        .collect();
    let records = records.map_err(|e| FormatError::Mask {
        path: path.display().to_string(),
        source: e,
    })?;
    let json = serde_json::to_string_pretty(&records).expect("serializable");
    write_atomic(path, json.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequencesJson {
    pub sequences: Vec<SequenceJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceJson {
    pub id: String,
    pub length: usize,
    pub instances: Vec<InstanceJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceJson {
    pub id: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub segmentations: Vec<Option<RleJson>>,
}

fn instance_masks(
    inst: &InstanceJson,
    length: usize,
    path: &Path,
) -> Result<Vec<Option<RleMask>>, FormatError> {
    if inst.segmentations.len() != length {
        return Err(FormatError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!(
                "instance {} has {} segmentations, sequence length is {length}",
                inst.id,
                inst.segmentations.len()
            ),
        });
    }
    inst.segmentations
        .iter()
        .map(|s| {
            s.as_ref()
                .map(|r| {
                    r.to_mask().map_err(|e| FormatError::Mask {
                        path: path.display().to_string(),
                        source: e,
                    })
                })
                .transpose()
        })
        .collect()
}

pub fn read_gt_sequences(path: &Path) -> Result<Vec<GtSequence>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: SequencesJson = serde_json::from_str(&text).map_err(|e| FormatError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    file.sequences
        .iter()
        .map(|seq| {
            let instances = seq
                .instances
                .iter()
                .map(|inst| {
                    Ok(GtInstance {
                        id: inst.id,
                        masks: instance_masks(inst, seq.length, path)?,
                    })
                })
                .collect::<Result<Vec<_>, FormatError>>()?;
            Ok(GtSequence {
                id: seq.id.clone(),
                length: seq.length,
                instances,
            })
        })
        .collect()
}

pub fn read_pred_sequences(path: &Path) -> Result<Vec<PredSequence>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: SequencesJson = serde_json::from_str(&text).map_err(|e| FormatError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    file.sequences
        .iter()
        .map(|seq| {
            let instances = seq
                .instances
                .iter()
                .map(|inst| {
                    Ok(PredInstance {
                        id: inst.id,
                        score: inst.score.unwrap_or(1.0),
                        masks: instance_masks(inst, seq.length, path)?,
                    })
                })
                .collect::<Result<Vec<_>, FormatError>>()?;
            Ok(PredSequence {
                id: seq.id.clone(),
                length: seq.length,
                instances,
            })
        })
        .collect()
}

fn sequence_to_json<F>(
    id: &str,
    length: usize,
    instances: Vec<(i64, Option<f64>, &Vec<Option<RleMask>>)>,
    format: RleFormat,
    path: &Path,
    _marker: F,
) -> Result<SequenceJson, FormatError> {
    let mut out = Vec::with_capacity(instances.len());
    for (iid, score, masks) in instances {
        let segmentations: Result<Vec<Option<RleJson>>, MaskError> = masks
            .iter()
            .map(|m| m.as_ref().map(|r| RleJson::from_mask(r, format)).transpose())
            .collect();
        out.push(InstanceJson {
            id: iid,
            score,
            segmentations: segmentations.map_err(|e| FormatError::Mask {
                path: path.display().to_string(),
                source: e,
            })?,
        });
    }
    Ok(SequenceJson {
        id: id.to_string(),
        length,
        instances: out,
    })
}

pub fn write_pred_sequences(
    path: &Path,
    sequences: &[PredSequence],
    format: RleFormat,
) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        out.push(sequence_to_json(
            &seq.id,
            seq.length,
            seq.instances
                .iter()
                .map(|i| (i.id, Some(i.score), &i.masks))
                .collect(),
            format,
            path,
            (),
        )?);
    }
    let json = serde_json::to_string_pretty(&SequencesJson { sequences: out }).expect("serializable");
    write_atomic(path, json.as_bytes())
}

pub fn write_gt_sequences(
    path: &Path,
    sequences: &[GtSequence],
    format: RleFormat,
) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        out.push(sequence_to_json(
            &seq.id,
            seq.length,
            seq.instances.iter().map(|i| (i.id, None, &i.masks)).collect(),
            format,
            path,
            (),
        )?);
    }
    let json = serde_json::to_string_pretty(&SequencesJson { sequences: out }).expect("serializable");
    write_atomic(path, json.as_bytes())
}

// ---------------------------------------------------------------------------
// Event files
// ---------------------------------------------------------------------------

const EVENT_MAGIC: &[u8; 4] = b"EVT1";

fn check_sorted(events: &[Event], path: &Path) -> Result<(), FormatError> {
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].t < pair[0].t {
            return Err(FormatError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("timestamps not sorted: {} after {}", pair[1].t, pair[0].t),
            });
        }
    }
    Ok(())
}

/// CSV with header `x,y,t,p`; `t` in integer microseconds, polarity in
/// {-1, 1} or {0, 1} with 0 mapped to -1.
pub fn read_events_csv(path: &Path) -> Result<Vec<Event>, FormatError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header.trim() == "x,y,t,p" => (),
        Some((_, Ok(header))) => {
            return Err(FormatError::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("expected header 'x,y,t,p', got '{header}'"),
            })
        }
        Some((_, Err(e))) => return Err(io_err(path, e)),
        None => return Ok(events),
    }
    for (idx, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |field: &str, what: &str| -> Result<i64, FormatError> {
            field.trim().parse::<i64>().map_err(|_| FormatError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("bad {what} value '{field}'"),
            })
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(FormatError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let x = parse(fields[0], "x")?;
        let y = parse(fields[1], "y")?;
        let t = parse(fields[2], "t")?;
        let p = parse(fields[3], "p")?;
        let p = match p {
            -1 | 0 => -1,
            1 => 1,
            other => {
                return Err(FormatError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: format!("polarity must be -1, 0, or 1, got {other}"),
                })
            }
        };
        events.push(Event {
            x: x as u16,
            y: y as u16,
            t: t as u64,
            p,
        });
    }
    check_sorted(&events, path)?;
    Ok(events)
}

pub fn write_events_csv(path: &Path, events: &[Event]) -> Result<(), FormatError> {
    let mut out = String::from("x,y,t,p\n");
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.p));
    }
    write_atomic(path, out.as_bytes())
}

/// Packed little-endian records (u16 x, u16 y, u64 t, i8 p) after a
/// 16-byte header: magic `EVT1`, u16 width, u16 height, u64 record count.
pub fn read_events_bin(path: &Path) -> Result<(Vec<Event>, u16, u16), FormatError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let parse_err = |message: String| FormatError::Parse {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    if bytes.len() < 16 || &bytes[0..4] != EVENT_MAGIC {
        return Err(parse_err("missing EVT1 header".into()));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let record_size = 13;
    if bytes.len() != 16 + count * record_size {
        return Err(parse_err(format!(
            "expected {} record bytes, found {}",
            count * record_size,
            bytes.len() - 16
        )));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let o = 16 + i * record_size;
        events.push(Event {
            x: u16::from_le_bytes([bytes[o], bytes[o + 1]]),
            y: u16::from_le_bytes([bytes[o + 2], bytes[o + 3]]),
            t: u64::from_le_bytes(bytes[o + 4..o + 12].try_into().unwrap()),
            p: bytes[o + 12] as i8,
        });
    }
    check_sorted(&events, path)?;
    Ok((events, width, height))
}

pub fn write_events_bin(
    path: &Path,
    events: &[Event],
    width: u16,
    height: u16,
) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(16 + events.len() * 13);
    bytes.extend_from_slice(EVENT_MAGIC);
    bytes.extend_from_slice(&width.to_le_bytes());
    bytes.extend_from_slice(&height.to_le_bytes());
    bytes.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        bytes.extend_from_slice(&e.x.to_le_bytes());
        bytes.extend_from_slice(&e.y.to_le_bytes());
        bytes.extend_from_slice(&e.t.to_le_bytes());
        bytes.push(e.p as u8);
    }
    write_atomic(path, &bytes)
}

/// One microsecond timestamp per line.
pub fn read_frame_times(path: &Path) -> Result<Vec<u64>, FormatError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut times = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        times.push(trimmed.parse::<u64>().map_err(|_| FormatError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: format!("bad timestamp '{trimmed}'"),
        })?);
    }
    Ok(times)
}

// ---------------------------------------------------------------------------
// PGM frames
// ---------------------------------------------------------------------------

/// Binary PGM (P5), maxval 255.
pub fn read_pgm(path: &Path) -> Result<GrayFrame, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let parse_err = |message: String| FormatError::Parse {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, FormatError> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Parse {
                path: String::new(),
                line: 0,
                message: "truncated PGM header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(parse_err(format!("expected P5 magic, got '{magic}'")));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| parse_err("bad width".into()))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| parse_err("bad height".into()))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| parse_err("bad maxval".into()))?;
    if maxval != 255 {
        return Err(parse_err(format!("only maxval 255 supported, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(parse_err("truncated PGM pixel data".into()));
    }
    Ok(GrayFrame::new(
        height,
        width,
        bytes[pos..pos + width * height].to_vec(),
    ))
}

pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<(), FormatError> {
    let mut bytes = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    bytes.extend_from_slice(&frame.data);
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Voxel grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelMeta {
    pub h: usize,
    pub w: usize,
    pub b: usize,
    pub t_start: u64,
    pub t_end: u64,
}

/// Flat little-endian f32 values indexed (y * w + x) * b + bin, plus a
/// JSON sidecar next to the binary.
pub fn write_voxel_grid(
    path: &Path,
    grid: &VoxelGrid,
    t_start: u64,
    t_end: u64,
) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(grid.values.len() * 4);
    for &v in &grid.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let meta = VoxelMeta {
        h: grid.h,
        w: grid.w,
        b: grid.bins,
        t_start,
        t_end,
    };
    let sidecar = path.with_extension("json");
    write_atomic(
        &sidecar,
        serde_json::to_string_pretty(&meta).expect("serializable").as_bytes(),
    )
}

pub fn read_voxel_grid(path: &Path) -> Result<(VoxelGrid, VoxelMeta), FormatError> {
    let sidecar = path.with_extension("json");
    let meta: VoxelMeta = serde_json::from_str(
        &fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?,
    )
    .map_err(|e| FormatError::Json {
        path: sidecar.display().to_string(),
        source: e,
    })?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let expected = meta.h * meta.w * meta.b * 4;
    if bytes.len() != expected {
        return Err(FormatError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((
        VoxelGrid {
            h: meta.h,
            w: meta.w,
            bins: meta.b,
            values,
        },
        meta,
    ))
}
