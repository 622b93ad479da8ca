//! CFDS dataset files: magic "CFDS", u32 version, length-prefixed JSON
//! manifest, then one CRC32-guarded binary block per sample. Record offsets
//! are relative to the first byte after the manifest so the manifest text
//! never depends on its own length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Mode, VideoSample};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

const MAGIC: &[u8; 4] = b"CFDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Byte offset of the sample block, relative to the end of the manifest.
    pub offset: u64,
    pub sentence: String,
    pub temporal_span: [u32; 2],
    pub entity_span: [u32; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: u32,
    pub mode: String,
    pub frames: u32,
    pub side: u32,
    pub vocab: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn mode(&self) -> Result<Mode> {
        Mode::parse(&self.mode)
    }
}

fn sample_payload(s: &VideoSample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(s.pixels.len() * 8 + s.tokens.len() * 4 + 64);
    for v in s.pixels.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
    for t in &s.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&(s.temporal_span.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(s.temporal_span.1 as u32).to_le_bytes());
    buf.extend_from_slice(&(s.entity_span.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(s.entity_span.1 as u32).to_le_bytes());
    for b in &s.gt_boxes {
        match b {
            Some(b) => {
                buf.push(1);
                for v in [b.cx, b.cy, b.w, b.h] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
    }
    buf
}

/// Write samples to a CFDS file. All samples must share one geometry.
pub fn write_dataset(samples: &[VideoSample], mode: Mode, path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let frames = samples[0].frames;
    let side = samples[0].side;
    let mut records = Vec::with_capacity(samples.len());
    let mut blocks: Vec<u8> = Vec::new();
    for s in samples {
        if s.frames != frames || s.side != side {
            return Err(Error::Config("samples disagree on frame geometry".into()));
        }
        let payload = sample_payload(s);
        let crc = crc32fast::hash(&payload);
        records.push(SampleRecord {
            offset: blocks.len() as u64,
            sentence: s.sentence.clone(),
            temporal_span: [s.temporal_span.0 as u32, s.temporal_span.1 as u32],
            entity_span: [s.entity_span.0 as u32, s.entity_span.1 as u32],
        });
        blocks.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        blocks.extend_from_slice(&payload);
        blocks.extend_from_slice(&crc.to_le_bytes());
    }
    let manifest = DatasetManifest {
        sample_count: samples.len() as u32,
        mode: mode.as_str().to_string(),
        frames: frames as u32,
        side: side as u32,
        vocab: super::VOCAB.iter().map(|s| s.to_string()).collect(),
        records,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    out.write_all(&blocks)?;
    out.flush()?;
    Ok(())
}

/// Open a CFDS file: the manifest is parsed eagerly, sample blocks load on
/// demand.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    path: PathBuf,
    /// Absolute file offset of the first sample block.
    base: u64,
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path)
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut file, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "not a CFDS dataset (magic {:?})",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut file)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}, expected {VERSION}"
            )));
        }
        let manifest_len = read_u32(&mut file)? as usize;
        let mut manifest_json = vec![0u8; manifest_len];
        read_exact(&mut file, &mut manifest_json)?;
        let manifest: DatasetManifest = serde_json::from_slice(&manifest_json)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.records.len() != manifest.sample_count as usize {
            return Err(Error::Format(format!(
                "manifest lists {} records but declares {} samples",
                manifest.records.len(),
                manifest.sample_count
            )));
        }
        manifest.mode()?;
        Ok(Dataset {
            manifest,
            path: path.to_path_buf(),
            base: (4 + 4 + 4 + manifest_len) as u64,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        self.manifest.mode().expect("mode validated at open")
    }

    pub fn get(&self, index: usize) -> Result<VideoSample> {
        let record = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::Config(format!("sample index {index} out of {}", self.len())))?;
        let mut file = File::open(&self.path)?;
        file.seek(SeekFrom::Start(self.base + record.offset))?;
        let mut file = BufReader::new(file);
        self.parse_block(&mut file, record)
    }

    /// Read every sample sequentially with one handle.
    pub fn load_all(&self) -> Result<Vec<VideoSample>> {
        let mut file = BufReader::new(File::open(&self.path)?);
        file.seek(SeekFrom::Start(self.base))?;
        self.manifest
            .records
            .iter()
            .map(|record| {
                file.seek(SeekFrom::Start(self.base + record.offset))?;
                self.parse_block(&mut file, record)
            })
            .collect()
    }

    fn parse_block(&self, file: &mut impl Read, record: &SampleRecord) -> Result<VideoSample> {
        let frames = self.manifest.frames as usize;
        let side = self.manifest.side as usize;
        let payload_len = read_u32(file)? as usize;
        let mut payload = vec![0u8; payload_len];
        read_exact(file, &mut payload)?;
        let stored_crc = read_u32(file)?;
        let crc = crc32fast::hash(&payload);
        if crc != stored_crc {
            return Err(Error::Format(format!(
                "checksum mismatch: block says {stored_crc:#010x}, payload hashes to {crc:#010x}"
            )));
        }

        let mut cur = Cursor { buf: &payload, pos: 0 };
        let pixel_count = frames * 3 * side * side;
        let mut pixels = Vec::with_capacity(pixel_count);
        for _ in 0..pixel_count {
            pixels.push(cur.f64()?);
        }
        let token_count = cur.u32()? as usize;
        if token_count == 0 || token_count > 64 {
            return Err(Error::Format(format!("implausible token count {token_count}")));
        }
        let mut tokens = Vec::with_capacity(token_count);
        for _ in 0..token_count {
            let id = cur.u32()?;
            if id as usize >= self.manifest.vocab.len() {
                return Err(Error::Format(format!("token id {id} outside manifest vocabulary")));
            }
            tokens.push(id);
        }
        let span = (cur.u32()? as usize, cur.u32()? as usize);
        let entity = (cur.u32()? as usize, cur.u32()? as usize);
        let mut gt_boxes = Vec::with_capacity(frames);
        for _ in 0..frames {
            match cur.u8()? {
                0 => gt_boxes.push(None),
                1 => {
                    let (cx, cy, w, h) = (cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?);
                    let b = BoundingBox::new(cx, cy, w, h)
                        .map_err(|e| Error::Format(format!("stored box invalid: {e}")))?;
                    gt_boxes.push(Some(b));
                }
                other => return Err(Error::Format(format!("bad box presence flag {other}"))),
            }
        }
        if span.1 >= frames || span.0 > span.1 {
            return Err(Error::Format(format!("temporal span {span:?} out of range")));
        }
        if entity.0 > entity.1 || entity.1 >= tokens.len() {
            return Err(Error::Format(format!("entity span {entity:?} outside sentence")));
        }
        Ok(VideoSample {
            frames,
            side,
            pixels: Arc::new(pixels),
            tokens,
            sentence: record.sentence.clone(),
            gt_boxes,
            temporal_span: span,
            entity_span: entity,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("sample block truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("dataset file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
