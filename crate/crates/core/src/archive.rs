//! Single-file, append-only archive of per-timestep fields with random access by time.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   0  magic "CHRONOF1"
//!          8  version u32
//!         12  timestep count u32      } rewritten together on every append;
//!         16  index offset u64        } this 12-byte write is the commit point
//!         24  half extent f64
//!         32  scene scale f64
//!         40  SHA-256 of the field configuration JSON [32]
//!         72  metadata length u32
//!         76  reserved u32
//!         80  metadata JSON
//! record   0  time index u32
//!          4  payload bytes u64
//!         12  CRC-32 of the payload u32
//!         16  parameters as f32, in layout order
//! index       (time index u32, record offset u64) per time step, sorted by time
//! ```
//!
//! An append writes the record and a fresh index at the end of the file, syncs, then
//! updates the header. Readers that opened before the header update keep seeing the
//! previous index, which remains valid.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, TimestepField};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 8] = *b"CHRONOF1";
pub const VERSION: u32 = 1;
pub const FIXED_HEADER_BYTES: u64 = 80;
pub const RECORD_HEADER_BYTES: u64 = 16;
pub const INDEX_ENTRY_BYTES: u64 = 12;

/// Global settings stored in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetadata {
    pub field_config: FieldConfig,
    /// Background the fields were trained against.
    pub background: [f64; 3],
    /// Samples per ray suggested for rendering.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveHeader {
    pub version: u32,
    pub timestep_count: u32,
    pub index_offset: u64,
    pub half_extent: f64,
    pub scene_scale: f64,
    pub config_digest: [u8; 32],
    pub metadata: ArchiveMetadata,
    /// Fixed header plus metadata.
    pub header_bytes: u64,
}

fn encode_header(h: &ArchiveHeader) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&h.metadata)?;
    let mut out = Vec::with_capacity(FIXED_HEADER_BYTES as usize + meta.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.timestep_count.to_le_bytes());
    out.extend_from_slice(&h.index_offset.to_le_bytes());
    out.extend_from_slice(&h.half_extent.to_le_bytes());
    out.extend_from_slice(&h.scene_scale.to_le_bytes());
    out.extend_from_slice(&h.config_digest);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Counts bytes pulled from the underlying file.
struct CountingFile {
    file: Mutex<File>,
    bytes_read: AtomicU64,
}

impl CountingFile {
    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let mut f = self.file.lock().expect("archive file lock");
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Archive(format!("truncated archive reading {} bytes at {offset}", buf.len()))
            }
            _ => Error::Io(e),
        })?;
        self.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(())
    }
}

fn read_header(file: &CountingFile) -> Result<ArchiveHeader> {
    let mut fixed = [0u8; FIXED_HEADER_BYTES as usize];
    file.read_exact_at(0, &mut fixed)?;
    if fixed[..8] != MAGIC {
        return Err(Error::Archive("not an archive (bad magic)".into()));
    }
    let version = u32_at(&fixed, 8);
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported archive version {version}")));
    }
    let meta_len = u32_at(&fixed, 72) as usize;
    let mut meta = vec![0u8; meta_len];
    file.read_exact_at(FIXED_HEADER_BYTES, &mut meta)?;
    let metadata: ArchiveMetadata =
        serde_json::from_slice(&meta).map_err(|e| Error::Archive(format!("bad metadata: {e}")))?;
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(&fixed[40..72]);
    if metadata.field_config.digest() != config_digest {
        return Err(Error::Archive("field configuration does not match its digest".into()));
    }
    Ok(ArchiveHeader {
        version,
        timestep_count: u32_at(&fixed, 12),
        index_offset: u64_at(&fixed, 16),
        half_extent: f64_at(&fixed, 24),
        scene_scale: f64_at(&fixed, 32),
        config_digest,
        metadata,
        header_bytes: FIXED_HEADER_BYTES + meta_len as u64,
    })
}

fn read_index(file: &CountingFile, header: &ArchiveHeader) -> Result<BTreeMap<u32, u64>> {
    let n = header.timestep_count as usize;
    let mut index = BTreeMap::new();
    if n == 0 {
        return Ok(index);
    }
    let mut buf = vec![0u8; n * INDEX_ENTRY_BYTES as usize];
    file.read_exact_at(header.index_offset, &mut buf)?;
    for e in buf.chunks_exact(INDEX_ENTRY_BYTES as usize) {
        let (t, offset) = (u32_at(e, 0), u64_at(e, 4));
        if index.insert(t, offset).is_some() {
            return Err(Error::Archive(format!("index lists time {t} twice")));
        }
    }
    Ok(index)
}

fn encode_index(index: &BTreeMap<u32, u64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(index.len() * INDEX_ENTRY_BYTES as usize);
    for (&t, &off) in index {
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&off.to_le_bytes());
    }
    out
}

/// Serialized record for `params`: record header followed by the f32 payload.
pub fn encode_record<S: Scalar>(time_index: u32, params: &[S]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.len() * 4);
    for p in params {
        payload.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(RECORD_HEADER_BYTES as usize + payload.len());
    out.extend_from_slice(&time_index.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Appends time steps to an archive file.
pub struct ArchiveWriter {
    path: PathBuf,
    file: File,
    header: ArchiveHeader,
    index: BTreeMap<u32, u64>,
}

impl ArchiveWriter {
    /// Creates (or truncates) an empty archive.
    pub fn create(path: &Path, metadata: ArchiveMetadata, scene_scale: f64) -> Result<Self> {
        metadata.field_config.validate()?;
        let header = ArchiveHeader {
            version: VERSION,
            timestep_count: 0,
            index_offset: 0,
            half_extent: metadata.field_config.half_extent(),
            scene_scale,
            config_digest: metadata.field_config.digest(),
            header_bytes: 0,
            metadata,
        };
        let bytes = encode_header(&header)?;
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header: ArchiveHeader {
                header_bytes: bytes.len() as u64,
                ..header
            },
            index: BTreeMap::new(),
        })
    }

    /// Opens an existing archive for appending.
    pub fn open(path: &Path) -> Result<Self> {
        let reader = ArchiveReader::open(path)?;
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header: reader.header.clone(),
            index: reader.index.clone(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    pub fn time_indices(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn append<S: Scalar>(&mut self, field: &TimestepField<S>) -> Result<()> {
        let t = field.time_index;
        if field.config().digest() != self.header.config_digest {
            return Err(Error::Archive(format!(
                "field for time {t} has a different configuration than the archive"
            )));
        }
        if self.index.contains_key(&t) {
            return Err(Error::DuplicateTimestep(t));
        }
        let record = encode_record(t, field.params());
        let offset = self.file.seek(SeekFrom::End(0))?;
        let mut index = self.index.clone();
        index.insert(t, offset);
        let index_offset = offset + record.len() as u64;
        let mut tail = record;
        tail.extend_from_slice(&encode_index(&index));
        self.file.write_all(&tail)?;
        self.file.sync_data()?;

        let mut commit = Vec::with_capacity(12);
        commit.extend_from_slice(&(index.len() as u32).to_le_bytes());
        commit.extend_from_slice(&index_offset.to_le_bytes());
        self.file.seek(SeekFrom::Start(12))?;
        self.file.write_all(&commit)?;
        self.file.sync_data()?;

        self.index = index;
        self.header.timestep_count = self.index.len() as u32;
        self.header.index_offset = index_offset;
        Ok(())
    }
}

/// Random-access reader; safe to share between threads.
pub struct ArchiveReader {
    path: PathBuf,
    file: CountingFile,
    header: ArchiveHeader,
    index: BTreeMap<u32, u64>,
    file_bytes: u64,
}

impl ArchiveReader {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Archive(format!("cannot open {}: {e}", path.display())))?;
        let file_bytes = f.metadata()?.len();
        let file = CountingFile {
            file: Mutex::new(f),
            bytes_read: AtomicU64::new(0),
        };
        let header = read_header(&file)?;
        let index = read_index(&file, &header)?;
        for (&t, &off) in &index {
            if off + RECORD_HEADER_BYTES > file_bytes {
                return Err(Error::Archive(format!(
                    "record for time {t} lies past the end of the file"
                )));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header,
            index,
            file_bytes,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    pub fn metadata(&self) -> &ArchiveMetadata {
        &self.header.metadata
    }

    pub fn field_config(&self) -> &FieldConfig {
        &self.header.metadata.field_config
    }

    pub fn time_indices(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn contains(&self, t: u32) -> bool {
        self.index.contains_key(&t)
    }

    /// Total bytes read from the file since it was opened.
    pub fn bytes_read(&self) -> u64 {
        self.file.bytes_read.load(Ordering::Relaxed)
    }

    pub fn record_bytes(&self) -> u64 {
        RECORD_HEADER_BYTES + 4 * self.field_config().layout().total as u64
    }

    /// Reads and checksums the raw f32 parameters of time `t`.
    pub fn read_params(&self, t: u32) -> Result<Vec<f32>> {
        let &offset = self.index.get(&t).ok_or(Error::MissingTimestep(t))?;
        let mut head = [0u8; RECORD_HEADER_BYTES as usize];
        self.file.read_exact_at(offset, &mut head)?;
        let stored_t = u32_at(&head, 0);
        let payload_bytes = u64_at(&head, 4);
        let stored_crc = u32_at(&head, 12);
        if stored_t != t {
            return Err(Error::Archive(format!(
                "index points time {t} at a record for time {stored_t}"
            )));
        }
        let expected = 4 * self.field_config().layout().total as u64;
        if payload_bytes != expected {
            return Err(Error::Archive(format!(
                "record for time {t} holds {payload_bytes} bytes, expected {expected}"
            )));
        }
        let mut payload = vec![0u8; payload_bytes as usize];
        self.file.read_exact_at(offset + RECORD_HEADER_BYTES, &mut payload)?;
        let computed = crc32fast::hash(&payload);
        if computed != stored_crc {
            return Err(Error::Checksum {
                time: t,
                stored: stored_crc,
                computed,
            });
        }
        Ok(payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn read_timestep<S: Scalar>(&self, t: u32) -> Result<TimestepField<S>> {
        let params = self.read_params(t)?;
        TimestepField::from_params(
            self.field_config().clone(),
            t,
            self.header.scene_scale,
            params.into_iter().map(|v| S::lit(v as f64)).collect(),
        )
    }

    pub fn info(&self) -> ArchiveInfo {
        let config = self.field_config().clone();
        let parameter_count = config.layout().total;
        ArchiveInfo {
            path: self.path.display().to_string(),
            version: self.header.version,
            timestep_count: self.header.timestep_count,
            timesteps: self.time_indices(),
            parameter_count,
            payload_bytes_per_record: 4 * parameter_count as u64,
            record_bytes: self.record_bytes(),
            header_bytes: self.header.header_bytes,
            index_bytes: INDEX_ENTRY_BYTES * self.header.timestep_count as u64,
            file_bytes: self.file_bytes,
            half_extent: self.header.half_extent,
            scene_scale: self.header.scene_scale,
            config_digest: self.header.config_digest.iter().map(|b| format!("{b:02x}")).collect(),
            field_config: config,
            background: self.header.metadata.background,
            samples: self.header.metadata.samples,
        }
    }
}

/// Summary of an archive file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveInfo {
    pub path: String,
    pub version: u32,
    pub timestep_count: u32,
    pub timesteps: Vec<u32>,
    pub parameter_count: usize,
    pub payload_bytes_per_record: u64,
    /// Payload plus the 16-byte record header.
    pub record_bytes: u64,
    pub header_bytes: u64,
    /// Size of the live index.
    pub index_bytes: u64,
    pub file_bytes: u64,
    pub half_extent: f64,
    pub scene_scale: f64,
    pub config_digest: String,
    pub field_config: FieldConfig,
    pub background: [f64; 3],
    pub samples: usize,
}

impl ArchiveInfo {
    pub fn to_text(&self) -> String {
        let mb = |b: u64| b as f64 / 1e6;
        let times = match self.timesteps.as_slice() {
            [] => "none".to_string(),
            [one] => one.to_string(),
            [first, .., last] => format!("{first}..={last}"),
        };
        format!(
            "archive        {}\n\
             version        {}\n\
             time steps     {} ({})\n\
             parameters     {} per time step\n\
             record size    {} bytes ({:.2} MB)\n\
             header         {} bytes\n\
             file size      {} bytes ({:.2} MB)\n\
             box half size  {}\n\
             scene scale    {}\n\
             config digest  {}\n",
            self.path,
            self.version,
            self.timestep_count,
            times,
            self.parameter_count,
            self.record_bytes,
            mb(self.record_bytes),
            self.header_bytes,
            self.file_bytes,
            mb(self.file_bytes),
            self.half_extent,
            self.scene_scale,
            self.config_digest,
        )
    }
}

pub fn archive_info(path: &Path) -> Result<ArchiveInfo> {
    Ok(ArchiveReader::open(path)?.info())
}
