//! The `.skuldmp` activation dump format.
//!
//! A dump is one header block followed by length-prefixed records, all
//! little-endian. The byte layout is documented in `docs/skuldmp-format.md`:
//!
//! ```text
//! header:
//!   [0..8)   magic            b"SKULDMP1"
//!   [8..12)  format_version   u32 (= 1)
//!            model_id         u32 byte length, then UTF-8 bytes
//!            num_layers       u32 (L >= 1)
//!            neurons_per_layer L x u32 (each >= 1)
//!            capture_kind     u8  (0 = PreActivationAllTokens, 1 = KeyVectorLastToken)
//!            dataset_label    u32 byte length, then UTF-8 bytes
//!            element_type     u8  (0 = float32)
//!            endianness       u8  (0 = little-endian)
//! record (repeated until EOF):
//!            payload_len      u32 (= 16 + 4 * K_layer)
//!            sample_id        u64
//!            token_index      u32
//!            layer            u32
//!            values           K_layer x f32
//! ```
//!
//! Reading is streaming: [`DumpReader`] holds at most one record in memory.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"SKULDMP1";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "skuldmp";

const RECORD_FIXED_BYTES: usize = 16;
const MAX_HEADER_STRING: u32 = 1 << 20;
const MAX_LAYERS: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic: expected SKULDMP1, found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {version} (this build reads version {FORMAT_VERSION})")]
    VersionUnsupported { version: u32 },
    #[error("header truncated at byte offset {offset}")]
    TruncatedHeader { offset: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("record {record_index} truncated (record starts at byte offset {offset})")]
    TruncatedRecord { offset: u64, record_index: u64 },
    #[error("record {record_index} at byte offset {offset} is corrupt: {reason}")]
    CorruptRecord {
        offset: u64,
        record_index: u64,
        reason: String,
    },
    #[error("record {index} is inconsistent with the header: {reason}")]
    InconsistentRecord { index: u64, reason: String },
    #[error("failed writing to sink: {0}")]
    SinkFailure(#[source] io::Error),
    #[error("failed reading from source: {0}")]
    SourceFailure(#[source] io::Error),
}

/// What each record of a dump holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureKind {
    /// FFL pre-activations (`W_up z` or `W_gate z`) at every token position.
    PreActivationAllTokens,
    /// Key vectors (input of the down-projection) at the last token of each
    /// query; `token_index` is always 0.
    KeyVectorLastToken,
}

impl CaptureKind {
    fn to_byte(self) -> u8 {
        match self {
            CaptureKind::PreActivationAllTokens => 0,
            CaptureKind::KeyVectorLastToken => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CaptureKind::PreActivationAllTokens),
            1 => Some(CaptureKind::KeyVectorLastToken),
            _ => None,
        }
    }

    /// Short name used in file names and CLI flags.
    pub fn short_name(self) -> &'static str {
        match self {
            CaptureKind::PreActivationAllTokens => "preact",
            CaptureKind::KeyVectorLastToken => "keyvec",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u32,
    pub model_id: String,
    pub neurons_per_layer: Vec<u32>,
    pub capture_kind: CaptureKind,
    pub dataset_label: String,
}

impl DumpHeader {
    pub fn new(
        model_id: impl Into<String>,
        neurons_per_layer: Vec<u32>,
        capture_kind: CaptureKind,
        dataset_label: impl Into<String>,
    ) -> Result<Self, DumpError> {
        let header = Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            neurons_per_layer,
            capture_kind,
            dataset_label: dataset_label.into(),
        };
        header.check()?;
        Ok(header)
    }

    pub fn num_layers(&self) -> usize {
        self.neurons_per_layer.len()
    }

    pub fn width(&self, layer: usize) -> Option<usize> {
        self.neurons_per_layer.get(layer).map(|&k| k as usize)
    }

    fn check(&self) -> Result<(), DumpError> {
        if self.neurons_per_layer.is_empty() {
            return Err(DumpError::InvalidHeader("num_layers must be >= 1".into()));
        }
        if self.neurons_per_layer.len() as u64 > MAX_LAYERS as u64 {
            return Err(DumpError::InvalidHeader(format!(
                "num_layers {} exceeds {MAX_LAYERS}",
                self.neurons_per_layer.len()
            )));
        }
        if let Some(l) = self.neurons_per_layer.iter().position(|&k| k == 0) {
            return Err(DumpError::InvalidHeader(format!(
                "layer {l} has zero neurons"
            )));
        }
        for s in [&self.model_id, &self.dataset_label] {
            if s.len() as u64 > MAX_HEADER_STRING as u64 {
                return Err(DumpError::InvalidHeader("header string too long".into()));
            }
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.neurons_per_layer.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        put_str(&mut out, &self.model_id);
        out.extend_from_slice(&(self.neurons_per_layer.len() as u32).to_le_bytes());
        for k in &self.neurons_per_layer {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out.push(self.capture_kind.to_byte());
        put_str(&mut out, &self.dataset_label);
        out.push(0); // element_type: float32
        out.push(0); // endianness: little
        out
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub sample_id: u64,
    pub token_index: u32,
    pub layer: u32,
    pub values: Vec<f32>,
}

impl ActivationRecord {
    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.sample_id == other.sample_id
            && self.token_index == other.token_index
            && self.layer == other.layer
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Streaming dump writer. Owns its sink exclusively.
pub struct DumpWriter<W: Write> {
    sink: W,
    header: DumpHeader,
    records: u64,
    bytes: u64,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut sink: W, header: DumpHeader) -> Result<Self, DumpError> {
        header.check()?;
        let bytes = header.encode();
        sink.write_all(&bytes).map_err(DumpError::SinkFailure)?;
        Ok(Self {
            sink,
            header,
            records: 0,
            bytes: bytes.len() as u64,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn write_record(&mut self, record: &ActivationRecord) -> Result<(), DumpError> {
        let index = self.records;
        let width = self.header.width(record.layer as usize).ok_or_else(|| {
            DumpError::InconsistentRecord {
                index,
                reason: format!(
                    "layer {} out of range (num_layers = {})",
                    record.layer,
                    self.header.num_layers()
                ),
            }
        })?;
        if record.values.len() != width {
            return Err(DumpError::InconsistentRecord {
                index,
                reason: format!(
                    "layer {} expects {} values, record has {}",
                    record.layer,
                    width,
                    record.values.len()
                ),
            });
        }
        if self.header.capture_kind == CaptureKind::KeyVectorLastToken && record.token_index != 0 {
            return Err(DumpError::InconsistentRecord {
                index,
                reason: "key-vector dumps require token_index 0".into(),
            });
        }
        let payload = RECORD_FIXED_BYTES + 4 * width;
        let mut buf = Vec::with_capacity(4 + payload);
        buf.extend_from_slice(&(payload as u32).to_le_bytes());
        buf.extend_from_slice(&record.sample_id.to_le_bytes());
        buf.extend_from_slice(&record.token_index.to_le_bytes());
        buf.extend_from_slice(&record.layer.to_le_bytes());
        for v in &record.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.sink.write_all(&buf).map_err(DumpError::SinkFailure)?;
        self.records += 1;
        self.bytes += buf.len() as u64;
        Ok(())
    }

    /// Flushes the sink and returns `(sink, total bytes written)`.
    pub fn finish(mut self) -> Result<(W, u64), DumpError> {
        self.sink.flush().map_err(DumpError::SinkFailure)?;
        Ok((self.sink, self.bytes))
    }
}

/// Writes a complete dump and returns the number of bytes written.
pub fn write_dump<'a, W, I>(header: &DumpHeader, records: I, sink: W) -> Result<u64, DumpError>
where
    W: Write,
    I: IntoIterator<Item = &'a ActivationRecord>,
{
    let mut writer = DumpWriter::new(sink, header.clone())?;
    for r in records {
        writer.write_record(r)?;
    }
    Ok(writer.finish()?.1)
}

/// Streaming dump reader; iterate it to obtain records in stored order.
pub struct DumpReader<R: Read> {
    source: R,
    header: DumpHeader,
    offset: u64,
    next_index: u64,
    failed: bool,
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut source: R) -> Result<Self, DumpError> {
        let mut offset = 0u64;
        let mut magic = [0u8; 8];
        read_header_bytes(&mut source, &mut magic, &mut offset)?;
        if magic != MAGIC {
            return Err(DumpError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let format_version = read_header_u32(&mut source, &mut offset)?;
        if format_version != FORMAT_VERSION {
            return Err(DumpError::VersionUnsupported {
                version: format_version,
            });
        }
        let model_id = read_header_str(&mut source, &mut offset)?;
        let num_layers = read_header_u32(&mut source, &mut offset)?;
        if num_layers == 0 || num_layers > MAX_LAYERS {
            return Err(DumpError::InvalidHeader(format!(
                "num_layers {num_layers} out of range"
            )));
        }
        let mut neurons_per_layer = Vec::with_capacity(num_layers as usize);
        for _ in 0..num_layers {
            neurons_per_layer.push(read_header_u32(&mut source, &mut offset)?);
        }
        let kind_byte = read_header_u8(&mut source, &mut offset)?;
        let capture_kind = CaptureKind::from_byte(kind_byte)
            .ok_or_else(|| DumpError::InvalidHeader(format!("unknown capture_kind {kind_byte}")))?;
        let dataset_label = read_header_str(&mut source, &mut offset)?;
        let element_type = read_header_u8(&mut source, &mut offset)?;
        if element_type != 0 {
            return Err(DumpError::InvalidHeader(format!(
                "unsupported element_type {element_type}"
            )));
        }
        let endianness = read_header_u8(&mut source, &mut offset)?;
        if endianness != 0 {
            return Err(DumpError::InvalidHeader(format!(
                "unsupported endianness tag {endianness}"
            )));
        }
        let header = DumpHeader {
            format_version,
            model_id,
            neurons_per_layer,
            capture_kind,
            dataset_label,
        };
        header.check()?;
        Ok(Self {
            source,
            header,
            offset,
            next_index: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_record(&mut self) -> Result<Option<ActivationRecord>, DumpError> {
        let start = self.offset;
        let index = self.next_index;
        let truncated = || DumpError::TruncatedRecord {
            offset: start,
            record_index: index,
        };
        let mut len_buf = [0u8; 4];
        match fill(&mut self.source, &mut len_buf).map_err(DumpError::SourceFailure)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(truncated()),
        }
        let payload = u32::from_le_bytes(len_buf) as usize;
        let mut fixed = [0u8; RECORD_FIXED_BYTES];
        if fill(&mut self.source, &mut fixed).map_err(DumpError::SourceFailure)? != fixed.len() {
            return Err(truncated());
        }
        let sample_id = u64::from_le_bytes(fixed[0..8].try_into().unwrap());
        let token_index = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        let layer = u32::from_le_bytes(fixed[12..16].try_into().unwrap());
        let corrupt = |reason: String| DumpError::CorruptRecord {
            offset: start,
            record_index: index,
            reason,
        };
        let width = self.header.width(layer as usize).ok_or_else(|| {
            corrupt(format!(
                "layer {layer} out of range (num_layers = {})",
                self.header.num_layers()
            ))
        })?;
        if payload != RECORD_FIXED_BYTES + 4 * width {
            return Err(corrupt(format!(
                "payload length {payload} does not match layer {layer} width {width}"
            )));
        }
        let mut raw = vec![0u8; 4 * width];
        if fill(&mut self.source, &mut raw).map_err(DumpError::SourceFailure)? != raw.len() {
            return Err(truncated());
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.offset += 4 + payload as u64;
        self.next_index += 1;
        Ok(Some(ActivationRecord {
            sample_id,
            token_index,
            layer,
            values,
        }))
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<ActivationRecord, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Opens a dump for streaming reads.
pub fn read_dump<R: Read>(source: R) -> Result<DumpReader<R>, DumpError> {
    DumpReader::new(source)
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn fill<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match source.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

fn read_header_bytes<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    offset: &mut u64,
) -> Result<(), DumpError> {
    let n = fill(source, buf).map_err(DumpError::SourceFailure)?;
    if n != buf.len() {
        // A short read of the magic itself is reported as bad magic.
        if *offset == 0 {
            return Err(DumpError::BadMagic {
                found: buf[..n].to_vec(),
            });
        }
        return Err(DumpError::TruncatedHeader {
            offset: *offset + n as u64,
        });
    }
    *offset += n as u64;
    Ok(())
}

fn read_header_u8<R: Read>(source: &mut R, offset: &mut u64) -> Result<u8, DumpError> {
    let mut b = [0u8; 1];
    read_header_bytes(source, &mut b, offset)?;
    Ok(b[0])
}

fn read_header_u32<R: Read>(source: &mut R, offset: &mut u64) -> Result<u32, DumpError> {
    let mut b = [0u8; 4];
    read_header_bytes(source, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header_str<R: Read>(source: &mut R, offset: &mut u64) -> Result<String, DumpError> {
    let len = read_header_u32(source, offset)?;
    if len > MAX_HEADER_STRING {
        return Err(DumpError::InvalidHeader(format!(
            "header string length {len} exceeds {MAX_HEADER_STRING}"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    read_header_bytes(source, &mut buf, offset)?;
    String::from_utf8(buf).map_err(|e| DumpError::InvalidHeader(format!("non-UTF-8 string: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyKind {
    NonFinite {
        layer: u32,
        nan: u32,
        inf: u32,
    },
    DuplicateSampleLayer {
        sample_id: u64,
        layer: u32,
        first_record: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub record_index: u64,
    #[serde(flatten)]
    pub kind: AnomalyKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub header: DumpHeader,
    pub total_records: u64,
    pub records_per_layer: Vec<u64>,
    pub records_per_sample: BTreeMap<u64, u64>,
    pub anomalies: Vec<Anomaly>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.anomalies.is_empty()
    }
}

/// Reads a whole dump, counting records and collecting anomalies.
///
/// Structural errors (bad magic, truncation) abort with the same errors as
/// [`read_dump`]; value-level problems are reported as anomalies.
pub fn validate_dump<R: Read>(source: R) -> Result<ValidationReport, DumpError> {
    let reader = read_dump(source)?;
    let header = reader.header().clone();
    let check_duplicates = header.capture_kind == CaptureKind::KeyVectorLastToken;
    let mut records_per_layer = vec![0u64; header.num_layers()];
    let mut records_per_sample = BTreeMap::new();
    let mut seen: BTreeMap<(u64, u32), u64> = BTreeMap::new();
    let mut anomalies = Vec::new();
    let mut total = 0u64;
    for (index, rec) in reader.enumerate() {
        let rec = rec?;
        let index = index as u64;
        total += 1;
        records_per_layer[rec.layer as usize] += 1;
        *records_per_sample.entry(rec.sample_id).or_insert(0) += 1;
        let nan = rec.values.iter().filter(|v| v.is_nan()).count() as u32;
        let inf = rec.values.iter().filter(|v| v.is_infinite()).count() as u32;
        if nan + inf > 0 {
            anomalies.push(Anomaly {
                record_index: index,
                kind: AnomalyKind::NonFinite {
                    layer: rec.layer,
                    nan,
                    inf,
                },
            });
        }
        if check_duplicates {
            if let Some(&first) = seen.get(&(rec.sample_id, rec.layer)) {
                anomalies.push(Anomaly {
                    record_index: index,
                    kind: AnomalyKind::DuplicateSampleLayer {
                        sample_id: rec.sample_id,
                        layer: rec.layer,
                        first_record: first,
                    },
                });
            } else {
                seen.insert((rec.sample_id, rec.layer), index);
            }
        }
    }
    Ok(ValidationReport {
        header,
        total_records: total,
        records_per_layer,
        records_per_sample,
        anomalies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(kind: CaptureKind) -> DumpHeader {
        DumpHeader::new("toy", vec![4, 2], kind, "forget").unwrap()
    }

    fn rec(sample: u64, layer: u32, values: Vec<f32>) -> ActivationRecord {
        ActivationRecord {
            sample_id: sample,
            token_index: 0,
            layer,
            values,
        }
    }

    fn to_bytes(h: &DumpHeader, recs: &[ActivationRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        let n = write_dump(h, recs, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        buf
    }

    #[test]
    fn empty_stream_round_trips() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let bytes = to_bytes(&h, &[]);
        let reader = read_dump(bytes.as_slice()).unwrap();
        assert_eq!(reader.header(), &h);
        assert_eq!(reader.count(), 0);
    }

    #[test]
    fn single_record_round_trips_bitwise() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let r = rec(3, 0, vec![1.5, -0.0, f32::MIN_POSITIVE, 1e30]);
        let bytes = to_bytes(&h, std::slice::from_ref(&r));
        let got: Vec<_> = read_dump(bytes.as_slice())
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(got.len(), 1);
        assert!(got[0].bit_eq(&r));
    }

    #[test]
    fn writer_rejects_inconsistent_records() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let recs = vec![rec(0, 0, vec![0.0; 4]), rec(1, 1, vec![0.0; 3])];
        match write_dump(&h, &recs, Vec::new()) {
            Err(DumpError::InconsistentRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let recs = vec![rec(0, 2, vec![0.0; 4])];
        assert!(matches!(
            write_dump(&h, &recs, Vec::new()),
            Err(DumpError::InconsistentRecord { index: 0, .. })
        ));
    }

    #[test]
    fn header_invariants_enforced() {
        assert!(DumpHeader::new("m", vec![], CaptureKind::KeyVectorLastToken, "d").is_err());
        assert!(DumpHeader::new("m", vec![3, 0], CaptureKind::KeyVectorLastToken, "d").is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let mut bytes = to_bytes(&h, &[]);
        bytes[0] = b'X';
        assert!(matches!(
            read_dump(bytes.as_slice()),
            Err(DumpError::BadMagic { .. })
        ));
        assert!(matches!(
            read_dump(&b"SKUL"[..]),
            Err(DumpError::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let mut bytes = to_bytes(&h, &[]);
        bytes[8] = 9;
        assert!(matches!(
            read_dump(bytes.as_slice()),
            Err(DumpError::VersionUnsupported { version: 9 })
        ));
    }

    #[test]
    fn truncated_record_reports_offset() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let recs = vec![rec(0, 0, vec![1.0; 4]), rec(1, 0, vec![2.0; 4])];
        let bytes = to_bytes(&h, &recs);
        let header_len = to_bytes(&h, &[]).len() as u64;
        let record_len = 4 + 16 + 16;
        // Cut in the middle of the second record's values.
        let cut = &bytes[..bytes.len() - 5];
        let mut reader = read_dump(cut).unwrap();
        assert!(reader.next().unwrap().is_ok());
        match reader.next().unwrap() {
            Err(DumpError::TruncatedRecord {
                offset,
                record_index,
            }) => {
                assert_eq!(offset, header_len + record_len);
                assert_eq!(record_index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(reader.next().is_none());
    }

    #[test]
    fn truncated_header_is_reported() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let bytes = to_bytes(&h, &[]);
        assert!(matches!(
            read_dump(&bytes[..bytes.len() - 1]),
            Err(DumpError::TruncatedHeader { .. })
        ));
    }

    #[test]
    fn validate_counts_clean_dump() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let mut recs = Vec::new();
        for s in 0..3 {
            recs.push(rec(s, 0, vec![0.5; 4]));
            recs.push(rec(s, 1, vec![0.5; 2]));
        }
        let report = validate_dump(to_bytes(&h, &recs).as_slice()).unwrap();
        assert_eq!(report.records_per_layer, vec![3, 3]);
        assert_eq!(
            report
                .records_per_sample
                .values()
                .copied()
                .collect::<Vec<_>>(),
            vec![2, 2, 2]
        );
        assert!(report.is_clean());
    }

    #[test]
    fn validate_flags_nan_and_duplicates() {
        let h = header(CaptureKind::KeyVectorLastToken);
        let recs = vec![
            rec(5, 1, vec![0.0, 0.0]),
            rec(6, 0, vec![0.0, f32::NAN, f32::INFINITY, 0.0]),
            rec(5, 1, vec![1.0, 1.0]),
        ];
        let report = validate_dump(to_bytes(&h, &recs).as_slice()).unwrap();
        assert_eq!(
            report.anomalies,
            vec![
                Anomaly {
                    record_index: 1,
                    kind: AnomalyKind::NonFinite {
                        layer: 0,
                        nan: 1,
                        inf: 1
                    }
                },
                Anomaly {
                    record_index: 2,
                    kind: AnomalyKind::DuplicateSampleLayer {
                        sample_id: 5,
                        layer: 1,
                        first_record: 0
                    }
                },
            ]
        );
    }

    #[test]
    fn duplicates_allowed_for_all_token_dumps() {
        let h = header(CaptureKind::PreActivationAllTokens);
        let mut a = rec(5, 1, vec![0.0, 0.0]);
        let mut b = a.clone();
        a.token_index = 0;
        b.token_index = 1;
        let report = validate_dump(to_bytes(&h, &[a, b]).as_slice()).unwrap();
        assert!(report.is_clean());
    }
}
