//! Little-endian binary formats, JSON Lines manifests and report writers.
//!
//! | file | layout |
//! |------|--------|
//! | samples | `SEGU`, version u16 = 1, Q u32, P u32, c u16, c_total u16, h u32, w u32; per sample: kind u8, factor f32, k u8, class logits then mask logits as f32 |
//! | semantic labels | `SEGL`, h u32, w u32, ids u16 |
//! | panoptic labels | `SEGP`, h u32, w u32, ids u32 |
//! | flow | `SEGF`, h u32, w u32, (dx, dy) f32 pairs, validity u8 plane |
//!
//! All arrays are row-major. `h` and `w` of a sample container are the frame
//! size; a rescaled member stores its own rescaled mask planes.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowField, PanopticLabelMap, SampleTensor, SemanticLabelMap, TransformDescriptor};

pub const SAMPLE_MAGIC: [u8; 4] = *b"SEGU";
pub const SEMANTIC_MAGIC: [u8; 4] = *b"SEGL";
pub const PANOPTIC_MAGIC: [u8; 4] = *b"SEGP";
pub const FLOW_MAGIC: [u8; 4] = *b"SEGF";
pub const SAMPLE_VERSION: u16 = 1;

const HEADER_LEN: u64 = 26;
const DESCRIPTOR_LEN: u64 = 6;

/// Reads little-endian values and reports the offset where input ran out.
struct LeReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> LeReader<R> {
    fn new(inner: R, pos: u64) -> Self {
        Self { inner, pos }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        offset: self.pos + done as u64,
                    })
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        Ok((h, w))
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

/// Shape shared by every sample in one container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContainerHeader {
    /// Number of samples Q.
    pub samples: usize,
    /// Query slots P.
    pub queries: usize,
    pub classes: usize,
    pub c_total: usize,
    pub height: usize,
    pub width: usize,
}

impl ContainerHeader {
    pub fn frame(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn payload_len(&self, d: &TransformDescriptor) -> u64 {
        let (h, w) = d.sample_dims(self.frame());
        4 * (self.queries * self.c_total + self.queries * h * w) as u64
    }
}

/// Streams samples into a container; the sample count is patched on `finish`.
pub struct SampleWriter {
    out: BufWriter<File>,
    header: ContainerHeader,
    written: usize,
}

impl SampleWriter {
    pub fn create(path: &Path, queries: usize, c_total: usize, frame: (usize, usize)) -> Result<Self> {
        if queries == 0 || c_total < 2 || frame.0 == 0 || frame.1 == 0 {
            return Err(Error::EmptyTensor);
        }
        let header = ContainerHeader {
            samples: 0,
            queries,
            classes: c_total - 1,
            c_total,
            height: frame.0,
            width: frame.1,
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&SAMPLE_MAGIC)?;
        out.write_all(&SAMPLE_VERSION.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&to_u32(queries, "query count")?.to_le_bytes())?;
        let classes = u16::try_from(header.classes)
            .map_err(|_| Error::InvalidArgument(format!("class count {} does not fit in u16", header.classes)))?;
        out.write_all(&classes.to_le_bytes())?;
        out.write_all(&(classes + 1).to_le_bytes())?;
        out.write_all(&to_u32(frame.0, "height")?.to_le_bytes())?;
        out.write_all(&to_u32(frame.1, "width")?.to_le_bytes())?;
        Ok(Self {
            out,
            header,
            written: 0,
        })
    }

    pub fn write(&mut self, s: &SampleTensor) -> Result<()> {
        let d = s.transform();
        let expected = d.sample_dims(self.header.frame());
        if s.queries() != self.header.queries || s.c_total() != self.header.c_total || s.dims() != expected {
            return Err(Error::ShapeMismatch(format!(
                "sample {}x{} {:?} does not fit container {}x{} {:?} for transform {d}",
                s.queries(),
                s.c_total(),
                s.dims(),
                self.header.queries,
                self.header.c_total,
                expected
            )));
        }
        self.out.write_all(&[d.kind_bits()])?;
        self.out.write_all(&d.factor().to_le_bytes())?;
        self.out.write_all(&[d.frame_offset()])?;
        self.out.write_all(&f32_bytes(s.class_logits()))?;
        self.out.write_all(&f32_bytes(s.mask_logits()))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<ContainerHeader> {
        self.out.seek(SeekFrom::Start(6))?;
        self.out
            .write_all(&to_u32(self.written, "sample count")?.to_le_bytes())?;
        self.out.flush()?;
        self.header.samples = self.written;
        Ok(self.header)
    }
}

pub fn write_samples(path: &Path, frame: (usize, usize), samples: &[SampleTensor]) -> Result<ContainerHeader> {
    let first = samples.first().ok_or(Error::EmptyEnsemble)?;
    let mut w = SampleWriter::create(path, first.queries(), first.c_total(), frame)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()
}

/// Where one sample lives inside a container.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLocation {
    pub descriptor: TransformDescriptor,
    /// Offset of the class logits.
    pub offset: u64,
}

/// Random-access reader that loads one sample at a time.
#[derive(Debug)]
pub struct SampleReader {
    path: PathBuf,
    file: BufReader<File>,
    header: ContainerHeader,
    index: Vec<SampleLocation>,
}

impl SampleReader {
    /// Reads the header and indexes descriptors without loading any logits.
    pub fn open(path: &Path) -> Result<Self> {
        let file = open(path)?;
        let len = file.metadata()?.len();
        let mut r = LeReader::new(BufReader::new(file), 0);
        r.magic(SAMPLE_MAGIC)?;
        let version = r.u16()?;
        if version != SAMPLE_VERSION {
            return Err(Error::BadVersion(version));
        }
        let samples = r.u32()? as usize;
        let queries = r.u32()? as usize;
        let classes = r.u16()? as usize;
        let c_total = r.u16()? as usize;
        let (height, width) = r.dims()?;
        if c_total != classes + 1 {
            return Err(Error::ShapeMismatch(format!(
                "c_total {c_total} != classes {classes} + 1"
            )));
        }
        if queries == 0 || height == 0 || width == 0 {
            return Err(Error::EmptyTensor);
        }
        let header = ContainerHeader {
            samples,
            queries,
            classes,
            c_total,
            height,
            width,
        };
        let mut file = r.inner;
        let mut index = Vec::with_capacity(samples);
        let mut pos = HEADER_LEN;
        for _ in 0..samples {
            file.seek(SeekFrom::Start(pos))?;
            let mut d = LeReader::new(&mut file, pos);
            let kind = d.u8()?;
            let factor = d.f32()?;
            let k = d.u8()?;
            let descriptor = TransformDescriptor::from_parts(kind, factor, k)?;
            let offset = pos + DESCRIPTOR_LEN;
            let end = offset + header.payload_len(&descriptor);
            if end > len {
                return Err(Error::Truncated { offset: len });
            }
            index.push(SampleLocation { descriptor, offset });
            pos = end;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn locations(&self) -> &[SampleLocation] {
        &self.index
    }

    pub fn read(&mut self, i: usize) -> Result<SampleTensor> {
        let loc = *self
            .index
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {i} of {}", self.index.len())))?;
        read_at(&mut self.file, &self.header, &loc)
    }

    pub fn read_all(&mut self) -> Result<Vec<SampleTensor>> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }
}

fn read_at<R: Read + Seek>(file: &mut R, header: &ContainerHeader, loc: &SampleLocation) -> Result<SampleTensor> {
    file.seek(SeekFrom::Start(loc.offset))?;
    let mut r = LeReader::new(file, loc.offset);
    let dims = loc.descriptor.sample_dims(header.frame());
    let class = r.f32s(header.queries * header.c_total)?;
    let masks = r.f32s(header.queries * dims.0 * dims.1)?;
    SampleTensor::new(header.queries, header.c_total, dims, class, masks, loc.descriptor)
}

/// Opens `path` and loads a single indexed sample; used by lazy ensemble members.
pub fn load_sample(path: &Path, header: &ContainerHeader, loc: &SampleLocation) -> Result<SampleTensor> {
    let mut file = BufReader::new(open(path)?);
    read_at(&mut file, header, loc)
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleTensor>> {
    SampleReader::open(path)?.read_all()
}

fn write_map_header(out: &mut impl Write, magic: [u8; 4], (h, w): (usize, usize)) -> Result<()> {
    out.write_all(&magic)?;
    out.write_all(&to_u32(h, "height")?.to_le_bytes())?;
    out.write_all(&to_u32(w, "width")?.to_le_bytes())?;
    Ok(())
}

pub fn write_semantic(path: &Path, map: &SemanticLabelMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_map_header(&mut out, SEMANTIC_MAGIC, map.dims())?;
    let bytes: Vec<u8> = map.ids().iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_semantic(path: &Path) -> Result<SemanticLabelMap> {
    let mut r = LeReader::new(BufReader::new(open(path)?), 0);
    r.magic(SEMANTIC_MAGIC)?;
    let (h, w) = r.dims()?;
    let ids = r
        .bytes(2 * h * w)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    SemanticLabelMap::new(h, w, ids)
}

pub fn write_panoptic(path: &Path, map: &PanopticLabelMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_map_header(&mut out, PANOPTIC_MAGIC, map.dims())?;
    let bytes: Vec<u8> = map.ids().iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_panoptic(path: &Path) -> Result<PanopticLabelMap> {
    let mut r = LeReader::new(BufReader::new(open(path)?), 0);
    r.magic(PANOPTIC_MAGIC)?;
    let (h, w) = r.dims()?;
    let ids = r
        .bytes(4 * h * w)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    PanopticLabelMap::new(h, w, ids)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_map_header(&mut out, FLOW_MAGIC, flow.dims())?;
    out.write_all(&f32_bytes(flow.displacement()))?;
    let valid: Vec<u8> = flow.validity().iter().map(|&v| v as u8).collect();
    out.write_all(&valid)?;
    out.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut r = LeReader::new(BufReader::new(open(path)?), 0);
    r.magic(FLOW_MAGIC)?;
    let (h, w) = r.dims()?;
    let disp = r.f32s(2 * h * w)?;
    let valid = r.bytes(h * w)?.into_iter().map(|v| v != 0).collect();
    FlowField::new(h, w, disp, valid)
}

/// One image of a dataset. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub samples: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_semantic: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_panoptic: Option<PathBuf>,
    /// Flow into the current frame from prior frame j is entry j - 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flows: Vec<PathBuf>,
    #[serde(default)]
    pub is_ood: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl ManifestRecord {
    fn files(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.samples)
            .chain(self.gt_semantic.iter())
            .chain(self.gt_panoptic.iter())
            .chain(self.flows.iter())
    }
}

/// Validated dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// OOD records that name no clean twin.
    pub unpaired_ood: usize,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }
}

/// Parses a JSON Lines manifest and checks that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    for rec in &records {
        for f in rec.files() {
            let full = dir.join(f);
            if !full.is_file() {
                return Err(Error::MissingFile(full));
            }
        }
    }
    let unpaired_ood = records.iter().filter(|r| r.is_ood && r.pair_id.is_none()).count();
    if unpaired_ood > 0 {
        log::warn!("{unpaired_ood} OOD records have no pair_id");
    }
    Ok(Manifest {
        dir,
        records,
        unpaired_ood,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Class table of a dataset, stored as `dataset.json` next to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_classes: u16,
    pub thing_classes: Vec<u16>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DatasetInfo {
    pub fn things(&self) -> BTreeSet<u16> {
        self.thing_classes.iter().copied().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
