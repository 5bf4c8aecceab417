//! NRRD reading and writing for 3D scalar volumes.
//!
//! Supports attached and detached headers, `raw`, `gzip` and `ascii`
//! encodings, both endiannesses, and the common integer and float types.
//! Voxel spacing is taken from `spacings` or from the norms of
//! `space directions`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Grid, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Result<Self> {
        let t = match s.trim() {
            "signed char" | "int8" | "int8_t" => Self::I8,
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Self::U8,
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => Self::I16,
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => Self::U16,
            "int" | "signed int" | "int32" | "int32_t" => Self::I32,
            "uint" | "unsigned int" | "uint32" | "uint32_t" => Self::U32,
            "longlong" | "long long" | "long long int" | "signed long long" | "signed long long int" | "int64"
            | "int64_t" => Self::I64,
            "ulonglong" | "unsigned long long" | "unsigned long long int" | "uint64" | "uint64_t" => Self::U64,
            "float" => Self::F32,
            "double" => Self::F64,
            other => {
                return Err(Error::UnsupportedNrrd {
                    field: "type",
                    value: other.to_string(),
                })
            }
        };
        Ok(t)
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::I64 | Self::U64 | Self::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "int8",
            Self::U8 => "uint8",
            Self::I16 => "int16",
            Self::U16 => "uint16",
            Self::I32 => "int32",
            Self::U32 => "uint32",
            Self::I64 => "int64",
            Self::U64 => "uint64",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! read {
            ($t:ty) => {{
                let arr = b.try_into().expect("sized chunk");
                if big_endian {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => read!(i16),
            Self::U16 => read!(u16),
            Self::I32 => read!(i32),
            Self::U32 => read!(u32),
            Self::I64 => read!(i64),
            Self::U64 => read!(u64),
            Self::F32 => read!(f32),
            Self::F64 => read!(f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Raw,
    Gzip,
    Ascii,
}

impl Encoding {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(Self::Raw),
            "gzip" | "gz" => Ok(Self::Gzip),
            "ascii" | "text" | "txt" => Ok(Self::Ascii),
            other => Err(Error::UnsupportedNrrd {
                field: "encoding",
                value: other.to_string(),
            }),
        }
    }
}

/// Parsed header fields that matter for scalar volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct NrrdHeader {
    pub scalar: ScalarType,
    pub sizes: [usize; 3],
    pub spacing: [f64; 3],
    pub encoding: Encoding,
    pub big_endian: bool,
    pub data_file: Option<PathBuf>,
    pub byte_skip: usize,
    pub line_skip: usize,
}

/// A decoded volume before interpretation as image or label.
#[derive(Clone, Debug)]
pub struct NrrdData {
    pub header: NrrdHeader,
    pub values: Vec<f64>,
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    inner
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::NrrdHeader(format!("bad vector component '{v}'")))
        })
        .collect()
}

fn parse_header(lines: &[String], base_dir: &Path) -> Result<NrrdHeader> {
    let magic = lines.first().ok_or_else(|| Error::NrrdHeader("empty file".into()))?;
    if !magic.starts_with("NRRD000") {
        return Err(Error::NrrdHeader(format!("bad magic line '{magic}'")));
    }
    let mut scalar = None;
    let mut dimension = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut encoding = None;
    let mut big_endian = false;
    let mut data_file = None;
    let mut byte_skip = 0usize;
    let mut line_skip = 0usize;
    for line in &lines[1..] {
        if line.starts_with('#') || line.trim().is_empty() || line.contains(":=") {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::NrrdHeader(format!("line without field separator: '{line}'")));
        };
        let value = value.trim();
        match key.trim() {
            "type" => scalar = Some(ScalarType::parse(value)?),
            "dimension" => {
                dimension = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::NrrdHeader(format!("bad dimension '{value}'")))?,
                )
            }
            "sizes" => {
                sizes = Some(
                    value
                        .split_whitespace()
                        .map(|v| v.parse::<usize>().map_err(|_| Error::NrrdHeader(format!("bad size '{v}'"))))
                        .collect::<Result<_>>()?,
                )
            }
            "spacings" => {
                spacing = Some(
                    value
                        .split_whitespace()
                        .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
                        .collect(),
                )
            }
            "space directions" => {
                let mut norms = Vec::new();
                for tok in value.split_whitespace() {
                    if tok == "none" {
                        continue;
                    }
                    let v = parse_vector(tok)?;
                    norms.push(v.iter().map(|c| c * c).sum::<f64>().sqrt());
                }
                spacing = Some(norms);
            }
            "encoding" => encoding = Some(Encoding::parse(value)?),
            "endian" => big_endian = value == "big",
            "data file" | "datafile" => {
                if value.starts_with("LIST") || value.contains('%') {
                    return Err(Error::UnsupportedNrrd {
                        field: "data file",
                        value: value.to_string(),
                    });
                }
                data_file = Some(base_dir.join(value));
            }
            "byte skip" | "byteskip" => {
                byte_skip = value.parse::<i64>().ok().filter(|&v| v >= 0).ok_or_else(|| {
                    Error::UnsupportedNrrd {
                        field: "byte skip",
                        value: value.to_string(),
                    }
                })? as usize
            }
            "line skip" | "lineskip" => {
                line_skip = value
                    .parse()
                    .map_err(|_| Error::NrrdHeader(format!("bad line skip '{value}'")))?
            }
            _ => {}
        }
    }
    let scalar = scalar.ok_or_else(|| Error::NrrdHeader("missing 'type'".into()))?;
    let sizes = sizes.ok_or_else(|| Error::NrrdHeader("missing 'sizes'".into()))?;
    let encoding = encoding.ok_or_else(|| Error::NrrdHeader("missing 'encoding'".into()))?;
    let dimension = dimension.unwrap_or(sizes.len());
    if dimension != sizes.len() {
        return Err(Error::NrrdHeader(format!(
            "dimension {dimension} disagrees with {} sizes",
            sizes.len()
        )));
    }
    // a leading singleton axis (e.g. a 1-component vector axis) is tolerated
    let sizes: Vec<usize> = if sizes.len() == 4 && sizes[0] == 1 {
        sizes[1..].to_vec()
    } else {
        sizes
    };
    if sizes.len() != 3 {
        return Err(Error::UnsupportedNrrd {
            field: "dimension",
            value: dimension.to_string(),
        });
    }
    let spacing = match spacing {
        Some(s) if s.len() >= 3 && s[s.len() - 3..].iter().all(|v| v.is_finite() && *v > 0.0) => {
            [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]]
        }
        _ => [1.0; 3],
    };
    Ok(NrrdHeader {
        scalar,
        sizes: [sizes[0], sizes[1], sizes[2]],
        spacing,
        encoding,
        big_endian,
        data_file,
        byte_skip,
        line_skip,
    })
}

fn decode_payload(header: &NrrdHeader, payload: Vec<u8>) -> Result<Vec<f64>> {
    let n: usize = header.sizes.iter().product();
    let bytes = match header.encoding {
        Encoding::Raw => payload,
        Encoding::Gzip => {
            let mut out = Vec::new();
            GzDecoder::new(&payload[..]).read_to_end(&mut out)?;
            out
        }
        Encoding::Ascii => {
            let text = String::from_utf8_lossy(&payload);
            let values: Vec<f64> = text
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| Error::NrrdHeader(format!("bad ascii value '{t}'"))))
                .collect::<Result<_>>()?;
            if values.len() < n {
                return Err(Error::Data(format!("ascii payload has {} of {n} values", values.len())));
            }
            return Ok(values[..n].to_vec());
        }
    };
    let sz = header.scalar.size();
    let bytes = &bytes[header.byte_skip.min(bytes.len())..];
    if bytes.len() < n * sz {
        return Err(Error::Data(format!(
            "payload holds {} bytes, {} needed for {:?} {}",
            bytes.len(),
            n * sz,
            header.sizes,
            header.scalar.name()
        )));
    }
    Ok(bytes[..n * sz]
        .chunks_exact(sz)
        .map(|c| header.scalar.decode(c, header.big_endian))
        .collect())
}

/// Reads any supported NRRD file into raw values.
pub fn read_nrrd(path: &Path) -> Result<NrrdData> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut lines = Vec::new();
    loop {
        let mut raw = Vec::new();
        let n = reader.read_until(b'\n', &mut raw)?;
        if n == 0 {
            break;
        }
        let line = String::from_utf8_lossy(&raw).trim_end_matches(['\n', '\r']).to_string();
        if line.is_empty() {
            break;
        }
        lines.push(line);
    }
    let header = parse_header(&lines, &base_dir)?;
    let payload = match &header.data_file {
        Some(file) => {
            if !file.exists() {
                return Err(Error::MissingInput(file.clone()));
            }
            let data = fs::read(file)?;
            skip_lines(data, header.line_skip)
        }
        None => {
            let mut rest = Vec::new();
            reader.read_to_end(&mut rest)?;
            rest
        }
    };
    let values = decode_payload(&header, payload)?;
    Ok(NrrdData { header, values })
}

fn skip_lines(data: Vec<u8>, n: usize) -> Vec<u8> {
    let mut start = 0;
    for _ in 0..n {
        match data[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => return Vec::new(),
        }
    }
    data[start..].to_vec()
}

/// Reads an image volume.
pub fn read_volume(path: &Path, id: &str) -> Result<Volume> {
    let d = read_nrrd(path)?;
    Volume::from_data(
        id,
        d.header.sizes,
        d.values.into_iter().map(|v| v as f32).collect(),
        d.header.spacing,
    )
}

/// Reads a binary label volume, rejecting values outside {0, 1}.
pub fn read_mask(path: &Path) -> Result<(Mask, [f64; 3])> {
    let d = read_nrrd(path)?;
    Ok((Mask::from_labels(d.header.sizes, &d.values)?, d.header.spacing))
}

fn write_with(path: &Path, type_name: &str, dims: [usize; 3], spacing: [f64; 3], bytes: &[u8], gzip: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "NRRD0004")?;
    writeln!(f, "type: {type_name}")?;
    writeln!(f, "dimension: 3")?;
    writeln!(f, "sizes: {} {} {}", dims[0], dims[1], dims[2])?;
    writeln!(f, "spacings: {} {} {}", spacing[0], spacing[1], spacing[2])?;
    writeln!(f, "endian: little")?;
    writeln!(f, "encoding: {}", if gzip { "gzip" } else { "raw" })?;
    writeln!(f)?;
    if gzip {
        let mut enc = GzEncoder::new(f, Compression::fast());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        f.write_all(bytes)?;
        f.flush()?;
    }
    Ok(())
}

/// Writes a float volume with an attached header.
pub fn write_volume(path: &Path, volume: &Volume, gzip: bool) -> Result<()> {
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_with(path, "float", volume.dims(), volume.spacing(), &bytes, gzip)
}

/// Writes a mask as `uchar` 0/1.
pub fn write_mask(path: &Path, mask: &Grid<bool>, spacing: [f64; 3], gzip: bool) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_with(path, "uchar", mask.dims(), spacing, &bytes, gzip)
}
