//! NPY v1.0 arrays and NPZ (ZIP) archives of them.

use std::fs::File;
use std::io::{Read, Seek, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::{Dataset, Payload};
use crate::error::{CoreError, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// One decoded array: dtype descriptor, shape and raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub descr: String,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

/// Byte width of a supported integer descriptor and whether it is signed.
fn int_descr(descr: &str) -> Option<(usize, bool)> {
    let (order, kind) = descr.split_at(descr.len().min(1));
    if !matches!(order, "<" | "|") && !(order == ">" && descr.ends_with('1')) {
        return None;
    }
    let signed = match kind.chars().next()? {
        'i' => true,
        'u' => false,
        _ => return None,
    };
    let width: usize = kind[1..].parse().ok()?;
    matches!(width, 1 | 2 | 4 | 8).then_some((width, signed))
}

impl NpyArray {
    pub fn u8(shape: &[usize], data: Vec<u8>) -> Self {
        NpyArray {
            descr: "|u1".into(),
            fortran_order: false,
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values of an integer array widened to i64.
    pub fn to_i64(&self) -> Result<Vec<i64>> {
        let (width, signed) = int_descr(&self.descr)
            .ok_or_else(|| CoreError::format(0, format!("unsupported label dtype `{}`", self.descr)))?;
        Ok(self
            .data
            .chunks_exact(width)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf[..width].copy_from_slice(c);
                if signed && c[width - 1] & 0x80 != 0 {
                    buf[width..].iter_mut().for_each(|b| *b = 0xff);
                }
                i64::from_le_bytes(buf)
            })
            .collect())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
            return Err(CoreError::format(0, "missing \\x93NUMPY magic"));
        }
        let (major, minor) = (bytes[6], bytes[7]);
        if (major, minor) != (1, 0) {
            return Err(CoreError::format(6, format!("unsupported NPY version {major}.{minor} (only 1.0)")));
        }
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| CoreError::format(8, format!("header length {hlen} exceeds file")))?;
        let header = std::str::from_utf8(header).map_err(|_| CoreError::format(10, "header is not ASCII"))?;
        let descr = dict_value(header, "descr")?;
        let descr = descr
            .strip_prefix('\'')
            .and_then(|s| s.strip_suffix('\''))
            .ok_or_else(|| CoreError::format(10, format!("descr is not a string: {descr}")))?
            .to_string();
        let fortran_order = match dict_value(header, "fortran_order")? {
            "False" => false,
            "True" => true,
            other => return Err(CoreError::format(10, format!("bad fortran_order `{other}`"))),
        };
        if fortran_order {
            return Err(CoreError::format(10, "fortran_order=True arrays are not supported"));
        }
        let shape_txt = dict_value(header, "shape")?;
        let inner = shape_txt
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| CoreError::format(10, format!("bad shape `{shape_txt}`")))?;
        let shape = inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| CoreError::format(10, format!("bad shape entry `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let width = match descr.as_str() {
            "|u1" | "<u1" | "|i1" | "<i1" | "|b1" => 1,
            d => match int_descr(d) {
                Some((w, _)) => w,
                None => match d {
                    "<f4" => 4,
                    "<f8" => 8,
                    _ => return Err(CoreError::format(10, format!("unsupported dtype `{d}`"))),
                },
            },
        };
        let start = 10 + hlen;
        let need = shape.iter().product::<usize>() * width;
        let data = bytes.get(start..start + need).ok_or_else(|| {
            CoreError::format(start as u64, format!("payload needs {need} bytes, {} present", bytes.len() - start))
        })?;
        Ok(NpyArray {
            descr,
            fortran_order,
            shape,
            data: data.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            ),
        };
        let fortran = if self.fortran_order { "True" } else { "False" };
        let mut header = format!("{{'descr': '{}', 'fortran_order': {fortran}, 'shape': {shape}, }}", self.descr);
        let total = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - total % 64) % 64));
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.data.len());
        out.extend_from_slice(NPY_MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }
}

/// Raw text of the value stored under `'key'` in a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| CoreError::format(10, format!("header has no `{key}` entry")))?;
    let rest = header[at + pat.len()..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(body) = rest.strip_prefix('\'') {
        body.find('\'').map(|i| i + 2)
    } else {
        rest.find([',', '}'])
    };
    let end = end.ok_or_else(|| CoreError::format(10, format!("unterminated `{key}` entry")))?;
    Ok(rest[..end].trim())
}

/// Reads every `*.npy` member of an archive that is listed in `keys`.
fn read_members<R: Read + Seek>(archive: &mut ZipArchive<R>, keys: &[&str]) -> Result<Vec<NpyArray>> {
    keys.iter()
        .map(|key| {
            let mut member = archive
                .by_name(&format!("{key}.npy"))
                .map_err(|_| CoreError::Key((*key).to_string()))?;
            let mut buf = Vec::with_capacity(member.size() as usize);
            member.read_to_end(&mut buf)?;
            NpyArray::parse(&buf).map_err(|e| match e {
                CoreError::Format { offset, detail } => CoreError::Format {
                    offset,
                    detail: format!("{key}.npy: {detail}"),
                },
                other => other,
            })
        })
        .collect()
}

/// Member names (without `.npy`) in archive order.
pub fn list_keys(path: &Path) -> Result<Vec<String>> {
    let archive = ZipArchive::new(File::open(path)?).map_err(|e| CoreError::format(0, format!("not a ZIP archive: {e}")))?;
    Ok(archive
        .file_names()
        .filter_map(|n| n.strip_suffix(".npy").map(str::to_string))
        .collect())
}

/// Converts an image array to `[N, C, H, W]` uint8.
///
/// `[N, H, W]` becomes `[N, 1, H, W]`. A rank-4 array whose last axis is 1
/// or 3 and whose second axis is not is read as channels-last and
/// transposed.
fn images_to_nchw(arr: &NpyArray) -> Result<([usize; 4], Vec<u8>)> {
    if !matches!(arr.descr.as_str(), "|u1" | "<u1") {
        return Err(CoreError::format(10, format!("images must be uint8, got dtype `{}`", arr.descr)));
    }
    match *arr.shape.as_slice() {
        [n, h, w] => Ok(([n, 1, h, w], arr.data.clone())),
        [n, a, b, c] if matches!(c, 1 | 3) && !matches!(a, 1 | 3) => {
            let (h, w) = (a, b);
            let mut out = vec![0u8; arr.data.len()];
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            out[((i * c + ch) * h + y) * w + x] = arr.data[((i * h + y) * w + x) * c + ch];
                        }
                    }
                }
            }
            Ok(([n, c, h, w], out))
        }
        [n, c, h, w] => Ok(([n, c, h, w], arr.data.clone())),
        _ => Err(CoreError::format(10, format!("images must be rank 3 or 4, got shape {:?}", arr.shape))),
    }
}

/// Builds a dataset from the `images_key` and `labels_key` members of an NPZ
/// archive. The class count is `num_classes` when given, otherwise the
/// largest label plus one.
pub fn import_npz(path: &Path, images_key: &str, labels_key: &str, num_classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut archive = ZipArchive::new(file).map_err(|e| CoreError::format(0, format!("not a ZIP archive: {e}")))?;
    let arrays = read_members(&mut archive, &[images_key, labels_key])?;
    let (dims, pixels) = images_to_nchw(&arrays[0])?;
    let lab = &arrays[1];
    let label_shape_ok = match *lab.shape.as_slice() {
        [n] | [n, 1] => n == dims[0],
        _ => false,
    };
    if !label_shape_ok {
        return Err(CoreError::format(
            10,
            format!("labels shape {:?} does not match {} images", lab.shape, dims[0]),
        ));
    }
    let raw = lab.to_i64()?;
    let labels = raw
        .iter()
        .map(|&y| usize::try_from(y).map_err(|_| CoreError::input(format!("negative label {y}"))))
        .collect::<Result<Vec<_>>>()?;
    let inferred = labels.iter().max().map_or(0, |&m| m + 1);
    let k = num_classes.unwrap_or(inferred);
    if k < inferred {
        return Err(CoreError::input(format!("labels reach {} but only {k} classes were given", inferred - 1)));
    }
    let source = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(
        dims,
        Payload::U8(pixels),
        labels,
        Dataset::default_names(k),
        vec![("source".into(), source), ("split".into(), images_key.to_string())],
    )
}

/// Writes arrays as an NPZ archive, `name.npy` per entry.
pub fn write_npz(path: &Path, arrays: &[(&str, NpyArray)], deflate: bool) -> Result<()> {
    let mut zip = ZipWriter::new(File::create(path)?);
    let method = if deflate { CompressionMethod::Deflated } else { CompressionMethod::Stored };
    let opts = SimpleFileOptions::default().compression_method(method);
    for (name, arr) in arrays {
        zip.start_file(format!("{name}.npy"), opts)
            .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
        zip.write_all(&arr.to_bytes())?;
    }
    zip.finish().map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Exports a uint8 dataset as `{prefix}_images` (`[N, H, W, C]`,
/// channels-last as MedMNIST ships it) and `{prefix}_labels` (`[N, 1]`
/// uint8) arrays.
pub fn dataset_arrays(ds: &Dataset, prefix: &str) -> Result<Vec<(String, NpyArray)>> {
    let Payload::U8(px) = ds.pixels() else {
        return Err(CoreError::input("only uint8 datasets can be exported to NPZ"));
    };
    let [n, c, h, w] = ds.dims();
    let mut nhwc = vec![0u8; px.len()];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    nhwc[((i * h + y) * w + x) * c + ch] = px[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    let labels: Vec<u8> = ds
        .labels()
        .iter()
        .map(|&y| u8::try_from(y).map_err(|_| CoreError::input(format!("label {y} does not fit uint8"))))
        .collect::<Result<_>>()?;
    Ok(vec![
        (format!("{prefix}_images"), NpyArray::u8(&[n, h, w, c], nhwc)),
        (format!("{prefix}_labels"), NpyArray::u8(&[n, 1], labels)),
    ])
}
