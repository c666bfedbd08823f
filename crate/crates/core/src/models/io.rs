//! Little-endian tensor container used for weights (`CFW1`) and datasets or
//! image artifacts (`CFT1`).
//!
//! ```text
//! magic[4] | u32 count | count × ( u16 name_len | name | u8 rank | rank × u32 dim | f32 data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::dataset::Dataset;
use super::{Arch, Classifier};
use crate::error::{Error, Result};
use crate::tensor::{ColorSpace, ImageTensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CFW1";
pub const TENSORS_MAGIC: &[u8; 4] = b"CFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

fn eof_as_truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}

pub fn write_container<W: Write>(mut w: W, magic: &[u8; 4], tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::MalformedTensor {
                name: t.name.clone(),
                reason: format!("dims {:?} do not match {} values", t.dims, t.data.len()),
            });
        }
        let name = t.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(t.dims.len() as u8)?;
        for &d in &t.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<Vec<NamedTensor>> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(eof_as_truncated("magic"))?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof_as_truncated("tensor count"))? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("tensor #{i}");
        let len = r.read_u16::<LittleEndian>().map_err(eof_as_truncated(&what))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(eof_as_truncated(&what))?;
        let name = String::from_utf8(name).map_err(|_| Error::MalformedTensor {
            name: what.clone(),
            reason: "name is not UTF-8".into(),
        })?;
        let rank = r.read_u8().map_err(eof_as_truncated(&name))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(eof_as_truncated(&name))? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(eof_as_truncated(&name))?;
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

pub fn save_tensors(path: &Path, magic: &[u8; 4], tensors: &[NamedTensor]) -> Result<()> {
    write_container(BufWriter::new(File::create(path)?), magic, tensors)
}

pub fn load_tensors(path: &Path, magic: &[u8; 4]) -> Result<Vec<NamedTensor>> {
    read_container(open(path)?, magic)
}

pub fn weights_to_tensors(model: &Classifier<f32>) -> Vec<NamedTensor> {
    model
        .params()
        .into_iter()
        .map(|p| NamedTensor::new(p.name, p.dims, p.data.to_vec()))
        .collect()
}

/// Rebuilds a classifier from named tensors. The architecture comes from the
/// name prefix, the input side and class count from the dense shapes.
pub fn weights_from_tensors(tensors: &[NamedTensor]) -> Result<Classifier<f32>> {
    let first = tensors.first().ok_or_else(|| Error::MalformedTensor {
        name: String::new(),
        reason: "weight file holds no tensors".into(),
    })?;
    let arch: Arch = first
        .name
        .split('/')
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|_| Error::MalformedTensor {
            name: first.name.clone(),
            reason: "unknown architecture prefix".into(),
        })?;
    let find = |suffix: &str| -> Result<&NamedTensor> {
        let name = format!("{arch}/{suffix}");
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or(Error::MissingTensor(name))
    };
    let fc1 = find("fc1.weight")?;
    let last = match arch {
        Arch::SmallCnnA => find("fc1.bias")?,
        _ => find("fc2.bias")?,
    };
    let classes = last.data.len();
    let fc1_in = fc1.dims.get(1).copied().unwrap_or(0);
    let (per_cell, stride) = match arch {
        Arch::SmallCnnA => (32, 4),
        Arch::SmallCnnB => (48, 8),
        Arch::SmallMlp => (3, 1),
    };
    let cells = ((fc1_in / per_cell) as f64).sqrt().round() as usize;
    let side = cells * stride;
    let mut model = Classifier::<f32>::new(arch, [3, side, side], classes, 0).map_err(|_| Error::MalformedTensor {
        name: fc1.name.clone(),
        reason: format!("dims {:?} match no supported input size", fc1.dims),
    })?;
    let expected: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|p| (p.name, p.dims)).collect();
    for ((name, dims), buf) in expected.iter().zip(model.params_mut()) {
        let t = tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if &t.dims != dims {
            return Err(Error::MalformedTensor {
                name: name.clone(),
                reason: format!("expected dims {dims:?}, found {:?}", t.dims),
            });
        }
        buf.copy_from_slice(&t.data);
    }
    if tensors.len() != expected.len() {
        return Err(Error::TensorCountMismatch {
            expected: expected.len(),
            found: tensors.len(),
        });
    }
    Ok(model)
}

pub fn save_weights(model: &Classifier<f32>, path: &Path) -> Result<()> {
    save_tensors(path, WEIGHTS_MAGIC, &weights_to_tensors(model))
}

pub fn load_weights(path: &Path) -> Result<Classifier<f32>> {
    weights_from_tensors(&load_tensors(path, WEIGHTS_MAGIC)?)
}

/// `<prefix>images` as `(N, 3, H, W)` and `<prefix>labels` as `(N)`.
pub fn dataset_tensors(prefix: &str, data: &Dataset) -> [NamedTensor; 2] {
    [
        NamedTensor::new(format!("{prefix}images"), data.images.shape().to_vec(), data.images.data().to_vec()),
        NamedTensor::new(
            format!("{prefix}labels"),
            vec![data.labels.len()],
            data.labels.iter().map(|&l| l as f32).collect(),
        ),
    ]
}

pub fn dataset_from_tensors(tensors: &[NamedTensor], prefix: &str) -> Result<Dataset> {
    let get = |n: &str| {
        let name = format!("{prefix}{n}");
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or(Error::MissingTensor(name))
    };
    let images = get("images")?;
    let labels = get("labels")?;
    let dims: [usize; 4] = images.dims.clone().try_into().map_err(|_| Error::MalformedTensor {
        name: images.name.clone(),
        reason: "images must have rank 4".into(),
    })?;
    if labels.data.len() != dims[0] {
        return Err(Error::MalformedTensor {
            name: labels.name.clone(),
            reason: format!("{} labels for {} images", labels.data.len(), dims[0]),
        });
    }
    Ok(Dataset {
        images: ImageTensor::new(dims, images.data.clone(), ColorSpace::Rgb)?,
        labels: labels.data.iter().map(|&v| v as usize).collect(),
    })
}

/// Writes `train/` and `test/` splits into one `CFT1` file.
pub fn save_dataset(path: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    let mut tensors = Vec::new();
    tensors.extend(dataset_tensors("train/", train));
    tensors.extend(dataset_tensors("test/", test));
    save_tensors(path, TENSORS_MAGIC, &tensors)
}

/// Loads one split (`"train"` or `"test"`) of a dataset file.
pub fn load_dataset_split(path: &Path, split: &str) -> Result<Dataset> {
    dataset_from_tensors(&load_tensors(path, TENSORS_MAGIC)?, &format!("{split}/"))
}
