//! Image datasets: the in-memory container, its TDS and NPZ encodings,
//! synthetic generators, splitting and augmentation.

pub mod augment;
pub mod npz;
pub mod split;
pub mod synth;
pub mod tds;

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
pub use tds::{Payload, TdsRecord};

/// Labeled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: [usize; 4],
    pixels: Payload,
    labels: Vec<usize>,
    class_names: Vec<String>,
    pub meta: Vec<(String, String)>,
}

impl Dataset {
    pub fn new(
        dims: [usize; 4],
        pixels: Payload,
        labels: Vec<usize>,
        class_names: Vec<String>,
        meta: Vec<(String, String)>,
    ) -> Result<Self> {
        if dims.iter().product::<usize>() != pixels.len() {
            return Err(CoreError::input(format!(
                "image dims {dims:?} do not match {} pixel values",
                pixels.len()
            )));
        }
        if labels.len() != dims[0] {
            return Err(CoreError::input(format!("{} labels for {} images", labels.len(), dims[0])));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(CoreError::input(format!(
                "label {y} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Dataset {
            dims,
            pixels,
            labels,
            class_names,
            meta,
        })
    }

    pub fn default_names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class_{i}")).collect()
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn pixels(&self) -> &Payload {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn image_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// Pixel values of image `i` scaled to [0, 1]: uint8 values are divided
    /// by 255, float values are taken as already scaled, int32 values are
    /// treated like uint8.
    pub fn image_unit(&self, i: usize) -> Vec<f32> {
        let len = self.image_len();
        let range = i * len..(i + 1) * len;
        match &self.pixels {
            Payload::U8(v) => v[range].iter().map(|&x| x as f32 / 255.0).collect(),
            Payload::F32(v) => v[range].to_vec(),
            Payload::I32(v) => v[range].iter().map(|&x| x as f32 / 255.0).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// New dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let len = self.image_len();
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(CoreError::input(format!("index {i} out of range for {} images", self.len())));
        }
        let gather = |len: usize| indices.iter().flat_map(move |&i| i * len..(i + 1) * len);
        let pixels = match &self.pixels {
            Payload::U8(v) => Payload::U8(gather(len).map(|j| v[j]).collect()),
            Payload::F32(v) => Payload::F32(gather(len).map(|j| v[j]).collect()),
            Payload::I32(v) => Payload::I32(gather(len).map(|j| v[j]).collect()),
        };
        Dataset::new(
            [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            pixels,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
            self.meta.clone(),
        )
    }

    pub fn to_record(&self) -> TdsRecord {
        TdsRecord {
            dims: self.dims.to_vec(),
            payload: self.pixels.clone(),
            labels: self.labels.iter().map(|&y| y as i32).collect(),
            names: self.class_names.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_record(rec: TdsRecord) -> Result<Self> {
        let dims: [usize; 4] = rec
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| CoreError::input(format!("dataset images must be [N,C,H,W], got {:?}", rec.dims)))?;
        let labels = rec
            .labels
            .iter()
            .map(|&y| usize::try_from(y).map_err(|_| CoreError::input(format!("negative label {y}"))))
            .collect::<Result<_>>()?;
        Dataset::new(dims, rec.payload, labels, rec.names, rec.meta)
    }

    pub fn write_tds(&self, path: &Path) -> Result<()> {
        self.to_record().write(path)
    }

    pub fn read_tds(path: &Path) -> Result<Self> {
        Self::from_record(TdsRecord::read(path)?)
    }

    /// `index,label,class_name` rows with LF line endings.
    pub fn write_labels_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"index,label,class_name\n")?;
        for (i, &y) in self.labels.iter().enumerate() {
            writeln!(w, "{i},{y},{}", csv_field(&self.class_names[y]))?;
        }
        Ok(())
    }
}

/// Quotes a CSV field when it contains a separator, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
