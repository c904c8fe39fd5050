//! Dataset ingestion: two-class subsets of MNIST-style IDX datasets or of a
//! user-supplied directory tree.

mod idx;
mod preprocess;

pub use idx::{encode_images, encode_labels, parse_images, parse_labels, IdxImages};
pub use preprocess::{preprocess, resample, PreprocessSpec, RawImage, ResizeFilter};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    FashionMnist,
    Mnist,
    CustomDir,
}

impl DatasetId {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetId::FashionMnist => "fashion_mnist",
            DatasetId::Mnist => "mnist",
            DatasetId::CustomDir => "custom",
        }
    }

    /// Canonical class names of the fixed-vocabulary datasets.
    pub fn class_names(self) -> Option<&'static [&'static str]> {
        match self {
            DatasetId::FashionMnist => Some(&[
                "t_shirt_top",
                "trouser",
                "pullover",
                "dress",
                "coat",
                "sandal",
                "shirt",
                "sneaker",
                "bag",
                "ankle_boot",
            ]),
            DatasetId::Mnist => Some(&[
                "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
            ]),
            DatasetId::CustomDir => None,
        }
    }

    /// Source URLs of the gzipped IDX files, keyed by local file name.
    fn mirror(self) -> Option<&'static str> {
        match self {
            DatasetId::FashionMnist => {
                Some("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/")
            }
            DatasetId::Mnist => Some("https://ossci-datasets.s3.amazonaws.com/mnist/"),
            DatasetId::CustomDir => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn idx_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Where a dataset lives on disk and whether missing files may be downloaded.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub id: DatasetId,
    pub cache_dir: PathBuf,
    pub allow_fetch: bool,
}

impl DatasetSource {
    pub fn new(id: DatasetId, cache_dir: impl Into<PathBuf>) -> Self {
        Self { id, cache_dir: cache_dir.into(), allow_fetch: false }
    }

    pub fn with_fetch(mut self, allow: bool) -> Self {
        self.allow_fetch = allow;
        self
    }

    /// Directory holding this dataset's files (`<cache_dir>/<dataset>`).
    /// For `custom_dir` the cache directory itself is the dataset root.
    pub fn root(&self) -> PathBuf {
        match self.id {
            DatasetId::CustomDir => self.cache_dir.clone(),
            id => self.cache_dir.join(id.dir_name()),
        }
    }
}

/// Images and binary labels for one split of a two-class subset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Vec<Image>,
    labels: Vec<u8>,
    split: Split,
    class_names: [String; 2],
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<u8>,
        split: Split,
        class_names: [String; 2],
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {l} is not binary")));
        }
        if let Some(first) = images.first() {
            for img in &images {
                if img.shape() != first.shape() {
                    return Err(Error::validation(format!(
                        "mixed image shapes {:?} and {:?}",
                        first.shape(),
                        img.shape()
                    )));
                }
                img.check_range(-1.0, 1.0)?;
            }
        }
        Ok(Self { images, labels, split, class_names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_names(&self) -> &[String; 2] {
        &self.class_names
    }

    /// `(count of label 0, count of label 1)`.
    pub fn label_counts(&self) -> (usize, usize) {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - ones, ones)
    }

    /// Resolution `(H, W, C)` shared by all images, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Keeps at most the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// Resamples every image to the spec's resolution.
    pub fn resampled(&self, spec: &PreprocessSpec) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|img| resample(img, spec.target_resolution, spec.resize_filter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, ..self.clone() })
    }
}

fn resolve_class(id: DatasetId, name: &str) -> Result<usize> {
    let names = id.class_names().expect("fixed-vocabulary dataset");
    if let Ok(n) = name.parse::<usize>() {
        if n < names.len() {
            return Ok(n);
        }
    }
    names.iter().position(|&c| c == name).ok_or_else(|| {
        Error::validation(format!("unknown class `{name}` for {id}; expected one of {names:?}"))
    })
}

/// Loads the samples of two classes, mapping `class_a` to label 0 and
/// `class_b` to label 1. Images keep their native resolution and are
/// converted to `[-1, 1]`.
pub fn load_binary_subset(
    source: &DatasetSource,
    class_a: &str,
    class_b: &str,
    split: Split,
) -> Result<LabeledImageSet> {
    match source.id {
        DatasetId::CustomDir => load_custom_dir(&source.root(), class_a, class_b, split),
        id => {
            let a = resolve_class(id, class_a)?;
            let b = resolve_class(id, class_b)?;
            if a == b {
                return Err(Error::validation(format!(
                    "class_a and class_b must differ, both are `{class_a}`"
                )));
            }
            let (images, labels) = load_idx_split(source, split)?;
            let mut out_imgs = Vec::new();
            let mut out_labels = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                let label = match l as usize {
                    l if l == a => 0,
                    l if l == b => 1,
                    _ => continue,
                };
                let raw = RawImage::new(images.rows, images.cols, 1, images.image(i).to_vec())?;
                out_imgs.push(raw.to_signed()?);
                out_labels.push(label);
            }
            let names = id.class_names().unwrap();
            LabeledImageSet::new(out_imgs, out_labels, split, [names[a].into(), names[b].into()])
        }
    }
}

fn locate_idx(source: &DatasetSource, stem: &str) -> Result<PathBuf> {
    let root = source.root();
    let plain = root.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = root.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    match source.id.mirror() {
        Some(base) if source.allow_fetch => {
            fetch(&format!("{base}{stem}.gz"), &gz)?;
            Ok(gz)
        }
        _ => Err(Error::DatasetUnavailable {
            path: plain,
            reason: "file not found (neither plain nor .gz) and fetching is disabled".into(),
        }),
    }
}

fn fetch(url: &str, dest: &Path) -> Result<()> {
    log::info!("downloading {url}");
    let unavailable = |reason: String| Error::DatasetUnavailable { path: dest.to_path_buf(), reason };
    let resp = ureq::get(url).call().map_err(|e| unavailable(format!("fetch {url}: {e}")))?;
    let mut body = Vec::new();
    std::io::Read::read_to_end(&mut resp.into_reader(), &mut body)?;
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = dest.with_extension("part");
    std::fs::write(&tmp, &body)?;
    std::fs::rename(&tmp, dest)?;
    Ok(())
}

fn load_idx_split(source: &DatasetSource, split: Split) -> Result<(IdxImages, Vec<u8>)> {
    let p = split.idx_prefix();
    let images = parse_images(&idx::read_maybe_gz(&locate_idx(
        source,
        &format!("{p}-images-idx3-ubyte"),
    )?)?)?;
    let labels = parse_labels(&idx::read_maybe_gz(&locate_idx(
        source,
        &format!("{p}-labels-idx1-ubyte"),
    )?)?)?;
    if images.count != labels.len() {
        return Err(Error::validation(format!(
            "{} images but {} labels in {} split",
            images.count,
            labels.len(),
            split.as_str()
        )));
    }
    Ok((images, labels))
}

/// `<root>/<split>/<class>/*.{png,jpg,jpeg}`, decoded as 8-bit grayscale.
/// Files are read in lexicographic order.
fn load_custom_dir(root: &Path, class_a: &str, class_b: &str, split: Split) -> Result<LabeledImageSet> {
    if class_a == class_b {
        return Err(Error::validation(format!(
            "class_a and class_b must differ, both are `{class_a}`"
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in [(0u8, class_a), (1u8, class_b)] {
        let dir = root.join(split.as_str()).join(class);
        if !dir.is_dir() {
            return Err(Error::DatasetUnavailable {
                path: dir,
                reason: "class directory missing".into(),
            });
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for f in files {
            let gray = image::open(&f)?.into_luma8();
            let raw = RawImage::new(gray.height() as usize, gray.width() as usize, 1, gray.into_raw())?;
            images.push(raw.to_signed()?);
            labels.push(label);
        }
    }
    LabeledImageSet::new(images, labels, split, [class_a.into(), class_b.into()])
}
