//! On-disk dataset container.
//!
//! `<root>/<split>/` holds `gt.arr`, `ms.arr`, `lms.arr`, `pan.arr` and
//! `manifest.txt`. Each array file is an 8-byte magic `FOSEARR1`, four
//! little-endian `u32` dimensions (N, C, H, W) and the little-endian `f32`
//! payload.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, Array4};

use super::{MsImage, PanImage, SamplePair, Sensor};
use crate::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 8] = b"FOSEARR1";
pub const DATA_ROOT_ENV: &str = "FOSE_DATA_ROOT";

const COMPONENTS: [&str; 4] = ["gt", "ms", "lms", "pan"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub sensor: Sensor,
    pub bands: usize,
    pub ratio: usize,
    pub count: usize,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Validation("manifest count must be >= 1".into()));
        }
        if self.ratio < 2 {
            return Err(Error::Validation(format!(
                "manifest ratio must be >= 2, got {}",
                self.ratio
            )));
        }
        if self.bands != self.sensor.bands() {
            return Err(Error::Validation(format!(
                "sensor `{}` implies {} bands, manifest says {}",
                self.sensor.tag(),
                self.sensor.bands(),
                self.bands
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "sensor = {}\nbands = {}\nratio = {}\ncount = {}\nseed = {}\nsplit = {}\n",
            self.sensor.tag(),
            self.bands,
            self.ratio,
            self.count,
            self.seed,
            self.split
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sensor = None;
        let mut bands = None;
        let mut ratio = None;
        let mut count = None;
        let mut seed = None;
        let mut split = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format("manifest", format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |_| Error::format("manifest", format!("bad value for `{key}`: {value}"));
            match key {
                "sensor" => sensor = Some(Sensor::from_tag(value)?),
                "bands" => bands = Some(value.parse().map_err(bad)?),
                "ratio" => ratio = Some(value.parse().map_err(bad)?),
                "count" => count = Some(value.parse().map_err(bad)?),
                "seed" => {
                    seed = Some(value.parse().map_err(|_| {
                        Error::format("manifest", format!("bad value for `seed`: {value}"))
                    })?)
                }
                "split" => split = Some(value.parse()?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::format("manifest", format!("missing key `{k}`"));
        let manifest = Self {
            sensor: sensor.ok_or_else(|| missing("sensor"))?,
            bands: bands.ok_or_else(|| missing("bands"))?,
            ratio: ratio.ok_or_else(|| missing("ratio"))?,
            count: count.ok_or_else(|| missing("count"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            split: split.unwrap_or(Split::Train),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Root directory from `FOSE_DATA_ROOT`, falling back to `./data`.
pub fn default_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn write_array(path: &Path, dims: [usize; 4], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Dimension(format!(
            "dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(ARRAY_MAGIC);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if bytes.len() < 24 || &bytes[..8] != ARRAY_MAGIC {
        return Err(Error::format(what, "missing FOSEARR1 header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != 24 + 4 * n {
        return Err(Error::format(
            what,
            format!("payload of {} bytes, expected {}", bytes.len() - 24, 4 * n),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

fn stack<'a>(images: impl Iterator<Item = &'a Array3<f32>>, n: usize) -> Result<Array4<f32>> {
    let images: Vec<_> = images.collect();
    let dim = images[0].dim();
    let mut out = Array4::<f32>::zeros((n, dim.0, dim.1, dim.2));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != dim {
            return Err(Error::Dimension("pairs differ in shape".into()));
        }
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(out)
}

/// Writes `pairs` under `<root>/<manifest.split>/`.
pub fn save_dataset(pairs: &[SamplePair], manifest: &DatasetManifest, root: &Path) -> Result<PathBuf> {
    manifest.validate()?;
    if pairs.len() != manifest.count {
        return Err(Error::Validation(format!(
            "manifest count {} but {} pairs given",
            manifest.count,
            pairs.len()
        )));
    }
    for p in pairs {
        p.validate()?;
        if p.gt.bands() != manifest.bands || p.ratio() != manifest.ratio {
            return Err(Error::Validation("pair does not match manifest".into()));
        }
    }
    let dir = root.join(manifest.split.to_string());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = pairs.len();
    let arrays = [
        stack(pairs.iter().map(|p| p.gt.data()), n)?,
        stack(pairs.iter().map(|p| p.ms.data()), n)?,
        stack(pairs.iter().map(|p| p.lms.data()), n)?,
        stack(pairs.iter().map(|p| p.pan.data()), n)?,
    ];
    for (name, arr) in COMPONENTS.iter().zip(&arrays) {
        let d = arr.dim();
        let data = arr.as_standard_layout();
        write_array(
            &dir.join(format!("{name}.arr")),
            [d.0, d.1, d.2, d.3],
            data.as_slice().unwrap(),
        )?;
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(dir)
}

/// Loads a split directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<SamplePair>, DatasetManifest)> {
    let mpath = dir.join("manifest.txt");
    if !mpath.exists() {
        return Err(Error::MissingComponent {
            component: "manifest".into(),
            path: mpath,
        });
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let mut arrays = Vec::with_capacity(4);
    for name in COMPONENTS {
        let path = dir.join(format!("{name}.arr"));
        if !path.exists() {
            return Err(Error::MissingComponent {
                component: name.into(),
                path,
            });
        }
        let (dims, data) = read_array(&path)?;
        if dims[0] != manifest.count {
            return Err(Error::Validation(format!(
                "`{name}` stores {} images but manifest count is {}",
                dims[0], manifest.count
            )));
        }
        arrays.push(Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).unwrap());
    }
    let (gt, ms, lms, pan) = (&arrays[0], &arrays[1], &arrays[2], &arrays[3]);
    if gt.dim().1 != manifest.bands {
        return Err(Error::Validation(format!(
            "`gt` has {} bands, manifest says {}",
            gt.dim().1,
            manifest.bands
        )));
    }
    let mut pairs = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let pick = |a: &Array4<f32>| a.slice(s![i, .., .., ..]).to_owned();
        let pair = SamplePair::new(
            MsImage::new(pick(gt), manifest.sensor)?,
            MsImage::new(pick(ms), manifest.sensor)?,
            MsImage::new(pick(lms), manifest.sensor)?,
            PanImage::new(pick(pan), manifest.ratio)?,
        )
        .map_err(|e| Error::Validation(format!("pair {i}: {e}")))?;
        pairs.push(pair);
    }
    Ok((pairs, manifest))
}
