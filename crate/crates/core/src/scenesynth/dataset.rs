//! JSON-lines dataset files: one header object, then one scene object per line.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, SceneSample, ScenarioConfig, MAP_FEATURES};
use crate::error::{FlowsError, Result};

pub const DATASET_FORMAT: &str = "flows-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// ChaCha stream selector; each split reads its own keystream.
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn size(self, config: &ScenarioConfig) -> usize {
        match self {
            Split::Train => config.train_size,
            Split::Val => config.val_size,
            Split::Test => config.test_size,
        }
    }

    pub fn rng(self, config: &ScenarioConfig) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(self.stream());
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: Split,
    pub config_hash: String,
    pub count: usize,
}

/// Where a split's randomness came from, for auditing stream disjointness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub count: usize,
    pub stream: u64,
    /// 32-bit keystream words consumed.
    pub words_consumed: u64,
}

/// SHA-256 of the canonical JSON form of the config.
pub fn config_hash(config: &ScenarioConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn generate_dataset(config: &ScenarioConfig, split: Split) -> Result<(Vec<SceneSample>, SplitManifest)> {
    config.validate()?;
    let mut rng = split.rng(config);
    let n = split.size(config);
    let scenes = (0..n)
        .map(|i| {
            let mut s = generate_scene(config, &mut rng);
            s.scene_id = format!("{}-{i:06}", split.name());
            s
        })
        .collect();
    let manifest = SplitManifest {
        split,
        count: n,
        stream: rng.get_stream(),
        words_consumed: rng.get_word_pos() as u64,
    };
    Ok((scenes, manifest))
}

pub fn write_dataset<W: Write>(mut w: W, config: &ScenarioConfig, split: Split, scenes: &[SceneSample]) -> Result<()> {
    let io = |e| FlowsError::io("writing dataset", e);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        split,
        config_hash: config_hash(config),
        count: scenes.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| FlowsError::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| FlowsError::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let bytes = std::fs::read(path).map_err(|e| FlowsError::io(format!("reading {}", path.display()), e))?;
    parse_dataset(&bytes, path)
}

fn parse_dataset(bytes: &[u8], path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let err = |offset: usize, message: String| FlowsError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let mut lines = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(len) => {
                lines.push((start, &bytes[start..start + len]));
                start += len + 1;
            }
            None => return Err(err(start, "truncated record (missing line terminator)".into())),
        }
    }
    let Some(&(_, head)) = lines.first() else {
        return Err(err(0, "missing header line".into()));
    };
    let header: DatasetHeader =
        serde_json::from_slice(head).map_err(|e| err(0, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(err(0, format!("unknown format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(err(0, format!("version {} is not supported (expected {DATASET_VERSION})", header.version)));
    }
    let mut scenes = Vec::with_capacity(header.count);
    let mut shape: Option<(usize, usize)> = None;
    for &(offset, line) in &lines[1..] {
        let s: SceneSample = serde_json::from_slice(line).map_err(|e| err(offset, e.to_string()))?;
        if s.map_features.len() != MAP_FEATURES || s.future.len() < 2 || s.history.len() < 2 {
            return Err(err(offset, "record has inconsistent lengths".into()));
        }
        let dims = (s.history.len(), s.future.len());
        if *shape.get_or_insert(dims) != dims {
            return Err(err(offset, format!("record lengths {dims:?} differ from earlier records")));
        }
        scenes.push(s);
    }
    if scenes.len() != header.count {
        return Err(err(
            bytes.len(),
            format!("header announces {} records, found {}", header.count, scenes.len()),
        ));
    }
    Ok((header, scenes))
}
