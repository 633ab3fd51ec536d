//! Directory layout: `index.txt` with one line per sequence,
//! `identity camera split file`, and one tensor file per sequence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Sequence, Split, VideoDataset};
use crate::error::{Error, Result};
use crate::format::{read_tensor_file, write_tensor_file, DType};

pub const INDEX_FILE: &str = "index.txt";

fn frame_file(i: usize) -> String {
    format!("seq_{i:05}.cstt")
}

fn exact_in_f32(values: &[f64]) -> bool {
    values.iter().all(|&v| (v as f32) as f64 == v || v.is_nan())
}

/// Writes `data` under `dir`. Frames are stored as f32 when that is
/// lossless and as f64 otherwise.
pub fn save_dataset(data: &VideoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, s) in data.sequences.iter().enumerate() {
        let name = frame_file(i);
        writeln!(index, "{} {} {} {name}", s.identity, s.camera, s.split).expect("string write");
        let dtype = if exact_in_f32(s.frames.data()) { DType::F32 } else { DType::F64 };
        write_tensor_file(&dir.join(&name), &s.frames, dtype)?;
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<VideoDataset> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut sequences = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let content = line.trim_end_matches(['\n', '\r']);
        if content.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format {
            file: path.clone(),
            offset: at,
            message,
        };
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [id, cam, split, name] = fields[..] else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let identity = id.parse().map_err(|_| bad(format!("bad identity `{id}`")))?;
        let camera = cam.parse().map_err(|_| bad(format!("bad camera `{cam}`")))?;
        let split: Split = split.parse().map_err(bad)?;
        if name.contains('/') || name.contains('\\') || name == ".." {
            return Err(bad(format!("frame file `{name}` must be a plain file name")));
        }
        let file = dir.join(name);
        if !file.is_file() {
            return Err(bad(format!("frame file `{name}` listed in the index does not exist")));
        }
        let (_, frames) = read_tensor_file(&file)?;
        if frames.rank() != 4 {
            return Err(Error::Format {
                file,
                offset: 7,
                message: format!("expected a rank-4 L×C×H×W tensor, found {:?}", frames.shape()),
            });
        }
        sequences.push(Sequence {
            identity,
            camera,
            split,
            frames,
        });
    }
    Ok(VideoDataset { sequences })
}
