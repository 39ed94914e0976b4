use std::fs;
use std::path::{Path, PathBuf};

use super::{Image, ImageRecord};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// One label byte followed by the R, G and B planes of a 32×32 image.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * PLANE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn shard_names(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// Reads CIFAR binary records.
///
/// `path` is either a single shard or a directory holding the standard
/// `data_batch_{1..5}.bin` / `test_batch.bin` layout, in which case `split`
/// picks the shards. Pixel bytes are scaled by 1/255 and reordered from the
/// planar file layout to channel-last.
pub fn load_cifar(path: &Path, split: Split, classes: usize) -> Result<Vec<ImageRecord>> {
    let shards: Vec<PathBuf> = if path.is_dir() {
        split.shard_names().into_iter().map(|n| path.join(n)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    let mut records = Vec::new();
    for shard in shards {
        let bytes = fs::read(&shard).map_err(|e| Error::io(&shard, e))?;
        decode_shard(&bytes, classes, &mut records)?;
    }
    Ok(records)
}

fn decode_shard(bytes: &[u8], classes: usize, out: &mut Vec<ImageRecord>) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD_BYTES) as u64,
                message: format!("label {label} out of range for {classes} classes"),
            });
        }
        let planes = &rec[1..];
        let mut data = vec![0f32; 3 * PLANE];
        for p in 0..PLANE {
            for c in 0..3 {
                data[p * 3 + c] = planes[c * PLANE + p] as f32 / 255.0;
            }
        }
        out.push(ImageRecord {
            pixels: Image::from_vec(SIDE, SIDE, 3, data)?,
            label,
            source_id: out.len() as u64,
        });
    }
    Ok(())
}
