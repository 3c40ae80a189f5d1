//! Append-only instruction log shared by all request handlers.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use graspbench_core::dataset::InstructionRow;
use tokio::sync::oneshot;

type Job = (String, oneshot::Sender<io::Result<u64>>);

/// Handle to the single thread that owns the annotation file. Each row is
/// written with one `write_all` and synced before the caller is answered.
#[derive(Clone)]
pub struct AnnotationWriter {
    tx: mpsc::Sender<Job>,
    path: PathBuf,
}

impl AnnotationWriter {
    /// Opens (or creates) `path`, dropping a trailing partial line left by
    /// an interrupted write.
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut lines = truncate_partial_line(&mut file, path)?;
        let (tx, rx) = mpsc::channel::<Job>();
        thread::Builder::new().name("annotation-writer".into()).spawn(move || {
            for (line, reply) in rx {
                let res = file.write_all(line.as_bytes()).and_then(|_| file.sync_data()).map(|_| {
                    lines += 1;
                    lines
                });
                let _ = reply.send(res);
            }
        })?;
        Ok(Self { tx, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one row; resolves to the file's line count after the write.
    pub async fn append(&self, row: &InstructionRow) -> io::Result<u64> {
        let line = serde_json::to_string(row).map_err(io::Error::other)? + "\n";
        let (reply, rx) = oneshot::channel();
        self.tx.send((line, reply)).map_err(|_| io::Error::other("annotation writer stopped"))?;
        rx.await.map_err(|_| io::Error::other("annotation writer stopped"))?
    }
}

fn truncate_partial_line(file: &mut File, path: &Path) -> io::Result<u64> {
    let mut text = Vec::new();
    file.seek(SeekFrom::Start(0))?;
    file.read_to_end(&mut text)?;
    let keep = text.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    if keep < text.len() {
        log::warn!("{}: dropping {} bytes of an incomplete last line", path.display(), text.len() - keep);
        file.set_len(keep as u64)?;
    }
    Ok(text[..keep].iter().filter(|b| **b == b'\n').count() as u64)
}
