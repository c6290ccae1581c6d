use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

/// Files produced by one command. Nothing touches the output directory until
/// `commit`, which writes every file under a temporary name and then renames
/// them into place, so a failed command leaves no partial outputs.
pub struct Staged {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn new(dir: &Path) -> Self {
        Staged {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_with(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = Vec::new();
        write(&mut buf).expect("writing to memory cannot fail");
        self.add(name, buf);
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let io = |path: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
        fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let mut temps = Vec::new();
        for (name, bytes) in &self.files {
            let tmp = self.dir.join(format!(".{name}.partial"));
            if let Err(e) = fs::write(&tmp, bytes) {
                for (t, _) in &temps {
                    let _ = fs::remove_file(t);
                }
                return Err(io(&tmp, e));
            }
            temps.push((tmp, self.dir.join(name)));
        }
        let mut done = Vec::new();
        for (tmp, dest) in temps {
            fs::rename(&tmp, &dest).map_err(|e| io(&dest, e))?;
            done.push(dest);
        }
        Ok(done)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
