use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::Args;
use geostyle_core::grad::{random_inputs, LossId, TensorSet};
use geostyle_core::tensor::{read_tensor, write_tensor};
use geostyle_core::{Error, Result, Tensor};
use serde::de::DeserializeOwned;

pub fn load(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_tensor(BufReader::new(f))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_tensor(t, BufWriter::new(f))?;
    Ok(())
}

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map(read_json).unwrap_or_else(|| Ok(T::default()))
}

/// Named tensors for loss evaluation, from files, a directory or a seeded
/// fixture.
#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Named input, repeatable: `target_patch.0=path.tnsr`.
    #[arg(long = "input", value_name = "NAME=PATH")]
    pub inputs: Vec<String>,
    /// Directory of `<name>.tnsr` files.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Use the seeded random fixture for the loss instead of files.
    #[arg(long)]
    pub fixture: Option<u64>,
}

impl InputArgs {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty() && self.dir.is_none() && self.fixture.is_none()
    }

    pub fn load(&self, id: LossId) -> Result<TensorSet> {
        let mut set = match self.fixture {
            Some(seed) => random_inputs(id, seed),
            None => TensorSet::new(),
        };
        if let Some(dir) = &self.dir {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| io_err(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tnsr"))
                .collect();
            paths.sort();
            for p in paths {
                let name = p.file_stem().unwrap().to_string_lossy().into_owned();
                set.insert(name, load(&p)?);
            }
        }
        for spec in &self.inputs {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected NAME=PATH, got {spec:?}")))?;
            set.insert(name, load(Path::new(path))?);
        }
        if set.is_empty() {
            return Err(Error::Config("no inputs: pass --input, --dir or --fixture".into()));
        }
        Ok(set)
    }
}
