//! On-disk layout: `data_dir/{sessions,runs,archives}/`, one JSON document
//! per session and run, archives as written by the media pipeline.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use uuid::Uuid;

use crate::session::{PilotRun, Session};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["sessions", "runs", "archives"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn archives_dir(&self) -> PathBuf {
        self.root.join("archives")
    }

    pub fn run_path(&self, id: Uuid) -> PathBuf {
        self.root.join("runs").join(format!("{id}.json"))
    }

    pub fn session_path(&self, id: Uuid) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(value).map_err(io::Error::other)?)?;
        fs::rename(tmp, path)
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    fn list<T: DeserializeOwned>(&self, sub: &str) -> io::Result<Vec<T>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join(sub))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::read_json(p)).collect()
    }

    pub fn save_session(&self, s: &Session) -> io::Result<()> {
        Self::write_json(&self.session_path(s.id), s)
    }

    pub fn save_run(&self, r: &PilotRun) -> io::Result<()> {
        Self::write_json(&self.run_path(r.id), r)
    }

    pub fn load_run(&self, id: Uuid) -> io::Result<PilotRun> {
        Self::read_json(&self.run_path(id))
    }

    pub fn sessions(&self) -> io::Result<Vec<Session>> {
        self.list("sessions")
    }

    pub fn runs(&self) -> io::Result<Vec<PilotRun>> {
        self.list("runs")
    }

    /// Directories under `archives/` that hold a sealed archive.
    pub fn archive_dirs(&self) -> io::Result<Vec<PathBuf>> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(self.archives_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("archive.json").is_file())
            .collect();
        dirs.sort();
        Ok(dirs)
    }
}
