use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_trial, preprocess_trial, read_dir_sorted, window_count, Database, TrialKey, WindowSample,
    WINDOW, WINDOW_STEP,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    /// Path of the `.f32` file relative to the manifest root.
    pub path: PathBuf,
    pub db: Database,
    pub subject: u32,
    pub gesture: u32,
    pub session: u32,
    pub trial: u32,
    pub fs: f64,
    pub channels: usize,
    pub samples: usize,
}

impl TrialEntry {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject,
            session: self.session,
            trial: self.trial,
        }
    }

    pub fn label(&self) -> usize {
        self.gesture.saturating_sub(1) as usize
    }

    pub fn num_windows(&self) -> usize {
        window_count(self.samples, WINDOW, WINDOW_STEP)
    }
}

/// Index of every canonical trial under a dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    /// Walks `<root>/<db>/s<subject>/g<gesture>/*.f32`.
    pub fn scan(root: &Path) -> Result<DatasetManifest> {
        let mut trials = Vec::new();
        if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        for db_dir in read_dir_sorted(root)? {
            let Some(db) = db_dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(Database::parse)
            else {
                continue;
            };
            if !db_dir.is_dir() {
                continue;
            }
            for s_dir in read_dir_sorted(&db_dir)?.into_iter().filter(|p| p.is_dir()) {
                for g_dir in read_dir_sorted(&s_dir)?.into_iter().filter(|p| p.is_dir()) {
                    for f in read_dir_sorted(&g_dir)? {
                        if f.extension().and_then(|e| e.to_str()) != Some("f32") {
                            continue;
                        }
                        let rec = load_trial(&f, db)?;
                        let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                        trials.push(TrialEntry {
                            path: rel,
                            db,
                            subject: rec.meta.subject,
                            gesture: rec.meta.gesture,
                            session: rec.meta.session,
                            trial: rec.meta.trial,
                            fs: rec.meta.fs,
                            channels: rec.channels,
                            samples: rec.samples,
                        });
                    }
                }
            }
        }
        trials.sort_by_key(|t| (t.db, t.subject, t.session, t.gesture, t.trial));
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            trials,
        })
    }

    pub fn check_files(&self) -> Result<()> {
        for t in &self.trials {
            let p = self.root.join(&t.path);
            if !p.is_file() {
                return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(())
    }

    /// Filtered, windowed and amplitude-normalised windows of one trial.
    pub fn load_windows(&self, trial: usize) -> Result<Vec<WindowSample>> {
        let t = &self.trials[trial];
        let rec = load_trial(&self.root.join(&t.path), t.db)?;
        preprocess_trial(&rec)
    }
}
