//! Run manifest: ordered `key = value` lines written once per run.

use std::fmt::Display;
use std::io::Write;
use std::path::Path;

pub const FILE_NAME: &str = "manifest.txt";

/// Keys every manifest carries, whatever the command or outcome.
pub const REQUIRED_KEYS: [&str; 9] = [
    "tool_version",
    "command",
    "argv",
    "config",
    "out",
    "threads",
    "time.total_s",
    "status",
    "exit_code",
];

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl Display) {
        // Values stay on one line.
        let v = value.to_string().replace('\n', "\\n");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// Writes `dir/manifest.txt` through a temporary file and a rename, so a
    /// reader never sees a half-written manifest.
    pub fn write_atomic(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(".manifest.txt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_text().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, dir.join(FILE_NAME))
    }
}
