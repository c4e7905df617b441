//! `run.manifest`: flat `key = value` record of one invocation.

use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.manifest";

/// Version string baked in at build time (`git describe` when available).
pub const BUILD_VERSION: &str = env!("MACHINA_BUILD_VERSION");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    /// Starts a manifest with the command, build version and full argument
    /// list (`argv.0`, `argv.1`, ...; program name excluded).
    pub fn new(command: &str, argv: &[String]) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("version", BUILD_VERSION);
        for (i, a) in argv.iter().enumerate() {
            m.set(format!("argv.{i}"), a);
        }
        m
    }

    /// Sets `key`, replacing an earlier value.
    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// The recorded arguments, in order.
    #[cfg(test)]
    pub fn argv(&self) -> Vec<String> {
        (0..).map_while(|i| self.get(&format!("argv.{i}")).map(str::to_string)).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once(" = ") else {
                bail!("manifest line {}: expected `key = value`", i + 1);
            };
            m.entries.push((k.trim().to_string(), v.to_string()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).with_context(|| format!("writing {}", path.display()))
    }
}

impl Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Where the manifest of an output goes: inside it for a directory,
/// `<name>.run.manifest` next to it for a file.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join(MANIFEST_FILE)
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(MANIFEST_FILE);
        output.with_file_name(name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest over the names and contents of the regular files directly in
/// `dir`, in name order, skipping manifests.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.is_file() && !p.to_string_lossy().ends_with(MANIFEST_FILE));
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        h.update(fs::read(&p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Quality recorded for a codec checkpoint directory, if any.
pub fn recorded_quality(codec: &Path) -> Result<Option<u8>> {
    let dir = if codec.is_dir() { codec.to_path_buf() } else { codec.parent().unwrap_or(Path::new(".")).to_path_buf() };
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    match Manifest::load(&path)?.get("q") {
        Some(q) => Ok(Some(q.parse().with_context(|| format!("bad q in {}", path.display()))?)),
        None => Ok(None),
    }
}
